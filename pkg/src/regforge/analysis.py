"""Diagnostics computed from activation traces."""
from __future__ import annotations

from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .errors import EditIndexError, EmptyInputError, MissingTapError
from .runtime import (
    ATTN_KEYS,
    ATTN_QUERIES,
    ATTN_VALUES,
    ATTN_WEIGHTS,
    BIAS_VALUES,
    MLP_HIDDEN,
    POST_ATTENTION,
    POST_MLP,
    ActivationTrace,
)


@dataclass(frozen=True)
class OutlierSet:
    positions: tuple[int, ...]
    norms: tuple[float, ...]
    threshold: float
    layer: int
    image_id: str | int | None = None

    def __len__(self) -> int:
        return len(self.positions)

    def __bool__(self) -> bool:
        return bool(self.positions)

    @property
    def top(self) -> int | None:
        return self.positions[0] if self.positions else None

    def to_dict(self) -> dict:
        return {
            "image": self.image_id,
            "layer": self.layer,
            "threshold": self.threshold,
            "positions": list(self.positions),
            "norms": list(self.norms),
        }


def token_norms(trace: ActivationTrace, layer: int, site: str = POST_MLP) -> np.ndarray:
    return tc.row_norms(trace.get(layer, site))


def find_outliers(
    trace: ActivationTrace, layer: int, threshold: float, image_id=None, include_cls: bool = False
) -> OutlierSet:
    """Patch tokens whose residual norm at ``layer`` reaches ``threshold``.

    Positions come back by descending norm; equal norms keep the lower
    token index first.
    """
    norms = token_norms(trace, layer, POST_MLP)
    candidates = list(trace.patch_indices)
    if include_cls and trace.cls_index is not None:
        candidates.insert(0, trace.cls_index)
    hits = [t for t in candidates if norms[t] >= threshold]
    hits.sort(key=lambda t: (-float(norms[t]), t))
    return OutlierSet(tuple(hits), tuple(float(norms[t]) for t in hits), float(threshold), layer, image_id)


# --------------------------------------------------------------------------
# profiles


@dataclass
class NormProfile:
    post_attention: list[float]
    post_mlp: list[float]
    cls_attention: list[float]
    n_images: int

    def to_dict(self) -> dict:
        return {
            "n_images": self.n_images,
            "max_patch_norm": {POST_ATTENTION: self.post_attention, POST_MLP: self.post_mlp},
            "max_cls_attention": self.cls_attention,
        }


def max_patch_norms(trace: ActivationTrace, site: str, include_cls: bool = False) -> list[float]:
    idx = list(trace.patch_indices)
    if include_cls and trace.cls_index is not None:
        idx.append(trace.cls_index)
    return [float(tc.row_norms(trace.get(layer, site))[idx].max()) for layer in trace.layers(site)]


def max_cls_attention(trace: ActivationTrace) -> list[float]:
    """Largest attention weight from CLS to any patch, over heads, per layer."""
    cls, patches = trace.cls_index, trace.patch_indices
    if cls is None:
        raise MissingTapError("trace has no CLS token")
    return [float(trace.get(layer, ATTN_WEIGHTS)[:, cls, patches].max()) for layer in trace.layers(ATTN_WEIGHTS)]


def norm_profile(traces: Iterable[ActivationTrace], include_cls: bool = False) -> NormProfile:
    attn, mlp, cls = [], [], []
    for trace in traces:
        attn.append(max_patch_norms(trace, POST_ATTENTION, include_cls))
        mlp.append(max_patch_norms(trace, POST_MLP, include_cls))
        cls.append(max_cls_attention(trace))
    if not mlp:
        raise EmptyInputError("norm_profile needs at least one trace")
    return NormProfile(
        np.mean(attn, axis=0).tolist(), np.mean(mlp, axis=0).tolist(), np.mean(cls, axis=0).tolist(), len(mlp)
    )


# --------------------------------------------------------------------------
# neurons


@dataclass
class NeuronStats:
    mean: np.ndarray
    used_images: int
    skipped_images: int
    selector: str


def neuron_activation_stats(
    traces: Sequence[ActivationTrace],
    layer: int,
    selector: str,
    threshold: float,
    outlier_layer: int,
    seed: int = 0,
) -> NeuronStats:
    """Mean MLP activation per neuron at one chosen patch per image.

    ``top_outlier`` takes the highest-norm outlier (images without one are
    skipped); ``random_non_outlier`` draws a non-outlier patch uniformly.
    """
    if selector not in ("top_outlier", "random_non_outlier"):
        raise ValueError(f"unknown patch selector {selector!r}")
    rng = np.random.default_rng(seed)
    rows, skipped = [], 0
    for trace in traces:
        acts = trace.get(layer, MLP_HIDDEN)
        outliers = find_outliers(trace, outlier_layer, threshold)
        if selector == "top_outlier":
            if not outliers:
                skipped += 1
                continue
            pick = outliers.top
        else:
            pool = [t for t in trace.patch_indices if t not in outliers.positions]
            if not pool:
                skipped += 1
                continue
            pick = pool[int(rng.integers(len(pool)))]
        rows.append(acts[pick].astype(np.float64))
    if not rows:
        raise EmptyInputError("no image contributed a patch")
    return NeuronStats(np.mean(rows, axis=0), len(rows), skipped, selector)


def activation_map(trace: ActivationTrace, layer: int, neuron: int) -> np.ndarray:
    acts = trace.get(layer, MLP_HIDDEN)
    if not 0 <= neuron < acts.shape[1]:
        raise EditIndexError(f"neuron {neuron} outside [0, {acts.shape[1]})")
    return grid_from_tokens(trace, acts[:, neuron])


def grid_from_tokens(trace: ActivationTrace, values) -> np.ndarray:
    """Scatter per-token values onto the patch grid (CLS/registers dropped)."""
    values = np.asarray(values)
    gh, gw = trace.grid_shape
    out = np.zeros((gh, gw), dtype=values.dtype)
    for t, role in enumerate(trace.roles):
        if role[0] == "patch":
            out[role[1], role[2]] = values[t]
    return out


def patch_norm_map(trace: ActivationTrace, layer: int, site: str = POST_MLP) -> np.ndarray:
    return grid_from_tokens(trace, token_norms(trace, layer, site))


def cls_attention_map(trace: ActivationTrace, layer: int) -> np.ndarray:
    """Head-averaged CLS attention over patches at ``layer``."""
    weights = trace.get(layer, ATTN_WEIGHTS)
    return grid_from_tokens(trace, weights[:, trace.cls_index, : len(trace.roles)].mean(axis=0))


# --------------------------------------------------------------------------
# attention decomposition


@dataclass
class DecompositionReport:
    layer: int
    register_indices: tuple[int, ...]
    registers: np.ndarray        # [T, d]
    non_registers: np.ndarray    # [T, d]
    cosine_table: dict[int, float] = field(default_factory=dict)

    @property
    def total(self) -> np.ndarray:
        return self.registers + self.non_registers

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "register_indices": list(self.register_indices),
            "registers_contribution_norm": np.linalg.norm(self.registers, axis=1).tolist(),
            "non_registers_contribution_norm": np.linalg.norm(self.non_registers, axis=1).tolist(),
            "cosine_table": {str(k): v for k, v in self.cosine_table.items()},
        }


def decompose_attention(trace: ActivationTrace, layer: int, register_indices: Iterable[int]) -> DecompositionReport:
    """Split each token's pre-projection attention output by source token.

    Heads are concatenated, so both parts have width ``d``. A virtual
    attention-bias column, when present, is counted as a register.
    """
    weights = trace.get(layer, ATTN_WEIGHTS).astype(np.float64)   # [H, T, S]
    values = trace.get(layer, ATTN_VALUES).astype(np.float64)     # [H, T, dh]
    n_heads, t_count, n_src = weights.shape
    reg = sorted(set(int(i) for i in register_indices))
    for i in reg:
        if not 0 <= i < t_count:
            raise EditIndexError(f"register index {i} outside sequence of {t_count} tokens")
    mask = np.zeros(n_src, dtype=bool)
    mask[reg] = True
    if n_src > t_count:
        mask[t_count:] = True
        values = np.concatenate([values, _bias_values(trace, layer, n_heads)], axis=1)
    reg_part = np.einsum("hts,hsd->thd", weights * mask, values).reshape(t_count, -1)
    other_part = np.einsum("hts,hsd->thd", weights * ~mask, values).reshape(t_count, -1)
    return DecompositionReport(layer, tuple(reg), reg_part, other_part)


def _bias_values(trace: ActivationTrace, layer: int, n_heads: int) -> np.ndarray:
    bias = trace.entries.get((layer, BIAS_VALUES))
    if bias is None:
        raise MissingTapError(f"layer {layer} used an attention bias but its values were not recorded")
    return bias.astype(np.float64).reshape(n_heads, 1, -1)


def recompute_attention_output(trace: ActivationTrace, layer: int) -> np.ndarray:
    """Rebuild ``softmax(QK^T/sqrt(d)) V`` from tapped queries, keys and values."""
    q = trace.get(layer, ATTN_QUERIES).astype(np.float64)
    k = trace.get(layer, ATTN_KEYS).astype(np.float64)
    v = trace.get(layer, ATTN_VALUES).astype(np.float64)
    n_heads, t_count, dh = q.shape
    out = np.zeros((t_count, n_heads * dh))
    for h in range(n_heads):
        for t in range(t_count):
            p = tc.softmax_naive([float(q[h, t] @ k[h, s]) / np.sqrt(dh) for s in range(t_count)])
            out[t, h * dh:(h + 1) * dh] = p.astype(np.float64) @ v[h]
    return out


def mean_cosine(a: np.ndarray, b: np.ndarray, rows: Sequence[int] | None = None) -> float:
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if rows is not None:
        a, b = a[list(rows)], b[list(rows)]
    num = (a * b).sum(axis=1)
    den = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    cos = np.where(den > 0, num / np.where(den > 0, den, 1.0), 1.0)
    return float(cos.mean())


# --------------------------------------------------------------------------
# decoder weights


@dataclass
class DecoderProfile:
    layer: int
    neuron: int
    spectrum: np.ndarray      # |w| sorted descending
    top_dims: tuple[int, ...]

    def to_dict(self) -> dict:
        return {"layer": self.layer, "neuron": self.neuron,
                "top_dims": list(self.top_dims), "spectrum": self.spectrum.tolist()}


def decoder_weight_profile(
    weights: Mapping[str, np.ndarray], layer: int, neurons: Iterable[int], top: int = 5
) -> list[DecoderProfile]:
    fc2 = np.asarray(weights[f"blocks.{layer}.mlp.fc2.weight"])
    out = []
    for n in neurons:
        if not 0 <= n < fc2.shape[1]:
            raise EditIndexError(f"neuron {n} outside [0, {fc2.shape[1]})")
        mags = np.abs(fc2[:, n].astype(np.float64))
        order = sorted(range(len(mags)), key=lambda j: (-mags[j], j))
        out.append(DecoderProfile(layer, int(n), mags[order], tuple(order[:top])))
    return out
