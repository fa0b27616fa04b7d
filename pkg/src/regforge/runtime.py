"""Pre-norm ViT forward pass with declarative taps and MLP-neuron edits.

A forward call takes a :class:`TokenSequence`, a :class:`TapSpec` naming
which ``(layer, site)`` tensors to record, and a list of :class:`EditRule`
objects that rewrite post-nonlinearity MLP activations in flight.
Analyses and interventions are expressed entirely through these two
inputs, so the model code never has to be forked.
"""
from __future__ import annotations

import hashlib
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .config import ModelConfig
from .errors import DimensionError, EditIndexError, MissingTapError, PlanError

POST_ATTENTION = "post_attention_residual"
POST_MLP = "post_mlp_residual"
MLP_HIDDEN = "mlp_hidden_activation"
ATTN_WEIGHTS = "attention_weights"
ATTN_QUERIES = "attention_queries"
ATTN_KEYS = "attention_keys"
ATTN_VALUES = "attention_values"

# recorded alongside attention_values when a layer runs with an attention bias
BIAS_KEYS = "attention_bias_keys"
BIAS_VALUES = "attention_bias_values"

CORE_SITES = (POST_ATTENTION, POST_MLP, MLP_HIDDEN, ATTN_WEIGHTS)
SITES = CORE_SITES + (ATTN_QUERIES, ATTN_KEYS, ATTN_VALUES)

EDIT_MODES = ("move_max", "zero", "set_values")
REGISTER_INITS = ("zeros", "gaussian_matched", "patch_mean")


# --------------------------------------------------------------------------
# token sequences


@dataclass(frozen=True)
class TokenSequence:
    """Residual-stream input plus a role tag for every row.

    Roles are tuples: ``("cls",)``, ``("patch", row, col)`` or
    ``("register", k)``.
    """

    tokens: np.ndarray
    roles: tuple[tuple, ...]

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] != len(self.roles):
            raise DimensionError(
                f"tokens shape {self.tokens.shape} does not match {len(self.roles)} roles"
            )

    def __len__(self) -> int:
        return len(self.roles)

    @property
    def cls_index(self) -> int | None:
        for i, r in enumerate(self.roles):
            if r[0] == "cls":
                return i
        return None

    @property
    def patch_indices(self) -> list[int]:
        return [i for i, r in enumerate(self.roles) if r[0] == "patch"]

    @property
    def register_indices(self) -> list[int]:
        return [i for i, r in enumerate(self.roles) if r[0] == "register"]

    @property
    def grid_shape(self) -> tuple[int, int]:
        patches = [r for r in self.roles if r[0] == "patch"]
        if not patches:
            return (0, 0)
        return (max(r[1] for r in patches) + 1, max(r[2] for r in patches) + 1)

    def patch_index(self, row: int, col: int) -> int:
        try:
            return self.roles.index(("patch", row, col))
        except ValueError:
            raise EditIndexError(f"no patch at ({row}, {col})") from None


def embed_image(pixels, config: ModelConfig, weights: Mapping[str, np.ndarray]) -> TokenSequence:
    """Patchify a preprocessed ``H x W x 3`` float image into tokens."""
    px = np.asarray(pixels, dtype=np.float32)
    size = config.image_size
    if px.shape != (size, size, 3):
        raise DimensionError(f"expected image of shape {(size, size, 3)}, got {px.shape}")
    p, g, d = config.patch_size, config.grid, config.embed_dim
    # (g, p, g, p, 3) -> (g, g, 3, p, p) to match the conv weight layout
    patches = px.reshape(g, p, g, p, 3).transpose(0, 2, 4, 1, 3).reshape(g * g, 3 * p * p)
    proj = tc.matmul(patches, weights["patch_embed.weight"].reshape(d, -1).T)
    if config.patch_bias:
        proj = proj + weights["patch_embed.bias"]
    rows = []
    roles: list[tuple] = []
    if config.has_cls:
        rows.append(weights["cls_token"][None, :])
        roles.append(("cls",))
    rows.append(proj)
    roles.extend(("patch", i // g, i % g) for i in range(g * g))
    tokens = np.concatenate(rows, axis=0).astype(np.float32) + weights["pos_embed"]
    if config.ln_pre:
        tokens = tc.layernorm(tokens, weights["ln_pre.weight"], weights["ln_pre.bias"], config.norm_eps)
    return TokenSequence(tc.as_tensor(tokens), tuple(roles))


def append_registers(
    seq: TokenSequence, count: int, init: str = "zeros", seed: int = 0
) -> TokenSequence:
    """Append ``count`` test-time register tokens (no positional embedding)."""
    if count < 0:
        raise ValueError("register count must be non-negative")
    if init not in REGISTER_INITS:
        raise ValueError(f"unknown register init {init!r}")
    if count == 0:
        return seq
    d = seq.tokens.shape[1]
    patches = seq.tokens[seq.patch_indices].astype(np.float64)
    if init == "zeros":
        new = np.zeros((count, d))
    elif init == "patch_mean":
        new = np.repeat(patches.mean(axis=0, keepdims=True), count, axis=0)
    else:
        rng = np.random.default_rng(seed)
        new = rng.normal(patches.mean(axis=0), patches.std(axis=0), size=(count, d))
    start = len(seq.register_indices)
    roles = seq.roles + tuple(("register", start + k) for k in range(count))
    return TokenSequence(tc.as_tensor(np.concatenate([seq.tokens, new.astype(np.float32)])), roles)


# --------------------------------------------------------------------------
# taps, traces, edits


class TapSpec:
    """Set of ``(layer, site)`` pairs to record during a forward pass."""

    def __init__(self, points: Iterable[tuple[int, str]] = ()):
        pts = set()
        for layer, site in points:
            if site not in SITES:
                raise ValueError(f"unknown tap site {site!r}")
            pts.add((int(layer), site))
        self.points = frozenset(pts)

    @classmethod
    def all(cls, config: ModelConfig, sites: Iterable[str] = SITES) -> "TapSpec":
        return cls((layer, s) for layer in range(config.n_layers) for s in sites)

    @classmethod
    def at(cls, layers: Iterable[int], sites: Iterable[str]) -> "TapSpec":
        sites = tuple(sites)
        return cls((layer, s) for layer in layers for s in sites)

    def __contains__(self, item) -> bool:
        return item in self.points

    def __or__(self, other: "TapSpec") -> "TapSpec":
        return TapSpec(self.points | other.points)

    def __repr__(self) -> str:
        return f"TapSpec({sorted(self.points)})"


@dataclass
class ActivationTrace:
    """Tensors recorded during one forward call."""

    roles: tuple[tuple, ...]
    entries: dict[tuple[int, str], np.ndarray] = field(default_factory=dict)
    pre_edit: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    pre_norm_output: np.ndarray | None = None
    output: np.ndarray | None = None
    bias_layers: tuple[int, ...] = ()

    def get(self, layer: int, site: str) -> np.ndarray:
        try:
            return self.entries[(layer, site)]
        except KeyError:
            raise MissingTapError(f"layer {layer} site {site} was not tapped") from None

    def has(self, layer: int, site: str) -> bool:
        return (layer, site) in self.entries

    def layers(self, site: str) -> list[int]:
        return sorted(layer for layer, s in self.entries if s == site)

    @property
    def patch_indices(self) -> list[int]:
        return [i for i, r in enumerate(self.roles) if r[0] == "patch"]

    @property
    def register_indices(self) -> list[int]:
        return [i for i, r in enumerate(self.roles) if r[0] == "register"]

    @property
    def cls_index(self) -> int | None:
        for i, r in enumerate(self.roles):
            if r[0] == "cls":
                return i
        return None

    @property
    def grid_shape(self) -> tuple[int, int]:
        return TokenSequence(np.zeros((len(self.roles), 1), np.float32), self.roles).grid_shape

    def digest(self) -> str:
        """SHA-256 over every recorded tensor and the output, in a fixed order."""
        h = hashlib.sha256()
        for key in sorted(self.entries):
            h.update(repr(key).encode())
            h.update(np.ascontiguousarray(self.entries[key]).tobytes())
        if self.output is not None:
            h.update(np.ascontiguousarray(self.output).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class EditRule:
    layer: int
    neuron: int
    mode: str
    targets: tuple[int, ...] = ()
    value: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(int(t) for t in self.targets))
        if self.mode not in EDIT_MODES:
            raise PlanError(f"unknown edit mode {self.mode!r}")
        if self.mode in ("move_max", "set_values") and not self.targets:
            raise PlanError(f"{self.mode} edit on ({self.layer}, {self.neuron}) needs targets")
        if self.mode == "set_values" and self.value is None:
            raise PlanError("set_values edit needs an explicit value")

    def to_dict(self) -> dict:
        d = {"layer": self.layer, "neuron": self.neuron, "mode": self.mode, "targets": list(self.targets)}
        if self.value is not None:
            d["value"] = self.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EditRule":
        return cls(int(d["layer"]), int(d["neuron"]), d["mode"], tuple(d.get("targets", ())), d.get("value"))


def validate_edits(edits: Sequence[EditRule], config: ModelConfig, n_tokens: int) -> dict[int, list[EditRule]]:
    by_layer: dict[int, list[EditRule]] = {}
    seen = set()
    for rule in edits:
        if not 0 <= rule.layer < config.n_layers:
            raise EditIndexError(f"edit layer {rule.layer} outside [0, {config.n_layers})")
        if not 0 <= rule.neuron < config.mlp_hidden:
            raise EditIndexError(f"edit neuron {rule.neuron} outside [0, {config.mlp_hidden})")
        for t in rule.targets:
            if not 0 <= t < n_tokens:
                raise EditIndexError(f"edit target {t} outside [0, {n_tokens})")
        key = (rule.layer, rule.neuron)
        if key in seen:
            raise PlanError(f"two edits touch layer {rule.layer} neuron {rule.neuron}")
        seen.add(key)
        by_layer.setdefault(rule.layer, []).append(rule)
    return by_layer


def apply_edits(act: np.ndarray, rules: Sequence[EditRule]) -> np.ndarray:
    """Rewrite neuron columns of a ``[T, N]`` activation matrix.

    ``move_max`` reads the peak from the unedited matrix, so rules on one
    layer never see each other's writes.
    """
    if not rules:
        return act
    out = act.copy()
    for rule in rules:
        col = np.zeros(act.shape[0], dtype=act.dtype)
        if rule.mode == "move_max":
            col[list(rule.targets)] = act[:, rule.neuron].max()
        elif rule.mode == "set_values":
            col[list(rule.targets)] = rule.value
        out[:, rule.neuron] = col
    return out


# --------------------------------------------------------------------------
# attention


@dataclass
class AttentionBias:
    """Per-layer, per-head key/value pairs standing in for a register token.

    ``keys[layer]`` and ``values[layer]`` have shape ``[n_heads, head_dim]``.
    """

    keys: dict[int, np.ndarray]
    values: dict[int, np.ndarray]
    calibration_size: int = 0

    @property
    def layers(self) -> list[int]:
        return sorted(self.keys)

    def to_dict(self) -> dict:
        return {
            "calibration_size": self.calibration_size,
            "layers": {
                str(layer): {"keys": self.keys[layer].tolist(), "values": self.values[layer].tolist()}
                for layer in self.layers
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttentionBias":
        keys = {int(k): np.asarray(v["keys"], np.float32) for k, v in d["layers"].items()}
        values = {int(k): np.asarray(v["values"], np.float32) for k, v in d["layers"].items()}
        return cls(keys, values, int(d.get("calibration_size", 0)))


def split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    t, d = x.shape
    return np.ascontiguousarray(x.reshape(t, n_heads, d // n_heads).transpose(1, 0, 2))


def attention(
    x_norm: np.ndarray,
    lw: Mapping[str, np.ndarray],
    n_heads: int,
    bias_k: np.ndarray | None = None,
    bias_v: np.ndarray | None = None,
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Multi-head self-attention over normalized tokens.

    Returns the projected output and the per-head queries, keys, values and
    attention weights. With a bias pair, every query also scores one extra
    virtual column whose key and value are ``bias_k[h]`` and ``bias_v[h]``.
    """
    t, d = x_norm.shape
    qkv = tc.matmul(x_norm, lw["attn.qkv.weight"].T) + lw["attn.qkv.bias"]
    q = split_heads(qkv[:, :d], n_heads)
    k = split_heads(qkv[:, d : 2 * d], n_heads)
    v = split_heads(qkv[:, 2 * d :], n_heads)
    dh = d // n_heads
    scale = 1.0 / math.sqrt(dh)
    logits = tc.matmul(q, k.transpose(0, 2, 1)) * scale
    if bias_k is not None:
        if bias_k.shape != (n_heads, dh) or bias_v is None or bias_v.shape != (n_heads, dh):
            raise DimensionError(
                f"attention bias must be ({n_heads}, {dh}) per head, got {np.shape(bias_k)}"
            )
        extra = tc.matmul(q, bias_k[:, :, None]) * scale
        logits = np.concatenate([logits, extra], axis=2)
        weights = tc.softmax(logits, axis=-1)
        vals = np.concatenate([v, bias_v[:, None, :].astype(np.float32)], axis=1)
    else:
        weights = tc.softmax(logits, axis=-1)
        vals = v
    heads = tc.matmul(weights, vals)
    merged = heads.transpose(1, 0, 2).reshape(t, d)
    out = tc.matmul(merged, lw["attn.proj.weight"].T) + lw["attn.proj.bias"]
    return tc.as_tensor(out), {"q": q, "k": k, "v": v, "weights": weights, "merged": merged}


def attention_with_bias(
    x_norm: np.ndarray, lw: Mapping[str, np.ndarray], n_heads: int, bias_k: np.ndarray, bias_v: np.ndarray
) -> np.ndarray:
    return attention(x_norm, lw, n_heads, np.asarray(bias_k, np.float32), np.asarray(bias_v, np.float32))[0]


# --------------------------------------------------------------------------
# forward


def forward(
    seq: TokenSequence,
    config: ModelConfig,
    weights: Mapping[str, np.ndarray],
    taps: TapSpec | None = None,
    edits: Sequence[EditRule] = (),
    attention_bias: AttentionBias | None = None,
    record_pre_edit: bool = False,
) -> tuple[np.ndarray, ActivationTrace]:
    taps = taps or TapSpec()
    n_tokens = len(seq)
    edits_by_layer = validate_edits(edits, config, n_tokens)
    nonlin = tc.NONLINEARITIES[config.nonlinearity]
    bias_layers = tuple(attention_bias.layers) if attention_bias is not None else ()
    trace = ActivationTrace(roles=seq.roles, bias_layers=bias_layers)
    eps = config.norm_eps
    x = seq.tokens.astype(np.float32, copy=True)

    for layer in range(config.n_layers):
        lw = weights.layer(layer) if hasattr(weights, "layer") else _layer_view(weights, layer)
        h = tc.layernorm(x, lw["norm1.weight"], lw["norm1.bias"], eps)
        if layer in bias_layers:
            attn_out, parts = attention(
                h, lw, config.n_heads, attention_bias.keys[layer], attention_bias.values[layer]
            )
        else:
            attn_out, parts = attention(h, lw, config.n_heads)
        if config.layer_scale:
            attn_out = attn_out * lw["ls1.gamma"]
        x = tc.as_tensor(x + attn_out)
        for site, val in ((ATTN_WEIGHTS, parts["weights"]), (ATTN_QUERIES, parts["q"]),
                          (ATTN_KEYS, parts["k"]), (ATTN_VALUES, parts["v"]), (POST_ATTENTION, x)):
            if (layer, site) in taps:
                trace.entries[(layer, site)] = val.copy()
        if layer in bias_layers and (layer, ATTN_VALUES) in taps:
            trace.entries[(layer, BIAS_KEYS)] = attention_bias.keys[layer].copy()
            trace.entries[(layer, BIAS_VALUES)] = attention_bias.values[layer].copy()

        h = tc.layernorm(x, lw["norm2.weight"], lw["norm2.bias"], eps)
        act = nonlin(tc.matmul(h, lw["mlp.fc1.weight"].T) + lw["mlp.fc1.bias"])
        rules = edits_by_layer.get(layer, ())
        if rules and record_pre_edit:
            for rule in rules:
                trace.pre_edit[(layer, rule.neuron)] = act[:, rule.neuron].copy()
        act = apply_edits(act, rules)
        if (layer, MLP_HIDDEN) in taps:
            trace.entries[(layer, MLP_HIDDEN)] = act.copy()
        mlp_out = tc.matmul(act, lw["mlp.fc2.weight"].T) + lw["mlp.fc2.bias"]
        if config.layer_scale:
            mlp_out = mlp_out * lw["ls2.gamma"]
        x = tc.as_tensor(x + mlp_out)
        if (layer, POST_MLP) in taps:
            trace.entries[(layer, POST_MLP)] = x.copy()

    trace.pre_norm_output = x.copy()
    if config.final_norm:
        out = tc.layernorm(x, weights["norm.weight"], weights["norm.bias"], eps)
    else:
        out = x
    trace.output = out
    return out, trace


def _layer_view(weights: Mapping[str, np.ndarray], layer: int) -> dict[str, np.ndarray]:
    prefix = f"blocks.{layer}."
    return {k[len(prefix):]: v for k, v in weights.items() if k.startswith(prefix)}
