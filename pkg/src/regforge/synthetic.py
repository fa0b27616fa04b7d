"""Tiny ViTs with planted register neurons, plus independent oracles.

A planted model has a handful of MLP neurons that fire on trigger patches
(flat, low-texture patches or one fixed grid position) and whose decoder
columns write a large vector along a few shared residual dimensions. Every
later attention layer gets a key/query pair aligned with those dimensions,
so high-norm tokens become attention sinks. Everything else is small
random weights.

The oracles here (``reference_forward`` and ``brute_force_register_scan``)
share no code with :mod:`regforge.runtime`.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import tensor as tc
from .config import ModelConfig
from .errors import SpecError
from .imageio import normalize
from .runtime import (
    POST_ATTENTION,
    POST_MLP,
    TapSpec,
    append_registers,
    embed_image,
    forward,
)
from .weights import WeightStore

# residual-stream dimensions with a fixed job
TRIGGER_DIM = 0
CLS_DIM = 1

FLAT_LEVEL = 2.0       # patch-embed bias on the trigger dim (uniform_patch mode)
FIXED_LEVEL = 6.0      # positional boost on the trigger dim (fixed_position mode)
CLS_LEVEL = 6.0
TEXTURE_SCALE = 1.0
SINK_VALUE = 0.5
PLANTED_MARGIN = 6.0   # pre-activation distance of the nearest token from the firing threshold
MIN_SEPARATION = 3.0


@dataclass(frozen=True)
class PlantSpec:
    seed: int = 0
    n_layers: int = 5
    d: int = 32
    n_heads: int = 2
    N: int = 64
    grid: int = 4
    patch_size: int = 4
    planted: tuple[tuple[int, int], ...] | None = None
    n_planted: int = 3
    ignite_layer: int = 2
    trigger: str = "uniform_patch"
    trigger_position: tuple[int, int] = (0, 0)
    n_triggers: int = 1
    outlier_gain: float = 6.0
    n_outlier_dims: int = 2
    sink_strength: float = 8.0
    calibration_images: int = 24

    def __post_init__(self):
        if self.trigger not in ("uniform_patch", "fixed_position"):
            raise SpecError(f"unknown trigger {self.trigger!r}")
        if not 1 <= self.n_outlier_dims <= 3:
            raise SpecError("outlier gain must live on 1-3 dimensions")
        if self.d < 8 + self.n_outlier_dims or self.d % self.n_heads:
            raise SpecError("embedding width too small or not divisible by head count")
        if not 0 <= self.ignite_layer < self.n_layers:
            raise SpecError("ignite_layer outside the model")
        if self.planted is not None:
            object.__setattr__(self, "planted", tuple((int(a), int(b)) for a, b in self.planted))
            for layer, neuron in self.planted:
                if not 0 <= layer <= self.ignite_layer:
                    raise SpecError(f"planted layer {layer} must be within [0, ignite_layer]")
                if not 0 <= neuron < self.N:
                    raise SpecError(f"planted neuron {neuron} outside [0, {self.N})")
            if len(set(self.planted)) != len(self.planted):
                raise SpecError("duplicate planted neuron")
        elif not 1 <= self.n_planted <= self.N:
            raise SpecError("n_planted out of range")
        r, c = self.trigger_position
        if not (0 <= r < self.grid and 0 <= c < self.grid):
            raise SpecError("trigger position outside the grid")
        if self.trigger == "uniform_patch" and not 1 <= self.n_triggers < self.grid**2:
            raise SpecError("n_triggers must leave at least one textured patch")
        if self.outlier_gain < 0:
            raise SpecError("outlier_gain must be non-negative")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["planted"] = [list(p) for p in self.planted] if self.planted is not None else None
        d["trigger_position"] = list(self.trigger_position)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PlantSpec":
        d = dict(d)
        if d.get("planted") is not None:
            d["planted"] = tuple(tuple(p) for p in d["planted"])
        if "trigger_position" in d:
            d["trigger_position"] = tuple(d["trigger_position"])
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class GroundTruth:
    planted: list[tuple[int, int]]
    threshold: float
    analysis_layer: int
    ignite_layer: int
    sink_layers: list[int]
    outlier_dims: list[int]
    background_max: float
    outlier_min: float | None
    enabled: bool = True
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "planted": [list(p) for p in self.planted],
            "threshold": self.threshold,
            "analysis_layer": self.analysis_layer,
            "ignite_layer": self.ignite_layer,
            "sink_layers": self.sink_layers,
            "outlier_dims": self.outlier_dims,
            "background_max": self.background_max,
            "outlier_min": self.outlier_min,
            "enabled": self.enabled,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        d = dict(d)
        d["planted"] = [tuple(p) for p in d["planted"]]
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


class PlantedModel(NamedTuple):
    weights: WeightStore
    config: ModelConfig
    truth: GroundTruth
    spec: PlantSpec | None = None


@dataclass(frozen=True)
class PlantedImage:
    pixels: np.ndarray               # uint8, H x W x 3
    trigger_patches: tuple[tuple[int, int], ...]
    outliers: tuple[int, ...]        # expected outlier token indices


# --------------------------------------------------------------------------
# images


def planted_config(spec: PlantSpec) -> ModelConfig:
    return ModelConfig(
        image_size=spec.grid * spec.patch_size, patch_size=spec.patch_size, embed_dim=spec.d,
        n_layers=spec.n_layers, n_heads=spec.n_heads, mlp_hidden=spec.N, nonlinearity="gelu",
        norm_eps=1e-5, preprocess_mean=(0.5, 0.5, 0.5), preprocess_std=(0.25, 0.25, 0.25),
        final_norm=True, name=f"planted-{spec.seed}",
    )


def _render(spec: PlantSpec, rng: np.random.Generator) -> tuple[np.ndarray, tuple[tuple[int, int], ...]]:
    g, p = spec.grid, spec.patch_size
    img = rng.integers(0, 256, size=(g * p, g * p, 3), dtype=np.uint8)
    if spec.trigger == "fixed_position":
        return img, (tuple(spec.trigger_position),)
    cells = rng.choice(g * g, size=spec.n_triggers, replace=False)
    flats = []
    for cell in sorted(int(c) for c in cells):
        r, c = divmod(cell, g)
        img[r * p:(r + 1) * p, c * p:(c + 1) * p, :] = rng.integers(0, 256, size=3, dtype=np.uint8)
        flats.append((r, c))
    return img, tuple(flats)


def make_images(model: PlantedModel | PlantSpec, count: int, seed: int = 0) -> list[PlantedImage]:
    """Draw ``count`` images whose expected outliers are known."""
    spec = model.spec if isinstance(model, PlantedModel) else model
    enabled = model.truth.enabled if isinstance(model, PlantedModel) else spec.outlier_gain > 0
    rng = np.random.default_rng([spec.seed, seed, 7])
    images = []
    for _ in range(count):
        img, triggers = _render(spec, rng)
        outliers = tuple(1 + r * spec.grid + c for r, c in triggers) if enabled else ()
        images.append(PlantedImage(img, triggers, outliers))
    return images


def image_sequence(model: PlantedModel, image: PlantedImage | np.ndarray):
    px = image.pixels if isinstance(image, PlantedImage) else image
    return embed_image(normalize(px, model.config), model.config, model.weights)


# --------------------------------------------------------------------------
# generation


def _zero_sum_filters(rng, n: int, p: int, scale: float) -> np.ndarray:
    """``n`` random patch filters that sum to zero within each channel."""
    w = rng.choice([-1.0, 1.0], size=(n, 3, p, p))
    w -= w.mean(axis=(2, 3), keepdims=True)
    return w * scale / math.sqrt(3 * p * p)


def _base_weights(spec: PlantSpec, rng: np.random.Generator, outlier_dims: list[int]) -> dict[str, np.ndarray]:
    d, n, p = spec.d, spec.N, spec.patch_size
    special = {TRIGGER_DIM, CLS_DIM, *outlier_dims}
    texture = [j for j in range(d) if j not in special]
    w: dict[str, np.ndarray] = {}

    patch = _zero_sum_filters(rng, d, p, 0.02)
    patch[texture] = _zero_sum_filters(rng, len(texture), p, TEXTURE_SCALE * math.sqrt(3))
    w["patch_embed.weight"] = patch
    pbias = rng.normal(0, 0.02, d)
    pbias[TRIGGER_DIM] = FLAT_LEVEL if spec.trigger == "uniform_patch" else 0.0
    w["patch_embed.bias"] = pbias

    pos = rng.normal(0, 0.1, (1 + spec.grid**2, d))
    if spec.trigger == "fixed_position":
        r, c = spec.trigger_position
        pos[1 + r * spec.grid + c, TRIGGER_DIM] += FIXED_LEVEL
    w["pos_embed"] = pos
    cls = rng.normal(0, 0.1, d)
    cls[CLS_DIM] = CLS_LEVEL
    w["cls_token"] = cls

    for i in range(spec.n_layers):
        b = f"blocks.{i}"
        w[f"{b}.norm1.weight"] = 1 + rng.normal(0, 0.05, d)
        w[f"{b}.norm1.bias"] = rng.normal(0, 0.02, d)
        w[f"{b}.attn.qkv.weight"] = rng.normal(0, 0.5 / math.sqrt(d), (3 * d, d))
        w[f"{b}.attn.qkv.bias"] = rng.normal(0, 0.02, 3 * d)
        w[f"{b}.attn.proj.weight"] = rng.normal(0, 0.3 / math.sqrt(d), (d, d))
        w[f"{b}.attn.proj.bias"] = rng.normal(0, 0.02, d)
        w[f"{b}.norm2.weight"] = 1 + rng.normal(0, 0.05, d)
        w[f"{b}.norm2.bias"] = rng.normal(0, 0.02, d)
        w[f"{b}.mlp.fc1.weight"] = rng.normal(0, 1 / math.sqrt(d), (n, d))
        w[f"{b}.mlp.fc1.bias"] = rng.normal(0, 0.1, n)
        w[f"{b}.mlp.fc2.weight"] = rng.normal(0, 0.3 / math.sqrt(n), (d, n))
        w[f"{b}.mlp.fc2.bias"] = rng.normal(0, 0.02, d)
        # only the embedding may set the trigger dim
        for name in ("attn.proj.weight", "attn.proj.bias", "mlp.fc2.weight", "mlp.fc2.bias",
                     "norm1.bias", "norm2.bias"):
            w[f"{b}.{name}"][TRIGGER_DIM] = 0.0
    w["norm.weight"] = 1 + rng.normal(0, 0.05, d)
    w["norm.bias"] = rng.normal(0, 0.02, d)
    return w


def _install_sinks(w, spec: PlantSpec, rng, layers: list[int], direction: np.ndarray) -> None:
    d, h = spec.d, spec.n_heads
    dh = d // h
    q_scale = spec.sink_strength * math.sqrt(dh) / math.sqrt(d)
    for layer in layers:
        qkv = w[f"blocks.{layer}.attn.qkv.weight"]
        bias = w[f"blocks.{layer}.attn.qkv.bias"]
        for head in range(h):
            u = rng.normal(size=dh)
            u /= np.linalg.norm(u)
            r = rng.normal(size=dh)
            r /= np.linalg.norm(r)
            sl = slice(head * dh, (head + 1) * dh)
            bias[sl] += q_scale * u
            qkv[d + head * dh: d + (head + 1) * dh] += np.outer(u, direction)
            qkv[2 * d + head * dh: 2 * d + (head + 1) * dh] += SINK_VALUE * np.outer(r, direction)


def _calibration_runs(w, config, spec, images, layer):
    """LN2 inputs at ``layer`` split into trigger and non-trigger tokens."""
    store = WeightStore(w, config)
    trig, other = [], []
    taps = TapSpec([(layer, POST_ATTENTION)])
    for im in images:
        seq = append_registers(embed_image(normalize(im.pixels, config), config, store), 1)
        _, trace = forward(seq, config, store, taps)
        h = tc.layernorm(trace.get(layer, POST_ATTENTION), store[f"blocks.{layer}.norm2.weight"],
                         store[f"blocks.{layer}.norm2.bias"], config.norm_eps)
        hit = {1 + r * spec.grid + c for r, c in im.trigger_patches}
        for t in range(h.shape[0]):
            (trig if t in hit else other).append(h[t].astype(np.float64))
    return np.array(trig), np.array(other)


def _trigger_axis(trig: np.ndarray, other: np.ndarray, direction: np.ndarray):
    """Pick the read-out axis that best separates trigger from other tokens.

    Candidates are the trigger dimension, the outlier direction (useful when
    an earlier planted layer already lit the token up) and the difference
    of class means. Returns ``(axis, min_trigger_score, max_other_score)``.
    """
    diff = trig.mean(axis=0) - other.mean(axis=0)
    e_trig = np.zeros_like(diff)
    e_trig[TRIGGER_DIM] = 1.0
    best = None
    for cand in (e_trig, direction, diff):
        norm = np.linalg.norm(cand)
        if norm == 0:
            continue
        axis = cand / norm
        if trig @ axis @ np.ones(len(trig)) < other @ axis @ np.ones(len(other)) * len(trig) / len(other):
            axis = -axis
        hi, lo = (trig @ axis).min(), (other @ axis).max()
        spread = np.ptp(np.concatenate([trig @ axis, other @ axis])) or 1.0
        score = (hi - lo) / spread
        if best is None or score > best[0]:
            best = (score, axis, hi, lo)
    return best[1], best[2], best[3]


def generate_planted_model(spec: PlantSpec) -> PlantedModel:
    rng = np.random.default_rng([spec.seed, 1234])
    config = planted_config(spec)
    d = spec.d
    outlier_dims = sorted(int(j) for j in rng.choice(np.arange(2, d), spec.n_outlier_dims, replace=False))
    if spec.planted is not None:
        planted = list(spec.planted)
    else:
        neurons = rng.choice(spec.N, spec.n_planted, replace=False)
        planted = [(spec.ignite_layer, int(n)) for n in sorted(neurons)]
    w = _base_weights(spec, rng, outlier_dims)

    direction = np.zeros(d)
    direction[outlier_dims] = rng.uniform(0.6, 1.0, len(outlier_dims))
    direction /= np.linalg.norm(direction)

    last_planted = max(layer for layer, _ in planted)
    sink_layers = list(range(last_planted + 1, spec.n_layers)) if spec.sink_strength > 0 else []
    _install_sinks(w, spec, rng, sink_layers, direction)

    for layer, neuron in planted:
        w[f"blocks.{layer}.mlp.fc1.weight"][neuron] = 0.0
        w[f"blocks.{layer}.mlp.fc1.bias"][neuron] = 0.0
        w[f"blocks.{layer}.mlp.fc2.weight"][:, neuron] = 0.0

    calib = make_images(spec, spec.calibration_images, seed=10_000 + spec.seed)
    for layer in sorted({layer for layer, _ in planted}):
        trig, other = _calibration_runs(w, config, spec, calib, layer)
        axis, hi, lo = _trigger_axis(trig, other, direction)
        if hi <= lo:
            raise SpecError(f"trigger tokens are not separable at layer {layer}")
        theta = 0.5 * (hi + lo)
        slope = 2 * PLANTED_MARGIN / (hi - lo)
        for l2, neuron in planted:
            if l2 != layer:
                continue
            jitter = rng.uniform(0.85, 1.15)
            w[f"blocks.{layer}.mlp.fc1.weight"][neuron] = slope * jitter * axis
            w[f"blocks.{layer}.mlp.fc1.bias"][neuron] = -slope * jitter * theta
            dec = direction + rng.normal(0, 0.05, d) * np.isin(np.arange(d), outlier_dims)
            dec /= np.linalg.norm(dec)
            w[f"blocks.{layer}.mlp.fc2.weight"][:, neuron] = spec.outlier_gain * rng.uniform(0.8, 1.2) * dec

    w = {k: np.asarray(v, dtype=np.float32) for k, v in w.items()}
    store = WeightStore(w, config)
    analysis = spec.n_layers - 1
    bg, hot = [], []
    taps = TapSpec([(analysis, POST_MLP)])
    for im in calib:
        seq = embed_image(normalize(im.pixels, config), config, store)
        _, trace = forward(seq, config, store, taps)
        norms = tc.row_norms(trace.get(analysis, POST_MLP))
        hit = {1 + r * spec.grid + c for r, c in im.trigger_patches}
        for t in seq.patch_indices:
            (hot if t in hit else bg).append(float(norms[t]))
    bg_max = max(bg)
    enabled = spec.outlier_gain > 0
    if enabled:
        hot_min = min(hot)
        if hot_min < MIN_SEPARATION * bg_max:
            raise SpecError(
                f"outlier_gain {spec.outlier_gain} too small: outlier norm {hot_min:.2f} "
                f"< {MIN_SEPARATION}x background {bg_max:.2f}"
            )
        threshold = math.sqrt(hot_min * bg_max)
    else:
        hot_min = None
        threshold = MIN_SEPARATION * bg_max
    truth = GroundTruth(
        planted=planted, threshold=float(threshold), analysis_layer=analysis,
        ignite_layer=spec.ignite_layer, sink_layers=sink_layers, outlier_dims=outlier_dims,
        background_max=float(bg_max), outlier_min=None if hot_min is None else float(hot_min),
        enabled=enabled,
    )
    return PlantedModel(store, config, truth, spec)


def random_model(seed: int, config: ModelConfig | None = None) -> PlantedModel:
    """Unstructured random tiny model for kernel parity checks."""
    rng = np.random.default_rng([seed, 99])
    if config is None:
        heads = int(rng.choice([2, 4]))
        config = ModelConfig(
            image_size=8 * int(rng.integers(1, 3)), patch_size=4, embed_dim=heads * int(rng.choice([4, 8])),
            n_layers=int(rng.integers(1, 4)), n_heads=heads, mlp_hidden=int(rng.choice([16, 32])),
            nonlinearity=str(rng.choice(["gelu", "quick_gelu", "gelu_erf"])),
            layer_scale=bool(rng.integers(2)), ln_pre=bool(rng.integers(2)),
            final_norm=bool(rng.integers(2)), name=f"random-{seed}",
        )
    from .weights import expected_shapes

    w = {}
    for name, shape in expected_shapes(config).items():
        if name.endswith(("norm1.weight", "norm2.weight", "norm.weight", "ln_pre.weight")):
            w[name] = 1 + rng.normal(0, 0.1, shape)
        elif name.endswith("gamma"):
            w[name] = rng.uniform(0.5, 1.5, shape)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else 16
            w[name] = rng.normal(0, 1 / math.sqrt(fan_in), shape)
    store = WeightStore({k: v.astype(np.float32) for k, v in w.items()}, config)
    truth = GroundTruth([], float("inf"), config.n_layers - 1, 0, [], [], 0.0, None, enabled=False)
    return PlantedModel(store, config, truth, None)


def save_planted(model: PlantedModel, weights_path, truth_path) -> None:
    from .weights import save_weights

    save_weights(weights_path, model.weights, model.config)
    payload = {"truth": model.truth.to_dict(), "config": model.config.to_dict()}
    if model.spec is not None:
        payload["spec"] = model.spec.to_dict()
    with open(truth_path, "w") as fh:
        json.dump(payload, fh, indent=2)


# --------------------------------------------------------------------------
# oracles


def _ln(x, g, b, eps):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def reference_forward(seq, config: ModelConfig, weights, edits=(), attention_bias=None) -> np.ndarray:
    """Token-by-token, head-by-head float64 forward pass.

    Deliberately slow: every softmax, layernorm and nonlinearity goes
    through the scalar ``*_naive`` kernels.
    """
    w = {k: np.asarray(v, dtype=np.float64) for k, v in weights.items()}
    d, nh = config.embed_dim, config.n_heads
    dh = d // nh
    x = [np.asarray(row, dtype=np.float64) for row in seq.tokens]
    t_count = len(x)
    for layer in range(config.n_layers):
        b = f"blocks.{layer}."
        h = [tc.layernorm_naive(r, w[b + "norm1.weight"], w[b + "norm1.bias"], config.norm_eps).astype(np.float64)
             for r in x]
        qkv = [w[b + "attn.qkv.weight"] @ r + w[b + "attn.qkv.bias"] for r in h]
        merged = [np.zeros(d) for _ in range(t_count)]
        for head in range(nh):
            qs = [v[head * dh:(head + 1) * dh] for v in qkv]
            ks = [v[d + head * dh:d + (head + 1) * dh] for v in qkv]
            vs = [v[2 * d + head * dh:2 * d + (head + 1) * dh] for v in qkv]
            if attention_bias is not None and layer in attention_bias.keys:
                ks = ks + [np.asarray(attention_bias.keys[layer][head], np.float64)]
                vs = vs + [np.asarray(attention_bias.values[layer][head], np.float64)]
            for t in range(t_count):
                scores = [float(np.dot(qs[t], k)) / math.sqrt(dh) for k in ks]
                p = tc.softmax_naive(scores).astype(np.float64)
                acc = np.zeros(dh)
                for i, v in enumerate(vs):
                    acc += p[i] * v
                merged[t][head * dh:(head + 1) * dh] = acc
        for t in range(t_count):
            out = w[b + "attn.proj.weight"] @ merged[t] + w[b + "attn.proj.bias"]
            if config.layer_scale:
                out = out * w[b + "ls1.gamma"]
            x[t] = x[t] + out
        h = [tc.layernorm_naive(r, w[b + "norm2.weight"], w[b + "norm2.bias"], config.norm_eps).astype(np.float64)
             for r in x]
        act = [tc.nonlinearity_naive(config.nonlinearity, w[b + "mlp.fc1.weight"] @ r + w[b + "mlp.fc1.bias"])
               .astype(np.float64) for r in h]
        original = [a.copy() for a in act]
        for rule in edits:
            if rule.layer != layer:
                continue
            peak = max(a[rule.neuron] for a in original)
            for t in range(t_count):
                if rule.mode == "move_max" and t in rule.targets:
                    act[t][rule.neuron] = peak
                elif rule.mode == "set_values" and t in rule.targets:
                    act[t][rule.neuron] = rule.value
                else:
                    act[t][rule.neuron] = 0.0
        for t in range(t_count):
            out = w[b + "mlp.fc2.weight"] @ act[t] + w[b + "mlp.fc2.bias"]
            if config.layer_scale:
                out = out * w[b + "ls2.gamma"]
            x[t] = x[t] + out
    x = np.array(x)
    if config.final_norm:
        x = np.array([tc.layernorm_naive(r, w["norm.weight"], w["norm.bias"], config.norm_eps) for r in x])
    return x


def _gelu64(z):
    # same tanh formula as the kernel, written to avoid a float power on big batches
    inner = z * z
    inner *= 0.044715
    inner += 1.0
    inner *= z
    inner *= math.sqrt(2 / math.pi)
    np.tanh(inner, out=inner)
    inner += 1.0
    inner *= z
    inner *= 0.5
    return inner


def _nonlin64(name):
    return {
        "gelu": _gelu64,
        "quick_gelu": lambda z: z / (1 + np.exp(-1.702 * z)),
        "gelu_erf": lambda z: np.asarray(tc.gelu_erf(z), np.float64),
    }[name]


def _attention_half(x, w, config, layer):
    """Residual after the attention sub-block of ``layer`` for ``[B, T, d]``."""
    d, nh = config.embed_dim, config.n_heads
    dh = d // nh
    b = f"blocks.{layer}."
    h = _ln(x, w[b + "norm1.weight"], w[b + "norm1.bias"], config.norm_eps)
    qkv = h @ w[b + "attn.qkv.weight"].T + w[b + "attn.qkv.bias"]
    bsz, t, _ = qkv.shape
    q = qkv[..., :d].reshape(bsz, t, nh, dh).transpose(0, 2, 1, 3)
    k = qkv[..., d:2 * d].reshape(bsz, t, nh, dh).transpose(0, 2, 1, 3)
    v = qkv[..., 2 * d:].reshape(bsz, t, nh, dh).transpose(0, 2, 1, 3)
    s = q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh)
    s = np.exp(s - s.max(axis=-1, keepdims=True))
    s /= s.sum(axis=-1, keepdims=True)
    o = (s @ v).transpose(0, 2, 1, 3).reshape(bsz, t, d)
    a = o @ w[b + "attn.proj.weight"].T + w[b + "attn.proj.bias"]
    if config.layer_scale:
        a = a * w[b + "ls1.gamma"]
    return x + a


def _mlp_acts(x, w, config, layer):
    b = f"blocks.{layer}."
    h = _ln(x, w[b + "norm2.weight"], w[b + "norm2.bias"], config.norm_eps)
    return _nonlin64(config.nonlinearity)(h @ w[b + "mlp.fc1.weight"].T + w[b + "mlp.fc1.bias"])


def _mlp_out(act, w, config, layer):
    b = f"blocks.{layer}."
    m = act @ w[b + "mlp.fc2.weight"].T + w[b + "mlp.fc2.bias"]
    if config.layer_scale:
        m = m * w[b + "ls2.gamma"]
    return m


def _batched_tail(x, w, config, start_layer: int, stop_layer: int):
    """Batched float64 forward over ``[B, T, d]`` through layers start..stop."""
    for layer in range(start_layer, stop_layer + 1):
        x = _attention_half(x, w, config, layer)
        x = x + _mlp_out(_mlp_acts(x, w, config, layer), w, config, layer)
    return x


def brute_force_register_scan(
    model: PlantedModel, images, layer: int, top_layer: int, threshold: float | None = None
) -> list[tuple[tuple[int, int], float]]:
    """Rank neurons by how much zeroing each one alone lowers the max patch norm.

    Returns ``[((layer, neuron), mean_drop), ...]`` sorted by descending
    drop. ``threshold`` is accepted for interface symmetry; the drop is
    measured on raw norms.
    """
    config = model.config
    w = {k: np.asarray(v, dtype=np.float64) for k, v in model.weights.items()}
    n = config.mlp_hidden
    drops = np.zeros((top_layer + 1, n))
    for im in images:
        seq = image_sequence(model, im)
        patches = seq.patch_indices
        x = seq.tokens.astype(np.float64)[None]
        base = _batched_tail(x, w, config, 0, layer)[0]
        base_max = np.sqrt((base[patches] ** 2).sum(-1)).max()
        pre = x
        for lyr in range(top_layer + 1):
            mid = _attention_half(pre, w, config, lyr)
            act = _mlp_acts(mid, w, config, lyr)[0]                        # [T, N]
            # batch entry n has neuron n's column zeroed
            zeroed = np.repeat(act[None], n, axis=0)
            zeroed[np.arange(n), :, np.arange(n)] = 0.0
            xb = mid + _mlp_out(zeroed, w, config, lyr)
            if lyr < layer:
                xb = _batched_tail(xb, w, config, lyr + 1, layer)
            drops[lyr] += base_max - np.sqrt((xb[:, patches] ** 2).sum(-1)).max(axis=1)
            pre = mid + _mlp_out(act[None], w, config, lyr)
    drops /= max(len(images), 1)
    ranked = [((lyr, nrn), float(drops[lyr, nrn])) for lyr in range(top_layer + 1) for nrn in range(n)]
    ranked.sort(key=lambda item: (-item[1], item[0]))
    return ranked

