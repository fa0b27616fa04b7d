"""Register-neuron discovery and the interventions built on top of it.

``find_register_neurons`` ranks MLP neurons by their mean activation on
high-norm outlier patches. The planning functions turn a neuron list into
pure-data :class:`InterventionPlan` values; :func:`compile_plan` lowers a
plan into a (possibly extended) token sequence plus the EditRules that the
runtime executes.
"""
from __future__ import annotations

from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .analysis import decompose_attention, find_outliers, mean_cosine
from .config import ModelConfig
from .errors import EmptyInputError, EmptyScanError, PlanError
from .runtime import (
    ATTN_KEYS,
    ATTN_VALUES,
    ATTN_WEIGHTS,
    MLP_HIDDEN,
    POST_MLP,
    REGISTER_INITS,
    AttentionBias,
    EditRule,
    TapSpec,
    TokenSequence,
    append_registers,
    forward,
)

PLAN_MODES = ("shift_to_positions", "test_time_register", "zero_out", "copy_register_max")


class NeuronId(NamedTuple):
    layer: int
    neuron: int


@dataclass(frozen=True)
class RegisterScanConfig:
    top_layer: int
    top_k: int
    outlier_threshold: float
    outlier_measure_layer: int

    def __post_init__(self):
        if self.top_k < 1:
            raise ValueError("top_k must be at least 1")
        if self.top_layer < 0:
            raise ValueError("top_layer must be non-negative")

    def to_dict(self) -> dict:
        return {"top_layer": self.top_layer, "top_k": self.top_k,
                "outlier_threshold": self.outlier_threshold,
                "outlier_measure_layer": self.outlier_measure_layer}

    @classmethod
    def from_dict(cls, d: dict) -> "RegisterScanConfig":
        return cls(int(d["top_layer"]), int(d["top_k"]), float(d["outlier_threshold"]),
                   int(d["outlier_measure_layer"]))


@dataclass
class RegisterScanResult:
    avg_act: np.ndarray
    ranked: list[tuple[NeuronId, float]]
    skipped_images: int
    used_images: int
    config: RegisterScanConfig

    @property
    def neurons(self) -> list[NeuronId]:
        return [nid for nid, _ in self.ranked]

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "ranked": [{"layer": n.layer, "neuron": n.neuron, "score": s} for n, s in self.ranked],
            "skipped_images": self.skipped_images,
            "used_images": self.used_images,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegisterScanResult":
        ranked = [(NeuronId(int(r["layer"]), int(r["neuron"])), float(r["score"])) for r in d["ranked"]]
        return cls(np.zeros((0, 0)), ranked, int(d.get("skipped_images", 0)),
                   int(d.get("used_images", 0)), RegisterScanConfig.from_dict(d["config"]))


def find_register_neurons(
    sequences: Iterable[TokenSequence],
    config: ModelConfig,
    weights: Mapping[str, np.ndarray],
    scan: RegisterScanConfig,
) -> RegisterScanResult:
    """Rank neurons in layers ``0..top_layer`` by activation on outlier patches.

    Each image contributes the mean activation over its own outlier set;
    the per-image means are then averaged over the images that had any
    outliers. Outlier-free images are counted in ``skipped_images``.
    """
    if scan.top_layer >= config.n_layers:
        raise ValueError(f"top_layer {scan.top_layer} outside a {config.n_layers}-layer model")
    taps = TapSpec.at(range(scan.top_layer + 1), [MLP_HIDDEN]) | TapSpec(
        [(scan.outlier_measure_layer, POST_MLP)]
    )
    total = np.zeros((scan.top_layer + 1, config.mlp_hidden))
    used = skipped = 0
    for seq in sequences:
        _, trace = forward(seq, config, weights, taps)
        outliers = find_outliers(trace, scan.outlier_measure_layer, scan.outlier_threshold)
        if not outliers:
            skipped += 1
            continue
        pos = list(outliers.positions)
        for layer in range(scan.top_layer + 1):
            total[layer] += trace.get(layer, MLP_HIDDEN)[pos].astype(np.float64).mean(axis=0)
        used += 1
    if used == 0:
        raise EmptyScanError(f"none of the {skipped} images had outliers above {scan.outlier_threshold}")
    avg = total / used
    flat = [(NeuronId(layer, n), float(avg[layer, n])) for layer in range(avg.shape[0]) for n in range(avg.shape[1])]
    flat.sort(key=lambda item: (-item[1], item[0].layer, item[0].neuron))
    return RegisterScanResult(avg, flat[: scan.top_k], skipped, used, scan)


# --------------------------------------------------------------------------
# plans


@dataclass(frozen=True)
class InterventionPlan:
    """Pure description of an intervention.

    ``targets`` are token indices for ``shift_to_positions`` and
    ``copy_register_max``; ``register_count``/``init`` drive
    ``test_time_register``. ``matched`` pairs each neuron of a
    ``copy_register_max`` plan with the register neuron whose peak it copies.
    """

    neurons: tuple[NeuronId, ...]
    mode: str
    targets: tuple[int, ...] = ()
    register_count: int = 0
    init: str = "zeros"
    matched: tuple[NeuronId, ...] = ()
    seed: int = 0
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "neurons", tuple(NeuronId(int(a), int(b)) for a, b in self.neurons))
        object.__setattr__(self, "matched", tuple(NeuronId(int(a), int(b)) for a, b in self.matched))
        object.__setattr__(self, "targets", tuple(int(t) for t in self.targets))
        if self.mode not in PLAN_MODES:
            raise PlanError(f"unknown plan mode {self.mode!r}")
        if len(set(self.neurons)) != len(self.neurons):
            raise PlanError("plan lists the same neuron twice")
        if self.mode in ("shift_to_positions", "copy_register_max") and not self.targets:
            raise PlanError(f"{self.mode} plan needs target positions")
        if self.mode == "test_time_register":
            if self.register_count < 1:
                raise PlanError("test-time register plan needs at least one register")
            if self.init not in REGISTER_INITS:
                raise PlanError(f"unknown register init {self.init!r}")
        if self.mode == "copy_register_max" and len(self.matched) != len(self.neurons):
            raise PlanError("copy_register_max needs one matched register neuron per neuron")

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "neurons": [list(n) for n in self.neurons],
            "targets": list(self.targets),
            "register_count": self.register_count,
            "init": self.init,
            "matched": [list(n) for n in self.matched],
            "seed": self.seed,
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "InterventionPlan":
        return cls(
            neurons=tuple(tuple(n) for n in d["neurons"]), mode=d["mode"], targets=tuple(d.get("targets", ())),
            register_count=int(d.get("register_count", 0)), init=d.get("init", "zeros"),
            matched=tuple(tuple(n) for n in d.get("matched", ())), seed=int(d.get("seed", 0)),
            provenance=d.get("provenance", {}),
        )


def _neuron_ids(neurons) -> tuple[NeuronId, ...]:
    return tuple(NeuronId(int(a), int(b)) for a, b in neurons)


def plan_shift(neurons, target_positions: Sequence[int], provenance: dict | None = None) -> InterventionPlan:
    return InterventionPlan(_neuron_ids(neurons), "shift_to_positions", tuple(target_positions),
                            provenance=provenance or {})


def plan_test_time_register(neurons, count: int = 1, init: str = "zeros", seed: int = 0,
                            provenance: dict | None = None) -> InterventionPlan:
    return InterventionPlan(_neuron_ids(neurons), "test_time_register", register_count=count, init=init,
                            seed=seed, provenance=provenance or {})


def plan_zero_out(neurons, provenance: dict | None = None) -> InterventionPlan:
    return InterventionPlan(_neuron_ids(neurons), "zero_out", provenance=provenance or {})


def register_assignment(plan: InterventionPlan) -> list[int]:
    """Register slot for each neuron: round-robin in plan order."""
    return [i % plan.register_count for i in range(len(plan.neurons))]


def compile_plan(
    plan: InterventionPlan, n_tokens: int, peaks: Mapping[NeuronId, float] | None = None
) -> list[EditRule]:
    """Lower a plan to EditRules for a sequence of ``n_tokens`` tokens.

    For ``test_time_register`` plans ``n_tokens`` counts the sequence
    before the registers are appended.
    """
    if plan.mode == "shift_to_positions":
        return [EditRule(n.layer, n.neuron, "move_max", plan.targets) for n in plan.neurons]
    if plan.mode == "zero_out":
        return [EditRule(n.layer, n.neuron, "zero") for n in plan.neurons]
    if plan.mode == "test_time_register":
        slots = register_assignment(plan)
        return [EditRule(n.layer, n.neuron, "move_max", (n_tokens + slot,))
                for n, slot in zip(plan.neurons, slots)]
    if peaks is None:
        raise PlanError("copy_register_max needs the matched neurons' peak activations")
    return [EditRule(n.layer, n.neuron, "set_values", plan.targets, float(peaks[m]))
            for n, m in zip(plan.neurons, plan.matched)]


def matched_peaks(plan: InterventionPlan, seq: TokenSequence, config, weights) -> dict[NeuronId, float]:
    """Peak activation of each matched register neuron on an unedited run."""
    layers = sorted({m.layer for m in plan.matched})
    _, trace = forward(seq, config, weights, TapSpec.at(layers, [MLP_HIDDEN]))
    return {m: float(trace.get(m.layer, MLP_HIDDEN)[:, m.neuron].max()) for m in plan.matched}


def apply_plan(plan: InterventionPlan, seq: TokenSequence, config=None, weights=None):
    """Return ``(sequence, edits)`` ready for :func:`regforge.runtime.forward`."""
    if plan.mode == "test_time_register":
        edits = compile_plan(plan, len(seq))
        return append_registers(seq, plan.register_count, plan.init, seed=plan.seed), edits
    peaks = None
    if plan.mode == "copy_register_max":
        if config is None or weights is None:
            raise PlanError("copy_register_max needs the model to read peak activations")
        peaks = matched_peaks(plan, seq, config, weights)
    return seq, compile_plan(plan, len(seq), peaks)


def run_plan(plan: InterventionPlan, seq: TokenSequence, config, weights, taps: TapSpec | None = None,
             attention_bias: AttentionBias | None = None, record_pre_edit: bool = False):
    seq2, edits = apply_plan(plan, seq, config, weights)
    return forward(seq2, config, weights, taps, edits, attention_bias, record_pre_edit)


def random_neuron_control(
    seed: int,
    counts_per_layer: Mapping[int, int],
    mode: str,
    n_neurons: int,
    targets: Sequence[int],
    exclude: Iterable[NeuronId] = (),
    matched: Sequence[NeuronId] = (),
) -> InterventionPlan:
    """Random neurons, layer-matched to a register set, wired like a shift.

    ``own_max`` copies each random neuron's own peak to the targets;
    ``register_max`` writes the peak of the matched register neuron instead.
    Neurons in ``exclude`` are never drawn.
    """
    rng = np.random.default_rng(seed)
    banned = set(_neuron_ids(exclude))
    picked: list[NeuronId] = []
    for layer in sorted(counts_per_layer):
        pool = [n for n in range(n_neurons) if NeuronId(layer, n) not in banned]
        count = counts_per_layer[layer]
        if count > len(pool):
            raise PlanError(f"layer {layer} has only {len(pool)} eligible neurons, {count} requested")
        picked.extend(NeuronId(layer, int(n)) for n in sorted(rng.choice(pool, count, replace=False)))
    prov = {"control": mode, "seed": seed}
    if mode == "own_max":
        return InterventionPlan(tuple(picked), "shift_to_positions", tuple(targets), seed=seed, provenance=prov)
    if mode == "register_max":
        matched = _neuron_ids(matched)
        if len(matched) != len(picked):
            raise PlanError("register_max needs one register neuron per random neuron")
        by_layer: dict[int, list[NeuronId]] = {}
        for m in matched:
            by_layer.setdefault(m.layer, []).append(m)
        ordered = [m for layer in sorted(by_layer) for m in by_layer[layer]]
        return InterventionPlan(tuple(picked), "copy_register_max", tuple(targets), matched=tuple(ordered),
                                seed=seed, provenance=prov)
    raise ValueError(f"unknown control mode {mode!r}")


def layer_counts(neurons: Iterable[NeuronId]) -> dict[int, int]:
    counts: dict[int, int] = {}
    for n in _neuron_ids(neurons):
        counts[n.layer] = counts.get(n.layer, 0) + 1
    return counts


# --------------------------------------------------------------------------
# attention biases


def derive_attention_bias(
    sequences: Iterable[TokenSequence],
    config: ModelConfig,
    weights: Mapping[str, np.ndarray],
    neurons,
    from_layer: int = 0,
) -> AttentionBias:
    """Average key/value of a zero-init test-time register, per layer and head.

    The register token sits in the sequence from the input onwards, so by
    default every layer gets a bias pair; ``from_layer`` narrows the scope.
    """
    plan = plan_test_time_register(neurons, 1, "zeros")
    layers = list(range(from_layer, config.n_layers))
    taps = TapSpec.at(layers, [ATTN_KEYS, ATTN_VALUES])
    key_sum = {layer: np.zeros((config.n_heads, config.head_dim)) for layer in layers}
    val_sum = {layer: np.zeros((config.n_heads, config.head_dim)) for layer in layers}
    count = 0
    for seq in sequences:
        _, trace = run_plan(plan, seq, config, weights, taps)
        reg = len(seq)
        for layer in layers:
            key_sum[layer] += trace.get(layer, ATTN_KEYS)[:, reg, :]
            val_sum[layer] += trace.get(layer, ATTN_VALUES)[:, reg, :]
        count += 1
    if count == 0:
        raise EmptyInputError("attention-bias calibration needs at least one image")
    return AttentionBias(
        {layer: (key_sum[layer] / count).astype(np.float32) for layer in layers},
        {layer: (val_sum[layer] / count).astype(np.float32) for layer in layers},
        count,
    )


def run_with_bias(seq: TokenSequence, config, weights, neurons, bias: AttentionBias,
                  taps: TapSpec | None = None):
    """Zero the register neurons and let the bias pairs stand in for the register."""
    return run_plan(plan_zero_out(neurons), seq, config, weights, taps, attention_bias=bias)


# --------------------------------------------------------------------------
# register-count ablation


def register_value_update(seq: TokenSequence, config, weights, neurons, count: int, layer: int,
                          init: str = "zeros") -> np.ndarray:
    """Registers' share of the attention output at ``layer``, for the original tokens."""
    plan = plan_test_time_register(neurons, count, init)
    _, trace = run_plan(plan, seq, config, weights, TapSpec([(layer, ATTN_WEIGHTS), (layer, ATTN_VALUES)]))
    report = decompose_attention(trace, layer, trace.register_indices)
    return report.registers[: len(seq)]


def register_count_cosines(
    sequences: Sequence[TokenSequence], config, weights, neurons, counts: Iterable[int] = (1, 2, 3, 4, 5),
    layer: int | None = None,
) -> dict[int, float]:
    """Mean cosine between the 1-register value update and the k-register one."""
    layer = config.n_layers - 1 if layer is None else layer
    counts = list(counts)
    sums = {k: 0.0 for k in counts}
    for seq in sequences:
        base = register_value_update(seq, config, weights, neurons, 1, layer)
        for k in counts:
            upd = base if k == 1 else register_value_update(seq, config, weights, neurons, k, layer)
            sums[k] += mean_cosine(base, upd)
    if not sequences:
        raise EmptyInputError("register-count ablation needs at least one image")
    return {k: sums[k] / len(sequences) for k in counts}
