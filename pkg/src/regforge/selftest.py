"""A fast invariant suite runnable from a fresh checkout (``regforge self-test``)."""
from __future__ import annotations

from collections.abc import Callable

import numpy as np

from . import tensor as tc
from .analysis import decompose_attention, find_outliers, recompute_attention_output
from .registers import (
    RegisterScanConfig,
    derive_attention_bias,
    find_register_neurons,
    plan_shift,
    plan_test_time_register,
    run_plan,
    run_with_bias,
)
from .runtime import (
    ATTN_KEYS,
    ATTN_QUERIES,
    ATTN_VALUES,
    ATTN_WEIGHTS,
    POST_MLP,
    EditRule,
    TapSpec,
    embed_image,
    forward,
)
from .synthetic import (
    PlantSpec,
    generate_planted_model,
    image_sequence,
    make_images,
    random_model,
    reference_forward,
)


def _rel(a, b) -> float:
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-12))


def check_kernels() -> str:
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = rng.normal(size=(3, 5))
        b = rng.normal(size=(5, 4))
        assert _rel(tc.matmul(a, b), tc.matmul_naive(a, b)) < 1e-6
        row = rng.normal(size=7)
        assert _rel(tc.softmax(row), tc.softmax_naive(row)) < 1e-6
    return "matmul/softmax agree with scalar twins"


def check_parity() -> str:
    worst = 0.0
    for seed in range(3):
        m = random_model(seed)
        px = np.random.default_rng(seed).normal(size=(m.config.image_size,) * 2 + (3,))
        seq = embed_image(px, m.config, m.weights)
        edit = [EditRule(0, 1, "move_max", (1,))]
        for edits in ((), edit):
            out, _ = forward(seq, m.config, m.weights, edits=edits)
            worst = max(worst, _rel(out, reference_forward(seq, m.config, m.weights, edits)))
    assert worst < 1e-5, worst
    return f"runtime vs reference forward, worst relative error {worst:.2e}"


def check_planted() -> str:
    m = generate_planted_model(PlantSpec(seed=0))
    t = m.truth
    images = make_images(m, 4, seed=1)
    seqs = [image_sequence(m, im) for im in images]
    scan = find_register_neurons(seqs, m.config, m.weights,
                                 RegisterScanConfig(t.ignite_layer, len(t.planted), t.threshold, t.analysis_layer))
    assert set(scan.neurons) == set(t.planted), scan.neurons
    seq = seqs[0]
    target = next(i for i in seq.patch_indices if i not in images[0].outliers)
    _, trace = run_plan(plan_shift(scan.neurons, [target]), seq, m.config, m.weights,
                        TapSpec([(t.analysis_layer, POST_MLP)]))
    assert find_outliers(trace, t.analysis_layer, t.threshold).positions == (target,)
    out_reg, trace = run_plan(plan_test_time_register(scan.neurons), seq, m.config, m.weights,
                              TapSpec([(t.analysis_layer, POST_MLP)]))
    assert not find_outliers(trace, t.analysis_layer, t.threshold)
    bias = derive_attention_bias([seq], m.config, m.weights, scan.neurons)
    out_bias, _ = run_with_bias(seq, m.config, m.weights, scan.neurons, bias)
    err = _rel(out_bias[0], out_reg[0])
    assert err < 1e-3, err
    return "planted scan recovery, shift, register absorption and bias replay"


def check_decomposition() -> str:
    m = random_model(5)
    px = np.random.default_rng(5).normal(size=(m.config.image_size,) * 2 + (3,))
    seq = embed_image(px, m.config, m.weights)
    _, trace = forward(seq, m.config, m.weights,
                       TapSpec.at([0], [ATTN_WEIGHTS, ATTN_QUERIES, ATTN_KEYS, ATTN_VALUES]))
    rep = decompose_attention(trace, 0, [0, 1])
    err = float(np.abs(rep.total - recompute_attention_output(trace, 0)).max())
    assert err < 1e-5, err
    return f"attention decomposition reconstructs output (max error {err:.1e})"


CHECKS: dict[str, Callable[[], str]] = {
    "kernels": check_kernels,
    "parity": check_parity,
    "decomposition": check_decomposition,
    "planted": check_planted,
}


def run_self_test() -> list[dict]:
    results = []
    for name, fn in CHECKS.items():
        try:
            results.append({"check": name, "ok": True, "detail": fn()})
        except AssertionError as exc:
            results.append({"check": name, "ok": False, "detail": f"assertion failed: {exc}"})
    return results
