import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from regforge import tensor as tc
from regforge.errors import DimensionError, NumericFault

TRIALS = 1000


def rel_err(a, b):
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-30))


# ---------------------------------------------------------------- matmul


def test_matmul_identity_case():
    out = tc.matmul([[1, 0], [0, 1]], [[3, 4], [5, 6]])
    assert out.tolist() == [[3, 4], [5, 6]]
    assert out.dtype == np.float32


def test_matmul_hand_case():
    assert tc.matmul([[1, 2]], [[3], [4]]).tolist() == [[11]]


def test_matmul_random_7x5_5x3_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(7, 5)), rng.normal(size=(5, 3))
    assert rel_err(tc.matmul(a, b), tc.matmul_naive(a, b)) <= 1e-6


def test_matmul_parity_randomized_trials():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(TRIALS):
        m, k, n = rng.integers(1, 6, size=3)
        a = rng.normal(size=(m, k)) * 10 ** rng.uniform(-3, 3)
        b = rng.normal(size=(k, n))
        worst = max(worst, rel_err(tc.matmul(a, b), tc.matmul_naive(a, b)))
    assert worst <= 1e-5


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        tc.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(DimensionError):
        tc.matmul(np.ones(3), np.ones((3, 1)))


@given(st.permutations(list(range(5))), arrays(np.float32, (5, 5), elements=st.floats(-100, 100, width=32)))
def test_matmul_permuted_identity_is_exact(perm, a):
    eye = np.eye(5, dtype=np.float32)
    assert np.array_equal(tc.matmul(eye, a), a)
    assert np.array_equal(tc.matmul(a, eye), a)
    p = eye[list(perm)]
    assert np.array_equal(tc.matmul(p, a), a[list(perm)])


def test_matmul_overflow_raises_numeric_fault():
    with pytest.raises(NumericFault) as info:
        tc.matmul([[1e30, 0.0]], [[1e30], [0.0]])
    assert info.value.op == "matmul"
    assert info.value.index == (0, 0)


# ---------------------------------------------------------------- softmax


def test_softmax_uniform():
    assert np.allclose(tc.softmax([0.0, 0.0, 0.0]), [1 / 3] * 3, atol=1e-7)


def test_softmax_large_gap_is_stable():
    out = tc.softmax([1000.0, 0.0])
    assert out.tolist() == [1.0, 0.0]


def test_softmax_matches_direct_formula():
    x = np.random.default_rng(2).normal(size=9)
    ref = np.exp(x) / np.exp(x).sum()
    assert np.abs(tc.softmax(x) - ref).max() <= 1e-7


def test_softmax_parity_randomized_trials():
    rng = np.random.default_rng(3)
    for _ in range(TRIALS):
        x = rng.normal(size=rng.integers(1, 12)) * 10 ** rng.uniform(-2, 3)
        assert rel_err(tc.softmax(x), tc.softmax_naive(x)) <= 1e-5


@settings(max_examples=200)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 16)), elements=st.floats(-1e4, 1e4)))
def test_softmax_rows_sum_to_one(x):
    out = tc.softmax(x, axis=-1).astype(np.float64)
    assert np.all(np.abs(out.sum(axis=-1) - 1.0) <= 1e-6)


def test_softmax_bad_axis():
    with pytest.raises(DimensionError):
        tc.softmax(np.ones((2, 2)), axis=2)


# ---------------------------------------------------------------- layernorm


def test_layernorm_constant_row_is_zero():
    out = tc.layernorm(np.full((1, 6), 3.5), np.ones(6), np.zeros(6), 1e-5)
    assert np.array_equal(out, np.zeros((1, 6), np.float32))


def test_layernorm_zero_gain_gives_bias():
    bias = np.arange(4, dtype=np.float32)
    out = tc.layernorm(np.random.default_rng(0).normal(size=(3, 4)), np.zeros(4), bias, 1e-5)
    assert np.array_equal(out, np.tile(bias, (3, 1)))


def test_layernorm_matches_two_pass_oracle():
    rng = np.random.default_rng(4)
    row, g, b = rng.normal(size=16), rng.normal(size=16), rng.normal(size=16)
    assert rel_err(tc.layernorm(row[None], g, b, 1e-6)[0], tc.layernorm_naive(row, g, b, 1e-6)) <= 1e-6


def test_layernorm_parity_randomized_trials():
    rng = np.random.default_rng(5)
    for _ in range(TRIALS):
        d = int(rng.integers(2, 20))
        row = rng.normal(size=d) * 10 ** rng.uniform(-2, 3) + rng.normal() * 5
        g, b = rng.normal(size=d), rng.normal(size=d)
        assert rel_err(tc.layernorm(row[None], g, b, 1e-5)[0], tc.layernorm_naive(row, g, b, 1e-5)) <= 1e-5


def test_layernorm_rejects_nonpositive_eps():
    with pytest.raises(ValueError):
        tc.layernorm(np.ones((1, 3)), np.ones(3), np.zeros(3), 0.0)


# ---------------------------------------------------------------- nonlinearities


@pytest.mark.parametrize("name", sorted(tc.NONLINEARITIES))
def test_nonlinearity_at_zero(name):
    assert tc.NONLINEARITIES[name](np.zeros(1))[0] == 0.0


@pytest.mark.parametrize("name", ["gelu", "gelu_erf"])
def test_gelu_large_positive_asymptote(name):
    x = np.array([10.0, 20.0, 50.0])
    assert np.abs(tc.NONLINEARITIES[name](x) - x).max() <= 1e-4


def test_gelu_grid_matches_formula():
    x = np.linspace(-8, 8, 1000)
    ref = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))
    assert np.abs(tc.gelu(x) - ref).max() <= 1e-6


def test_gelu_erf_grid_matches_formula():
    x = np.linspace(-8, 8, 1000)
    ref = np.array([0.5 * v * (1 + math.erf(v / math.sqrt(2))) for v in x])
    assert np.abs(tc.gelu_erf(x) - ref).max() <= 1e-6


@pytest.mark.parametrize("name", sorted(tc.NONLINEARITIES))
def test_nonlinearity_parity_with_scalar_twin(name):
    x = np.random.default_rng(6).normal(size=TRIALS) * 6
    assert np.abs(tc.NONLINEARITIES[name](x) - tc.nonlinearity_naive(name, x)).max() <= 1e-6


def test_quick_gelu_extreme_negative_is_finite():
    assert np.isfinite(tc.quick_gelu(np.array([-1e4]))).all()
    assert np.isfinite(tc.nonlinearity_naive("quick_gelu", [-1e4])).all()


# ---------------------------------------------------------------- norms


def test_row_norm_cases():
    assert tc.row_norms([[3.0, 4.0]]).tolist() == [5.0]
    assert tc.row_norms([[0.0, 0.0, 0.0]]).tolist() == [0.0]


def test_row_norms_match_oracle():
    rng = np.random.default_rng(7)
    for _ in range(TRIALS):
        x = rng.normal(size=(int(rng.integers(1, 5)), int(rng.integers(1, 9)))) * 10 ** rng.uniform(-2, 2)
        assert rel_err(tc.row_norms(x), tc.row_norms_naive(x)) <= 1e-6


def test_check_finite_reports_first_bad_index():
    x = np.zeros((2, 3))
    x[1, 2] = np.nan
    with pytest.raises(NumericFault) as info:
        tc.check_finite("probe", x)
    assert info.value.index == (1, 2)
    assert info.value.to_json()["op"] == "probe"
