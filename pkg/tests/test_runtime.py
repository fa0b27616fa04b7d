import numpy as np
import pytest

from regforge.config import ModelConfig
from regforge.errors import DimensionError, EditIndexError, MissingTapError, NumericFault, PlanError
from regforge.runtime import (
    ATTN_KEYS,
    ATTN_QUERIES,
    ATTN_VALUES,
    ATTN_WEIGHTS,
    CORE_SITES,
    MLP_HIDDEN,
    POST_ATTENTION,
    POST_MLP,
    SITES,
    AttentionBias,
    EditRule,
    TapSpec,
    TokenSequence,
    append_registers,
    apply_edits,
    attention,
    attention_with_bias,
    embed_image,
    forward,
)
from regforge.synthetic import random_model, reference_forward
from regforge.weights import WeightStore

CFG = ModelConfig(image_size=8, patch_size=4, embed_dim=8, n_layers=3, n_heads=2, mlp_hidden=16,
                  nonlinearity="gelu", norm_eps=1e-5, name="t")


def with_weights(store, **changes):
    tensors = {k: np.array(v) for k, v in store.items()}
    for name, fn in changes.items():
        tensors[name.replace("__", ".")] = fn(tensors[name.replace("__", ".")])
    return WeightStore(tensors, store.config)


@pytest.fixture(scope="module")
def model():
    return random_model(21, CFG)


@pytest.fixture(scope="module")
def seq(model):
    px = np.random.default_rng(21).normal(size=(8, 8, 3))
    return embed_image(px, model.config, model.weights)


# ---------------------------------------------------------------- embedding


def test_zero_image_gives_positional_embeddings(model):
    w = with_weights(model.weights, patch_embed__bias=np.zeros_like)
    s = embed_image(np.zeros((8, 8, 3)), CFG, w)
    assert np.array_equal(s.tokens[1:], w["pos_embed"][1:])
    assert np.array_equal(s.tokens[0], w["cls_token"] + w["pos_embed"][0])
    assert s.roles[0] == ("cls",) and s.roles[1] == ("patch", 0, 0) and s.roles[-1] == ("patch", 1, 1)


def test_single_lit_pixel_changes_one_patch(model):
    base = embed_image(np.zeros((8, 8, 3)), CFG, model.weights)
    px = np.zeros((8, 8, 3))
    px[5, 2, 1] = 1.0
    lit = embed_image(px, CFG, model.weights)
    changed = [i for i in range(len(base)) if not np.array_equal(base.tokens[i], lit.tokens[i])]
    assert changed == [lit.patch_index(1, 0)]


def test_patchify_matches_naive_loop(model):
    rng = np.random.default_rng(0)
    px = rng.normal(size=(8, 8, 3))
    s = embed_image(px, CFG, model.weights)
    w, b, pos = model.weights["patch_embed.weight"], model.weights["patch_embed.bias"], model.weights["pos_embed"]
    p, d = CFG.patch_size, CFG.embed_dim
    for r in range(CFG.grid):
        for c in range(CFG.grid):
            tok = np.zeros(d)
            for o in range(d):
                acc = 0.0
                for ch in range(3):
                    for i in range(p):
                        for j in range(p):
                            acc += float(w[o, ch, i, j]) * px[r * p + i, c * p + j, ch]
                tok[o] = acc + b[o]
            idx = s.patch_index(r, c)
            assert np.abs(s.tokens[idx] - (tok + pos[idx])).max() <= 1e-5


def test_wrong_resolution_is_dimension_error(model):
    with pytest.raises(DimensionError):
        embed_image(np.zeros((12, 12, 3)), CFG, model.weights)


def test_ln_pre_is_applied_at_embedding():
    cfg = ModelConfig(**{**CFG.to_dict(), "ln_pre": True, "patch_bias": False})
    m = random_model(2, cfg)
    s = embed_image(np.random.default_rng(2).normal(size=(8, 8, 3)), cfg, m.weights)
    assert "patch_embed.bias" not in m.weights
    row = s.tokens[1].astype(np.float64)
    g, b = m.weights["ln_pre.weight"], m.weights["ln_pre.bias"]
    z = (row - b) / g   # undo gain and bias: a normalized row has zero mean, unit variance
    assert abs(z.mean()) <= 1e-5
    assert abs(z.var() - 1) <= 1e-3


# ---------------------------------------------------------------- registers


def test_append_zero_count_is_identity(seq):
    assert append_registers(seq, 0) is seq


def test_append_one_zero_register(seq):
    s = append_registers(seq, 1)
    assert len(s) == len(seq) + 1
    assert not s.tokens[-1].any()
    assert s.roles[-1] == ("register", 0)
    assert s.register_indices == [len(seq)]
    s2 = append_registers(s, 2, "patch_mean")
    assert s2.roles[-2:] == (("register", 1), ("register", 2))
    assert np.allclose(s2.tokens[-1], seq.tokens[seq.patch_indices].mean(axis=0), atol=1e-6)


def test_gaussian_matched_stats(seq):
    patches = seq.tokens[seq.patch_indices].astype(np.float64)
    mu, sd = patches.mean(axis=0), patches.std(axis=0)
    draws = np.array([append_registers(seq, 1, "gaussian_matched", seed=s).tokens[-1] for s in range(100)])
    # each drawn value lies within 3 sigma per dimension, and the sample mean matches
    assert np.mean(np.abs(draws - mu) <= 3 * sd) >= 0.99
    assert np.all(np.abs(draws.mean(axis=0) - mu) <= 3 * sd / np.sqrt(100))


def test_append_rejects_bad_arguments(seq):
    with pytest.raises(ValueError):
        append_registers(seq, -1)
    with pytest.raises(ValueError):
        append_registers(seq, 1, "ones")


def test_token_sequence_validation():
    with pytest.raises(DimensionError):
        TokenSequence(np.zeros((3, 4), np.float32), (("cls",),))
    s = TokenSequence(np.zeros((2, 4), np.float32), (("cls",), ("patch", 0, 0)))
    with pytest.raises(EditIndexError):
        s.patch_index(3, 3)


# ---------------------------------------------------------------- forward and taps


def test_tap_completeness_and_shapes(model, seq):
    _, trace = forward(seq, CFG, model.weights, TapSpec.all(CFG))
    t, d, h, dh = len(seq), CFG.embed_dim, CFG.n_heads, CFG.head_dim
    shapes = {POST_ATTENTION: (t, d), POST_MLP: (t, d), MLP_HIDDEN: (t, CFG.mlp_hidden),
              ATTN_WEIGHTS: (h, t, t), ATTN_QUERIES: (h, t, dh), ATTN_KEYS: (h, t, dh), ATTN_VALUES: (h, t, dh)}
    for site in SITES:
        assert trace.layers(site) == list(range(CFG.n_layers))
        for layer in range(CFG.n_layers):
            assert trace.get(layer, site).shape == shapes[site]
    assert len(trace.entries) == CFG.n_layers * len(SITES)


def test_untapped_site_raises(model, seq):
    _, trace = forward(seq, CFG, model.weights, TapSpec.at([0], CORE_SITES))
    assert trace.has(0, POST_MLP) and not trace.has(1, POST_MLP)
    with pytest.raises(MissingTapError):
        trace.get(1, POST_MLP)


def test_attention_rows_sum_to_one(model, seq):
    _, trace = forward(seq, CFG, model.weights, TapSpec.all(CFG, [ATTN_WEIGHTS]))
    for layer in range(CFG.n_layers):
        w = trace.get(layer, ATTN_WEIGHTS).astype(np.float64)
        assert np.abs(w.sum(axis=-1) - 1).max() <= 1e-5


def test_forward_is_deterministic(model, seq):
    edits = [EditRule(1, 3, "move_max", (2,))]
    a, ta = forward(seq, CFG, model.weights, TapSpec.all(CFG), edits)
    b, tb = forward(seq, CFG, model.weights, TapSpec.all(CFG), edits)
    assert a.tobytes() == b.tobytes()
    assert ta.digest() == tb.digest()


def test_edit_locality(model, seq):
    taps = TapSpec.all(CFG)
    _, base = forward(seq, CFG, model.weights, taps)
    _, edited = forward(seq, CFG, model.weights, taps, [EditRule(2, 5, "zero")])
    for (layer, site), arr in base.entries.items():
        if layer < 2 or (layer == 2 and site not in (MLP_HIDDEN, POST_MLP)):
            assert np.array_equal(arr, edited.entries[(layer, site)])
    assert not np.array_equal(base.get(2, POST_MLP), edited.get(2, POST_MLP))


def test_move_max_conserves_peak(model, seq):
    rule = EditRule(1, 7, "move_max", (1, 3))
    _, trace = forward(seq, CFG, model.weights, TapSpec([(1, MLP_HIDDEN)]), [rule], record_pre_edit=True)
    original = trace.pre_edit[(1, 7)]
    col = trace.get(1, MLP_HIDDEN)[:, 7]
    assert col.max() == original.max()
    assert col[1] == col[3] == original.max()
    assert np.count_nonzero(col) == 2


def test_edit_modes_on_matrix():
    act = np.array([[1.0, -2.0], [3.0, 0.5], [2.0, 4.0]], np.float32)
    out = apply_edits(act, [EditRule(0, 0, "move_max", (2,)), EditRule(0, 1, "set_values", (0,), 9.0)])
    assert out[:, 0].tolist() == [0.0, 0.0, 3.0]
    assert out[:, 1].tolist() == [9.0, 0.0, 0.0]
    assert apply_edits(act, [EditRule(0, 1, "zero")])[:, 1].tolist() == [0.0, 0.0, 0.0]
    assert act[0, 0] == 1.0  # input untouched


def test_zeroing_dead_neuron_is_bit_identical(model, seq):
    w = with_weights(model.weights)
    tensors = {k: np.array(v) for k, v in w.items()}
    tensors["blocks.1.mlp.fc1.weight"][4] = 0
    tensors["blocks.1.mlp.fc1.bias"][4] = 0
    dead = WeightStore(tensors, CFG)
    a, _ = forward(seq, CFG, dead)
    b, _ = forward(seq, CFG, dead, edits=[EditRule(1, 4, "zero")])
    assert a.tobytes() == b.tobytes()


def test_move_max_on_single_token_neuron_is_a_no_op(planted, planted_images):
    images, seqs = planted_images
    layer, neuron = planted.truth.planted[0]
    seq = seqs[0]
    _, trace = forward(seq, planted.config, planted.weights, TapSpec([(layer, MLP_HIDDEN)]))
    col = trace.get(layer, MLP_HIDDEN)[:, neuron]
    top = int(np.argmax(col))
    assert top in images[0].outliers
    others = np.delete(col, top)
    assert np.abs(others).max() < 1e-6
    a, _ = forward(seq, planted.config, planted.weights)
    b, _ = forward(seq, planted.config, planted.weights, edits=[EditRule(layer, neuron, "move_max", (top,))])
    assert np.abs(a - b).max() <= 1e-6


@pytest.mark.parametrize("rule", [
    EditRule(3, 0, "zero"), EditRule(0, 16, "zero"), EditRule(0, 0, "move_max", (99,)),
])
def test_out_of_range_edits(model, seq, rule):
    with pytest.raises(EditIndexError):
        forward(seq, CFG, model.weights, edits=[rule])


def test_duplicate_edit_is_plan_error(model, seq):
    with pytest.raises(PlanError):
        forward(seq, CFG, model.weights, edits=[EditRule(0, 1, "zero"), EditRule(0, 1, "move_max", (1,))])


def test_edit_rule_validation_and_round_trip():
    with pytest.raises(PlanError):
        EditRule(0, 0, "scale")
    with pytest.raises(PlanError):
        EditRule(0, 0, "move_max")
    with pytest.raises(PlanError):
        EditRule(0, 0, "set_values", (1,))
    rule = EditRule(1, 2, "set_values", (3, 4), 2.5)
    assert EditRule.from_dict(rule.to_dict()) == rule


def test_numeric_fault_propagates(model, seq):
    w = with_weights(model.weights, blocks__0__mlp__fc2__weight=lambda a: np.full_like(a, 3e38))
    with pytest.raises(NumericFault):
        forward(seq, CFG, w)


def test_zero_weight_model_outputs_final_norm_bias():
    m = random_model(0, CFG)
    tensors = {k: np.zeros_like(v) for k, v in m.weights.items()}
    tensors["norm.bias"] = np.arange(CFG.embed_dim, dtype=np.float32)
    w = WeightStore(tensors, CFG)
    s = embed_image(np.random.default_rng(0).normal(size=(8, 8, 3)), CFG, w)
    out, _ = forward(s, CFG, w)
    ref = reference_forward(s, CFG, w)
    assert np.array_equal(out, np.tile(tensors["norm.bias"], (len(s), 1)))
    assert np.abs(ref - out).max() <= 1e-7


@pytest.mark.parametrize("seed", range(5))
def test_reference_parity_with_edit(seed):
    m = random_model(seed)
    s = embed_image(np.random.default_rng(seed).normal(size=(m.config.image_size,) * 2 + (3,)), m.config, m.weights)
    edits = [EditRule(m.config.n_layers - 1, 2, "move_max", (1,))]
    for e in ((), edits):
        out, _ = forward(s, m.config, m.weights, edits=e)
        ref = reference_forward(s, m.config, m.weights, e)
        assert np.abs(out - ref).max() / np.abs(ref).max() <= 1e-5


# ---------------------------------------------------------------- attention bias


def _layer0(model):
    return model.weights.layer(0)


def _normed(model, seq):
    from regforge import tensor as tc

    lw = _layer0(model)
    return tc.layernorm(seq.tokens, lw["norm1.weight"], lw["norm1.bias"], CFG.norm_eps)


def test_never_attended_bias_column_is_inert(model, seq):
    lw = dict(_layer0(model))
    qkv_w = np.array(lw["attn.qkv.weight"])
    qkv_b = np.array(lw["attn.qkv.bias"])
    qkv_w[: CFG.embed_dim] = 0.0
    qkv_b[: CFG.embed_dim] = 1.0   # every query is the all-ones vector
    lw["attn.qkv.weight"], lw["attn.qkv.bias"] = qkv_w, qkv_b
    x = _normed(model, seq)
    k = np.full((CFG.n_heads, CFG.head_dim), -1e9, np.float32)
    v = np.random.default_rng(0).normal(size=k.shape).astype(np.float32)
    plain, _ = attention(x, lw, CFG.n_heads)
    assert np.abs(attention_with_bias(x, lw, CFG.n_heads, k, v) - plain).max() <= 1e-6


def test_bias_equals_appended_token(model, seq):
    """A bias column matches a real extra token with the same key and value."""
    lw = _layer0(model)
    x = _normed(model, seq)
    rng = np.random.default_rng(1)
    for _ in range(50):
        extra = rng.normal(size=(1, CFG.embed_dim)).astype(np.float32) * rng.uniform(0.1, 5)
        aug = np.concatenate([x, extra])
        out_aug, parts = attention(aug, lw, CFG.n_heads)
        k, v = parts["k"][:, -1, :], parts["v"][:, -1, :]
        out_bias = attention_with_bias(x, lw, CFG.n_heads, k, v)
        assert np.abs(out_bias - out_aug[:-1]).max() <= 1e-5


def test_zero_value_bias_reweights(model, seq):
    lw = _layer0(model)
    x = _normed(model, seq)
    k = np.random.default_rng(2).normal(size=(CFG.n_heads, CFG.head_dim)).astype(np.float32)
    _, parts = attention(x, lw, CFG.n_heads, k, np.zeros_like(k))
    w = parts["weights"].astype(np.float64)
    assert w.shape == (CFG.n_heads, len(seq), len(seq) + 1)
    assert np.abs(w.sum(axis=-1) - 1).max() <= 1e-6
    heads = np.einsum("hts,hsd->htd", w[:, :, :-1], parts["v"].astype(np.float64))
    merged = heads.transpose(1, 0, 2).reshape(len(seq), -1)
    assert np.abs(merged - parts["merged"]).max() <= 1e-5


def test_bias_head_mismatch(model, seq):
    lw = _layer0(model)
    bad = np.zeros((CFG.n_heads + 1, CFG.head_dim), np.float32)
    with pytest.raises(DimensionError):
        attention(_normed(model, seq), lw, CFG.n_heads, bad, bad)


def test_forward_with_bias_records_extra_column(model, seq):
    bias = AttentionBias({1: np.zeros((2, 4), np.float32)}, {1: np.ones((2, 4), np.float32)}, 1)
    _, trace = forward(seq, CFG, model.weights, TapSpec.all(CFG, [ATTN_WEIGHTS, ATTN_VALUES]), attention_bias=bias)
    assert trace.get(0, ATTN_WEIGHTS).shape[-1] == len(seq)
    assert trace.get(1, ATTN_WEIGHTS).shape[-1] == len(seq) + 1
    assert trace.bias_layers == (1,)
    restored = AttentionBias.from_dict(bias.to_dict())
    assert np.array_equal(restored.values[1], bias.values[1])
