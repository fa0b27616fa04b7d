import json

import numpy as np
import pytest

from regforge.analysis import find_outliers, token_norms
from regforge.errors import SpecError
from regforge.runtime import ATTN_WEIGHTS, POST_MLP, TapSpec, forward
from regforge.synthetic import (
    GroundTruth,
    PlantSpec,
    brute_force_register_scan,
    generate_planted_model,
    image_sequence,
    make_images,
)


def run(model, seq, layers, sites=(POST_MLP,)):
    return forward(seq, model.config, model.weights, TapSpec.at(layers, list(sites)))[1]


def test_fixed_position_trigger_ignites_at_that_patch():
    for seed in range(20):
        m = generate_planted_model(PlantSpec(seed=seed, trigger="fixed_position", trigger_position=(2, 3)))
        ign = m.truth.ignite_layer
        for im in make_images(m, 2, seed=seed):
            seq = image_sequence(m, im)
            trace = run(m, seq, [ign])
            norms = token_norms(trace, ign)
            top = seq.patch_indices[int(np.argmax(norms[seq.patch_indices]))]
            assert seq.roles[top] == ("patch", 2, 3)


def test_zero_gain_disables_the_mechanism():
    m = generate_planted_model(PlantSpec(seed=2, outlier_gain=0.0))
    assert not m.truth.enabled and m.truth.outlier_min is None
    layer = m.truth.analysis_layer
    for im in make_images(m, 6):
        assert im.outliers == ()
        trace = run(m, image_sequence(m, im), [layer])
        assert not find_outliers(trace, layer, m.truth.threshold)


def test_ground_truth_consistency_across_specs():
    specs = [PlantSpec(seed=s) for s in range(4)] + [
        PlantSpec(seed=5, trigger="fixed_position", trigger_position=(0, 3)),
        PlantSpec(seed=6, n_triggers=2, n_planted=2, outlier_gain=10.0),
        PlantSpec(seed=7, n_layers=6, ignite_layer=3, d=48, n_heads=4, N=128),
    ]
    for spec in specs:
        m = generate_planted_model(spec)
        t = m.truth
        assert t.outlier_min >= 3 * t.background_max
        assert t.background_max < t.threshold < t.outlier_min
        for im in make_images(m, 8, seed=3):
            trace = run(m, image_sequence(m, im), [t.analysis_layer])
            assert set(find_outliers(trace, t.analysis_layer, t.threshold).positions) == set(im.outliers)


def test_sink_layers_send_cls_attention_to_the_outlier(planted, planted_images):
    images, seqs = planted_images
    last = planted.config.n_layers - 1
    assert last in planted.truth.sink_layers
    for im, seq in zip(images, seqs):
        trace = run(planted, seq, [last], [ATTN_WEIGHTS])
        row = trace.get(last, ATTN_WEIGHTS).mean(axis=0)[seq.cls_index].copy()
        row[seq.cls_index] = -1
        assert int(np.argmax(row)) in im.outliers


def test_brute_force_top_is_planted(planted, planted_images):
    images, _ = planted_images
    t = planted.truth
    ranked = brute_force_register_scan(planted, images[:3], t.analysis_layer, t.ignite_layer)
    top = {nid for nid, _ in ranked[: len(t.planted)]}
    assert top == set(t.planted)
    assert ranked[0][1] > 0.5 * t.threshold


def test_brute_force_drops_vanish_without_gain():
    m = generate_planted_model(PlantSpec(seed=2, outlier_gain=0.0))
    ranked = brute_force_register_scan(m, make_images(m, 3), m.truth.analysis_layer, 2)
    assert len(ranked) == 3 * m.config.mlp_hidden
    assert max(abs(s) for _, s in ranked) < 0.01 * m.truth.threshold


def test_infeasible_gain_is_rejected():
    with pytest.raises(SpecError):
        generate_planted_model(PlantSpec(seed=0, n_planted=1, outlier_gain=6.0))
    with pytest.raises(SpecError):
        generate_planted_model(PlantSpec(seed=0, outlier_gain=1.0))


@pytest.mark.parametrize("kwargs", [
    {"trigger": "stripes"},
    {"n_outlier_dims": 4},
    {"d": 30, "n_heads": 4},
    {"ignite_layer": 5},
    {"planted": ((3, 1),), "ignite_layer": 2},
    {"planted": ((0, 64),)},
    {"planted": ((0, 1), (0, 1))},
    {"trigger_position": (4, 0)},
    {"n_triggers": 16},
    {"outlier_gain": -1.0},
    {"n_planted": 0},
])
def test_spec_validation(kwargs):
    with pytest.raises(SpecError):
        PlantSpec(**kwargs)


def test_explicit_planted_neurons_are_used():
    m = generate_planted_model(PlantSpec(seed=3, planted=((1, 5), (2, 9)), outlier_gain=8.0))
    assert m.truth.planted == [(1, 5), (2, 9)]


def test_spec_and_truth_json_round_trip(planted):
    spec = PlantSpec(seed=4, planted=((0, 2),), trigger="fixed_position", trigger_position=(1, 2))
    assert PlantSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec
    back = GroundTruth.from_dict(json.loads(json.dumps(planted.truth.to_dict())))
    assert back.to_dict() == planted.truth.to_dict()


def test_images_are_seeded(planted):
    a = make_images(planted, 3, seed=5)
    b = make_images(planted, 3, seed=5)
    c = make_images(planted, 3, seed=6)
    assert all(np.array_equal(x.pixels, y.pixels) for x, y in zip(a, b))
    assert not all(np.array_equal(x.pixels, y.pixels) for x, y in zip(a, c))
