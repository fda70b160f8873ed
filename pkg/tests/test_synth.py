import numpy as np
import pytest

from osc.errors import ValidationError
from osc.profiler import clustering_density, compute_threshold, profile_tensor
from osc.synth import (
    GroundTruth,
    SynthSpec,
    cell_seed,
    designated_channels,
    expected_density,
    generate,
    generate_grid,
    generate_weight,
)
from osc.tensor import PositionId


def test_perfect_persistence_gives_unit_density():
    x, truth = generate(SynthSpec(tokens=128, channels=128, group_size=32, seed=1,
                                  persistence=1.0, rate=1.0))
    rep = profile_tensor(x, 32)
    assert all(r.density == 1.0 for r in rep.records)
    assert rep.dominant_indices.tolist() == truth.designated.tolist()


def test_zero_persistence_near_floor():
    spec = SynthSpec(tokens=4096, channels=256, group_size=64, seed=2, persistence=0.0, rate=0.5)
    rep = profile_tensor(generate(spec)[0], 64)
    floor = 1 / 63
    assert floor <= rep.mean_density < floor + 0.03


def test_same_seed_bit_identical():
    spec = SynthSpec(tokens=64, channels=64, seed=9)
    a, ta = generate(spec)
    b, tb = generate(spec)
    assert a == b
    assert np.array_equal(ta.planted, tb.planted)
    assert generate(SynthSpec(tokens=64, channels=64, seed=10))[0] != a


def test_streams_share_structure():
    spec = SynthSpec(tokens=64, channels=64, seed=4)
    _, t0 = generate(spec, stream=0)
    x1, t1 = generate(spec, stream=1)
    assert np.array_equal(t0.designated, t1.designated)
    assert x1 != generate(spec, stream=0)[0]


def test_ground_truth_consistent_with_data():
    spec = SynthSpec(tokens=256, channels=128, seed=5)
    x, truth = generate(spec)
    grouped = x.data.reshape(256, 4, 32)
    s, k = np.nonzero(truth.planted >= 0)
    assert np.all(np.abs(grouped[s, k, truth.planted[s, k]]) == 20.0)
    off = truth.planted[truth.planted >= 0] != truth.designated[k]
    assert 0.2 < off.mean() < 0.4  # about 1 - p


def test_planted_values_exceed_threshold():
    for seed in range(10):
        x, _ = generate(SynthSpec(tokens=512, channels=256, seed=seed))
        assert 20.0 > compute_threshold(x)


def test_ground_truth_json_round_trip():
    spec = SynthSpec(tokens=8, channels=32, seed=1)
    _, truth = generate(spec)
    back = GroundTruth.from_json(truth.to_json(spec))
    assert np.array_equal(back.designated, truth.designated)
    assert np.array_equal(back.planted, truth.planted)


def test_expected_density_formula():
    assert expected_density(1.0, 32) == 1.0
    assert expected_density(0.0, 17) == pytest.approx(1 / 16)


@pytest.mark.parametrize("kwargs", [dict(persistence=1.5), dict(rate=-0.1), dict(magnitude=0),
                                    dict(tokens=0), dict(channels=48)])
def test_spec_validation(kwargs):
    base = dict(tokens=8, channels=64)
    base.update(kwargs)
    with pytest.raises(ValueError):
        SynthSpec(**base)


def test_weight_scale_and_determinism():
    w = generate_weight(512, 64, 3)
    assert w.data.std() == pytest.approx(1 / np.sqrt(512), rel=0.05)
    assert generate_weight(512, 64, 3) == w


def test_default_grid_tiers():
    template = SynthSpec(tokens=512, channels=256)
    grid = generate_grid(list(PositionId), 2, template, master_seed=7)
    for key, x in grid.evaluation.items():
        rep = clustering_density(x, template.group_spec, compute_threshold(x))
        expected = "low" if key[0] is PositionId.W2_IN else "high"
        assert rep.tier == expected, key
    assert len(grid.calibration.keys()) == 8
    assert grid.calibration.token_count() == 8 * 3 * 512


def test_empty_grid_rejected():
    with pytest.raises(ValidationError):
        generate_grid([], 2, SynthSpec(tokens=8, channels=32))
    with pytest.raises(ValidationError):
        generate_grid([PositionId.WO_IN], 0, SynthSpec(tokens=8, channels=32))


def test_master_seed_changes_every_cell_seed():
    for p in PositionId:
        for layer in range(4):
            assert cell_seed(1, p, layer) != cell_seed(2, p, layer)
    seeds = {cell_seed(1, p, layer) for p in PositionId for layer in range(4)}
    assert len(seeds) == 16


def test_designated_channels_in_range():
    d = designated_channels(SynthSpec(tokens=1, channels=512, group_size=16, seed=8))
    assert d.shape == (32,) and d.min() >= 0 and d.max() < 16
