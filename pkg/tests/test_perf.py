import json
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from osc.errors import ValidationError
from osc.perf import (
    CLASSIC_DIMS,
    HardwareProfile,
    Scheme,
    WorkloadSpec,
    compute_bound_speedup,
    compute_cycles,
    speedup,
    summarize,
    sweep_csv,
    sweep_table,
)


@pytest.mark.parametrize("g, expected", [(16, 1.600), (32, 1.778), (64, 1.882)])
def test_closed_form(g, expected):
    assert compute_bound_speedup(g) == pytest.approx(2 / (1 + 4 / g), rel=1e-12)
    assert round(compute_bound_speedup(g), 3) == expected


def test_overhead_fraction():
    for g in (16, 32, 64):
        est = compute_cycles(WorkloadSpec(256, 4096, 4096, Scheme.OSC_W4A4, g))
        assert est.overhead == pytest.approx(4 / g, rel=1e-12)


def test_large_m_compute_bound():
    cells = sweep_table([128, 256, 1024], [16, 32, 64])
    assert all(c.osc_regime == "compute" and c.w8a8_regime == "compute" for c in cells)
    for c in cells:
        assert c.speedup == pytest.approx(compute_bound_speedup(c.group_size), rel=1e-12)


def test_speedup_nondecreasing_in_g():
    for m in (16, 64, 256):
        for k in CLASSIC_DIMS:
            s = [speedup(WorkloadSpec(m, k, 2048, Scheme.W8A8, g),
                         WorkloadSpec(m, k, 2048, Scheme.OSC_W4A4, g)) for g in (16, 32, 64)]
            assert s == sorted(s)


def test_self_speedup_is_one():
    w = WorkloadSpec(64, 512, 768, Scheme.W16A16)
    assert speedup(w, w) == 1.0


def test_speedup_dims_must_match():
    with pytest.raises(ValidationError):
        speedup(WorkloadSpec(1, 32, 32, Scheme.W8A8), WorkloadSpec(2, 32, 32, Scheme.OSC_W4A4))


def test_group_must_divide_reduction_dim():
    with pytest.raises(ValidationError):
        WorkloadSpec(4, 48, 8, Scheme.OSC_W4A4, 32)


def test_rates_must_be_positive():
    with pytest.raises(ValidationError):
        HardwareProfile(bandwidth=0)


def test_memory_bound_limit_is_byte_ratio():
    hw = HardwareProfile(bandwidth=1e-9)
    m, k, n, g = 16, 4096, 4096, 32
    base = compute_cycles(WorkloadSpec(m, k, n, Scheme.W8A8, g), hw)
    osc = compute_cycles(WorkloadSpec(m, k, n, Scheme.OSC_W4A4, g), hw)
    assert base.regime == osc.regime == "memory"
    w8 = (m * k + k * n) * 1.0 + m * n * 2
    w4 = (m * k + k * n) * (0.5 + 1 / g) + (m * k // g + k // g * n) * 2 + m * n * 2
    assert base.cycles / osc.cycles == pytest.approx(w8 / w4)


def test_small_m_ranges_are_plausible():
    rows = summarize(sweep_table([16, 64, 128], [16, 32, 64]))
    for r in rows:
        lo, hi = r["small_m"]
        assert 1.0 < lo <= hi <= 2.0
        assert r["large_m_compute_bound"]


def test_hardware_json():
    hw = HardwareProfile.from_json(json.dumps({"bandwidth": 128}))
    assert hw.bandwidth == 128.0 and hw.fp4_rate == 16384.0
    with pytest.raises(ValidationError):
        HardwareProfile.from_json('{"bandwith": 1}')


def test_csv_has_regime_column():
    text = sweep_csv(sweep_table([16], [32], dims=[512]))
    header, row = text.strip().split("\n")
    assert header.split(",")[6:8] == ["w8a8_regime", "osc_regime"]
    assert row.split(",")[:4] == ["16", "512", "512", "32"]


@settings(max_examples=100, deadline=None)
@given(st.sampled_from([1, 16, 128, 1024]), st.sampled_from(CLASSIC_DIMS),
       st.sampled_from(CLASSIC_DIMS), st.sampled_from([16, 32, 64]),
       st.floats(0.01, 100), st.sampled_from(list(Scheme)))
def test_homogeneity(m, k, n, g, c, scheme):
    hw = HardwareProfile()
    w = WorkloadSpec(m, k, n, scheme, g)
    a, b = compute_cycles(w, hw), compute_cycles(w, hw.scaled(c))
    assert b.cycles == pytest.approx(a.cycles / c, rel=1e-9)
    base = WorkloadSpec(m, k, n, Scheme.W8A8, g)
    assert speedup(base, w, hw.scaled(c)) == pytest.approx(speedup(base, w, hw), rel=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.sampled_from([1, 64, 512]), st.sampled_from(CLASSIC_DIMS), st.sampled_from([16, 32, 64]),
       st.sampled_from(["fp16_rate", "fp8_rate", "fp4_rate", "bandwidth"]), st.floats(1.0, 10.0),
       st.sampled_from(list(Scheme)))
def test_monotone_in_resources(m, k, g, field, c, scheme):
    hw = HardwareProfile()
    faster = replace(hw, **{field: getattr(hw, field) * c})
    w = WorkloadSpec(m, k, k, scheme, g)
    assert compute_cycles(w, faster).cycles <= compute_cycles(w, hw).cycles
