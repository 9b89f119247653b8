import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ednmr.dynamics import hahn_echo_power_sweep, nominal_b1
from ednmr.ensemble import (
    DEFAULT_PROFILES,
    CpwGeometry,
    EnsembleSpec,
    FieldMap,
    Implant,
    ImplantProfile,
    build_ensemble,
    cpw_fields,
    default_depth_grid,
    default_lateral_grid,
    ensemble_average,
    envelope_ratio,
    hahn_echo_ensemble,
    implant_weights,
    load_implant_table,
)

from ensemble_cases import GEOMETRY, convergence_traces, damping_traces, subharmonic_case, trace

# --- CPW field map --------------------------------------------------------------------------


def test_reference_point_has_unit_scales():
    b1, e2, b2 = cpw_fields(GEOMETRY, [GEOMETRY.reference_point])
    assert (b1[0], e2[0], b2[0]) == pytest.approx((1.0, 1.0, 1.0))


def test_far_field_is_small():
    z = 10 * GEOMETRY.gap_width
    xs = np.linspace(-2 * GEOMETRY.b, 2 * GEOMETRY.b, 201)
    scales = cpw_fields(GEOMETRY, np.column_stack([xs, np.full_like(xs, z)]))
    for s in scales:
        assert s.max() < 0.05


def test_drive_voltage_is_linear():
    pts = np.column_stack([np.linspace(-20e-6, 20e-6, 41), np.full(41, 2e-6)])
    g2 = CpwGeometry(10e-6, 10e-6, 1e-6, drive_voltage=2.0)
    assert np.allclose(cpw_fields(g2, pts)[1], 2 * cpw_fields(GEOMETRY, pts)[1], rtol=1e-12)


@pytest.mark.parametrize("z", [0.5e-6, 1e-6, 2e-6, 3e-6])
def test_argmax_regions(z):
    a, b = GEOMETRY.a, GEOMETRY.b
    xs = np.linspace(-1.5 * b, 1.5 * b, 3001)
    b1, e2, _ = cpw_fields(GEOMETRY, np.column_stack([xs, np.full_like(xs, z)]))
    assert abs(xs[np.argmax(b1)]) < a
    assert a < abs(xs[np.argmax(e2)]) < b


def test_field_magnitude_decays_with_height():
    zs = np.linspace(0.05e-6, 100e-6, 400)
    for x in np.linspace(-40e-6, 40e-6, 81):
        ex, ez = GEOMETRY.electric_per_volt(np.full_like(zs, x), zs)
        assert np.all(np.diff(np.hypot(ex, ez)) < 0)


def test_components_decay_where_they_dominate():
    zs = np.linspace(0.5e-6, 50e-6, 200)
    for x in np.linspace(0.0, 0.9 * GEOMETRY.a, 5):
        b1, _, b2 = cpw_fields(GEOMETRY, np.column_stack([np.full_like(zs, x), zs]))
        assert np.all(np.diff(b1) < 0) and np.all(np.diff(b2) < 0)
    for x in np.linspace(GEOMETRY.a, GEOMETRY.b, 5)[1:-1]:
        _, e2, _ = cpw_fields(GEOMETRY, np.column_stack([np.full_like(zs, x), zs]))
        assert np.all(np.diff(e2) < 0)


def test_points_below_plane_rejected():
    with pytest.raises(ValueError):
        cpw_fields(GEOMETRY, [(0.0, 0.0)])


def test_invalid_geometry_rejected():
    with pytest.raises(ValueError):
        CpwGeometry(0.0, 10e-6)
    with pytest.raises(ValueError):
        CpwGeometry(10e-6, 10e-6, -1e-6)


def test_field_map_csv_round_trip(tmp_path):
    xs = np.linspace(-20e-6, 20e-6, 9)
    zs = np.linspace(0.5e-6, 3e-6, 6)
    X, Z = np.meshgrid(xs, zs, indexing="ij")
    pts = np.column_stack([X.ravel(), Z.ravel()])
    b1, e2, b2 = cpw_fields(GEOMETRY, pts)
    path = tmp_path / "map.csv"
    np.savetxt(path, np.column_stack([pts, b1, e2, b2]), delimiter=",", header="x,z,b1,e2,b2")
    fm = FieldMap.from_csv(path)
    for got, want in zip(fm(pts), (b1, e2, b2)):
        assert np.allclose(got, want)
    ens = build_ensemble(GEOMETRY, DEFAULT_PROFILES["As"], xs[2:5], zs[1:4] - GEOMETRY.sample_standoff,
                         field_map=fm)
    assert math.fsum(ens.weights) == pytest.approx(1.0, abs=1e-12)


def test_incomplete_field_map_rejected(tmp_path):
    path = tmp_path / "map.csv"
    np.savetxt(path, [[0, 1e-6, 1, 1, 1], [1e-6, 1e-6, 1, 1, 1], [0, 2e-6, 1, 1, 1]], delimiter=",")
    with pytest.raises(ValueError):
        FieldMap.from_csv(path)


# --- implant profiles ----------------------------------------------------------------------


def test_delta_like_straggle_concentrates_weight():
    grid = default_depth_grid()
    target = grid[7]
    w = implant_weights(ImplantProfile((Implant("x", target, 1e-12),)), grid)
    assert np.argmax(w) == 7
    assert w[7] == pytest.approx(1.0)


def test_uniform_profile_gives_equal_weights():
    w = implant_weights(ImplantProfile((), 1.0), default_depth_grid())
    assert np.allclose(w, 1.0 / len(w))


@given(
    st.floats(0.0, 2e-6), st.floats(1e-9, 1e-6), st.floats(0.0, 5.0), st.floats(0.0, 5.0),
    st.integers(1, 64),
)
def test_implant_weights_normalised(mean, straggle, dose, uniform, n):
    if dose == 0 and uniform == 0:
        uniform = 1.0
    profile = ImplantProfile((Implant("x", mean, straggle, dose),), uniform)
    w = implant_weights(profile, default_depth_grid(n=n))
    assert math.fsum(w) == pytest.approx(1.0, abs=1e-12)
    assert np.all(w >= 0)


def test_empty_depth_grid_rejected():
    with pytest.raises(ValueError):
        implant_weights(DEFAULT_PROFILES["As"], [])


def test_depth_grid_outside_epilayer_rejected():
    with pytest.raises(ValueError):
        implant_weights(DEFAULT_PROFILES["As"], [1e-6, 3e-6])


def test_invalid_implants_rejected():
    with pytest.raises(ValueError):
        Implant("x", 1e-7, 0.0)
    with pytest.raises(ValueError):
        ImplantProfile(())


def test_implant_table_loader(tmp_path):
    path = tmp_path / "profile.csv"
    path.write_text("depth,weight\n1e-7,2\n2e-7,6\n3e-7,2\n")
    depth, weight = load_implant_table(path)
    assert np.allclose(depth, [1e-7, 2e-7, 3e-7])
    assert np.allclose(weight, [0.2, 0.6, 0.2])


# --- ensemble construction -------------------------------------------------------------------


def test_single_point_grids():
    ens = build_ensemble(GEOMETRY, DEFAULT_PROFILES["As"], [GEOMETRY.a], [1.5e-7])
    assert len(ens) == 1
    assert ens.points[0].weight == 1.0


def test_pruning_keeps_unit_sum():
    ens = build_ensemble(GEOMETRY, DEFAULT_PROFILES["As"], default_lateral_grid(GEOMETRY),
                         default_depth_grid())
    full = len(default_lateral_grid(GEOMETRY)) * len(default_depth_grid())
    assert len(ens) < full  # deep cells of the shallow implant fall below the threshold
    assert math.fsum(ens.weights) == pytest.approx(1.0, abs=1e-12)
    assert min(ens.weights) >= 1e-6


def test_spec_rejects_bad_weights():
    from ednmr.ensemble import EnsemblePoint

    with pytest.raises(ValueError):
        EnsembleSpec((EnsemblePoint(0.5, 1, 1, 1, 0),))
    with pytest.raises(ValueError):
        EnsembleSpec(())


def test_grid_refinement_converges():
    coarse, fine = convergence_traces()
    change = np.abs(coarse.signal - fine.signal).max() / np.abs(fine.signal).max()
    assert change < 0.01


# --- averaging -------------------------------------------------------------------------------


def test_identical_points_average_to_the_point(rng):
    signal = rng.normal(size=50)
    spec = EnsembleSpec.from_scales(np.ones(7), rng.uniform(0.1, 1.0, 7))
    assert np.allclose(ensemble_average(spec, lambda p: signal), signal, rtol=0, atol=1e-15)


@given(st.permutations(list(range(12))), st.integers(0, 2**31 - 1))
def test_permutation_is_bit_identical(perm, seed):
    rng = np.random.default_rng(seed)
    scales = rng.uniform(0.5, 1.5, 12)
    weights = rng.uniform(0.01, 1.0, 12)
    signals = rng.normal(size=(12, 20)) * 10.0 ** rng.integers(-8, 8, (12, 1))
    a = EnsembleSpec.from_scales(scales, weights)
    b = EnsembleSpec(tuple(a.points[i] for i in perm))
    out_a = ensemble_average(a, list(signals))
    out_b = ensemble_average(b, [signals[i] for i in perm])
    assert np.array_equal(out_a, out_b)


@given(st.integers(0, 2**31 - 1), st.integers(1, 20))
def test_average_within_pointwise_bounds(seed, n):
    rng = np.random.default_rng(seed)
    signals = rng.normal(size=(n, 30))
    spec = EnsembleSpec.from_scales(np.ones(n), rng.uniform(0.01, 1.0, n))
    avg = ensemble_average(spec, list(signals))
    assert np.all(avg >= signals.min(axis=0) - 1e-12)
    assert np.all(avg <= signals.max(axis=0) + 1e-12)


def test_shape_mismatch_rejected():
    spec = EnsembleSpec.from_scales([1.0, 1.0])
    with pytest.raises(ValueError):
        ensemble_average(spec, [np.zeros(3), np.zeros(4)])
    with pytest.raises(ValueError):
        ensemble_average(spec, [np.zeros(3)])


def _cosine_oracle(scales, weights, t, rate, exponent):
    """Weighted sum of unit cosines at rates ``rate * scale**exponent``."""
    w = np.asarray(weights) / np.sum(weights)
    return np.cos(2 * np.pi * rate * np.outer(t, np.asarray(scales) ** exponent)) @ w


@pytest.mark.parametrize("exponent", [1, 2])
def test_cosine_oracle_damps_with_uniform_spread(exponent):
    scales = (np.arange(2000) + 0.5) / 2000 + 0.5  # [0.5, 1.5]
    t = np.linspace(0, 11, 2201)
    y = _cosine_oracle(scales, np.ones_like(scales), t, 1.0, exponent)
    assert envelope_ratio(t, y, 1.0) < 0.2


def test_average_matches_cosine_oracle():
    scales = np.linspace(0.5, 1.5, 33)
    weights = np.linspace(1.0, 2.0, 33)
    spec = EnsembleSpec.from_scales(scales, weights)
    t = np.linspace(0, 10, 300)
    avg = ensemble_average(spec, lambda p: np.cos(2 * np.pi * p.e2_scale * t))
    assert np.allclose(avg, _cosine_oracle(scales, weights, t, 1.0, 1), atol=1e-12)


# --- ensemble dynamics -----------------------------------------------------------------------


def _spread_trace(width, n=48):
    scales = 1.0 + width * ((np.arange(n) + 0.5) / n - 0.5) * 2
    return trace(EnsembleSpec.from_scales(scales), 6, 241, None)


def test_e2_spread_damps_subharmonic_rabi():
    c = subharmonic_case()
    tr = trace(EnsembleSpec.from_scales(0.5 + (np.arange(96) + 0.5) / 96), 11, 441, None)
    assert envelope_ratio(tr.durations, tr.signal, c.period) < 0.2


def test_decay_monotone_in_spread_width():
    c = subharmonic_case()
    ratios = [envelope_ratio(tr.durations, tr.signal, c.period, cycle=5)
              for tr in (_spread_trace(w) for w in (0.02, 0.1, 0.3))]
    assert ratios[0] > ratios[1] > ratios[2]


def test_default_ensemble_damps_and_single_point_does_not():
    c = subharmonic_case()
    ens, single = damping_traces()
    assert envelope_ratio(ens.durations, ens.signal, c.period) < 0.2
    assert envelope_ratio(single.durations, single.signal, c.period) > 0.99
    assert ens.metadata["points"] > 1


def test_echo_with_b1_spread_stays_unimodal(donors, field):
    ens = build_ensemble(GEOMETRY, DEFAULT_PROFILES["As"], default_lateral_grid(GEOMETRY),
                         default_depth_grid())
    t90 = 50e-9
    b_nom = nominal_b1(donors["As"], field, t90)
    scales = np.linspace(0.02, 2.5, 250)
    ideal = hahn_echo_power_sweep(donors["As"], field, b_nom * scales, (t90, 2 * t90))
    spread = hahn_echo_ensemble(donors["As"], field, b_nom * scales, (t90, 2 * t90), ens)

    def peak_and_width(c):
        i = int(np.argmax(c))
        above = scales[c >= c[i] / 2]
        return scales[i], above.max() - above.min(), np.sum(np.diff(np.sign(np.diff(c))) < 0)

    p0, w0, n0 = peak_and_width(ideal)
    p1, w1, n1 = peak_and_width(spread)
    assert n0 == 1 and n1 == 1
    assert abs(p1 - p0) > 2 * (scales[1] - scales[0])
    assert w1 > w0
