import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import constants as sc

from ednmr.errors import StepTooCoarseError
from ednmr.dynamics import (
    DaviesSetup,
    Delay,
    DensityState,
    DriveSpec,
    Pulse,
    PulseSequence,
    apply_unitary,
    davies_endor_spectrum,
    echo_amplitude,
    esr_pairs,
    evolve,
    evolve_converged,
    evolve_lab,
    evolve_trace,
    fit_rabi_frequency,
    hahn_echo_power_sweep,
    magnetic_drive,
    max_step,
    nominal_b1,
    rabi_map,
    readout,
    run_sequence,
    selective_pulse,
    thermal_state,
)
from ednmr.results import SpectrumResult
from ednmr.dynamics import RabiMap
from ednmr.spincore import (
    SpinSystem,
    StaticField,
    build_hamiltonian,
    eigensystem,
    transition_table,
)
from ednmr.starkdrive import rabi_rate

from surveys import survey

P_SYS = SpinSystem.isotropic(0.5, 117.53, 1.9985, 2.263, label="P")


@pytest.fixture(scope="module")
def p_levels():
    H = build_hamiltonian(P_SYS, StaticField.along(0.25))
    return H, eigensystem(H)


def pure(levels, k):
    psi = levels.states[:, k]
    return DensityState(np.outer(psi, psi.conj()))


def nmr_drive(levels, pair, rate_hz, detuning_hz=0.0):
    """Magnetic drive on ``pair`` scaled to the requested Rabi rate."""
    f = abs(levels.frequency(*pair)) * 1e6
    unit = magnetic_drive(P_SYS, 1.0, (1, 0, 0), f)
    d = unit.scaled(rate_hz / rabi_rate(levels, unit, pair, 1))
    return d.at_carrier(f + detuning_hz)


# --- thermal state -------------------------------------------------------------

def test_infinite_temperature_is_maximally_mixed(p_levels):
    rho = thermal_state(p_levels[0], np.inf).rho
    assert np.allclose(rho, np.eye(4) / 4, atol=1e-9)


def test_thermal_polarisation_oracle():
    f = 7.3e9
    H = np.diag([f / 2e6, -f / 2e6]).astype(complex)
    p = np.real(np.diag(thermal_state(H, 1.9).rho))
    oracle = math.tanh(sc.h * f / (2 * sc.k * 1.9))
    assert p[1] - p[0] == pytest.approx(oracle, rel=1e-12)
    assert oracle == pytest.approx(0.092, abs=5e-4)


@given(st.integers(0, 2**31 - 1), st.floats(0.01, 300))
def test_thermal_state_is_physical(seed, T):
    r = np.random.default_rng(seed)
    M = r.normal(size=(6, 6)) + 1j * r.normal(size=(6, 6))
    s = thermal_state(1e4 * (M + M.conj().T), T)
    assert s.is_physical(1e-9)


def test_thermal_state_rejects_nonpositive_temperature(p_levels):
    with pytest.raises(ValueError):
        thermal_state(p_levels[0], 0.0)


def test_density_state_validation():
    with pytest.raises(ValueError):
        DensityState(np.eye(2))
    with pytest.raises(ValueError):
        DensityState(np.array([[0.5, 0.1], [0.0, 0.5]]))


# --- selective pulses ------------------------------------------------------------

def test_pi_pulse_swaps_populations(p_levels):
    H, lv = p_levels
    rho = thermal_state(H, 1.9)
    pair = esr_pairs(lv)[0]
    before = rho.populations(lv)
    after = apply_unitary(rho, selective_pulse(lv, pair, np.pi)).populations(lv)
    i, j = pair
    assert after[i] == pytest.approx(before[j], abs=1e-14)
    assert after[j] == pytest.approx(before[i], abs=1e-14)


def test_two_pi_pulse_is_minus_identity_on_subspace(p_levels):
    _, lv = p_levels
    pair = esr_pairs(lv)[1]
    U = lv.to_eigenbasis(selective_pulse(lv, pair, 2 * np.pi))
    i, j = pair
    assert np.allclose(U[np.ix_(pair, pair)], -np.eye(2), atol=1e-12)
    assert np.allclose(U.conj().T @ U, np.eye(4), atol=1e-10)


def test_phase_shift_by_pi_flips_coherence_imaginary_part(p_levels):
    _, lv = p_levels
    pair = esr_pairs(lv)[0]
    i, j = pair
    rho = pure(lv, i)
    a = lv.to_eigenbasis(apply_unitary(rho, selective_pulse(lv, pair, np.pi / 2, 0.0)).rho)
    b = lv.to_eigenbasis(apply_unitary(rho, selective_pulse(lv, pair, np.pi / 2, np.pi)).rho)
    assert abs(a[i, j].imag) > 0.4
    assert b[i, j].imag == pytest.approx(-a[i, j].imag, abs=1e-12)


def test_selective_pulse_rejects_diagonal_pair(p_levels):
    with pytest.raises(ValueError):
        selective_pulse(p_levels[1], (1, 1), np.pi)


@given(st.floats(-10, 10), st.floats(-np.pi, np.pi))
def test_selective_pulse_unitary(angle, phase):
    lv = eigensystem(build_hamiltonian(P_SYS, StaticField.along(0.25)))
    U = selective_pulse(lv, (0, 3), angle, phase)
    assert np.allclose(U.conj().T @ U, np.eye(4), atol=1e-10)


# --- RF evolution ------------------------------------------------------------------

def nmr_pair(lv):
    return next(t.level_pair for t in transition_table(lv) if t.kind == "NMR-SQT")


def test_zero_drive_keeps_populations(p_levels):
    H, lv = p_levels
    rho = thermal_state(H, 1.9)
    d = nmr_drive(lv, nmr_pair(lv), 1e4).scaled(0.0)
    for dur in (1e-6, 1e-3, 1.0):
        assert np.allclose(evolve(lv, d, rho, dur).populations(lv), rho.populations(lv),
                           atol=1e-12)


def test_resonant_pi_pulse_inverts(p_levels):
    _, lv = p_levels
    i, j = nmr_pair(lv)
    rate = 2e4
    out = evolve(lv, nmr_drive(lv, (i, j), rate), pure(lv, i), 1 / (2 * rate))
    assert out.populations(lv)[j] >= 0.999


def test_detuned_drive_matches_rabi_formula(p_levels):
    _, lv = p_levels
    i, j = nmr_pair(lv)
    rate = 2e4
    delta = 3 * rate
    t_peak = 1 / (2 * math.hypot(rate, delta))
    out = evolve(lv, nmr_drive(lv, (i, j), rate, delta), pure(lv, i), t_peak)
    assert out.populations(lv)[j] == pytest.approx(rate**2 / (rate**2 + delta**2), rel=0.02)


def test_step_too_coarse_is_reported(p_levels):
    H, lv = p_levels
    d = nmr_drive(lv, nmr_pair(lv), 2e4)
    limit = max_step(lv, d)
    with pytest.raises(StepTooCoarseError) as err:
        evolve(lv, d, thermal_state(H, 1.9), 1e-4, step=2 * limit)
    assert err.value.max_step == pytest.approx(limit)


def test_explicit_fine_step_agrees_with_default(p_levels):
    H, lv = p_levels
    d = nmr_drive(lv, nmr_pair(lv), 2e4, 5e3)
    rho = thermal_state(H, 1.9)
    a = evolve(lv, d, rho, 3e-5).populations(lv)
    b = evolve(lv, d, rho, 3e-5, step=max_step(lv, d) / 4).populations(lv)
    assert np.allclose(a, b, atol=1e-4)


def test_step_halving_converges(p_levels):
    _, lv = p_levels
    i, j = nmr_pair(lv)
    d = nmr_drive(lv, (i, j), 2e4, 1e4)
    out, step = evolve_converged(lv, d, pure(lv, i), 4e-5)
    assert step <= max_step(lv, d)
    ref = evolve(lv, d, pure(lv, i), 4e-5, step=step / 8)
    assert np.allclose(out.populations(lv), ref.populations(lv), atol=1e-3)


def test_rabi_formula_matches_lab_frame(p_levels):
    H, lv = p_levels
    i, j = nmr_pair(lv)
    f = abs(lv.frequency(i, j)) * 1e6
    rate = f / 60
    d = nmr_drive(lv, (i, j), rate)
    times = np.linspace(0, 2 / rate, 81)[1:]
    lab = evolve_lab(H, d, pure(lv, i), times)
    trace = [s.populations(lv)[j] for s in lab]
    assert fit_rabi_frequency(times, trace) == pytest.approx(rate, rel=0.02)


def test_evolve_trace_matches_repeated_evolve(p_levels):
    H, lv = p_levels
    d = nmr_drive(lv, nmr_pair(lv), 2e4, 2e3)
    rho = thermal_state(H, 1.9)
    times = [1e-5, 2.5e-5, 4e-5]
    tr = evolve_trace(lv, d, rho, times)
    for t, s in zip(times, tr):
        assert np.allclose(s.rho, evolve(lv, d, rho, t).rho, atol=1e-6)


@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_readout_is_linear_in_initial_populations(a, b, c):
    lv = eigensystem(build_hamiltonian(P_SYS, StaticField.along(0.25)))
    i, j = nmr_pair(lv)
    d = nmr_drive(lv, (i, j), 2e4, 3e3)
    w = np.array([a, b, c, 1.0])
    w = w / w.sum()
    pair = esr_pairs(lv)[0]
    basis = [readout(lv, evolve(lv, d, pure(lv, k), 2e-5), pair) for k in range(4)]
    mixed = DensityState(sum(wk * pure(lv, k).rho for k, wk in enumerate(w)))
    assert readout(lv, evolve(lv, d, mixed, 2e-5), pair) == pytest.approx(np.dot(w, basis),
                                                                        abs=1e-10)


def test_sequence_preserves_physicality(donors, drive_models, field):
    st_ = DaviesSetup.prepare(donors["As"], field, 1)
    spec = DriveSpec("electric", drive_models["As"]).rotated(st_.rotation)
    t = st_.nmr_transitions("NMR-DQT")[0]
    h = spec.harmonic(st_.sys, st_.field, 5e4, abs(t.frequency) * 1e6 / 2)
    for s in evolve_trace(st_.levels, h, st_.inverted, np.linspace(1e-6, 3e-5, 7)):
        assert s.is_physical(1e-8)


# --- pulse sequences -----------------------------------------------------------------

def test_pulse_validation():
    with pytest.raises(ValueError):
        Pulse("rf-E2", 1e7, 1.0, 0.0)
    with pytest.raises(ValueError):
        Pulse("optical", 1e7, 1.0, 1e-6)
    with pytest.raises(ValueError):
        Pulse("rf-B2", 1e7, -1.0, 1e-6)
    with pytest.raises(ValueError):
        PulseSequence((), ((0, 1), 1.0))


def test_davies_sequence_matches_spectrum(donors, drive_models, field):
    st_ = DaviesSetup.prepare(donors["As"], field, 0)
    t = st_.nmr_transitions("NMR-SQT")[0]
    carrier = abs(t.frequency) * 1e6 / 2
    spec = DriveSpec("electric", drive_models["As"])
    b1 = 1e-4
    rate = 1e6 * abs(st_.levels.to_eigenbasis(
        __import__("ednmr.spincore", fromlist=["zeeman_operator"]).zeeman_operator(
            st_.sys, (b1, 0, 0)))[st_.pair])
    seq = PulseSequence((Pulse("microwave-B1", 7e9, b1, 1 / (2 * rate)), Delay(1e-6),
                         Pulse("rf-E2", carrier, 5e4, 5e-6)), (st_.pair, 1.0))
    rho0 = thermal_state(build_hamiltonian(st_.sys, st_.field), 1.9)
    got = run_sequence(st_.sys, st_.field, st_.levels, seq, rho0, spec.rotated(st_.rotation))
    ref = davies_endor_spectrum(donors["As"], field, spec, [carrier], 5e-6, 5e4, 0, setup=st_)
    assert got == pytest.approx(ref.extra["raw"][0], abs=1e-9)


# --- ENDOR spectra --------------------------------------------------------------------

def windows(species, channel, variant="default"):
    return survey(species, channel, variant)


def test_magnetic_arsenic_shows_six_sqts_and_no_dqts():
    ws = windows("As", "magnetic")
    sqt = [w for w in ws if w.transition.kind == "NMR-SQT" and w.harmonic == 1]
    assert len(sqt) == 6
    assert all(w.peak_contrast > 0.4 for w in sqt)
    others = [w for w in ws if w not in sqt]
    assert max(w.peak_contrast for w in others) < 1e-3
    for w in sqt:
        assert abs(w.peak_carrier - w.centre) <= w.resolution


def test_electric_arsenic_adds_half_frequency_dqts():
    ws = windows("As", "electric")
    dqt_half = [w for w in ws if w.transition.kind == "NMR-DQT" and w.harmonic == 2]
    assert len(dqt_half) == 4
    assert all(w.peak_contrast > 0.3 for w in dqt_half)


def test_electric_phosphorus_has_fundamental_and_subharmonic_sqts():
    ws = windows("P", "electric")
    assert not [w for w in ws if w.transition.kind == "NMR-DQT"]
    for n in (1, 2):
        sel = [w for w in ws if w.harmonic == n]
        assert len(sel) == 2
        assert all(w.peak_contrast > 0.3 for w in sel)


def test_magnetic_channel_never_drives_forbidden_lines():
    ws = windows("As", "magnetic")
    lv = DaviesSetup.prepare(*_as_default()).levels
    weights = {t.level_pair: t.operator_weight for t in transition_table(lv)}
    wmax = max(weights.values())
    for w in ws:
        if weights[w.transition.level_pair] < 1e-6 * wmax:
            assert w.peak_contrast < 1e-3


def _as_default():
    from ednmr.spincore import load_donors

    return load_donors()["As"], StaticField.along(0.25, (1, 1, 0))


def test_spectrum_csv_roundtrip(tmp_path, donors, field):
    spec = DriveSpec("magnetic", b2_direction=(0, 0, 1))
    res = davies_endor_spectrum(donors["P"], field, spec, np.linspace(5.39e7, 5.40e7, 5), 1e-5,
                                2e-5)
    res.to_csv(tmp_path / "s.csv")
    back = SpectrumResult.from_csv(tmp_path / "s.csv")
    assert np.array_equal(back.axis, res.axis)
    assert np.array_equal(back.signal, res.signal)
    assert np.array_equal(back.extra["raw"], res.extra["raw"])


# --- Rabi maps ------------------------------------------------------------------------

def _subharmonic_map(dressed):
    """As subharmonic map (pure quadratic drive) on the lowest SQT seen by line 0.

    With ``dressed`` the carrier sits on the Stark-shifted resonance; otherwise
    on the bare transition. Returns the map, the Rabi rates and the shifts.
    """
    sys_, field = _as_default()
    from ednmr.starkdrive import load_drive_models, stark_shift

    model = load_drive_models()[0]["As"].replace(linear={})
    st_ = DaviesSetup.prepare(sys_, field, 0)
    t = sorted((t for t in st_.nmr_transitions() if set(t.level_pair) & set(st_.pair)),
               key=lambda t: t.frequency)[0]
    f_ij = abs(t.frequency) * 1e6
    spec = DriveSpec("electric", model).rotated(st_.rotation)
    amps = np.array([0.0, 1e4, 2e4])
    durs = np.linspace(0, 4e-4, 161)
    out = []
    for a in amps:
        h = spec.harmonic(st_.sys, st_.field, a, f_ij / 2)
        rate = rabi_rate(st_.levels, h, t.level_pair, 2, tolerance_hz=1.0)
        shift = stark_shift(st_.levels, h, t.level_pair)
        carrier = (f_ij + shift) / 2 if dressed else f_ij / 2
        m = rabi_map(sys_, field, DriveSpec("electric", model), carrier, durs, [a], setup=st_)
        out.append((m, rate, shift))
    return out


@pytest.fixture(scope="module")
def as_subharmonic_maps():
    return {True: _subharmonic_map(True), False: _subharmonic_map(False)}


def test_zero_amplitude_row_is_flat(as_subharmonic_maps):
    m, rate, shift = as_subharmonic_maps[False][0]
    assert rate == 0.0 and shift == 0.0
    assert np.ptp(m.signal[:, 0]) == 0.0


def test_map_oscillation_matches_rabi_rate_on_dressed_resonance(as_subharmonic_maps):
    for m, rate, _ in as_subharmonic_maps[True][1:]:
        assert fit_rabi_frequency(m.durations, m.signal[:, 0]) == pytest.approx(rate, rel=0.03)


def test_bare_carrier_is_detuned_by_static_stark_shift(as_subharmonic_maps):
    # The static quadratic component shifts the line, so at the bare carrier the
    # trace nutates at the generalised rate sqrt(rate^2 + shift^2).
    for m, rate, shift in as_subharmonic_maps[False][1:]:
        assert abs(shift) > 0.3 * rate
        got = fit_rabi_frequency(m.durations, m.signal[:, 0])
        assert got == pytest.approx(math.hypot(rate, shift), rel=0.01)


def test_rabi_map_csv_layout(tmp_path, as_subharmonic_maps):
    m = as_subharmonic_maps[True][1][0]
    m.to_csv(tmp_path / "m.csv")
    back = RabiMap.from_csv(tmp_path / "m.csv")
    assert np.array_equal(back.amplitudes, m.amplitudes)
    assert np.array_equal(back.durations, m.durations)
    assert np.array_equal(back.signal, m.signal)


def test_fit_rabi_frequency_on_synthetic_cosine():
    t = np.linspace(0, 1e-3, 200)
    assert fit_rabi_frequency(t, 0.3 - 0.2 * np.cos(2 * np.pi * 7.3e3 * t)) == pytest.approx(
        7.3e3, rel=1e-6)


# --- Hahn echo calibration -----------------------------------------------------------

def test_echo_oracle_sin_cubed():
    for k in np.linspace(0.1, 2.0, 12):
        expected = abs(math.sin(k * math.pi / 2)) ** 3
        assert echo_amplitude(k * np.pi / 2, k * np.pi) == pytest.approx(expected, abs=1e-12)


def test_echo_independent_of_phase_sampling():
    assert echo_amplitude(1.1, 2.3, 16) == pytest.approx(echo_amplitude(1.1, 2.3, 64), abs=1e-12)


def test_power_sweep_peaks_at_nominal(donors, field):
    t90 = 50e-9
    b_nom = nominal_b1(donors["P"], field, t90)
    scales = np.linspace(0.5, 1.5, 101)
    curve = hahn_echo_power_sweep(donors["P"], field, b_nom * scales, (t90, 2 * t90))
    assert scales[np.argmax(curve)] == pytest.approx(1.0, abs=1e-12)
    assert curve.max() == pytest.approx(1.0, abs=1e-9)


def test_power_sweep_vanishes_at_double_nominal(donors, field):
    t90 = 50e-9
    b_nom = nominal_b1(donors["P"], field, t90)
    assert hahn_echo_power_sweep(donors["P"], field, [2 * b_nom], (t90, 2 * t90))[0] < 1e-9
