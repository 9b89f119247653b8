"""Pulse-sequence dynamics on the donor density matrix.

Microwave pulses are ideal selective rotations on one ESR pair. RF pulses are
integrated in the interaction frame of the static Hamiltonian: each drive
matrix element rotates at ``exp(i 2pi (f_ij -/+ n f) t)``, near-resonant terms
are kept and the result is stepped with piecewise-constant propagators.

Frequencies are in Hz, Hamiltonians in MHz, times in seconds.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import OptimizeWarning, curve_fit

from . import _kernels
from .errors import FitError, NumericalError, StepTooCoarseError
from .results import SpectrumResult, read_metadata_csv, write_metadata_csv
from .spincore import (
    CONSTANTS,
    LevelSet,
    SpinSystem,
    StaticField,
    Transition,
    align_to_field,
    build_hamiltonian,
    eigensystem,
    transition_table,
    zeeman_operator,
)
from .starkdrive import DriveModel, HarmonicDrive, harmonic_components, rabi_rate

TWO_PI = 2.0 * np.pi

CHANNELS = ("microwave-B1", "rf-B2", "rf-E2")

# A term is kept when its detuning is below this multiple of its own Rabi rate.
SECULAR_RATIO = 25.0

# Step must resolve the fastest retained term with this many points per period.
POINTS_PER_PERIOD = 20

# RF pulse length used in an ENDOR window whose target transition is not driven.
MAX_RF_DURATION = 10e-3


@dataclass(frozen=True)
class Pulse:
    channel: str
    carrier: float  # Hz
    amplitude: float  # T or V/m
    duration: float  # s
    phase: float = 0.0
    envelope: str = "rectangular"

    def __post_init__(self):
        if self.channel not in CHANNELS:
            raise ValueError(f"unknown channel {self.channel!r}")
        if not self.duration > 0:
            raise ValueError("pulse duration must be positive")
        if self.amplitude < 0:
            raise ValueError("pulse amplitude must be non-negative")
        if self.envelope != "rectangular":
            raise ValueError("only rectangular envelopes are supported")


@dataclass(frozen=True)
class Delay:
    duration: float

    def __post_init__(self):
        if self.duration < 0:
            raise ValueError("delay must be non-negative")


@dataclass(frozen=True)
class PulseSequence:
    elements: tuple
    readout: tuple  # (ESR level pair, sign)

    def __post_init__(self):
        if not self.elements:
            raise ValueError("pulse sequence is empty")
        object.__setattr__(self, "elements", tuple(self.elements))


@dataclass(frozen=True, eq=False)
class DensityState:
    rho: np.ndarray  # product basis

    def __post_init__(self):
        rho = np.asarray(self.rho, dtype=complex)
        if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
            raise ValueError("density matrix must be square")
        if abs(np.trace(rho) - 1) > 1e-9:
            raise ValueError("density matrix trace must be 1")
        if np.abs(rho - rho.conj().T).max() > 1e-9:
            raise ValueError("density matrix must be Hermitian")
        object.__setattr__(self, "rho", rho)

    def populations(self, levels: LevelSet) -> np.ndarray:
        return np.real(np.diag(levels.to_eigenbasis(self.rho)))

    def is_physical(self, tol=1e-8) -> bool:
        rho = self.rho
        return (abs(np.trace(rho) - 1) < tol and np.abs(rho - rho.conj().T).max() < tol
                and np.linalg.eigvalsh(0.5 * (rho + rho.conj().T)).min() > -tol)


# ---------------------------------------------------------------------------
# States and ideal pulses


def thermal_state(H, temperature, constants=CONSTANTS) -> DensityState:
    """Boltzmann state of ``H`` (MHz) at ``temperature`` (K)."""
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    w, v = np.linalg.eigh(np.asarray(H, dtype=complex))
    if np.isinf(temperature):
        p = np.full(len(w), 1.0 / len(w))
    else:
        x = constants.planck * (w - w.min()) * 1e6 / (constants.boltzmann * temperature)
        p = np.exp(-x)
        p /= p.sum()
    rho = (v * p) @ v.conj().T
    return DensityState(0.5 * (rho + rho.conj().T))


def selective_pulse(levels: LevelSet, pair, angle, phase=0.0) -> np.ndarray:
    """Unitary rotating the two eigenstates of ``pair`` by ``angle`` about an
    in-plane axis at ``phase``; identity on every other state."""
    i, j = pair
    if i == j:
        raise ValueError("pair must name two different levels")
    U = np.eye(levels.dim, dtype=complex)
    c, s = math.cos(angle / 2), math.sin(angle / 2)
    U[i, i] = U[j, j] = c
    U[i, j] = -1j * np.exp(-1j * phase) * s
    U[j, i] = -1j * np.exp(1j * phase) * s
    return levels.states @ U @ levels.states.conj().T


def apply_unitary(state: DensityState, U) -> DensityState:
    rho = U @ state.rho @ U.conj().T
    return DensityState(0.5 * (rho + rho.conj().T))


def free_evolution(levels: LevelSet, state: DensityState, duration) -> DensityState:
    ph = np.exp(-1j * TWO_PI * levels.energies * 1e6 * duration)
    U = (levels.states * ph) @ levels.states.conj().T
    return apply_unitary(state, U)


# ---------------------------------------------------------------------------
# Drives


def magnetic_drive(sys: SpinSystem, amplitude_t, direction=(1.0, 0.0, 0.0), carrier=1.0,
                   constants=CONSTANTS) -> HarmonicDrive:
    """Linearly polarised RF magnetic field ``b sin(2 pi f t)`` as a harmonic drive."""
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    V = zeeman_operator(sys, amplitude_t * d, constants)
    return HarmonicDrive(float(carrier), {1: 0.5 * (V + V.conj().T)})


def combine(*drives: HarmonicDrive) -> HarmonicDrive:
    """Sum harmonic drives sharing one carrier."""
    comps = {}
    for d in drives:
        for n, V in d.components.items():
            comps[n] = comps[n] + V if n in comps else V
    return HarmonicDrive(drives[0].carrier, comps)


@dataclass(frozen=True, eq=False)
class DriveSpec:
    """How an RF amplitude turns into a drive for a given spin system.

    ``channel`` is ``"electric"`` (amplitude in V/m, uses ``model``) or
    ``"magnetic"`` (amplitude in T along ``b2_direction``). ``leak_fraction``
    adds the suppressed field type: on the electric channel a magnetic field of
    ``leak_fraction * b_per_e * amplitude``; on the magnetic channel an electric
    field of ``leak_fraction * amplitude / b_per_e``.
    """

    channel: str
    model: DriveModel | None = None
    b2_direction: tuple = (1.0, 0.0, 0.0)
    leak_fraction: float = 0.0
    b_per_e: float = 0.0  # T per V/m at the same drive voltage

    def __post_init__(self):
        if self.channel not in ("electric", "magnetic"):
            raise ValueError("channel must be 'electric' or 'magnetic'")
        if self.channel == "electric" and self.model is None:
            raise ValueError("electric channel needs a DriveModel")

    def rotated(self, R) -> "DriveSpec":
        R = np.asarray(R, dtype=float)
        model = None if self.model is None else self.model.rotated(R)
        return DriveSpec(self.channel, model, tuple(R @ np.asarray(self.b2_direction, float)),
                         self.leak_fraction, self.b_per_e)

    def harmonic(self, sys: SpinSystem, field: StaticField, amplitude, carrier) -> HarmonicDrive:
        parts = []
        leak = self.leak_fraction and self.b_per_e
        if self.channel == "electric":
            parts.append(harmonic_components(self.model, sys, field, amplitude, carrier))
            if leak:
                parts.append(magnetic_drive(sys, self.leak_fraction * self.b_per_e * amplitude,
                                            self.b2_direction, carrier))
        else:
            parts.append(magnetic_drive(sys, amplitude, self.b2_direction, carrier))
            if leak and self.model is not None:
                e = self.leak_fraction * amplitude / self.b_per_e
                parts.append(harmonic_components(self.model, sys, field, e, carrier))
        return combine(*[p for p in parts if p.components] or parts[:1])


# ---------------------------------------------------------------------------
# Interaction-frame evolution


@dataclass(frozen=True)
class DriveTerms:
    """Retained interaction-frame terms ``amp * exp(i 2pi det t)`` at ``(ii, jj)``."""

    ii: np.ndarray
    jj: np.ndarray
    amp: np.ndarray  # MHz
    det: np.ndarray  # Hz

    @property
    def max_rate(self) -> float:
        """Fastest frequency (Hz) among the retained terms."""
        if len(self.ii) == 0:
            return 0.0
        return float(np.max(np.abs(self.det) + 2e6 * np.abs(self.amp)))

    def is_static(self, duration) -> bool:
        return len(self.det) == 0 or float(np.abs(self.det).max()) * duration < 1e-6


def drive_terms(levels: LevelSet, drive: HarmonicDrive, window_hz=None) -> DriveTerms:
    """Expand ``drive`` into rotating terms and apply the secular retention rule.

    With ``window_hz`` set, a term is kept when its detuning is within the
    window. Otherwise each term is kept when its detuning is below
    ``SECULAR_RATIO`` times its own Rabi rate (diagonal static shifts always
    stay).
    """
    f = drive.carrier
    fij = (levels.energies[:, None] - levels.energies[None, :]) * 1e6
    ii, jj, amp, det = [], [], [], []
    idx_i, idx_j = np.indices(fij.shape)
    for n, V in drive.components.items():
        Ve = levels.to_eigenbasis(V)
        if n == 0:
            parts = [(Ve, fij)]
        elif n == 1:
            parts = [(Ve / 2j, fij + f), (-Ve / 2j, fij - f)]
        else:
            parts = [(Ve / 2, fij + 2 * f), (Ve / 2, fij - 2 * f)]
        for a, d in parts:
            mag = np.abs(a)
            if window_hz is None:
                keep = (np.abs(d) <= SECULAR_RATIO * 2e6 * mag) & (mag > 0)
                keep |= (idx_i == idx_j) & (d == 0) & (mag > 0)
            else:
                keep = (np.abs(d) <= window_hz) & (mag > 0)
            ii.append(idx_i[keep])
            jj.append(idx_j[keep])
            amp.append(a[keep])
            det.append(d[keep])
    cat = lambda xs, dt: np.concatenate(xs).astype(dt) if xs else np.zeros(0, dt)  # noqa: E731
    return DriveTerms(cat(ii, np.int64), cat(jj, np.int64), cat(amp, complex), cat(det, float))


def max_step(levels: LevelSet, drive: HarmonicDrive, window_hz=None) -> float:
    """Longest allowed step: 1/20 of the fastest retained period."""
    rate = drive_terms(levels, drive, window_hz).max_rate
    return np.inf if rate == 0 else 1.0 / (POINTS_PER_PERIOD * rate)


def _to_schrodinger(levels, rho_e, t):
    ph = np.exp(-1j * TWO_PI * levels.energies * 1e6 * t)
    return rho_e * ph[:, None] * ph[None, :].conj()


def evolve_trace(levels: LevelSet, drive: HarmonicDrive, state: DensityState, times,
                 step=None, window_hz=None) -> list[DensityState]:
    """States at each time in ``times`` (ascending, seconds) under ``drive``.

    ``step`` defaults to the largest step allowed by the 20-points-per-period
    rule; an explicit step above that limit raises :class:`StepTooCoarseError`.
    A drive whose retained terms do not rotate over the run is propagated
    exactly.
    """
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or np.any(np.diff(times) < 0) or (times.size and times[0] < 0):
        raise ValueError("times must be ascending and non-negative")
    if times.size == 0:
        return []
    terms = drive_terms(levels, drive, window_hz)
    limit = np.inf if terms.max_rate == 0 else 1.0 / (POINTS_PER_PERIOD * terms.max_rate)
    if step is not None and step > limit * (1 + 1e-12):
        raise StepTooCoarseError(step, limit)
    rho_e = levels.to_eigenbasis(state.rho)
    T = float(times[-1])
    if terms.is_static(T):
        H = np.zeros((levels.dim, levels.dim), dtype=complex)
        np.add.at(H, (terms.ii, terms.jj), terms.amp)
        H = 0.5 * (H + H.conj().T)
        w, v = np.linalg.eigh(H)
        ph = np.exp(-1j * TWO_PI * 1e6 * np.outer(times, w))
        U = np.einsum("ak,tk,bk->tab", v, ph, v.conj())
        rhos = U @ rho_e @ np.conj(np.swapaxes(U, 1, 2))
    else:
        dt_max = limit if step is None else step
        rhos = np.empty((len(times), levels.dim, levels.dim), dtype=complex)
        current, t_prev = rho_e, 0.0
        # each segment between requested times gets its own uniform step
        for k, t in enumerate(times):
            seg = t - t_prev
            if seg > 0:
                n = max(1, math.ceil(seg / dt_max - 1e-9))
                shifted = DriveTerms(terms.ii, terms.jj,
                                     terms.amp * np.exp(1j * TWO_PI * terms.det * t_prev),
                                     terms.det)
                current = _kernels.piecewise_propagate(
                    current, shifted.ii, shifted.jj, 1e6 * shifted.amp, shifted.det,
                    seg / n, n, [n])[0]
            rhos[k] = current
            t_prev = t
    out = []
    for t, r in zip(times, rhos):
        r = _to_schrodinger(levels, r, t)
        rho = levels.states @ r @ levels.states.conj().T
        out.append(DensityState(0.5 * (rho + rho.conj().T)))
    return out


def evolve(levels: LevelSet, drive: HarmonicDrive, state: DensityState, duration,
           step=None, window_hz=None) -> DensityState:
    """State after ``duration`` seconds under ``drive`` (see :func:`evolve_trace`)."""
    if duration < 0:
        raise ValueError("duration must be non-negative")
    return evolve_trace(levels, drive, state, [duration], step, window_hz)[0]


def evolve_converged(levels: LevelSet, drive: HarmonicDrive, state: DensityState, duration,
                     signal=None, rtol=1e-3, max_halvings=8, window_hz=None):
    """Evolve with the default step, then halve it until ``signal`` changes by
    less than ``rtol`` (relative to its scale) between successive runs.

    ``signal`` maps a :class:`DensityState` to an array; it defaults to the
    eigenbasis populations. Returns ``(state, step)``.
    """
    if signal is None:
        signal = lambda s: s.populations(levels)  # noqa: E731
    step = max_step(levels, drive, window_hz)
    if not np.isfinite(step) or step >= duration:
        return evolve(levels, drive, state, duration, window_hz=window_hz), step
    prev = evolve(levels, drive, state, duration, step, window_hz)
    for _ in range(max_halvings):
        step /= 2
        cur = evolve(levels, drive, state, duration, step, window_hz)
        a, b = np.asarray(signal(prev), float), np.asarray(signal(cur), float)
        scale = max(float(np.abs(b).max()), 1e-12)
        if float(np.abs(a - b).max()) < rtol * scale:
            return cur, step
        prev = cur
    raise NumericalError(f"step halving did not converge to rtol={rtol} "
                         f"after {max_halvings} halvings")


def evolve_lab(H0, drive: HarmonicDrive, state: DensityState, times, points_per_period=128):
    """Brute-force lab-frame RK4 integration of ``H0 + dH(t)``; no rotating-wave
    approximation. Used as a reference for :func:`evolve_trace`."""
    H0 = np.asarray(H0, dtype=complex) * 1e6
    V, freq, phase = [], [], []
    f = drive.carrier
    for n, Vn in drive.components.items():
        V.append(np.asarray(Vn) * 1e6)
        if n == 0:
            freq.append(0.0), phase.append(0.0)
        elif n == 1:
            freq.append(f), phase.append(-np.pi / 2)
        else:
            freq.append(2 * f), phase.append(0.0)
    V = np.array(V) if V else np.zeros((0,) + H0.shape, complex)
    w = np.linalg.eigvalsh(H0)
    fastest = max(w.max() - w.min(), 2 * f, 1.0)
    times = np.asarray(times, dtype=float)
    dt = 1.0 / (points_per_period * fastest)
    n_total = math.ceil(times[-1] / dt)
    dt = times[-1] / n_total if n_total else dt
    record = np.rint(times / dt).astype(np.int64) if n_total else np.zeros(len(times), np.int64)
    Us = _kernels.rk4_unitary(H0, V, np.array(freq), np.array(phase), dt, n_total, record)
    out = []
    for U in Us:
        # RK4 drifts slightly off the unitary group; use the nearest unitary
        w, _, vh = np.linalg.svd(U)
        U = w @ vh
        rho = U @ state.rho @ U.conj().T
        out.append(DensityState(0.5 * (rho + rho.conj().T)))
    return out


# ---------------------------------------------------------------------------
# Davies ENDOR


def esr_pairs(levels: LevelSet) -> list[tuple]:
    """ESR level pairs ordered by nuclear projection, highest mI first."""
    pairs = [t.level_pair for t in transition_table(levels, "Sx") if t.kind == "ESR"]
    return sorted(pairs, key=lambda p: -levels.labels[p[0]][1])


def readout(levels: LevelSet, state: DensityState, pair, sign=1.0) -> float:
    """Population difference (lower minus upper level) across an ESR pair."""
    p = state.populations(levels)
    lo, hi = sorted(pair, key=lambda k: levels.energies[k])
    return float(sign * (p[lo] - p[hi]))


def esr_rabi_rate(sys: SpinSystem, levels: LevelSet, pair, b1_t, direction=(1.0, 0.0, 0.0)):
    V = zeeman_operator(sys, b1_t * np.asarray(direction, float) / np.linalg.norm(direction))
    return float(abs(levels.to_eigenbasis(V)[pair])) * 1e6


def run_sequence(sys: SpinSystem, field: StaticField, levels: LevelSet, sequence: PulseSequence,
                 state: DensityState, rf: DriveSpec | None = None, b1_scale=1.0,
                 step=None) -> float:
    """Apply ``sequence`` to ``state`` and return the readout signal.

    Microwave pulses rotate the readout ESR pair by ``2 pi Omega t`` (times
    ``b1_scale``); RF pulses are integrated with ``rf``. ``sys``/``field`` must
    already be in the frame of ``levels``.
    """
    pair, sign = sequence.readout
    for el in sequence.elements:
        if isinstance(el, Delay):
            state = free_evolution(levels, state, el.duration)
        elif el.channel == "microwave-B1":
            angle = TWO_PI * esr_rabi_rate(sys, levels, pair, el.amplitude) * el.duration
            state = apply_unitary(state, selective_pulse(levels, pair, angle * b1_scale, el.phase))
        else:
            if rf is None:
                raise ValueError("RF pulse in sequence but no DriveSpec given")
            want = "electric" if el.channel == "rf-E2" else "magnetic"
            spec = rf if rf.channel == want else DriveSpec(want, rf.model, rf.b2_direction)
            drv = spec.harmonic(sys, field, el.amplitude, el.carrier)
            state = evolve(levels, drv, state, el.duration, step)
    return readout(levels, state, pair, sign)


def contrast(signal, reference):
    """ENDOR contrast ``|S - S0| / (2 |S0|)``; 1 means the inverted line fully recovered."""
    return np.abs(np.asarray(signal) - reference) / (2 * abs(reference))


@dataclass
class DaviesSetup:
    """Aligned system, levels and the post-inversion state shared by a scan."""

    sys: SpinSystem
    field: StaticField
    levels: LevelSet
    rotation: np.ndarray
    pair: tuple
    inverted: DensityState
    reference: float

    @classmethod
    def prepare(cls, sys: SpinSystem, field: StaticField, probed_line=0, temperature=1.9,
                b1_scale=1.0, constants=CONSTANTS) -> "DaviesSetup":
        s, f, R = align_to_field(sys, field)
        H = build_hamiltonian(s, f, constants)
        levels = eigensystem(H)
        pairs = esr_pairs(levels)
        if not 0 <= probed_line < len(pairs):
            raise ValueError(f"probed ESR line {probed_line} not present ({len(pairs)} lines)")
        pair = pairs[probed_line]
        rho0 = thermal_state(H, temperature, constants)
        inv = apply_unitary(rho0, selective_pulse(levels, pair, np.pi * b1_scale))
        return cls(s, f, levels, R, pair, inv, readout(levels, inv, pair))

    def nmr_transitions(self, kind="NMR-SQT"):
        return [t for t in transition_table(self.levels, "Ix") if t.kind == kind]


def _pmap(fn, items, threads):
    if threads and threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


def davies_endor_spectrum(sys: SpinSystem, field: StaticField, drive: DriveSpec, rf_grid,
                          rf_duration, rf_amplitude, probed_line=0, temperature=1.9,
                          b1_scale=1.0, threads=1, setup: DaviesSetup | None = None):
    """Davies ENDOR signal versus RF carrier frequency.

    Thermal state, selective microwave inversion of the probed ESR line, one
    rectangular RF pulse, population readout. ``signal`` is the ENDOR contrast;
    ``extra['raw']`` is the raw population difference.
    """
    st = setup or DaviesSetup.prepare(sys, field, probed_line, temperature, b1_scale)
    spec = drive.rotated(st.rotation)
    base = spec.harmonic(st.sys, st.field, rf_amplitude, 1.0)
    grid = np.asarray(rf_grid, dtype=float)

    def one(f):
        out = evolve(st.levels, base.at_carrier(f), st.inverted, rf_duration)
        return readout(st.levels, out, st.pair)

    raw = np.array(_pmap(one, grid, threads))
    meta = {
        "species": sys.label, "b0_T": list(field.b0), "channel": drive.channel,
        "rf_duration_s": rf_duration, "rf_amplitude": rf_amplitude,
        "probed_line": probed_line, "grid": f"{grid[0]!r}..{grid[-1]!r} Hz ({len(grid)} points)",
    }
    return SpectrumResult(grid, contrast(raw, st.reference), meta, "rf_hz", {"raw": raw})


@dataclass
class EndorWindow:
    """ENDOR scan around one predicted feature ``f_ij / harmonic``, every ESR line probed."""

    transition: Transition
    harmonic: int
    centre: float  # Hz
    rf_duration: float  # s
    grid: np.ndarray  # Hz
    per_line: np.ndarray  # contrast, shape (lines, points)

    @property
    def signal(self) -> np.ndarray:
        """Largest contrast over the probed lines at each carrier."""
        return self.per_line.max(axis=0)

    @property
    def resolution(self) -> float:
        return float(self.grid[1] - self.grid[0]) if len(self.grid) > 1 else np.inf

    @property
    def peak_contrast(self) -> float:
        return float(self.signal.max())

    @property
    def peak_carrier(self) -> float:
        return float(self.grid[int(np.argmax(self.signal))])


def endor_survey(sys: SpinSystem, field: StaticField, drive: DriveSpec, amplitude, rf_span,
                 rf_points, temperature=1.9, kinds=("NMR-SQT", "NMR-DQT"), harmonics=(1, 2),
                 threads=1, max_duration=MAX_RF_DURATION) -> list[EndorWindow]:
    """Davies ENDOR around every NMR transition of ``kinds`` at each harmonic.

    One probed ESR line only shows transitions sharing a level with it, so
    each window is scanned on every line. The RF pulse in a window is a pi
    pulse for that window's own transition at its nominal Rabi rate, or
    ``max_duration`` when the transition is not driven at all.
    """
    setups = [DaviesSetup.prepare(sys, field, k, temperature) for k in range(sys.nuclear_dim)]
    first = setups[0]
    spec = drive.rotated(first.rotation)
    out = []
    for kind in kinds:
        for t in first.nmr_transitions(kind):
            f_ij = abs(t.frequency) * 1e6
            for n in harmonics:
                h = spec.harmonic(first.sys, first.field, amplitude, f_ij / n)
                rate = rabi_rate(first.levels, h, t.level_pair, n, tolerance_hz=1.0)
                dur = max_duration if rate < 1.0 / (2 * max_duration) else 1.0 / (2 * rate)
                grid = np.linspace(f_ij / n - rf_span, f_ij / n + rf_span, rf_points)
                lines = np.stack([
                    davies_endor_spectrum(sys, field, drive, grid, dur, amplitude, k, temperature,
                                          threads=threads, setup=st).signal
                    for k, st in enumerate(setups)])
                out.append(EndorWindow(t, n, f_ij / n, dur, grid, lines))
    return sorted(out, key=lambda w: w.centre)


@dataclass
class RabiMap:
    durations: np.ndarray
    amplitudes: np.ndarray
    signal: np.ndarray  # shape (len(durations), len(amplitudes))
    raw: np.ndarray
    metadata: dict = field(default_factory=dict)

    def to_csv(self, path) -> None:
        header = ["duration_s\\amplitude"] + [repr(float(a)) for a in self.amplitudes]
        rows = [[t, *self.signal[k]] for k, t in enumerate(self.durations)]
        write_metadata_csv(path, self.metadata, header, rows)

    @classmethod
    def from_csv(cls, path) -> "RabiMap":
        meta, header, body = read_metadata_csv(path)
        amps = np.array([float(x) for x in header[1:]])
        return cls(body[:, 0], amps, body[:, 1:], np.full(body[:, 1:].shape, np.nan), meta)


def rabi_traces(setup: DaviesSetup, drive: DriveSpec, carrier, durations, amplitudes,
                threads=1):
    """Raw Davies readout for each (duration, amplitude); shape (durations, amplitudes)."""
    spec = drive.rotated(setup.rotation)
    durations = np.asarray(durations, dtype=float)

    def one(a):
        if a == 0:
            return np.full(len(durations), setup.reference)
        drv = spec.harmonic(setup.sys, setup.field, a, carrier)
        states = evolve_trace(setup.levels, drv, setup.inverted, durations)
        return np.array([readout(setup.levels, s, setup.pair) for s in states])

    cols = _pmap(one, list(np.asarray(amplitudes, dtype=float)), threads)
    return np.stack(cols, axis=1)


def rabi_map(sys: SpinSystem, field: StaticField, drive: DriveSpec, carrier, durations,
             amplitudes, probed_line=0, temperature=1.9, b1_scale=1.0, threads=1,
             setup: DaviesSetup | None = None) -> RabiMap:
    """Davies ENDOR readout on a grid of RF pulse lengths and amplitudes."""
    st = setup or DaviesSetup.prepare(sys, field, probed_line, temperature, b1_scale)
    raw = rabi_traces(st, drive, carrier, durations, amplitudes, threads)
    meta = {"species": sys.label, "b0_T": list(field.b0), "channel": drive.channel,
            "carrier_hz": carrier, "probed_line": probed_line}
    return RabiMap(np.asarray(durations, float), np.asarray(amplitudes, float),
                   contrast(raw, st.reference), raw, meta)


def fit_rabi_frequency(times, trace) -> float:
    """Oscillation frequency (Hz) of a sampled Rabi trace.

    FFT peak as the starting guess, refined by a least-squares cosine fit.
    """
    t = np.asarray(times, dtype=float)
    y = np.asarray(trace, dtype=float)
    if len(t) < 8 or np.ptp(y) == 0:
        raise FitError("trace too short or flat to fit")
    dt = t[1] - t[0]
    pad = 16 * len(y)
    spec = np.abs(np.fft.rfft(y - y.mean(), pad))
    freqs = np.fft.rfftfreq(pad, dt)
    f0 = freqs[1 + np.argmax(spec[1:])]
    model = lambda tt, a, f, p, c: a * np.cos(TWO_PI * f * tt + p) + c  # noqa: E731
    p0 = [np.ptp(y) / 2, f0, 0.0, y.mean()]
    best = None
    for phase in (0.0, np.pi / 2, np.pi, -np.pi / 2):
        p0[2] = phase
        try:
            # only the best-fit parameters are used, so a singular covariance is harmless
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", OptimizeWarning)
                popt, _ = curve_fit(model, t, y, p0=p0, maxfev=20000)
        except RuntimeError:
            continue
        err = np.sum((model(t, *popt) - y) ** 2)
        if best is None or err < best[0]:
            best = (err, popt)
    if best is None:
        raise FitError("cosine fit did not converge")
    return float(abs(best[1][1]))


# ---------------------------------------------------------------------------
# Hahn echo B1 calibration


def echo_amplitude(theta1, theta2, phases=16) -> float:
    """Refocused echo of a two-pulse ``theta1 - tau - theta2 - tau`` sequence.

    Computed by composing the rotations on a spin-1/2 and averaging the
    transverse signal over precession phases; normalised so ideal 90/180
    pulses give 1.
    """
    sx = np.array([[0, 1], [1, 0]], complex) / 2
    sm = np.array([[0, 0], [1, 0]], complex)
    rx = lambda a: np.cos(a / 2) * np.eye(2) - 2j * np.sin(a / 2) * sx  # noqa: E731
    rho0 = np.diag([0.5, -0.5]).astype(complex)
    r1 = rx(theta1)
    acc = 0.0 + 0.0j
    for k in range(phases):
        phi = TWO_PI * k / phases
        uz = np.diag([np.exp(-0.5j * phi), np.exp(0.5j * phi)])
        U = uz @ rx(theta2) @ uz @ r1
        acc += np.trace(U @ rho0 @ U.conj().T @ sm)
    return float(2 * abs(acc / phases))


def hahn_echo_power_sweep(sys: SpinSystem, field: StaticField, b1_amplitudes, durations,
                          probed_line=0, b1_scales=(1.0,), weights=None):
    """Echo amplitude versus microwave amplitude for a fixed pulse-length template.

    ``durations`` is ``(t_90, t_180)``. ``b1_scales``/``weights`` describe a
    distribution of local B1 over the probed ensemble.
    """
    t90, t180 = durations
    s, f, _ = align_to_field(sys, field)
    levels = eigensystem(build_hamiltonian(s, f))
    pair = esr_pairs(levels)[probed_line]
    scales = np.asarray(b1_scales, dtype=float)
    w = np.full(len(scales), 1.0 / len(scales)) if weights is None else np.asarray(weights, float)
    out = []
    for b1 in np.asarray(b1_amplitudes, dtype=float):
        om = esr_rabi_rate(s, levels, pair, b1)
        vals = [echo_amplitude(TWO_PI * om * t90 * k, TWO_PI * om * t180 * k) for k in scales]
        out.append(math.fsum(wi * v for wi, v in zip(w, vals)))
    return np.array(out)


def nominal_b1(sys: SpinSystem, field: StaticField, t90, probed_line=0) -> float:
    """Microwave amplitude (T) making a pulse of length ``t90`` a pi/2 rotation."""
    s, f, _ = align_to_field(sys, field)
    levels = eigensystem(build_hamiltonian(s, f))
    pair = esr_pairs(levels)[probed_line]
    per_tesla = esr_rabi_rate(s, levels, pair, 1.0)
    return 0.25 / (per_tesla * t90)


def nmr_pairs_by_kind(levels: LevelSet, kind: str) -> Sequence:
    return [t for t in transition_table(levels, "Ix") if t.kind == kind]
