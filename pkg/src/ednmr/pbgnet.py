"""Transfer-matrix model of a coplanar photonic bandgap resonator.

The resonator is a cascade of uniform transmission-line sections (alternating
high/low impedance Bragg mirrors around a half-wave defect). Each section is a
lossy-line ABCD two-port; the cascade gives S21 between matched ports.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.constants import c as C_LIGHT
from scipy.optimize import OptimizeWarning, brentq, curve_fit, minimize_scalar
from scipy.signal import find_peaks

from .errors import FitError
from .results import SpectrumResult

NEPER_PER_DB = math.log(10.0) / 20.0


class NoBandgapError(ValueError):
    """No region of the spectrum lies below the threshold."""


@dataclass(frozen=True)
class LineSection:
    impedance: float  # ohm
    length: float  # m
    eff_permittivity: float = 1.0
    loss_db_per_m: float = 0.0

    def __post_init__(self):
        if not self.impedance > 0:
            raise ValueError("impedance must be positive")
        if self.length < 0:
            raise ValueError("length must be non-negative")
        if self.eff_permittivity < 1:
            raise ValueError("effective permittivity must be >= 1")
        if self.loss_db_per_m < 0:
            raise ValueError("loss must be non-negative")

    def phase_velocity(self) -> float:
        return C_LIGHT / math.sqrt(self.eff_permittivity)


@dataclass(frozen=True)
class TransmissionNetwork:
    sections: tuple
    port_impedance: float = 50.0

    def __post_init__(self):
        object.__setattr__(self, "sections", tuple(self.sections))
        if not self.sections:
            raise ValueError("network has no sections")
        if not self.port_impedance > 0:
            raise ValueError("port impedance must be positive")

    def reversed(self) -> "TransmissionNetwork":
        return TransmissionNetwork(self.sections[::-1], self.port_impedance)

    def with_loss(self, loss_db_per_m) -> "TransmissionNetwork":
        return TransmissionNetwork(tuple(replace(s, loss_db_per_m=loss_db_per_m) for s in self.sections),
                                   self.port_impedance)

    def with_permittivity(self, eps_high=None, eps_low=None) -> "TransmissionNetwork":
        """Set the effective permittivity separately for sections above/below the port impedance."""
        out = []
        for s in self.sections:
            if s.impedance > self.port_impedance and eps_high is not None:
                s = replace(s, eff_permittivity=eps_high)
            elif s.impedance < self.port_impedance and eps_low is not None:
                s = replace(s, eff_permittivity=eps_low)
            out.append(s)
        return TransmissionNetwork(tuple(out), self.port_impedance)

    @classmethod
    def from_file(cls, path=None) -> "TransmissionNetwork":
        """Parse a network file; ``None`` loads the shipped resonator."""
        if path is None:
            text = resources.files("ednmr.data").joinpath("device_pbg.net").read_text()
        else:
            text = Path(path).read_text()
        port = 50.0
        sections = []
        for n, line in enumerate(text.splitlines(), 1):
            s = line.strip()
            if not s:
                continue
            if s.startswith("#"):
                key, _, val = s[1:].partition(":")
                if key.strip() == "port_impedance_ohm":
                    port = float(val)
                continue
            parts = [p.strip() for p in s.split(",")]
            if len(parts) != 4:
                raise ValueError(f"line {n}: expected 4 comma-separated values")
            try:
                z, length, eps, loss = map(float, parts)
            except ValueError:
                raise ValueError(f"line {n}: non-numeric section entry") from None
            sections.append(LineSection(z, length, eps, loss))
        return cls(tuple(sections), port)

    def to_text(self) -> str:
        lines = [f"# port_impedance_ohm: {self.port_impedance!r}",
                 "# impedance_ohm, length_m, eps_eff, loss_db_per_m"]
        lines += [f"{s.impedance!r}, {s.length!r}, {s.eff_permittivity!r}, {s.loss_db_per_m!r}"
                  for s in self.sections]
        return "\n".join(lines) + "\n"


def bragg_network(z_high=95.0, z_low=30.0, section_length=4e-3, periods=5, cavity_impedance=50.0,
                  cavity_length=6e-3, eff_permittivity=7.72, loss_db_per_m=0.0,
                  port_impedance=50.0) -> TransmissionNetwork:
    """Mirror of ``periods`` (low, high) pairs, cavity, then the mirror image."""
    lo = LineSection(z_low, section_length, eff_permittivity, loss_db_per_m)
    hi = LineSection(z_high, section_length, eff_permittivity, loss_db_per_m)
    cav = LineSection(cavity_impedance, cavity_length, eff_permittivity, loss_db_per_m)
    mirror = [lo, hi] * periods
    return TransmissionNetwork(tuple(mirror + [cav] + mirror[::-1]), port_impedance)


def abcd(section: LineSection, f) -> np.ndarray:
    """ABCD matrix of one section at frequency ``f`` (Hz); shape ``f.shape + (2, 2)``."""
    f = np.asarray(f, dtype=float)
    if np.any(f <= 0):
        raise ValueError("frequency must be positive")
    beta = 2 * np.pi * f * math.sqrt(section.eff_permittivity) / C_LIGHT
    alpha = section.loss_db_per_m * NEPER_PER_DB
    Z = section.impedance
    out = np.empty(f.shape + (2, 2), dtype=complex)
    if alpha == 0:
        c, s = np.cos(beta * section.length), np.sin(beta * section.length)
        out[..., 0, 0] = c
        out[..., 0, 1] = 1j * Z * s
        out[..., 1, 0] = 1j * s / Z
        out[..., 1, 1] = c
    else:
        gl = (alpha + 1j * beta) * section.length
        ch, sh = np.cosh(gl), np.sinh(gl)
        out[..., 0, 0] = ch
        out[..., 0, 1] = Z * sh
        out[..., 1, 0] = sh / Z
        out[..., 1, 1] = ch
    return out


def cascade(network: TransmissionNetwork, f) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    M = np.broadcast_to(np.eye(2, dtype=complex), f.shape + (2, 2)).copy()
    for sec in network.sections:
        M = M @ abcd(sec, f)
    return M


def s_parameters(network: TransmissionNetwork, f):
    """``(S11, S21)`` between ports of impedance ``network.port_impedance``."""
    M = cascade(network, f)
    A, B, Cc, D = M[..., 0, 0], M[..., 0, 1], M[..., 1, 0], M[..., 1, 1]
    Z0 = network.port_impedance
    den = A + B / Z0 + Cc * Z0 + D
    return (A + B / Z0 - Cc * Z0 - D) / den, 2.0 / den


def s21(network: TransmissionNetwork, f):
    """Forward transmission ``2 / (A + B/Z0 + C Z0 + D)``."""
    return s_parameters(network, f)[1]


def sweep_s21(network: TransmissionNetwork, f_grid) -> SpectrumResult:
    f = np.asarray(f_grid, dtype=float)
    if f.ndim != 1 or f.size == 0 or np.any(f <= 0) or np.any(np.diff(f) <= 0):
        raise ValueError("frequency grid must be ascending and positive")
    t = s21(network, f)
    db = 20 * np.log10(np.maximum(np.abs(t), 1e-300))
    meta = {"sections": len(network.sections), "port_impedance_ohm": network.port_impedance,
            "grid": f"{f[0]!r}..{f[-1]!r} Hz ({len(f)} points)"}
    return SpectrumResult(f, db, meta, "f_hz", {"s21_phase_rad": np.angle(t)}, "s21_db")


def _runs(mask):
    """``(start, stop)`` index pairs of contiguous True runs (stop exclusive)."""
    m = np.concatenate([[False], mask, [False]]).astype(int)
    d = np.diff(m)
    return list(zip(np.nonzero(d == 1)[0], np.nonzero(d == -1)[0]))


def _crossing(f, y, i, j, level):
    """Frequency where ``y`` crosses ``level`` between samples ``i`` and ``j``."""
    if y[j] == y[i]:
        return f[i]
    return f[i] + (level - y[i]) * (f[j] - f[i]) / (y[j] - y[i])


def bandgap_edges(spectrum: SpectrumResult, threshold_db=-20.0, peak_window_hz=None):
    """Outer edges ``(f_low, f_high)`` of the stop band.

    Sub-threshold runs separated by an above-threshold stretch narrower than
    ``peak_window_hz`` (the defect mode; default 5% of the span midpoint) are
    joined; the widest joined region is the gap.
    """
    f, y = np.asarray(spectrum.axis), np.asarray(spectrum.signal)
    runs = _runs(y < threshold_db)
    if not runs:
        raise NoBandgapError(f"no frequency below {threshold_db} dB")
    if peak_window_hz is None:
        peak_window_hz = 0.05 * 0.5 * (f[0] + f[-1])
    merged = [list(runs[0])]
    for a, b in runs[1:]:
        if f[a] - f[merged[-1][1] - 1] < peak_window_hz:
            merged[-1][1] = b
        else:
            merged.append([a, b])
    a, b = max(merged, key=lambda r: f[r[1] - 1] - f[r[0]])
    lo = _crossing(f, y, a - 1, a, threshold_db) if a > 0 else f[0]
    hi = _crossing(f, y, b - 1, b, threshold_db) if b < len(f) else f[-1]
    return float(lo), float(hi)


def quarter_wave_design(f_center, eff_permittivity) -> float:
    """Section length (m) that is a quarter wave at ``f_center``."""
    if not (f_center > 0 and eff_permittivity > 0):
        raise ValueError("inputs must be positive")
    return C_LIGHT / (4.0 * f_center * math.sqrt(eff_permittivity))


def quarter_wave_gap_width(z_high, z_low) -> float:
    """Fractional stop-band width of an ideal quarter-wave stack."""
    return 4.0 / np.pi * math.asin(abs(z_high - z_low) / (z_high + z_low))


@dataclass(frozen=True)
class ResonanceFit:
    f0: float  # Hz
    loaded_q: float
    insertion_loss_db: float
    q_3db: float


def _lorentzian(f, p0, f0, width, floor):
    return p0 / (1.0 + ((f - f0) / (0.5 * width)) ** 2) + floor


def _half_power_width(f, p):
    k = int(np.argmax(p))
    half = 0.5 * (p[k] + p.min())
    left = np.nonzero(p[:k] < half)[0]
    right = np.nonzero(p[k:] < half)[0]
    if len(left) == 0 or len(right) == 0:
        raise FitError("half-power points are outside the window")
    i, j = left[-1], k + right[0]
    return _crossing(f, p, j - 1, j, half) - _crossing(f, p, i, i + 1, half)


def resonance_fit(f, s21_values) -> ResonanceFit:
    """Lorentzian fit of ``|S21|^2`` over a window containing one resonance.

    ``s21_values`` are complex transmissions (or magnitudes). Raises
    :class:`FitError` when there is no clear single peak.
    """
    f = np.asarray(f, dtype=float)
    p = np.abs(np.asarray(s21_values)) ** 2
    if len(f) < 7:
        raise FitError("window too small for a resonance fit")
    span = p.max() - p.min()
    if not span > 0:
        raise FitError("flat window: no peak")
    peaks, _ = find_peaks(np.concatenate([[p.min()], p, [p.min()]]), prominence=0.5 * span)
    if len(peaks) != 1:
        raise FitError(f"expected one peak in window, found {len(peaks)}")
    k = peaks[0] - 1
    w3 = _half_power_width(f, p)
    # fit in units centred on the peak so all parameters are order one
    u = (f - f[k]) / w3
    q = p / p[k]
    try:
        with warnings.catch_warnings():
            # an exact model leaves no residual to estimate a covariance from; it is unused
            warnings.simplefilter("ignore", OptimizeWarning)
            popt, _ = curve_fit(_lorentzian, u, q, p0=[1.0 - q.min(), 0.0, 1.0, q.min()], maxfev=20000)
    except RuntimeError as err:
        raise FitError(f"Lorentzian fit failed: {err}") from None
    amp, f0, width, floor = popt[0] * p[k], f[k] + popt[1] * w3, abs(popt[2]) * w3, popt[3] * p[k]
    if not (f[0] <= f0 <= f[-1]) or width == 0:
        raise FitError("fitted centre outside window")
    peak = amp + floor
    il = -10 * math.log10(peak) if peak > 0 else np.inf
    return ResonanceFit(float(f0), float(f0 / width), float(il), float(f0 / w3))


def locate_resonance(network: TransmissionNetwork, gap, coarse_points=4001,
                     window_linewidths=20.0, fit_points=801) -> ResonanceFit:
    """Find and fit the defect mode of ``network`` inside ``gap = (f_lo, f_hi)``.

    The largest interior |S21| maximum on a coarse grid inside the gap is polished with a
    bounded scalar search; the fit window spans +-20 linewidths and is redone
    once with the fitted width.
    """
    lo, hi = gap
    fc = np.linspace(lo, hi, coarse_points)[1:-1]
    mag = np.abs(s21(network, fc))
    # interior local maxima only: the gap edges themselves are not the mode
    peaks, _ = find_peaks(mag)
    if len(peaks) == 0:
        raise FitError("no transmission peak inside the gap")
    k = int(peaks[np.argmax(mag[peaks])])
    df = fc[1] - fc[0]
    res = minimize_scalar(lambda x: -abs(s21(network, np.array([x]))[0]),
                          bounds=(fc[k] - df, fc[k] + df), method="bounded",
                          options={"xatol": 1e-9 * fc[k]})
    f_peak = float(res.x)
    p_peak = abs(s21(network, np.array([f_peak]))[0]) ** 2
    power = lambda x: abs(s21(network, np.array([x]))[0]) ** 2  # noqa: E731

    def half_point(sign):
        # walk outward by doubling until the power drops below half, then bisect
        d = df / 64
        while power(f_peak + sign * d) > 0.5 * p_peak:
            d *= 2
            if d > hi - lo:
                raise FitError("could not bracket the resonance linewidth")
        g = lambda x: power(x) - 0.5 * p_peak  # noqa: E731
        ends = sorted((f_peak + sign * d / 2, f_peak + sign * d))
        if g(ends[0]) * g(ends[1]) > 0:
            ends = sorted((f_peak, f_peak + sign * d))
        return brentq(g, *ends, xtol=1e-12 * f_peak)

    width = half_point(1) - half_point(-1)
    fit = None
    for _ in range(2):
        f = np.linspace(max(lo, f_peak - window_linewidths * width),
                        min(hi, f_peak + window_linewidths * width), fit_points)
        fit = resonance_fit(f, s21(network, f))
        f_peak, width = fit.f0, fit.f0 / fit.loaded_q
    return fit


def fit_loss_for_q(network: TransmissionNetwork, target_q, gap, bracket=(1e-5, 10.0)) -> float:
    """Uniform loss (dB/m) that brings the loaded Q to ``target_q``.

    The result is a fitted, not predicted, property of the device.
    """
    def excess(log_alpha):
        return math.log(locate_resonance(network.with_loss(10 ** log_alpha), gap).loaded_q / target_q)

    lo, hi = (math.log10(b) for b in bracket)
    if excess(lo) < 0:
        raise FitError("target Q exceeds the nearly lossless Q")
    if excess(hi) > 0:
        raise FitError("target Q not reached inside the loss bracket")
    return float(10 ** brentq(excess, lo, hi, xtol=1e-6))
