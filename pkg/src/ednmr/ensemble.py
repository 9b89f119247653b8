"""Spatial inhomogeneity of the drive fields over the donor distribution.

The coplanar waveguide is treated as a zero-thickness strip of width ``2a``
separated by gaps ``b - a`` from semi-infinite grounds. Its quasi-static field
in the half-space above the plane follows from the conformal map

    E_x - i E_z = i K / sqrt((zeta^2 - a^2)(zeta^2 - b^2)),  zeta = x + i z,

with ``K`` fixed so the line integral of ``E_x`` across the gap equals the
strip voltage. The magnetic field of a current on the same line has the same
shape rotated by 90 degrees, so the in-plane transverse component ``B_x``
follows ``E_z``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.constants import mu_0
from scipy.interpolate import RegularGridInterpolator
from scipy.special import ellipk
from scipy.stats import norm

from .dynamics import DaviesSetup, DriveSpec, _pmap, contrast, evolve_trace, readout
from .spincore import SpinSystem, StaticField

DEFAULT_LEAK = 1.0 / 50.0
PRUNE_BELOW = 1e-6


@dataclass(frozen=True)
class CpwGeometry:
    center_width: float  # m
    gap_width: float  # m
    sample_standoff: float = 1e-6  # m
    drive_voltage: float = 1.0  # relative RF voltage
    drive_current: float = 1.0  # relative microwave current
    termination_impedance: float = 50.0  # ohm, sets the shorted-end current

    def __post_init__(self):
        if not (self.center_width > 0 and self.gap_width > 0):
            raise ValueError("CPW widths must be positive")
        if self.sample_standoff < 0:
            raise ValueError("standoff must be non-negative")

    @property
    def a(self) -> float:
        return 0.5 * self.center_width

    @property
    def b(self) -> float:
        return self.a + self.gap_width

    @property
    def reference_point(self) -> tuple:
        """Gap edge at the standoff height (falls back to 1% of the gap at zero standoff)."""
        return (self.a, self.sample_standoff or 0.01 * self.gap_width)

    def electric_per_volt(self, x, z) -> tuple[np.ndarray, np.ndarray]:
        """``(E_x, E_z)`` in V/m for 1 V on the centre strip."""
        x = np.asarray(x, dtype=float)
        z = np.asarray(z, dtype=float)
        if np.any(z <= 0):
            raise ValueError("field points must lie above the device plane (z > 0)")
        a, b = self.a, self.b
        K = b / ellipk(1.0 - (a / b) ** 2)
        zeta = x + 1j * z
        w = 1j * K / (np.sqrt(zeta - a) * np.sqrt(zeta + a) * np.sqrt(zeta - b) * np.sqrt(zeta + b))
        return w.real, -w.imag

    def tesla_per_ampere(self) -> float:
        """Factor turning ``|E per volt|`` into ``|B|`` per ampere of line current."""
        k = self.a / self.b
        return mu_0 * ellipk(1.0 - k * k) / (4.0 * ellipk(k * k))


def _points(points):
    p = np.atleast_2d(np.asarray(points, dtype=float))
    if p.shape[-1] != 2:
        raise ValueError("points must be (x, z) pairs")
    return p[:, 0], p[:, 1]


def cpw_absolute_fields(geom: CpwGeometry, points, voltage=1.0):
    """Absolute ``(E_x [V/m], B_x [T])`` at ``points`` for RF ``voltage``.

    ``E_x`` is the open-end (voltage antinode) field; ``B_x`` is the shorted-end
    (current antinode) field at the same voltage, current ``voltage / Z_term``.
    """
    x, z = _points(points)
    ex, ez = geom.electric_per_volt(x, z)
    current = voltage / geom.termination_impedance
    return np.abs(ex) * voltage, np.abs(ez) * current * geom.tesla_per_ampere()


def cpw_fields(geom: CpwGeometry, points):
    """Relative ``(b1, e2, b2)`` field scales, each 1 at the reference point for
    unit drive, multiplied by the geometry's drive voltage/current."""
    x, z = _points(points)
    ex, ez = geom.electric_per_volt(x, z)
    rx, rz = geom.electric_per_volt(*geom.reference_point)
    b_shape = np.abs(ez) / abs(rz)
    return (b_shape * geom.drive_current, np.abs(ex) / abs(rx) * geom.drive_voltage,
            b_shape * geom.drive_voltage)


@dataclass(frozen=True)
class FieldMap:
    """Tabulated ``b1, e2, b2`` scales on a rectangular ``(x, z)`` grid."""

    x: np.ndarray
    z: np.ndarray
    b1: np.ndarray
    e2: np.ndarray
    b2: np.ndarray

    @classmethod
    def from_csv(cls, path) -> "FieldMap":
        data = np.loadtxt(path, delimiter=",", comments="#", skiprows=_header_rows(path))
        xs, zs = np.unique(data[:, 0]), np.unique(data[:, 1])
        grids = [np.full((len(xs), len(zs)), np.nan) for _ in range(3)]
        ix = np.searchsorted(xs, data[:, 0])
        iz = np.searchsorted(zs, data[:, 1])
        for g, col in zip(grids, (2, 3, 4)):
            g[ix, iz] = data[:, col]
        if any(np.isnan(g).any() for g in grids):
            raise ValueError("field map must be a complete rectangular x,z grid")
        return cls(xs, zs, *grids)

    def __call__(self, points):
        x, z = _points(points)
        pts = np.column_stack([x, z])
        return tuple(RegularGridInterpolator((self.x, self.z), g)(pts) for g in (self.b1, self.e2, self.b2))


def _header_rows(path) -> int:
    n = 0
    for line in Path(path).read_text().splitlines():
        s = line.strip()
        if s.startswith("#"):
            n += 1
            continue
        try:
            float(s.split(",")[0])
        except ValueError:
            n += 1
            continue
        break
    return n


@dataclass(frozen=True)
class Implant:
    label: str
    mean_range: float  # m
    straggle: float  # m
    dose_weight: float = 1.0

    def __post_init__(self):
        if not self.straggle > 0:
            raise ValueError("straggle must be positive")
        if self.dose_weight < 0:
            raise ValueError("dose weight must be non-negative")


@dataclass(frozen=True)
class ImplantProfile:
    implants: tuple = ()
    uniform_weight: float = 0.0  # epilayer doping share
    epilayer_thickness: float = 2e-6

    def __post_init__(self):
        object.__setattr__(self, "implants", tuple(self.implants))
        if self.uniform_weight < 0 or not self.epilayer_thickness > 0:
            raise ValueError("invalid epilayer parameters")
        if self.uniform_weight == 0 and not any(i.dose_weight > 0 for i in self.implants):
            raise ValueError("profile has no weight")


# Depth profiles per species; range/straggle are representative values for the
# shallow implants, the epilayer donors are uniform.
DEFAULT_PROFILES = {
    "P": ImplantProfile((), 1.0),
    "As": ImplantProfile((Implant("As", 150e-9, 60e-9),)),
    "Bi": ImplantProfile((Implant("Bi", 100e-9, 40e-9),)),
}


def _cell_edges(grid):
    g = np.asarray(grid, dtype=float)
    if len(g) == 1:
        return np.array([-np.inf, np.inf])
    mid = 0.5 * (g[1:] + g[:-1])
    return np.concatenate([[g[0] - (mid[0] - g[0])], mid, [g[-1] + (g[-1] - mid[-1])]])


def implant_weights(profile: ImplantProfile, depth_grid) -> np.ndarray:
    """Normalised weights of ``profile`` on ``depth_grid`` (cell-integrated)."""
    d = np.asarray(depth_grid, dtype=float)
    if d.ndim != 1 or d.size == 0:
        raise ValueError("depth grid must be a non-empty 1-D array")
    if np.any(np.diff(d) <= 0):
        raise ValueError("depth grid must be ascending")
    if d[0] < 0 or d[-1] > profile.epilayer_thickness * (1 + 1e-12):
        raise ValueError("depth grid must lie inside the epilayer")
    edges = _cell_edges(d)
    w = np.zeros(len(d))
    for imp in profile.implants:
        cdf = norm.cdf(edges, loc=imp.mean_range, scale=imp.straggle)
        part = np.diff(cdf)
        if part.sum() > 0:
            w += imp.dose_weight * part / part.sum()
    if profile.uniform_weight > 0:
        lo = np.clip(edges[:-1], 0.0, profile.epilayer_thickness)
        hi = np.clip(edges[1:], 0.0, profile.epilayer_thickness)
        part = hi - lo if len(d) > 1 else np.ones(1)
        w += profile.uniform_weight * part / part.sum()
    total = w.sum()
    if not total > 0:
        raise ValueError("profile has no weight on this grid")
    return w / total


def load_implant_table(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a ``depth,weight`` CSV (depth in m); returns normalised arrays."""
    data = np.loadtxt(path, delimiter=",", comments="#", skiprows=_header_rows(path), ndmin=2)
    depth, weight = data[:, 0], data[:, 1]
    if np.any(weight < 0):
        raise ValueError("implant weights must be non-negative")
    return depth, weight / weight.sum()


@dataclass(frozen=True)
class EnsemblePoint:
    weight: float
    b1_scale: float
    e2_scale: float
    b2_scale: float
    depth: float
    x: float = 0.0


@dataclass(frozen=True)
class EnsembleSpec:
    points: tuple

    def __post_init__(self):
        pts = tuple(self.points)
        if not pts:
            raise ValueError("ensemble has no points")
        if abs(math.fsum(p.weight for p in pts) - 1.0) > 1e-9:
            raise ValueError("ensemble weights must sum to 1")
        if any(min(p.b1_scale, p.e2_scale, p.b2_scale) < 0 for p in pts):
            raise ValueError("field scales must be non-negative")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def weights(self) -> np.ndarray:
        return np.array([p.weight for p in self.points])

    @classmethod
    def single(cls, b1=1.0, e2=1.0, b2=1.0, depth=0.0) -> "EnsembleSpec":
        return cls((EnsemblePoint(1.0, b1, e2, b2, depth),))

    @classmethod
    def from_scales(cls, e2_scales, weights=None, b1=1.0, b2=1.0) -> "EnsembleSpec":
        s = np.asarray(e2_scales, dtype=float)
        w = np.full(len(s), 1.0 / len(s)) if weights is None else np.asarray(weights, float) / np.sum(weights)
        return cls(tuple(EnsemblePoint(float(wi), b1, float(si), b2, 0.0) for wi, si in zip(w, s)))


def default_lateral_grid(geom: CpwGeometry, n=128) -> np.ndarray:
    """Midpoints of ``n`` equal cells spanning two gap widths centred on the strip edge."""
    return geom.a - geom.gap_width + (np.arange(n) + 0.5) * 2 * geom.gap_width / n


def default_depth_grid(thickness=2e-6, n=32) -> np.ndarray:
    return (np.arange(n) + 0.5) * thickness / n


def build_ensemble(geom: CpwGeometry, profile: ImplantProfile, lateral_grid, depth_grid,
                   field_map: Callable | None = None) -> EnsembleSpec:
    """Outer product of uniform lateral weights and depth weights.

    Donors sit at height ``standoff + depth`` above the device plane. Points
    with weight below 1e-6 are dropped before renormalising.
    """
    xs = np.atleast_1d(np.asarray(lateral_grid, dtype=float))
    ds = np.atleast_1d(np.asarray(depth_grid, dtype=float))
    wd = implant_weights(profile, ds) if len(ds) > 1 else np.ones(1)
    X, D = np.meshgrid(xs, ds, indexing="ij")
    pts = np.column_stack([X.ravel(), geom.sample_standoff + D.ravel()])
    b1, e2, b2 = (field_map or (lambda p: cpw_fields(geom, p)))(pts)
    w = (np.full(len(xs), 1.0 / len(xs))[:, None] * wd[None, :]).ravel()
    keep = w >= PRUNE_BELOW
    total = math.fsum(w[keep])
    out = [EnsemblePoint(float(w[k] / total), float(b1[k]), float(e2[k]), float(b2[k]),
                         float(D.ravel()[k]), float(X.ravel()[k]))
           for k in np.nonzero(keep)[0]]
    # restore an exact unit sum after division rounding
    drift = 1.0 - math.fsum(p.weight for p in out)
    out[0] = EnsemblePoint(out[0].weight + drift, *(getattr(out[0], f) for f in
                                                     ("b1_scale", "e2_scale", "b2_scale", "depth", "x")))
    return EnsembleSpec(tuple(out))


def ensemble_average(spec: EnsembleSpec, per_point: Callable | Sequence, threads=1) -> np.ndarray:
    """Weighted average of per-point signal arrays.

    ``per_point`` is a function of an :class:`EnsemblePoint` or a precomputed
    sequence of arrays. Each output element is an exactly rounded sum
    (``math.fsum``), so the result does not depend on point order.
    """
    if callable(per_point):
        arrays = _pmap(per_point, list(spec.points), threads)
    else:
        arrays = list(per_point)
    arrays = [np.asarray(a, dtype=float) for a in arrays]
    if len(arrays) != len(spec):
        raise ValueError("one signal array per ensemble point required")
    shape = arrays[0].shape
    if any(a.shape != shape for a in arrays):
        raise ValueError("per-point signal arrays differ in shape")
    stack = np.stack([a.ravel() for a in arrays], axis=1) * spec.weights[None, :]
    return np.array([math.fsum(row) for row in stack]).reshape(shape)


@dataclass
class EnsembleTrace:
    durations: np.ndarray
    signal: np.ndarray  # contrast of the averaged readout
    raw: np.ndarray
    reference: float
    metadata: dict = field(default_factory=dict)


def per_point_drive(drive: DriveSpec, point: EnsemblePoint, b_per_e_ref: float,
                    leak: float = DEFAULT_LEAK) -> tuple[DriveSpec, float]:
    """Drive spec and amplitude multiplier for one ensemble point.

    ``b_per_e_ref`` is the shorted-end B per unit open-end E at the reference
    point; the leak adds the suppressed field type scaled to the local field.
    """
    if drive.channel == "electric":
        scale = point.e2_scale
        b_per_e = point.b2_scale * b_per_e_ref / scale if scale > 0 else 0.0
    else:
        scale = point.b2_scale
        b_per_e = b_per_e_ref * point.b2_scale / point.e2_scale if point.e2_scale > 0 else np.inf
    return DriveSpec(drive.channel, drive.model, drive.b2_direction, leak, b_per_e), scale


def reference_b_per_e(geom: CpwGeometry) -> float:
    e, b = cpw_absolute_fields(geom, [geom.reference_point])
    return float(b[0] / e[0])


def ensemble_rabi_trace(sys: SpinSystem, field: StaticField, drive: DriveSpec, carrier,
                        durations, amplitude, spec: EnsembleSpec, geom: CpwGeometry | None = None,
                        probed_line=0, temperature=1.9, leak=DEFAULT_LEAK,
                        threads=1) -> EnsembleTrace:
    """Davies readout versus RF pulse length averaged over ``spec``.

    Raw population differences are averaged first and converted to contrast
    against the averaged no-RF reference, as a real ensemble measurement would.
    """
    durations = np.asarray(durations, dtype=float)
    bpe = reference_b_per_e(geom) if geom is not None else 0.0
    setups = {}

    def setup_for(b1):
        if b1 not in setups:
            setups[b1] = DaviesSetup.prepare(sys, field, probed_line, temperature, b1)
        return setups[b1]

    for p in spec.points:
        setup_for(p.b1_scale)

    def one(p: EnsemblePoint):
        st = setups[p.b1_scale]
        d, scale = per_point_drive(drive, p, bpe, leak if geom is not None else 0.0)
        amp = amplitude * scale
        if amp == 0:
            return np.append(np.full(len(durations), st.reference), st.reference)
        drv = d.rotated(st.rotation).harmonic(st.sys, st.field, amp, carrier)
        states = evolve_trace(st.levels, drv, st.inverted, durations)
        return np.append([readout(st.levels, s, st.pair) for s in states], st.reference)

    avg = ensemble_average(spec, one, threads)
    raw, ref = avg[:-1], float(avg[-1])
    meta = {"species": sys.label, "carrier_hz": carrier, "amplitude": amplitude,
            "points": len(spec), "channel": drive.channel}
    return EnsembleTrace(durations, contrast(raw, ref), raw, ref, meta)


def envelope_ratio(durations, trace, period, cycle=10) -> float:
    """Oscillation envelope near ``cycle`` periods relative to the first maximum.

    The envelope is the peak-to-peak excursion over one period around
    ``cycle * period``, divided by the excursion over the first period.
    """
    t = np.asarray(durations, dtype=float)
    y = np.asarray(trace, dtype=float)
    first = (t >= 0) & (t <= period)
    late = (t >= (cycle - 0.5) * period) & (t <= (cycle + 0.5) * period)
    if first.sum() < 4 or late.sum() < 4:
        raise ValueError("trace does not resolve the requested periods")
    return float(np.ptp(y[late]) / np.ptp(y[first]))


def hahn_echo_ensemble(sys: SpinSystem, field: StaticField, b1_amplitudes, durations,
                       spec: EnsembleSpec, probed_line=0) -> np.ndarray:
    """Echo power sweep with the ensemble's B1 spread."""
    from .dynamics import hahn_echo_power_sweep

    return hahn_echo_power_sweep(sys, field, b1_amplitudes, durations, probed_line,
                                 [p.b1_scale for p in spec.points], spec.weights)
