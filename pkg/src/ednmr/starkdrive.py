"""Electric-field modulation of the g, hyperfine and quadrupole tensors.

An RF field ``E(t) = e_amp sin(2 pi f t)`` changes each tensor by
``strain_scale * L_T * E + K_T * E**2``. Because ``sin^2 x = (1 - cos 2x)/2`` the
quadratic part produces a static shift plus a component at ``2f``, which is what
drives nuclear transitions from a carrier at half their frequency.

Drive operators are in MHz, carriers and Rabi rates in Hz.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .errors import NoResonanceError
from .spincore import (
    CONSTANTS,
    LevelSet,
    SpinSystem,
    StaticField,
    bilinear,
    spin_operators,
)

TENSORS = ("g", "A", "Q")


def _zero():
    return np.zeros((3, 3))


def _coeff_dict(d):
    out = {}
    for name in TENSORS:
        t = np.asarray(d.get(name, _zero()) if d else _zero(), dtype=float)
        if t.shape != (3, 3):
            raise ValueError(f"coefficient for {name} must be 3x3")
        if not np.allclose(t, t.T, rtol=0, atol=1e-12 * max(np.abs(t).max(), 1e-300)):
            raise ValueError(f"coefficient for {name} must be symmetric")
        out[name] = 0.5 * (t + t.T)
    if abs(np.trace(out["Q"])) > 1e-9 * max(np.linalg.norm(out["Q"]), 1e-300):
        raise ValueError("quadrupole response must be traceless")
    return out


@dataclass(frozen=True, eq=False)
class DriveModel:
    """Linear and quadratic tensor responses to an RF electric field.

    ``linear`` maps tensor name (``"g"``, ``"A"``, ``"Q"``) to the change per V/m,
    ``quadratic`` to the change per (V/m)^2, both for a field along
    ``field_direction``. A and Q responses are in MHz. ``subharmonic_sign`` is the
    sign of the ``cos(4 pi f t)`` component relative to the static shift.
    """

    field_direction: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))
    linear: dict = field(default_factory=dict)
    quadratic: dict = field(default_factory=dict)
    strain_scale: float = 1.0
    subharmonic_sign: float = -1.0

    def __post_init__(self):
        n = np.asarray(self.field_direction, dtype=float)
        if n.shape != (3,) or not np.linalg.norm(n) > 0:
            raise ValueError("field_direction must be a non-zero 3-vector")
        object.__setattr__(self, "field_direction", n / np.linalg.norm(n))
        object.__setattr__(self, "linear", _coeff_dict(self.linear))
        object.__setattr__(self, "quadratic", _coeff_dict(self.quadratic))
        if self.subharmonic_sign not in (-1.0, 1.0, -1, 1):
            raise ValueError("subharmonic_sign must be +1 or -1")

    @property
    def has_linear(self) -> bool:
        return self.strain_scale != 0 and any(np.any(t) for t in self.linear.values())

    @property
    def has_quadratic(self) -> bool:
        return any(np.any(t) for t in self.quadratic.values())

    def rotated(self, R) -> "DriveModel":
        R = np.asarray(R, dtype=float)
        rot = {k: R @ v @ R.T for k, v in self.linear.items()}
        rotq = {k: R @ v @ R.T for k, v in self.quadratic.items()}
        return DriveModel(R @ self.field_direction, rot, rotq, self.strain_scale,
                          self.subharmonic_sign)

    def replace(self, **kw) -> "DriveModel":
        args = dict(field_direction=self.field_direction, linear=self.linear,
                    quadratic=self.quadratic, strain_scale=self.strain_scale,
                    subharmonic_sign=self.subharmonic_sign)
        args.update(kw)
        return DriveModel(**args)

    def without_quadratic(self) -> "DriveModel":
        return self.replace(quadratic={})

    def only(self, *tensors) -> "DriveModel":
        """Keep only the responses of the named tensors."""
        keep = lambda d: {k: v for k, v in d.items() if k in tensors}  # noqa: E731
        return self.replace(linear=keep(self.linear), quadratic=keep(self.quadratic))


def uniaxial(coeff, direction):
    """Traceless uniaxial shape ``coeff * (n n^T - 1/3)`` along ``direction``."""
    n = np.asarray(direction, dtype=float)
    n = n / np.linalg.norm(n)
    return coeff * (np.outer(n, n) - np.eye(3) / 3.0)


def _parse_coeff(entry, direction):
    if entry is None:
        return _zero()
    if isinstance(entry, dict):
        t = _zero()
        if "uniaxial" in entry:
            t = t + uniaxial(float(entry["uniaxial"]), direction)
        if "isotropic" in entry:
            t = t + float(entry["isotropic"]) * np.eye(3)
        if "matrix" in entry:
            t = t + np.asarray(entry["matrix"], dtype=float)
        return t
    return np.asarray(entry, dtype=float)


def load_drive_models(path=None) -> tuple[dict[str, DriveModel], dict]:
    """Read a drive-coefficient YAML file; returns ``(models, extras)``.

    ``extras`` holds any top-level keys besides the species blocks (for
    example ``operating_field_v_per_m``).
    """
    if path is None:
        text = resources.files("ednmr.data").joinpath("drive_coefficients.yaml").read_text()
    else:
        text = Path(path).read_text()
    raw = yaml.safe_load(text) or {}
    strain = float(raw.get("strain_scale", 1.0))
    sign = float(raw.get("subharmonic_sign", -1.0))
    species = raw.get("species", {})
    extras = {k: v for k, v in raw.items() if k not in ("species", "strain_scale", "subharmonic_sign")}
    models = {}
    for label, block in species.items():
        direction = block.get("field_direction", [1, 0, 0])
        lin = {k: _parse_coeff(v, direction) for k, v in (block.get("linear") or {}).items()}
        quad = {k: _parse_coeff(v, direction) for k, v in (block.get("quadratic") or {}).items()}
        models[label] = DriveModel(direction, lin, quad, strain, sign)
    return models, extras


def tensor_response(drive: DriveModel, e_amp):
    """Static tensor changes ``(dg, dA, dQ)`` at field amplitude ``e_amp`` (V/m)."""
    e = float(e_amp)
    out = []
    for name in TENSORS:
        t = drive.strain_scale * drive.linear[name] * e + drive.quadratic[name] * e * e
        out.append(0.5 * (t + t.T))
    return tuple(out)


def quantization_tilt(g, dg, field: StaticField) -> float:
    """Angle (rad) by which ``dg`` turns the electron's effective field ``g.B0``."""
    b = field.b0
    if not np.linalg.norm(b) > 0:
        raise ValueError("quantization tilt needs a non-zero static field")
    u = np.asarray(g) @ b
    v = (np.asarray(g) + np.asarray(dg)) @ b
    return float(np.arctan2(np.linalg.norm(np.cross(u, v)), np.dot(u, v)))


def drive_operator(sys: SpinSystem, deltas, field: StaticField, constants=CONSTANTS):
    """Hamiltonian change (MHz) produced by tensor changes ``(dg, dA, dQ)``."""
    dg, dA, dQ = deltas
    ops = spin_operators(sys.nuclear_spin)
    geff = constants.bohr_mhz_per_t * (field.b0 @ np.asarray(dg))
    V = sum(geff[k] * ops.S[k] for k in range(3))
    V = V + bilinear(ops.S, np.asarray(dA), ops.I)
    if sys.nuclear_spin > 0.5:
        V = V + bilinear(ops.I, np.asarray(dQ), ops.I)
    return 0.5 * (V + V.conj().T)


def secular_part(levels: LevelSet, V, carrier_hz, window_hz, harmonic=1):
    """Keep only eigenbasis elements of ``V`` whose transition is within
    ``window_hz`` of ``harmonic * carrier_hz``; returned in the product basis."""
    Ve = levels.to_eigenbasis(V)
    f = np.abs(levels.energies[:, None] - levels.energies[None, :]) * 1e6
    keep = np.abs(f - harmonic * carrier_hz) <= window_hz
    Ve = np.where(keep, Ve, 0.0)
    return levels.states @ Ve @ levels.states.conj().T


@dataclass(frozen=True, eq=False)
class HarmonicDrive:
    """``dH(t) = V0 + V1 sin(2 pi f t) + V2 cos(4 pi f t)`` (operators in MHz)."""

    carrier: float  # Hz
    components: dict  # harmonic index -> Hermitian matrix

    def __post_init__(self):
        for n, V in self.components.items():
            if n not in (0, 1, 2):
                raise ValueError("harmonic index must be 0, 1 or 2")
            if not np.allclose(V, np.conj(V).T, atol=1e-12 * max(np.abs(V).max(), 1e-300)):
                raise ValueError(f"component {n} is not Hermitian")

    @property
    def dim(self) -> int:
        return next(iter(self.components.values())).shape[0] if self.components else 0

    def scaled(self, s) -> "HarmonicDrive":
        return HarmonicDrive(self.carrier, {n: s * V for n, V in self.components.items()})

    def at_carrier(self, f) -> "HarmonicDrive":
        return HarmonicDrive(float(f), self.components)


def harmonic_components(drive: DriveModel, sys: SpinSystem, field: StaticField, e_amp, f,
                        constants=CONSTANTS) -> HarmonicDrive:
    """Split the response to ``E(t) = e_amp sin(2 pi f t)`` into harmonics 0, 1, 2."""
    if e_amp < 0 or not f > 0:
        raise ValueError("need e_amp >= 0 and f > 0")
    comps = {}
    if drive.has_linear:
        lin = tuple(drive.strain_scale * drive.linear[k] * e_amp for k in TENSORS)
        comps[1] = drive_operator(sys, lin, field, constants)
    if drive.has_quadratic:
        half = tuple(drive.quadratic[k] * (0.5 * e_amp * e_amp) for k in TENSORS)
        V = drive_operator(sys, half, field, constants)
        comps[0] = V
        comps[2] = drive.subharmonic_sign * V
    return HarmonicDrive(float(f), comps)


def rabi_rate(levels: LevelSet, harmonic: HarmonicDrive, pair, n=1, tolerance_hz=None) -> float:
    """Rotating-wave Rabi frequency (Hz) of ``pair`` driven by harmonic ``n``.

    Convention: a drive term ``V cos(wt)`` on a resonant pair gives population
    oscillation at ``|V_ij|``. Raises :class:`NoResonanceError` if
    ``n * carrier`` misses the pair's frequency by more than ``tolerance_hz``
    (default half the Rabi rate).
    """
    i, j = pair
    if i == j:
        raise ValueError("pair must name two different levels")
    V = harmonic.components.get(n)
    omega = 0.0 if V is None else float(abs(levels.to_eigenbasis(V)[i, j])) * 1e6
    f_ij = abs(levels.energies[j] - levels.energies[i]) * 1e6
    tol = tolerance_hz if tolerance_hz is not None else max(omega / 2, 1e-9 * f_ij)
    if abs(n * harmonic.carrier - f_ij) > tol:
        raise NoResonanceError(
            f"harmonic {n} at {n * harmonic.carrier:.6e} Hz is not resonant with "
            f"{f_ij:.6e} Hz (tolerance {tol:.3e} Hz)")
    return omega


def stark_shift(levels: LevelSet, harmonic: HarmonicDrive, pair) -> float:
    """First-order change (Hz) of the ``pair`` frequency ``E_j - E_i`` caused by
    the static component ``V0`` while the drive is on."""
    V = harmonic.components.get(0)
    if V is None:
        return 0.0
    i, j = pair
    d = np.real(np.diag(levels.to_eigenbasis(V)))
    return float(d[j] - d[i]) * 1e6
