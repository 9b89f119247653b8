"""Donor spin Hamiltonian, exact diagonalization and transition bookkeeping.

All Hamiltonians are in frequency units (MHz), i.e. ``H/h``::

    H/h = (beta/h) B0.g.S + S.A.I - (beta_n/h) g_n B0.I + I.Q.I

Operators act on the product basis ``|mS> (x) |mI>`` with both projections
ordered from +j down to -j.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np
import yaml
from scipy import constants as _sc
from scipy.spatial.transform import Rotation

from .errors import NumericalError

__all__ = [
    "CONSTANTS",
    "LevelSet",
    "PhysicalConstants",
    "SpinOperators",
    "SpinSystem",
    "StaticField",
    "Transition",
    "align_to_field",
    "breit_rabi_levels",
    "build_hamiltonian",
    "eigensystem",
    "esr_field_positions",
    "load_donors",
    "spin_matrices",
    "spin_operators",
    "transition_table",
]


@dataclass(frozen=True)
class PhysicalConstants:
    bohr_magneton_over_h: float  # GHz/T
    nuclear_magneton_over_h: float  # MHz/T
    planck: float  # J s
    boltzmann: float  # J/K

    def __post_init__(self):
        for name in ("bohr_magneton_over_h", "nuclear_magneton_over_h", "planck", "boltzmann"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def bohr_mhz_per_t(self) -> float:
        return self.bohr_magneton_over_h * 1e3


CONSTANTS = PhysicalConstants(
    bohr_magneton_over_h=_sc.physical_constants["Bohr magneton in Hz/T"][0] * 1e-9,
    nuclear_magneton_over_h=_sc.physical_constants["nuclear magneton in MHz/T"][0],
    planck=_sc.h,
    boltzmann=_sc.k,
)


def _as_half_integer(j) -> Fraction:
    if isinstance(j, str):
        j = Fraction(j)
    two_j = 2 * Fraction(j).limit_denominator(1000)
    if two_j.denominator != 1 or two_j < 0 or abs(float(two_j) - 2 * float(j)) > 1e-12:
        raise ValueError(f"spin quantum number must be a non-negative half-integer, got {j!r}")
    return two_j / 2


def _symmetric(name, t):
    t = np.asarray(t, dtype=float)
    if t.shape != (3, 3):
        raise ValueError(f"{name} must be 3x3, got shape {t.shape}")
    if not np.allclose(t, t.T, rtol=0, atol=1e-12 * max(1.0, np.abs(t).max())):
        raise ValueError(f"{name} must be symmetric")
    return 0.5 * (t + t.T)


@dataclass(frozen=True, eq=False)
class SpinSystem:
    """One donor species: electron S=1/2 coupled to a nuclear spin I.

    Tensors are 3x3 in the crystal frame; ``hyperfine_tensor`` and
    ``quadrupole_tensor`` are in MHz.
    """

    nuclear_spin: float
    g_tensor: np.ndarray
    hyperfine_tensor: np.ndarray
    nuclear_g: float
    quadrupole_tensor: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    label: str = ""
    electron_spin: float = 0.5

    def __post_init__(self):
        if self.electron_spin != 0.5:
            raise ValueError("electron spin is fixed at 1/2")
        I = _as_half_integer(self.nuclear_spin)
        if I < Fraction(1, 2):
            raise ValueError("nuclear spin must be >= 1/2")
        object.__setattr__(self, "nuclear_spin", float(I))
        g = _symmetric("g_tensor", self.g_tensor)
        A = _symmetric("hyperfine_tensor", self.hyperfine_tensor)
        Q = _symmetric("quadrupole_tensor", self.quadrupole_tensor)
        qn = np.linalg.norm(Q)
        if abs(np.trace(Q)) > 1e-9 * qn:
            raise ValueError("quadrupole tensor must be traceless")
        if I == Fraction(1, 2) and qn != 0:
            raise ValueError("quadrupole tensor must vanish for I = 1/2")
        for name, t in (("g_tensor", g), ("hyperfine_tensor", A), ("quadrupole_tensor", Q)):
            t.setflags(write=False)
            object.__setattr__(self, name, t)
        object.__setattr__(self, "nuclear_g", float(self.nuclear_g))

    @property
    def nuclear_dim(self) -> int:
        return int(round(2 * self.nuclear_spin + 1))

    @property
    def dim(self) -> int:
        return 2 * self.nuclear_dim

    @classmethod
    def isotropic(cls, nuclear_spin, hyperfine_mhz, g, nuclear_g, quadrupole=None, label=""):
        Q = np.zeros((3, 3)) if quadrupole is None else quadrupole
        return cls(nuclear_spin, g * np.eye(3), hyperfine_mhz * np.eye(3), nuclear_g, Q, label)

    def rotated(self, R) -> "SpinSystem":
        """Same system with every tensor expressed in a frame rotated by ``R``."""
        R = np.asarray(R, dtype=float)
        rot = lambda t: R @ t @ R.T  # noqa: E731
        return SpinSystem(
            self.nuclear_spin,
            rot(self.g_tensor),
            rot(self.hyperfine_tensor),
            self.nuclear_g,
            rot(self.quadrupole_tensor),
            self.label,
        )

    def with_quadrupole(self, Q) -> "SpinSystem":
        return SpinSystem(self.nuclear_spin, self.g_tensor, self.hyperfine_tensor,
                          self.nuclear_g, Q, self.label)


def axial_quadrupole(q_mhz, axis=(0, 0, 1)):
    """Traceless axial tensor with eigenvalue ``q`` along ``axis`` and ``-q/2`` across it."""
    n = np.asarray(axis, dtype=float)
    n = n / np.linalg.norm(n)
    return q_mhz * 1.5 * (np.outer(n, n) - np.eye(3) / 3.0)


def load_donors(path=None) -> dict[str, SpinSystem]:
    """Read a donor-constants YAML file (the shipped one by default)."""
    if path is None:
        text = resources.files("ednmr.data").joinpath("donors.yaml").read_text()
    else:
        text = Path(path).read_text()
    raw = yaml.safe_load(text) or {}
    donors = {}
    for label, entry in raw.items():
        try:
            I = Fraction(str(entry["nuclear_spin"]))
            A = float(entry["hyperfine_mhz"])
            g = float(entry["g"])
            gn = float(entry["nuclear_g"])
        except KeyError as exc:
            raise ValueError(f"donor {label!r}: missing field {exc}") from None
        if "quadrupole_mhz" in entry:
            Q = np.asarray(entry["quadrupole_mhz"], dtype=float)
        elif "quadrupole_axial_mhz" in entry:
            Q = axial_quadrupole(float(entry["quadrupole_axial_mhz"]),
                                 entry.get("quadrupole_axis", (0, 0, 1)))
        else:
            Q = np.zeros((3, 3))
        donors[label] = SpinSystem.isotropic(I, A, g, gn, Q, label=label)
    return donors


@lru_cache(maxsize=None)
def _spin_matrices_cached(two_j: int):
    j = two_j / 2
    m = j - np.arange(two_j + 1)
    jp = np.zeros((two_j + 1, two_j + 1), dtype=complex)
    for k in range(1, two_j + 1):
        jp[k - 1, k] = np.sqrt(j * (j + 1) - m[k] * (m[k] + 1))
    jm = jp.conj().T
    out = ((jp + jm) / 2, (jp - jm) / 2j, np.diag(m).astype(complex))
    for a in out:
        a.setflags(write=False)
    return out


def spin_matrices(j):
    """Angular momentum matrices ``(Jx, Jy, Jz)`` for spin ``j`` (basis m = j..-j)."""
    two_j = int(2 * _as_half_integer(j))
    return _spin_matrices_cached(two_j)


@dataclass(frozen=True)
class SpinOperators:
    Sx: np.ndarray
    Sy: np.ndarray
    Sz: np.ndarray
    Ix: np.ndarray
    Iy: np.ndarray
    Iz: np.ndarray

    @property
    def S(self):
        return (self.Sx, self.Sy, self.Sz)

    @property
    def I(self):  # noqa: E743
        return (self.Ix, self.Iy, self.Iz)


@lru_cache(maxsize=None)
def _spin_operators_cached(two_i: int) -> SpinOperators:
    s = _spin_matrices_cached(1)
    n = _spin_matrices_cached(two_i)
    e2, en = np.eye(2), np.eye(two_i + 1)
    ops = [np.kron(a, en) for a in s] + [np.kron(e2, a) for a in n]
    for a in ops:
        a.setflags(write=False)
    return SpinOperators(*ops)


def spin_operators(nuclear_spin) -> SpinOperators:
    return _spin_operators_cached(int(2 * _as_half_integer(nuclear_spin)))


@dataclass(frozen=True, eq=False)
class StaticField:
    b0: np.ndarray  # tesla, crystal frame

    def __post_init__(self):
        b = np.asarray(self.b0, dtype=float).reshape(3)
        if not np.all(np.isfinite(b)):
            raise ValueError("static field must be finite")
        b = b.copy()
        b.setflags(write=False)
        object.__setattr__(self, "b0", b)

    @classmethod
    def along(cls, magnitude, direction=(0, 0, 1)):
        d = np.asarray(direction, dtype=float)
        return cls(magnitude * d / np.linalg.norm(d))

    @property
    def magnitude(self) -> float:
        return float(np.linalg.norm(self.b0))


def bilinear(left, tensor, right):
    """Operator sum ``sum_ab left_a T_ab right_b``."""
    out = np.zeros_like(left[0])
    for a in range(3):
        for b in range(3):
            if tensor[a, b] != 0:
                out = out + tensor[a, b] * (left[a] @ right[b])
    return out


def zeeman_operator(sys: SpinSystem, b, constants=CONSTANTS):
    """Electron plus nuclear Zeeman operator (MHz) for a field vector ``b`` in tesla."""
    ops = spin_operators(sys.nuclear_spin)
    geff = constants.bohr_mhz_per_t * (np.asarray(b, dtype=float) @ sys.g_tensor)
    nuc = constants.nuclear_magneton_over_h * sys.nuclear_g * np.asarray(b, dtype=float)
    H = sum(geff[k] * ops.S[k] for k in range(3))
    return H - sum(nuc[k] * ops.I[k] for k in range(3))


def build_hamiltonian(sys: SpinSystem, field: StaticField, constants=CONSTANTS,
                      include_quadrupole=True) -> np.ndarray:
    """Spin Hamiltonian in MHz on the ``2(2I+1)``-dimensional product basis."""
    ops = spin_operators(sys.nuclear_spin)
    if ops.Ix.shape[0] != sys.dim:
        raise ValueError("operator dimension does not match the spin system")
    H = zeeman_operator(sys, field.b0, constants)
    H = H + bilinear(ops.S, sys.hyperfine_tensor, ops.I)
    if include_quadrupole:
        H = H + bilinear(ops.I, sys.quadrupole_tensor, ops.I)
    return 0.5 * (H + H.conj().T)


def _check_hermitian(H, tol=1e-10):
    H = np.asarray(H)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise ValueError("Hamiltonian must be a square matrix")
    scale = max(1.0, np.abs(H).max())
    if np.abs(H - H.conj().T).max() > tol * scale:
        raise ValueError("Hamiltonian is not Hermitian within tolerance")


@dataclass(frozen=True, eq=False)
class LevelSet:
    energies: np.ndarray  # MHz, ascending
    states: np.ndarray  # columns are eigenvectors
    labels: tuple  # ((mS, mI), ...) dominant product-basis assignment

    @property
    def dim(self) -> int:
        return len(self.energies)

    def frequency(self, i, j) -> float:
        return float(self.energies[j] - self.energies[i])

    def index_of(self, ms, mi) -> int:
        for k, lab in enumerate(self.labels):
            if lab == (ms, mi):
                return k
        raise KeyError(f"no level labelled (mS={ms}, mI={mi})")

    def to_eigenbasis(self, op):
        return self.states.conj().T @ op @ self.states


def _basis_labels(dim):
    nI = dim // 2
    I = (nI - 1) / 2
    return [(0.5 - k // nI, I - k % nI) for k in range(dim)]


def eigensystem(H) -> LevelSet:
    """Sorted eigenvalues, eigenvectors and dominant (mS, mI) labels of ``H``."""
    _check_hermitian(H)
    H = np.asarray(H, dtype=complex)
    if H.shape[0] % 2:
        raise ValueError("dimension must be 2(2I+1)")
    w, v = np.linalg.eigh(0.5 * (H + H.conj().T))
    norm = max(np.linalg.norm(H, 2), 1e-300)
    resid = np.linalg.norm(H @ v - v * w, axis=0).max()
    if resid > 1e-8 * norm:
        raise NumericalError(f"eigen-residual {resid:.3e} exceeds 1e-8 |H|")
    basis = _basis_labels(H.shape[0])
    labels = tuple(basis[int(np.argmax(np.abs(v[:, k])))] for k in range(len(w)))
    return LevelSet(w, v, labels)


TRANSITION_CLASSES = ("ESR", "NMR-SQT", "NMR-DQT", "other")


@dataclass(frozen=True)
class Transition:
    level_pair: tuple
    frequency: float  # MHz
    operator_weight: float
    delta_ms: int
    delta_mi: int
    kind: str

    @property
    def is_nmr(self) -> bool:
        return self.kind in ("NMR-SQT", "NMR-DQT")


def classify(delta_ms: int, delta_mi: int) -> str:
    if delta_ms == 0 and abs(delta_mi) == 1:
        return "NMR-SQT"
    if delta_ms == 0 and abs(delta_mi) == 2:
        return "NMR-DQT"
    if abs(delta_ms) == 1 and delta_mi == 0:
        return "ESR"
    return "other"


def _probe_matrix(levels: LevelSet, probe):
    if isinstance(probe, str):
        ops = spin_operators((levels.dim // 2 - 1) / 2)
        try:
            return getattr(ops, probe)
        except AttributeError:
            raise ValueError(f"unknown probe operator {probe!r}") from None
    P = np.asarray(probe)
    if P.shape != (levels.dim, levels.dim):
        raise ValueError("probe matrix has wrong dimension")
    return P


def transition_table(levels: LevelSet, probe="Ix") -> list[Transition]:
    """Every level pair ``i < j`` with its frequency, probe weight and class."""
    P = levels.to_eigenbasis(_probe_matrix(levels, probe))
    weights = np.abs(P) ** 2
    out = []
    for i in range(levels.dim):
        for j in range(i + 1, levels.dim):
            (msi, mii), (msj, mij) = levels.labels[i], levels.labels[j]
            dms, dmi = int(round(msj - msi)), int(round(mij - mii))
            out.append(Transition((i, j), levels.frequency(i, j), float(weights[i, j]),
                                  dms, dmi, classify(dms, dmi)))
    return out


def align_to_field(sys: SpinSystem, field: StaticField):
    """Rotate system and field so the static field points along +z.

    Returns ``(system, field, R)`` with ``R @ b0 = |b0| z``. Zero field returns the
    inputs with the identity rotation.
    """
    b = field.b0
    mag = np.linalg.norm(b)
    if mag == 0:
        return sys, field, np.eye(3)
    rot, _ = Rotation.align_vectors([[0.0, 0.0, 1.0]], [b / mag])
    R = rot.as_matrix()
    return sys.rotated(R), StaticField(np.array([0.0, 0.0, mag])), R


def breit_rabi_levels(hyperfine_mhz, b0_t, g, nuclear_g, constants=CONSTANTS):
    """Closed-form energies (MHz, ascending) for I = 1/2 with isotropic couplings."""
    A = hyperfine_mhz
    ve = constants.bohr_mhz_per_t * g * b0_t
    vn = constants.nuclear_magneton_over_h * nuclear_g * b0_t
    stretched = [0.5 * (ve - vn) + A / 4, -0.5 * (ve - vn) + A / 4]
    root = 0.5 * np.hypot(ve + vn, A)
    mixed = [-A / 4 + root, -A / 4 - root]
    return np.sort(np.array(stretched + mixed))


def _esr_line_frequency(sys, magnitude, mi, direction, constants):
    s, f, _ = align_to_field(sys, StaticField.along(magnitude, direction))
    lv = eigensystem(build_hamiltonian(s, f, constants))
    try:
        lo, hi = lv.index_of(-0.5, mi), lv.index_of(0.5, mi)
    except KeyError:
        return np.nan
    return abs(lv.energies[hi] - lv.energies[lo]) * 1e-3  # GHz


def esr_field_positions(sys: SpinSystem, f_probe_ghz, b_range, direction=(0, 0, 1),
                        samples=201, tol_t=1e-6, constants=CONSTANTS):
    """Resonance fields of each ESR hyperfine line at probe frequency ``f_probe_ghz``.

    Returns ``[(field_T, Transition), ...]`` sorted by field. Lines with no
    crossing inside ``b_range`` are skipped; lines resonating at the same field
    (within ``tol_t``) are reported once.
    """
    if not f_probe_ghz > 0:
        raise ValueError("probe frequency must be positive")
    b_lo, b_hi = sorted(float(x) for x in b_range)
    b_lo = max(b_lo, 1e-6)
    grid = np.linspace(b_lo, b_hi, samples)
    I = sys.nuclear_spin
    found = []
    for mi in I - np.arange(sys.nuclear_dim):
        freqs = np.array([_esr_line_frequency(sys, b, mi, direction, constants) for b in grid])
        ok = np.isfinite(freqs)
        d = np.diff(freqs[ok])
        if ok.sum() < 2 or not (np.all(d > 0) or np.all(d < 0)):
            continue
        g_ok, f_ok = grid[ok], freqs[ok] - f_probe_ghz
        cross = np.nonzero(np.sign(f_ok[:-1]) * np.sign(f_ok[1:]) <= 0)[0]
        if len(cross) == 0:
            continue
        lo, hi = g_ok[cross[0]], g_ok[cross[0] + 1]
        flo = f_ok[cross[0]]
        while hi - lo > tol_t:
            mid = 0.5 * (lo + hi)
            fm = _esr_line_frequency(sys, mid, mi, direction, constants) - f_probe_ghz
            if np.sign(fm) == np.sign(flo):
                lo, flo = mid, fm
            else:
                hi = mid
        b_res = 0.5 * (lo + hi)
        if any(abs(b_res - b) <= tol_t for b, _ in found):
            continue
        s, f, _ = align_to_field(sys, StaticField.along(b_res, direction))
        lv = eigensystem(build_hamiltonian(s, f, constants))
        i, j = sorted((lv.index_of(-0.5, mi), lv.index_of(0.5, mi)))
        dms = int(round(lv.labels[j][0] - lv.labels[i][0]))
        sx = lv.to_eigenbasis(spin_operators(I).Sx)
        weight = float(abs(sx[i, j]) ** 2)
        found.append((b_res, Transition((i, j), lv.frequency(i, j), weight, dms, 0, "ESR")))
    return sorted(found, key=lambda t: t[0])
