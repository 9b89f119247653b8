"""Fast invariant checks run by ``ednmr validate``.

Each check returns ``(name, passed, detail)``. They are deliberately small so
the whole suite finishes in a few seconds.
"""

from __future__ import annotations

import numpy as np
import yaml

from . import _kernels
from ._kernels import _numpy
from .config import from_dict, load_config
from .dynamics import (
    DaviesSetup,
    DensityState,
    DriveSpec,
    evolve,
    evolve_trace,
    evolve_lab,
    magnetic_drive,
)
from .ensemble import CpwGeometry, DEFAULT_PROFILES, build_ensemble, default_depth_grid, default_lateral_grid
from .pbgnet import TransmissionNetwork, s_parameters
from .spincore import (
    SpinSystem,
    StaticField,
    breit_rabi_levels,
    build_hamiltonian,
    eigensystem,
    load_donors,
)
from .starkdrive import load_drive_models, rabi_rate


def check_breit_rabi(n=200, seed=1):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        A, B = rng.uniform(1, 500), rng.uniform(0, 1)
        sys_ = SpinSystem.isotropic(0.5, A, 2.0, 1.5)
        lv = eigensystem(build_hamiltonian(sys_, StaticField.along(B)))
        worst = max(worst, np.abs(lv.energies - breit_rabi_levels(A, B, 2.0, 1.5)).max() * 1e6)
    return "breit_rabi", worst < 1.0, f"max deviation {worst:.2e} Hz over {n} cases"


def check_kernel_parity(seed=2):
    rng = np.random.default_rng(seed)
    dim = 4
    ii, jj = np.nonzero(np.ones((dim, dim)))
    amp = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    amp = 0.5 * (amp + amp.conj().T)
    det = rng.normal(size=(dim, dim))
    det = det - det.T
    rho = np.diag([0.4, 0.3, 0.2, 0.1]).astype(complex)
    rec = np.array([5, 50])
    args = (rho, ii, jj, amp[ii, jj] * 1e3, det[ii, jj] * 1e3, 1e-5, 50, rec)
    a = _numpy.piecewise_propagate(*args)
    b = _kernels.piecewise_propagate(*args)
    dev = float(np.abs(a - b).max())
    return "kernel_parity", dev < 1e-12, f"{_kernels.BACKEND} vs numpy max |diff| {dev:.1e}"


def check_state_invariants():
    donors = load_donors()
    models, _ = load_drive_models()
    st = DaviesSetup.prepare(donors["As"], StaticField.along(0.25, (1, 1, 0)))
    spec = DriveSpec("electric", models["As"]).rotated(st.rotation)
    t = st.nmr_transitions()[0]
    h = spec.harmonic(st.sys, st.field, 5e4, abs(t.frequency) * 1e6 / 2 + 3e3)
    out = evolve(st.levels, h, st.inverted, 20e-6)
    rho = out.rho
    err = max(abs(np.trace(rho) - 1), np.abs(rho - rho.conj().T).max(),
              max(0.0, -np.linalg.eigvalsh(rho).min()))
    return "state_invariants", err < 1e-8, f"trace/Hermiticity/positivity error {err:.1e}"


def rwa_population_error(ratio=60.0, samples=5):
    """Largest population difference between interaction-frame and lab-frame
    evolution of a P donor NMR pair driven at Rabi rate ``f / ratio``."""
    sys_ = SpinSystem.isotropic(0.5, 117.53, 1.9985, 2.263)
    H = build_hamiltonian(sys_, StaticField.along(0.25))
    lv = eigensystem(H)
    # start fully in one level of the driven pair so the transfer is visible
    psi = lv.states[:, 2]
    rho = DensityState(np.outer(psi, psi.conj()))
    f = lv.frequency(2, 3) * 1e6
    unit = magnetic_drive(sys_, 1.0, (1, 0, 0), f)
    drive = unit.scaled((f / ratio) / rabi_rate(lv, unit, (2, 3), 1))
    T = 1.0 / (2 * rabi_rate(lv, drive, (2, 3), 1))
    times = np.linspace(T / samples, T, samples)
    rwa = evolve_trace(lv, drive, rho, times)
    lab = evolve_lab(H, drive, rho, times)
    return max(float(np.abs(a.populations(lv) - b.populations(lv)).max()) for a, b in zip(rwa, lab))


def check_rwa_fidelity():
    err = rwa_population_error()
    return "rwa_fidelity", err < 0.02, f"max population error {err:.2%} at Omega = f/60"


def check_pbg_unitarity():
    net = TransmissionNetwork.from_file()
    f = np.linspace(1e9, 12e9, 501)
    s11, s21 = s_parameters(net, f)
    err = float(np.abs(np.abs(s11) ** 2 + np.abs(s21) ** 2 - 1).max())
    rev = float(np.abs(s21 - s_parameters(net.reversed(), f)[1]).max())
    return "pbg_unitarity", err < 1e-10 and rev < 1e-10, f"energy error {err:.1e}, reciprocity {rev:.1e}"


def check_ensemble_normalisation():
    geom = CpwGeometry(10e-6, 10e-6, 1e-6)
    ens = build_ensemble(geom, DEFAULT_PROFILES["As"], default_lateral_grid(geom),
                         default_depth_grid())
    total = float(np.sum(ens.weights))
    return "ensemble_weights", abs(total - 1) < 1e-9, f"{len(ens)} points, sum {total!r}"


def check_config_roundtrip():
    cfg = load_config()
    again = from_dict(yaml.safe_load(cfg.to_yaml()))
    return "config_roundtrip", again == cfg, "parse-emit-parse identity"


CHECKS = (check_breit_rabi, check_kernel_parity, check_state_invariants, check_rwa_fidelity,
          check_pbg_unitarity, check_ensemble_normalisation, check_config_roundtrip)


def run_checks():
    return [c() for c in CHECKS]
