"""Pure-numpy implementations of the time-stepping kernels."""

import numpy as np

TWO_PI = 2.0 * np.pi

# steps per batched eigendecomposition
_CHUNK = 2048


def _step_hamiltonians(ii, jj, amp, det, dim, dt, k0, k1):
    """Midpoint, sinc-averaged interaction-frame Hamiltonians for steps k0..k1-1."""
    n = k1 - k0
    tm = (np.arange(k0, k1) + 0.5) * dt
    H = np.zeros((n, dim, dim), dtype=np.complex128)
    if len(ii):
        avg = np.sinc(det * dt)
        phase = np.exp(1j * TWO_PI * np.outer(tm, det))
        np.add.at(H, (slice(None), ii, jj), amp * avg * phase)
    return H


def piecewise_propagate(rho0, ii, jj, amp, det, dt, nsteps, record):
    """Evolve ``rho0`` through ``nsteps`` piecewise-constant steps.

    The drive is given as a list of matrix-element terms ``amp * exp(i 2pi det t)``
    placed at ``(ii, jj)``; the caller supplies both halves of each Hermitian pair.
    Returns the density matrices after each step count listed in ``record``.
    """
    dim = rho0.shape[0]
    out = np.empty((len(record), dim, dim), dtype=np.complex128)
    rho = rho0.astype(np.complex128).copy()
    r = 0
    while r < len(record) and record[r] == 0:
        out[r] = rho
        r += 1
    for k0 in range(0, nsteps, _CHUNK):
        k1 = min(nsteps, k0 + _CHUNK)
        H = _step_hamiltonians(ii, jj, amp, det, dim, dt, k0, k1)
        w, v = np.linalg.eigh(H)
        U = (v * np.exp(-1j * TWO_PI * w * dt)[:, None, :]) @ np.conj(np.swapaxes(v, 1, 2))
        for s in range(k1 - k0):
            rho = U[s] @ rho @ U[s].conj().T
            while r < len(record) and record[r] == k0 + s + 1:
                out[r] = rho
                r += 1
    return out


def rk4_unitary(H0, V, freq, phase, dt, nsteps, record):
    """Classical RK4 for dU/dt = -i 2pi H(t) U with H(t) = H0 + sum_k V_k cos(2pi f_k t + phi_k)."""
    dim = H0.shape[0]
    out = np.empty((len(record), dim, dim), dtype=np.complex128)
    U = np.eye(dim, dtype=np.complex128)
    Vr = np.ascontiguousarray(V, dtype=np.complex128)
    H0 = np.ascontiguousarray(H0, dtype=np.complex128)

    def rhs(t, X):
        c = np.cos(TWO_PI * freq * t + phase)
        H = H0 + np.tensordot(c, Vr, axes=1)
        return -1j * TWO_PI * (H @ X)

    r = 0
    while r < len(record) and record[r] == 0:
        out[r] = U
        r += 1
    for k in range(nsteps):
        t = k * dt
        k1 = rhs(t, U)
        k2 = rhs(t + 0.5 * dt, U + 0.5 * dt * k1)
        k3 = rhs(t + 0.5 * dt, U + 0.5 * dt * k2)
        k4 = rhs(t + dt, U + dt * k3)
        U = U + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        while r < len(record) and record[r] == k + 1:
            out[r] = U
            r += 1
    return out
