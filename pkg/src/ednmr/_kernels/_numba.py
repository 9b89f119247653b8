"""numba-compiled versions of the time-stepping kernels.

Signatures and results match :mod:`ednmr._kernels._numpy`.
"""

import numpy as np
from numba import njit

TWO_PI = 2.0 * np.pi


@njit(cache=True, nogil=True)
def _sinc(x):
    if x == 0.0:
        return 1.0
    px = np.pi * x
    return np.sin(px) / px


@njit(cache=True, nogil=True)
def _conjugate_step(rho, ii, jj, h, dt, term, comm, row):
    """``rho <- U rho U^dagger`` with ``U = exp(-i 2pi H dt)`` for sparse ``H``.

    Sums the nested-commutator series of the adjoint action, splitting the
    step so each piece has norm below 1/2; terms are added until they fall
    below rounding. ``H`` is given as entries ``h[q]`` at ``(ii[q], jj[q])``.
    """
    n = rho.shape[0]
    row[:] = 0.0
    for q in range(ii.shape[0]):
        row[ii[q]] += abs(h[q])
    norm = TWO_PI * dt * row.max()
    pieces = 1
    while norm / pieces > 0.25:
        pieces *= 2
    scale = -1j * TWO_PI * dt / pieces
    for _ in range(pieces):
        term[:, :] = rho
        for order in range(1, 60):
            comm[:, :] = 0.0
            for q in range(ii.shape[0]):
                i, j, hq = ii[q], jj[q], h[q]
                for c in range(n):
                    comm[i, c] += hq * term[j, c]
                    comm[c, j] -= term[c, i] * hq
            big = 0.0
            f = scale / order
            for a in range(n):
                for b in range(n):
                    term[a, b] = comm[a, b] * f
                    rho[a, b] += term[a, b]
                    t = term[a, b]
                    big = max(big, t.real * t.real + t.imag * t.imag)
            if big < 1e-38:
                break


@njit(cache=True, nogil=True)
def piecewise_propagate(rho0, ii, jj, amp, det, dt, nsteps, record):
    dim = rho0.shape[0]
    nrec = record.shape[0]
    out = np.empty((nrec, dim, dim), dtype=np.complex128)
    rho = rho0.astype(np.complex128).copy()
    nterm = ii.shape[0]
    avg = np.empty(nterm)
    for q in range(nterm):
        avg[q] = _sinc(det[q] * dt)
    h = np.empty(nterm, dtype=np.complex128)
    term = np.empty((dim, dim), dtype=np.complex128)
    comm = np.empty((dim, dim), dtype=np.complex128)
    row = np.empty(dim)
    r = 0
    while r < nrec and record[r] == 0:
        out[r] = rho
        r += 1
    for k in range(nsteps):
        tm = (k + 0.5) * dt
        for q in range(nterm):
            h[q] = amp[q] * avg[q] * np.exp(1j * TWO_PI * det[q] * tm)
        _conjugate_step(rho, ii, jj, h, dt, term, comm, row)
        while r < nrec and record[r] == k + 1:
            out[r] = rho
            r += 1
    return out


@njit(cache=True, nogil=True)
def _rhs(t, X, H0, V, freq, phase):
    H = H0.copy()
    for q in range(V.shape[0]):
        H += np.cos(TWO_PI * freq[q] * t + phase[q]) * V[q]
    return -1j * TWO_PI * (H @ X)


@njit(cache=True, nogil=True)
def rk4_unitary(H0, V, freq, phase, dt, nsteps, record):
    dim = H0.shape[0]
    nrec = record.shape[0]
    out = np.empty((nrec, dim, dim), dtype=np.complex128)
    U = np.eye(dim, dtype=np.complex128)
    r = 0
    while r < nrec and record[r] == 0:
        out[r] = U
        r += 1
    for k in range(nsteps):
        t = k * dt
        k1 = _rhs(t, U, H0, V, freq, phase)
        k2 = _rhs(t + 0.5 * dt, U + 0.5 * dt * k1, H0, V, freq, phase)
        k3 = _rhs(t + 0.5 * dt, U + 0.5 * dt * k2, H0, V, freq, phase)
        k4 = _rhs(t + dt, U + dt * k3, H0, V, freq, phase)
        U = U + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        while r < nrec and record[r] == k + 1:
            out[r] = U
            r += 1
    return out
