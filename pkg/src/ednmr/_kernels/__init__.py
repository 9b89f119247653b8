"""Hot time-stepping kernels.

The numba path is used when numba imports cleanly and the environment variable
``EDNMR_DISABLE_NUMBA`` is unset (or set to ``0``/``false``). Otherwise the
pure-numpy path is selected. Both expose identical signatures.
"""

import logging
import os

import numpy as np

from . import _numpy

logger = logging.getLogger(__name__)

_flag = os.environ.get("EDNMR_DISABLE_NUMBA", "").strip().lower()
_disabled = _flag not in ("", "0", "false", "no")

if _disabled:
    _impl = _numpy
    BACKEND = "numpy"
else:
    try:
        from . import _numba as _impl

        BACKEND = "numba"
    except ImportError:  # pragma: no cover - numba is a declared dependency
        logger.warning("numba unavailable, falling back to numpy kernels")
        _impl = _numpy
        BACKEND = "numpy"


def _record(record, nsteps):
    rec = np.asarray(record, dtype=np.int64)
    if rec.ndim != 1 or np.any(np.diff(rec) < 0) or (rec.size and (rec[0] < 0 or rec[-1] > nsteps)):
        raise ValueError("record must be ascending step counts within [0, nsteps]")
    return rec


def piecewise_propagate(rho0, ii, jj, amp, det, dt, nsteps, record):
    """Dispatch to the selected backend; see :func:`._numpy.piecewise_propagate`."""
    return _impl.piecewise_propagate(
        np.ascontiguousarray(rho0, dtype=np.complex128),
        np.ascontiguousarray(ii, dtype=np.int64),
        np.ascontiguousarray(jj, dtype=np.int64),
        np.ascontiguousarray(amp, dtype=np.complex128),
        np.ascontiguousarray(det, dtype=np.float64),
        float(dt),
        int(nsteps),
        _record(record, nsteps),
    )


def rk4_unitary(H0, V, freq, phase, dt, nsteps, record):
    """Dispatch to the selected backend; see :func:`._numpy.rk4_unitary`."""
    return _impl.rk4_unitary(
        np.ascontiguousarray(H0, dtype=np.complex128),
        np.ascontiguousarray(V, dtype=np.complex128),
        np.ascontiguousarray(freq, dtype=np.float64),
        np.ascontiguousarray(phase, dtype=np.float64),
        float(dt),
        int(nsteps),
        _record(record, nsteps),
    )
