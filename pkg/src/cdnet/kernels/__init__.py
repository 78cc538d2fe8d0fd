"""Kernel backend selection.

The hot inner loops (masked softmax, segment pooling, the GRU
recurrence) exist twice: a numba-compiled version in ``accel`` and a
pure-numpy version in ``reference``. The environment variable
``CDN_BACKEND`` picks one at import time:

    CDN_BACKEND=auto    numba if importable, else numpy (default)
    CDN_BACKEND=numba   require numba, fail loudly if missing
    CDN_BACKEND=numpy   force the pure-numpy path

``benchmarks/bench_kernels.py`` compares the two.
"""

import os

from . import reference

_choice = os.environ.get("CDN_BACKEND", "auto").lower()
if _choice not in ("auto", "numba", "numpy"):
    raise RuntimeError(f"CDN_BACKEND must be auto|numba|numpy, got {_choice!r}")

BACKEND = "numpy"
_impl = reference
if _choice in ("auto", "numba"):
    try:
        from . import accel as _accel
        _impl = _accel
        BACKEND = "numba"
    except ImportError:
        if _choice == "numba":
            raise RuntimeError("CDN_BACKEND=numba but numba is not importable")

masked_softmax_fwd = _impl.masked_softmax_fwd
masked_softmax_bwd = _impl.masked_softmax_bwd
segment_max_fwd = _impl.segment_max_fwd
segment_max_bwd = _impl.segment_max_bwd
segment_mean_fwd = _impl.segment_mean_fwd
segment_mean_bwd = _impl.segment_mean_bwd
gru_fwd = _impl.gru_fwd
gru_bwd = _impl.gru_bwd
