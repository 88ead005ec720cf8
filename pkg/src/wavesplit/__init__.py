"""Wavesplit-style speaker-conditioned source separation on a small numpy autodiff engine."""

import os as _os
import sys as _sys

# WAVESPLIT_THREADS caps BLAS worker threads (0 means single-threaded, deterministic).
# It only takes effect when numpy has not been imported yet, e.g. under `python -m wavesplit`.
_threads = _os.environ.get("WAVESPLIT_THREADS")
if _threads is not None and "numpy" not in _sys.modules:
    _n = str(max(1, int(_threads))) if _threads.strip().lstrip("-").isdigit() else "1"
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        _os.environ[_var] = _n

__version__ = "0.1.0"
