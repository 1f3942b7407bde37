"""Weakly supervised cascaded detection on a numpy autodiff engine."""
import os as _os

# BLAS thread pools are sized when numpy loads, so the cap is applied first.
_threads = _os.environ.get("WCCN_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
