"""Necessity-guided multi-task learning: NCA sign selection, leakage-free splits,
distance correlation, a small autodiff engine, and the signed multi-task network."""

import os as _os

# BLAS pools size themselves when numpy is first imported, so the cap has to be
# exported before any submodule pulls numpy in.
_threads = _os.environ.get("NCA_AMT_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
