"""Honor VRGCN_THREADS before numpy loads its BLAS.

BLAS thread pools read OMP_NUM_THREADS and friends at library load time, so
this module must be imported before numpy anywhere in the package.
"""

import os


def _apply_thread_cap():
    cap = os.environ.get("VRGCN_THREADS")
    if not cap:
        return
    for var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
        "VECLIB_MAXIMUM_THREADS",
    ):
        os.environ.setdefault(var, cap)


_apply_thread_cap()
