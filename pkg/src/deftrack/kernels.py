"""Kernel backend selection.

The hot inner loops (patch tracking, corner response, ray marching,
texture evaluation) exist twice: numba-compiled loops in
_kernels_numba.py and vectorized numpy in _kernels_numpy.py. The numba
path is the default; set the environment variable

    DEFTRACK_DISABLE_NUMBA=1

before import to force the numpy path (also used automatically when
numba is not importable). ``BACKEND`` reports which one is live.
benchmarks/bench_kernels.py times the two side by side.
"""

import os

_FLAG = os.environ.get("DEFTRACK_DISABLE_NUMBA", "").strip().lower()
_FORCE_NUMPY = _FLAG in ("1", "true", "yes", "on")

if not _FORCE_NUMPY:
    try:
        from . import _kernels_numba as _impl
        BACKEND = "numba"
    except ImportError:  # numba missing or broken: degrade silently
        from . import _kernels_numpy as _impl
        BACKEND = "numpy"
else:
    from . import _kernels_numpy as _impl
    BACKEND = "numpy"

bilinear_patch = _impl.bilinear_patch
patch_in_bounds = _impl.patch_in_bounds
lk_refine = _impl.lk_refine
shi_tomasi_response = _impl.shi_tomasi_response
raycast_tube = _impl.raycast_tube
raycast_plane = _impl.raycast_plane
texture_eval = _impl.texture_eval

# lk_refine status codes
LK_CONVERGED = 0
LK_MAX_ITER = 1
LK_OUT_OF_BOUNDS = 2
LK_ILL_CONDITIONED = 3
LK_BAD_GAIN = 4
