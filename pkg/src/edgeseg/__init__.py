"""Boundary-aware semantic segmentation of aerial rasters in plain numpy."""

import os as _os

# EDGESEG_THREADS caps BLAS threads; it only takes effect if set before numpy loads.
if "EDGESEG_THREADS" in _os.environ:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["EDGESEG_THREADS"])

__version__ = "0.1.0"
