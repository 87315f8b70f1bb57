"""Hot loops of the engine: patch extraction and its adjoint, max pooling,
batch-statistics BatchNorm.

Two interchangeable implementations exist. The numba one is used when numba
imports; set ``CHANPRUNE_BACKEND=numpy`` to force the pure-numpy path.
"""
import os

from . import _numpy

BACKEND = os.environ.get("CHANPRUNE_BACKEND", "numba").lower()
if BACKEND not in ("numba", "numpy"):
    raise ImportError(f"CHANPRUNE_BACKEND must be 'numba' or 'numpy', got {BACKEND!r}")

if BACKEND == "numba":
    try:
        from . import _numba as _impl
    except ImportError:  # numba missing or broken
        BACKEND = "numpy"
        _impl = _numpy
else:
    _impl = _numpy

im2col = _impl.im2col
col2im = _impl.col2im
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward
bn_train_forward = _impl.bn_train_forward
bn_backward = _impl.bn_backward


def backend_module(name: str):
    if name == "numpy":
        return _numpy
    from . import _numba
    return _numba
