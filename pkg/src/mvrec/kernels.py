"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
fallback. ``MVREC_BACKEND=python`` forces the fallback.
"""
import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("MVREC_BACKEND", "").lower() != "python":
    try:
        from . import _ckernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels

im2col3d = _impl.im2col3d
col2im3d = _impl.col2im3d
maxpool3d_forward = _impl.maxpool3d_forward
maxpool3d_backward = _impl.maxpool3d_backward
eals_update = _impl.eals_update


def implementations():
    """Map backend name to kernel module, for cross-checking and benchmarks."""
    impls = {"python": _pykernels}
    try:
        from . import _ckernels
        impls["cython"] = _ckernels
    except ImportError:
        pass
    return impls
