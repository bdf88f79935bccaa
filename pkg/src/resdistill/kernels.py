"""Backend selection for the convolution lowering kernels.

The compiled ``_ckernels`` extension is used when it was built; otherwise, or
when ``RD_KERNELS=python`` is set, the numpy implementation in ``_pykernels``
is used. Both backends are bit-identical.
"""
import os

from . import _pykernels

_requested = os.environ.get("RD_KERNELS", "auto").lower()

if _requested == "python":
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        if _requested == "cython":
            raise
        _impl = _pykernels
        BACKEND = "python"

im2col = _impl.im2col
col2im = _impl.col2im

__all__ = ["BACKEND", "im2col", "col2im"]
