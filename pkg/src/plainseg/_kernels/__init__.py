"""Hot kernels with a compiled backend and a numpy fallback.

The compiled extension is used when it imports and ``PLAINSEG_PURE_PYTHON`` is
unset or ``0``; otherwise the numpy implementations are bound. ``BACKEND``
names the active choice.
"""
import os

import numpy as np

from . import _pykernels

_FUNCS = ("im2col", "col2im", "ms_deform_attn_forward", "ms_deform_attn_backward")


def _load_compiled():
    if os.environ.get("PLAINSEG_PURE_PYTHON", "0") not in ("", "0"):
        return None
    try:
        from . import _ckernels
    except ImportError:
        return None
    return _ckernels


_compiled = _load_compiled()
BACKEND = "cython" if _compiled is not None else "numpy"
_impl = _compiled if _compiled is not None else _pykernels


def compiled_available() -> bool:
    return _compiled is not None


def backend(name: str):
    """Return a namespace-like module for ``"cython"`` or ``"numpy"``."""
    if name == "numpy":
        return _pykernels
    if name == "cython":
        if _compiled is None:
            raise ImportError("compiled kernels are not built")
        return _compiled
    raise ValueError(f"unknown backend {name!r}")


def _c(a):
    return np.ascontiguousarray(a)


def im2col(x, kh, kw, stride, pad):
    return _impl.im2col(_c(x), kh, kw, stride, pad)


def col2im(cols, shape, kh, kw, stride, pad):
    return _impl.col2im(_c(cols), tuple(shape), kh, kw, stride, pad)


def ms_deform_attn_forward(value, shapes, starts, loc, attw):
    dt = value.dtype
    return _impl.ms_deform_attn_forward(
        _c(value), _c(np.asarray(shapes, dtype=np.int64)), _c(np.asarray(starts, dtype=np.int64)),
        _c(loc.astype(dt, copy=False)), _c(attw.astype(dt, copy=False)),
    )


def ms_deform_attn_backward(value, shapes, starts, loc, attw, grad_out):
    dt = value.dtype
    return _impl.ms_deform_attn_backward(
        _c(value), _c(np.asarray(shapes, dtype=np.int64)), _c(np.asarray(starts, dtype=np.int64)),
        _c(loc.astype(dt, copy=False)), _c(attw.astype(dt, copy=False)), _c(grad_out.astype(dt, copy=False)),
    )
