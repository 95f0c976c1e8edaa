"""Convolution kernel backend, selected once at import.

The compiled Cython extension is preferred; the numpy implementation is the
fallback. Selection can be forced with the RANKNCE_KERNELS environment
variable: "auto" (default), "compiled", or "numpy". Both backends expose the
same two functions:

    conv2d_forward(x, kernel, bias) -> out
    conv2d_backward(x, kernel, grad_out) -> (grad_x, grad_kernel, grad_bias)

with x [C_in,H,W], kernel [C_out,C_in,3,3], stride 1 and zero padding 1.
"""

import os

from . import _conv_np

_requested = os.environ.get("RANKNCE_KERNELS", "auto")
if _requested not in ("auto", "compiled", "numpy"):
    raise ValueError(
        f"RANKNCE_KERNELS must be one of auto/compiled/numpy, got {_requested!r}"
    )

_impl = None
if _requested in ("auto", "compiled"):
    try:
        from . import _conv_cy as _impl
    except ImportError:
        if _requested == "compiled":
            raise ImportError(
                "RANKNCE_KERNELS=compiled but the extension is not built; "
                "run `pip install -e . --no-build-isolation`"
            )
if _impl is None:
    _impl = _conv_np

BACKEND = _impl.BACKEND_NAME
conv2d_forward = _impl.conv2d_forward
conv2d_backward = _impl.conv2d_backward

__all__ = ["BACKEND", "conv2d_forward", "conv2d_backward"]
