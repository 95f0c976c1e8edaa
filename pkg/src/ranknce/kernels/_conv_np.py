"""Numpy fallback for the 3x3 convolution kernels.

Same contract as the compiled backend: stride 1, zero padding 1, spatial
extents preserved, float64 throughout. Shape validation happens in the
autodiff layer; these routines assume conforming inputs.
"""

import numpy as np

BACKEND_NAME = "numpy"


def _window_stack(xp, h, w):
    # Rows ordered (c, ky, kx) to match kernel.reshape(c_out, c_in * 9).
    c_in = xp.shape[0]
    stack = np.empty((c_in * 9, h * w), dtype=np.float64)
    i = 0
    for c in range(c_in):
        for ky in range(3):
            for kx in range(3):
                stack[i] = xp[c, ky : ky + h, kx : kx + w].reshape(h * w)
                i += 1
    return stack


def conv2d_forward(x, kernel, bias):
    """Cross-correlate x [C_in,H,W] with kernel [C_out,C_in,3,3] plus bias."""
    c_in, h, w = x.shape
    c_out = kernel.shape[0]
    xp = np.zeros((c_in, h + 2, w + 2), dtype=np.float64)
    xp[:, 1:-1, 1:-1] = x
    stack = _window_stack(xp, h, w)
    out = kernel.reshape(c_out, c_in * 9) @ stack
    out = out.reshape(c_out, h, w) + bias[:, None, None]
    return out


def conv2d_backward(x, kernel, grad_out):
    """Gradients of conv2d_forward w.r.t. (x, kernel, bias)."""
    c_in, h, w = x.shape
    c_out = kernel.shape[0]
    xp = np.zeros((c_in, h + 2, w + 2), dtype=np.float64)
    xp[:, 1:-1, 1:-1] = x
    stack = _window_stack(xp, h, w)

    g2 = grad_out.reshape(c_out, h * w)
    grad_bias = g2.sum(axis=1)
    grad_kernel = (g2 @ stack.T).reshape(c_out, c_in, 3, 3)

    gxp = np.zeros((c_in, h + 2, w + 2), dtype=np.float64)
    for ky in range(3):
        for kx in range(3):
            # grad_x[c, y+ky, x+kx] += sum_o grad_out[o, y, x] * kernel[o, c, ky, kx]
            gxp[:, ky : ky + h, kx : kx + w] += np.tensordot(
                kernel[:, :, ky, kx], grad_out, axes=([0], [0])
            )
    grad_x = gxp[:, 1:-1, 1:-1].copy()
    return grad_x, grad_kernel, grad_bias
