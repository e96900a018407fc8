"""Convolution, deconvolution, dense, and activation kernels with hand-written
backward passes.

Layout conventions
------------------
* activations: channels-last ``(N, H, W, C)``
* conv weights: ``(kh, kw, C_in, C_out)``
* deconv weights: ``(kh, kw, C_out, C_in)`` — a deconvolution is the exact
  adjoint (transpose) of the convolution with the same kernel tensor, so its
  weight layout is the conv layout with the channel axes swapped.

Padding
-------
``'same'`` pads so the output size is ``ceil(n / stride)``; when the total
padding is odd, the extra row/column goes on the bottom/right (i.e.
``pad_lo = total // 2``).  ``'valid'`` pads nothing.

Forward functions return only the output; every op has a matching
``*_backward`` that recomputes cheap intermediates rather than threading cache
objects through call sites.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import maybe_check


@dataclass(frozen=True)
class ConvSpec:
    """Static description of a conv/deconv layer's geometry."""

    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: str = "same"  # 'same' | 'valid'
    in_channels: int = None
    out_channels: int = None

    def __post_init__(self):
        if self.kernel_h < 1 or self.kernel_w < 1:
            raise ValueError("kernel size must be >= 1")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.padding not in ("same", "valid"):
            raise ValueError(f"padding must be 'same' or 'valid', got {self.padding!r}")

    def out_size(self, n, k=None):
        """Output length along one spatial axis of input length *n*."""
        k = self.kernel_h if k is None else k
        if self.padding == "same":
            return -(-n // self.stride)  # ceil division
        if n < k:
            raise ValueError(f"valid padding needs input >= kernel ({n} < {k})")
        return (n - k) // self.stride + 1

    def pad_amounts(self, n, k=None):
        """(pad_lo, pad_hi) along one axis; asymmetric extra goes on the high side."""
        k = self.kernel_h if k is None else k
        if self.padding == "valid":
            return 0, 0
        out = self.out_size(n, k)
        total = max((out - 1) * self.stride + k - n, 0)
        lo = total // 2
        return lo, total - lo


def _pad_input(x, spec):
    ph = spec.pad_amounts(x.shape[1], spec.kernel_h)
    pw = spec.pad_amounts(x.shape[2], spec.kernel_w)
    if ph == (0, 0) and pw == (0, 0):
        return x, ph, pw
    return np.pad(x, ((0, 0), ph, pw, (0, 0))), ph, pw


def im2col(x, spec):
    """Gather conv patches of padded *x* into a matrix.

    Returns ``(cols, out_h, out_w)`` where ``cols`` has shape
    ``(N * out_h * out_w, kh * kw * C)`` and each row is one receptive field
    flattened in (kh, kw, C) order.
    """
    xp, _, _ = _pad_input(x, spec)
    n = x.shape[0]
    out_h = spec.out_size(x.shape[1], spec.kernel_h)
    out_w = spec.out_size(x.shape[2], spec.kernel_w)
    # windows: (N, H', W', C, kh, kw) view, then stride-subsample the spatial axes
    win = sliding_window_view(xp, (spec.kernel_h, spec.kernel_w), axis=(1, 2))
    win = win[:, :: spec.stride, :: spec.stride]
    # -> (N, out_h, out_w, kh, kw, C); the transpose+reshape makes one copy
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(
        n * out_h * out_w, spec.kernel_h * spec.kernel_w * x.shape[3]
    )
    return cols, out_h, out_w


def col2im(dcols, x_shape, spec):
    """Adjoint of :func:`im2col`: scatter-add patch rows back into input layout."""
    n, h, w, c = x_shape
    out_h = spec.out_size(h, spec.kernel_h)
    out_w = spec.out_size(w, spec.kernel_w)
    ph = spec.pad_amounts(h, spec.kernel_h)
    pw = spec.pad_amounts(w, spec.kernel_w)
    dxp = np.zeros((n, h + ph[0] + ph[1], w + pw[0] + pw[1], c), dtype=dcols.dtype)
    d6 = dcols.reshape(n, out_h, out_w, spec.kernel_h, spec.kernel_w, c)
    s = spec.stride
    for i in range(spec.kernel_h):
        for j in range(spec.kernel_w):
            dxp[:, i : i + s * out_h : s, j : j + s * out_w : s] += d6[:, :, :, i, j]
    return dxp[:, ph[0] : ph[0] + h, pw[0] : pw[0] + w]


def conv2d(x, w, b, spec):
    """2-D convolution (cross-correlation). x: (N,H,W,Cin), w: (kh,kw,Cin,Cout)."""
    kh, kw, cin, cout = w.shape
    if (kh, kw) != (spec.kernel_h, spec.kernel_w) or cin != x.shape[3]:
        raise ValueError(f"weight shape {w.shape} inconsistent with spec/input")
    cols, out_h, out_w = im2col(x, spec)
    y = cols @ w.reshape(-1, cout)
    if b is not None:
        y += b
    y = y.reshape(x.shape[0], out_h, out_w, cout)
    return maybe_check(y, "conv2d output")


def conv2d_backward(dy, x, w, spec):
    """Gradients of conv2d. Returns (dx, dw, db)."""
    cout = w.shape[3]
    cols, out_h, out_w = im2col(x, spec)
    dy_mat = dy.reshape(-1, cout)
    db = dy_mat.sum(axis=0)
    dw = (cols.T @ dy_mat).reshape(w.shape)
    dcols = dy_mat @ w.reshape(-1, cout).T
    dx = col2im(dcols, x.shape, spec)
    return maybe_check(dx, "conv2d dx"), dw, db


def deconv2d(x, w, b, spec):
    """Transposed convolution: the adjoint of :func:`conv2d` with tied weights.

    x: (N,h,w,Cin), w: (kh,kw,Cout,Cin); output is (N, h*stride, w*stride, Cout)
    under 'same' padding — exactly the map whose transpose is the stride-s conv
    taking (h*s, w*s) back down to (h, w).
    """
    kh, kw, cout, cin = w.shape
    if (kh, kw) != (spec.kernel_h, spec.kernel_w) or cin != x.shape[3]:
        raise ValueError(f"weight shape {w.shape} inconsistent with spec/input")
    n, h, ww_ = x.shape[0], x.shape[1], x.shape[2]
    if spec.padding == "same":
        big = (n, h * spec.stride, ww_ * spec.stride, cout)
    else:
        big = (n, (h - 1) * spec.stride + kh, (ww_ - 1) * spec.stride + kw, cout)
    # conv(big -> small) uses the conv-layout view of the same kernel tensor:
    w_conv = w.transpose(0, 1, 3, 2)  # (kh, kw, Cin_of_conv=cout, Cout_of_conv=cin)
    dcols = x.reshape(-1, cin) @ w_conv.reshape(-1, cin).T
    y = col2im(dcols, big, spec)
    if b is not None:
        y = y + b
    return maybe_check(y, "deconv2d output")


def deconv2d_backward(dy, x, w, spec):
    """Gradients of deconv2d. Returns (dx, dw, db).

    Because deconv is the adjoint of conv, its input-gradient is the *forward*
    convolution of dy with the tied kernel, and its weight-gradient is the conv
    weight-gradient with the roles of input and upstream swapped.
    """
    kh, kw, cout, cin = w.shape
    w_conv = w.transpose(0, 1, 3, 2)
    dx = conv2d(dy, w_conv, None, spec)
    cols, _, _ = im2col(dy, spec)  # patches of the *output*-sized tensor
    dw_conv = cols.T @ x.reshape(-1, cin)  # (kh*kw*cout, cin)
    dw = dw_conv.reshape(kh, kw, cout, cin)
    db = dy.sum(axis=(0, 1, 2))
    return maybe_check(dx, "deconv2d dx"), dw, db


def dense(x, w, b):
    """Fully connected layer. x: (N, d_in), w: (d_in, d_out), b: (d_out,)."""
    y = x @ w
    if b is not None:
        y = y + b
    return maybe_check(y, "dense output")


def dense_backward(dy, x, w):
    dx = dy @ w.T
    dw = x.T @ dy
    db = dy.sum(axis=0)
    return maybe_check(dx, "dense dx"), dw, db


def relu(x):
    return np.maximum(x, 0)


def relu_backward(dy, x):
    return dy * (x > 0)


def sigmoid(x):
    # Split by sign to avoid overflow in exp for large |x|.
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x.dtype, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return maybe_check(out, "sigmoid output")


def sigmoid_backward(dy, y):
    """Backward given the forward *output* y = sigmoid(x)."""
    return dy * y * (1.0 - y)
