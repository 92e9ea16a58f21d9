"""Dense NCHW tensor operations with hand-written backward passes.

Only the handful of operations the inbetweening network needs are provided:
3x3 convolution (stride 1 or 2, one pixel of zero padding), ReLU, bilinear
2x upsampling, 2x2 box downsampling and the weighted mean squared error.

Every forward function is pure. Functions that need saved state for their
backward pass return ``(output, ctx)``; the matching ``*_backward`` takes that
context back. Arrays keep the dtype they were given, so float64 inputs give a
float64 "check mode" for finite-difference testing.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

# Upper bound on im2col buffer elements per band; keeps full-size inference
# (e.g. 1760x1248 at 27 channels) within a few hundred MB.
MAX_COLS_ELEMENTS = 1 << 23


class ShapeError(ValueError):
    """Raised for incompatible tensor shapes (a configuration error)."""


@dataclass
class Tensor:
    """Rank-4 (batch, channel, rows, cols) array with an optional gradient."""

    data: np.ndarray
    grad: Optional[np.ndarray] = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 4:
            raise ShapeError(f"tensor must be rank 4, got shape {self.data.shape}")
        if self.grad is not None and self.grad.shape != self.data.shape:
            raise ShapeError(
                f"grad shape {self.grad.shape} does not match data {self.data.shape}"
            )

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)


class ConvCtx(NamedTuple):
    x: np.ndarray
    weight: np.ndarray
    stride: int


def _check_conv(x, weight, bias, stride):
    if x.ndim != 4:
        raise ShapeError(f"conv3x3 input must be rank 4, got {x.shape}")
    if weight.ndim != 4 or weight.shape[2:] != (3, 3):
        raise ShapeError(f"conv3x3 weight must be (out, in, 3, 3), got {weight.shape}")
    if weight.shape[1] != x.shape[1]:
        raise ShapeError(
            f"weight expects {weight.shape[1]} input channels, input has {x.shape[1]}"
        )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} != ({weight.shape[0]},)")
    if stride not in (1, 2):
        raise ShapeError(f"stride must be 1 or 2, got {stride}")
    if stride == 2 and (x.shape[2] % 2 or x.shape[3] % 2):
        raise ShapeError(f"stride 2 needs even spatial dims, got {x.shape[2:]}")


def _bands(n_in: int, nb: int, rows: int, cols: int):
    """Split ``rows`` output rows into bands whose im2col buffer stays bounded."""
    per_row = max(1, n_in * 9 * nb * cols)
    step = max(1, MAX_COLS_ELEMENTS // per_row)
    for r0 in range(0, rows, step):
        yield r0, min(rows, r0 + step)


def _im2col(xp: np.ndarray, stride: int, r0: int, r1: int, wo: int) -> np.ndarray:
    # xp: (nb, ci, Hp, Wp) padded -> (ci*9, nb*(r1-r0)*wo), taps ordered (dv, du)
    nb, ci = xp.shape[:2]
    rb = r1 - r0
    cols = np.empty((ci, 3, 3, nb, rb, wo), dtype=xp.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    for dv in range(3):
        v0 = stride * r0 + dv
        for du in range(3):
            cols[:, dv, du] = xt[:, :, v0 : v0 + stride * (rb - 1) + 1 : stride,
                                 du : du + stride * (wo - 1) + 1 : stride]
    return cols.reshape(ci * 9, nb * rb * wo)


def _col2im_add(dxp: np.ndarray, dcols: np.ndarray, stride: int, r0: int, r1: int, wo: int):
    nb, ci = dxp.shape[:2]
    rb = r1 - r0
    dcols = dcols.reshape(ci, 3, 3, nb, rb, wo).transpose(3, 0, 1, 2, 4, 5)
    for dv in range(3):
        v0 = stride * r0 + dv
        for du in range(3):
            dxp[:, :, v0 : v0 + stride * (rb - 1) + 1 : stride,
                du : du + stride * (wo - 1) + 1 : stride] += dcols[:, :, dv, du]


def conv3x3(x: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray], stride: int = 1):
    """3x3 convolution with one pixel of zero padding.

    ``out[b, o, v, u] = bias[o] + sum_{i, dv, du} weight[o, i, dv, du] *
    xpad[b, i, stride*v + dv, stride*u + du]`` where ``xpad`` is ``x`` padded
    by one zero pixel on every side. Returns ``(out, ctx)``.
    """
    _check_conv(x, weight, bias, stride)
    nb, ci, h, w = x.shape
    co = weight.shape[0]
    ho, wo = h // stride, w // stride
    w2 = weight.reshape(co, ci * 9).astype(x.dtype, copy=False)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.empty((nb, co, ho, wo), dtype=x.dtype)
    for r0, r1 in _bands(ci, nb, ho, wo):
        cols = _im2col(xp, stride, r0, r1, wo)
        y = (w2 @ cols).reshape(co, nb, r1 - r0, wo)
        out[:, :, r0:r1] = y.transpose(1, 0, 2, 3)
    if bias is not None:
        out += bias.astype(x.dtype, copy=False)[None, :, None, None]
    return out, ConvCtx(x, weight, stride)


def conv3x3_backward(ctx: Optional[ConvCtx], grad_out: np.ndarray, need_input_grad: bool = True):
    """Gradients of :func:`conv3x3` w.r.t. input, weight and bias."""
    if ctx is None:
        raise RuntimeError("conv3x3_backward called without a recorded forward context")
    x, weight, stride = ctx
    nb, ci, h, w = x.shape
    co = weight.shape[0]
    ho, wo = h // stride, w // stride
    if grad_out.shape != (nb, co, ho, wo):
        raise ShapeError(f"upstream gradient {grad_out.shape} != output {(nb, co, ho, wo)}")
    w2 = weight.reshape(co, ci * 9).astype(x.dtype, copy=False)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    dw = np.zeros((co, ci * 9), dtype=x.dtype)
    dxp = np.zeros_like(xp) if need_input_grad else None
    for r0, r1 in _bands(ci, nb, ho, wo):
        cols = _im2col(xp, stride, r0, r1, wo)
        g = np.ascontiguousarray(grad_out[:, :, r0:r1].transpose(1, 0, 2, 3)).reshape(co, -1)
        dw += g @ cols.T
        if need_input_grad:
            _col2im_add(dxp, w2.T @ g, stride, r0, r1, wo)
    db = grad_out.sum(axis=(0, 2, 3))
    dx = dxp[:, :, 1:-1, 1:-1] if need_input_grad else None
    return dx, dw.reshape(weight.shape), db


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(y: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Backward of ReLU given its *output*; subgradient at zero is zero."""
    return np.where(y > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def _up_axis(x: np.ndarray, axis: int) -> np.ndarray:
    n = x.shape[axis]
    x = np.moveaxis(x, axis, -1)
    prev = np.concatenate([x[..., :1], x[..., :-1]], axis=-1)
    nxt = np.concatenate([x[..., 1:], x[..., -1:]], axis=-1)
    out = np.empty(x.shape[:-1] + (2 * n,), dtype=x.dtype)
    out[..., 0::2] = 0.75 * x + 0.25 * prev
    out[..., 1::2] = 0.75 * x + 0.25 * nxt
    return np.moveaxis(out, -1, axis)


def _up_axis_backward(g: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, -1)
    ge, go = g[..., 0::2], g[..., 1::2]
    dx = 0.75 * (ge + go)
    # even output j reads x[j-1] (clamped at 0); odd output j reads x[j+1] (clamped at n-1)
    dx[..., :-1] += 0.25 * ge[..., 1:]
    dx[..., 0] += 0.25 * ge[..., 0]
    dx[..., 1:] += 0.25 * go[..., :-1]
    dx[..., -1] += 0.25 * go[..., -1]
    return np.moveaxis(dx, -1, axis)


def bilinear_up2(x: np.ndarray) -> np.ndarray:
    """Double both spatial dims by bilinear interpolation (half-pixel centers, edge clamp)."""
    return _up_axis(_up_axis(x, 2), 3)


def bilinear_up2_backward(grad_out: np.ndarray) -> np.ndarray:
    return _up_axis_backward(_up_axis_backward(grad_out, 3), 2)


def down_half(x: np.ndarray) -> np.ndarray:
    """Halve both spatial dims with a 2x2 box average."""
    nb, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"down_half needs even spatial dims, got {(h, w)}")
    blocks = x.reshape(nb, c, h // 2, 2, w // 2, 2)
    return (blocks[:, :, :, 0, :, 0] + blocks[:, :, :, 0, :, 1]
            + blocks[:, :, :, 1, :, 0] + blocks[:, :, :, 1, :, 1]) * 0.25


def down_half_backward(grad_out: np.ndarray) -> np.ndarray:
    g = grad_out * 0.25
    return np.repeat(np.repeat(g, 2, axis=2), 2, axis=3)


def weighted_mse(x: np.ndarray, t: np.ndarray, w: np.ndarray):
    """Weighted mean squared error and its gradient w.r.t. ``x``.

    ``L = sum(w * (x - t)**2) / x.size``; the weights are treated as constants.
    """
    if x.shape != t.shape or x.shape != w.shape:
        raise ShapeError(f"weighted_mse shapes differ: {x.shape}, {t.shape}, {w.shape}")
    diff = x - t
    n = x.size
    loss = float(np.sum(w * diff * diff, dtype=np.float64) / n)
    grad = (2.0 / n) * w * diff
    return loss, grad.astype(x.dtype, copy=False)
