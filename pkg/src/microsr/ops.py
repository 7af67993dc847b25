"""Differentiable tensor operations.

Tensors are plain numpy arrays in (batch, channel, height, width)
order. The ops here are the complete vocabulary of the network:
3x3 convolution (stride 1 or 2, one-pixel zero padding), ReLU,
pixel shuffle, and zero channel padding. Each has an analytic
backward pass, and `finite_difference_check` is the oracle used to
validate every gradient in the test suite.

Convolution is computed as cross-correlation (no kernel flip), the
usual convention for learned kernels. It is evaluated by gathering
3x3 neighborhoods into a column matrix and calling a single matrix
product per layer; large intermediate buffers are recycled between
calls so the training loop does not reallocate hundreds of MB per
step. No public function returns a view into those buffers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

# Floor for denominators when forming relative errors.
GUARD_EPS = 1e-12


@dataclass
class ConvLayer:
    """A single 3x3 convolution: kernels (C_out, C_in, 3, 3), bias (C_out,)."""

    kernels: np.ndarray
    bias: np.ndarray
    stride: int = 1

    def __post_init__(self):
        k = np.asarray(self.kernels)
        if k.ndim != 4 or k.shape[2:] != (3, 3):
            raise ShapeError(f"kernels must be (C_out, C_in, 3, 3), got {k.shape}")
        if self.stride not in (1, 2):
            raise ShapeError(f"stride must be 1 or 2, got {self.stride}")
        b = np.asarray(self.bias)
        if b.shape != (k.shape[0],):
            raise ShapeError(f"bias must have shape ({k.shape[0]},), got {b.shape}")
        self.kernels = k
        self.bias = b

    @property
    def c_out(self) -> int:
        return self.kernels.shape[0]

    @property
    def c_in(self) -> int:
        return self.kernels.shape[1]


# ---------------------------------------------------------------------------
# Scratch buffers. One buffer per call site, grown geometrically, never
# shrunk. Training touches ~0.5 GB column matrices per layer; reusing the
# allocation avoids repeated page faulting. Single-threaded use only.

_POOL: dict[str, np.ndarray] = {}


def _scratch(key: str, shape: tuple, dtype) -> np.ndarray:
    nbytes = int(np.prod(shape)) * np.dtype(dtype).itemsize
    buf = _POOL.get(key)
    if buf is None or buf.nbytes < nbytes:
        buf = np.empty(max(nbytes, 1), dtype=np.uint8)
        _POOL[key] = buf
    return buf[:nbytes].view(dtype).reshape(shape)


def clear_scratch() -> None:
    """Release the recycled work buffers (frees memory after training)."""
    _POOL.clear()


def _pad_into(xp: np.ndarray, x: np.ndarray) -> None:
    # xp is (N, C, H+2, W+2); write x into the interior, zeros on the border.
    h, w = x.shape[2], x.shape[3]
    xp[:, :, 0, :] = 0
    xp[:, :, h + 1, :] = 0
    xp[:, :, 1 : h + 1, 0] = 0
    xp[:, :, 1 : h + 1, w + 1] = 0
    xp[:, :, 1 : h + 1, 1 : w + 1] = x


def _out_hw(h: int, w: int, stride: int) -> tuple[int, int]:
    return -(-h // stride), -(-w // stride)


def _columns(key: str, x: np.ndarray, stride: int, dt) -> np.ndarray:
    """Gather all 3x3 neighborhoods of zero-padded x into (N*Ho*Wo, Ci*9)."""
    n, ci, h, w = x.shape
    ho, wo = _out_hw(h, w, stride)
    xp = _scratch(key + "_pad", (n, ci, h + 2, w + 2), dt)
    _pad_into(xp, x)
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = _scratch(key + "_cols", (n, ho, wo, ci, 3, 3), dt)
    np.copyto(cols, win.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(n * ho * wo, ci * 9)


def conv2d(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """3x3 cross-correlation with one-pixel zero padding plus bias.

    Stride 1 preserves spatial dims; stride 2 samples output positions at
    input coordinates {0, 2, 4, ...}, giving ceil(H/2) x ceil(W/2).
    """
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects a 4-d tensor, got shape {x.shape}")
    n, ci, h, w = x.shape
    if ci != layer.c_in:
        raise ShapeError(
            f"conv2d channel mismatch: input has {ci} channels, kernels expect {layer.c_in}"
        )
    if h < 1 or w < 1:
        raise ShapeError(f"conv2d needs H, W >= 1, got {h}x{w}")
    s = layer.stride
    ho, wo = _out_hw(h, w, s)
    dt = np.result_type(x.dtype, layer.kernels.dtype)
    cols = _columns("conv", x, s, dt)
    w2 = layer.kernels.astype(dt, copy=False).reshape(layer.c_out, ci * 9).T
    y2 = _scratch("conv_y2", (n * ho * wo, layer.c_out), dt)
    np.matmul(cols, w2, out=y2)
    y2 += layer.bias.astype(dt, copy=False)
    out = np.empty((n, layer.c_out, ho, wo), dt)
    out[...] = y2.reshape(n, ho, wo, layer.c_out).transpose(0, 3, 1, 2)
    return out


def conv2d_backward(
    dy: np.ndarray, x: np.ndarray, layer: ConvLayer
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of conv2d: returns (d_input, d_kernels, d_bias)."""
    x = np.asarray(x)
    dy = np.asarray(dy)
    n, ci, h, w = x.shape
    s = layer.stride
    ho, wo = _out_hw(h, w, s)
    if dy.shape != (n, layer.c_out, ho, wo):
        raise ShapeError(
            f"upstream gradient shape {dy.shape} does not match conv output "
            f"{(n, layer.c_out, ho, wo)}"
        )
    dt = np.result_type(dy.dtype, x.dtype, layer.kernels.dtype)
    co = layer.c_out

    dbias = dy.sum(axis=(0, 2, 3), dtype=dt)

    cols = _columns("convb", x, s, dt)
    dy2 = _scratch("convb_dy2", (n, ho, wo, co), dt)
    np.copyto(dy2, dy.transpose(0, 2, 3, 1))
    dy2 = dy2.reshape(n * ho * wo, co)
    dkern = (dy2.T @ cols).reshape(co, ci, 3, 3)

    # The column buffer is free once d_kernels is done; reuse it for the
    # scattered input gradient to halve peak scratch memory.
    w2 = layer.kernels.astype(dt, copy=False).reshape(co, ci * 9)
    np.matmul(dy2, w2, out=cols)
    dc = cols.reshape(n, ho, wo, ci, 3, 3)

    dxp = _scratch("convb_dpad", (n, ci, h + 2, w + 2), dt)
    dxp[...] = 0
    for ty in range(3):
        for tx in range(3):
            dst = dxp[:, :, ty : ty + s * (ho - 1) + 1 : s, tx : tx + s * (wo - 1) + 1 : s]
            dst += dc[:, :, :, :, ty, tx].transpose(0, 3, 1, 2)
    dx = dxp[:, :, 1 : h + 1, 1 : w + 1].copy()
    return dx, dkern, dbias


def relu(x: np.ndarray) -> np.ndarray:
    """Elementwise max(0, x)."""
    return np.maximum(x, 0)


def relu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Pass upstream gradient where x > 0, zero elsewhere.

    x may be either the forward input or the forward output: they are
    positive in exactly the same places.
    """
    if dy.shape != x.shape:
        raise ShapeError(f"relu_backward shapes differ: {dy.shape} vs {x.shape}")
    return np.where(x > 0, dy, dy.dtype.type(0))


def pixel_shuffle(x: np.ndarray, r: int) -> np.ndarray:
    """Rearrange (N, c*r^2, H, W) into (N, c, r*H, r*W).

    Output pixel (co, r*y+dy, r*x+dx) = input pixel (co*r^2 + dy*r + dx, y, x):
    row-major ordering within each r x r cell. Pure data movement.
    """
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"pixel_shuffle expects a 4-d tensor, got shape {x.shape}")
    if r < 1:
        raise ShapeError(f"shuffle factor must be >= 1, got {r}")
    n, c, h, w = x.shape
    if c % (r * r):
        raise ShapeError(f"channel count {c} is not divisible by r^2 = {r * r}")
    co = c // (r * r)
    y = x.reshape(n, co, r, r, h, w).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(y.reshape(n, co, h * r, w * r))


def pixel_shuffle_backward(dy: np.ndarray, r: int) -> np.ndarray:
    """Inverse permutation of pixel_shuffle."""
    dy = np.asarray(dy)
    if dy.ndim != 4:
        raise ShapeError(f"expected a 4-d tensor, got shape {dy.shape}")
    n, co, hr, wr = dy.shape
    if hr % r or wr % r:
        raise ShapeError(f"spatial dims {hr}x{wr} are not divisible by r = {r}")
    h, w = hr // r, wr // r
    x = dy.reshape(n, co, h, r, w, r).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(x.reshape(n, co * r * r, h, w))


def zero_channel_pad(x: np.ndarray, target: int) -> np.ndarray:
    """Append zero-valued channels so the tensor has `target` channels."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"expected a 4-d tensor, got shape {x.shape}")
    n, c, h, w = x.shape
    if target < c:
        raise ShapeError(f"cannot pad {c} channels down to {target}")
    out = np.zeros((n, target, h, w), x.dtype)
    out[:, :c] = x
    return out


def zero_channel_pad_backward(dy: np.ndarray, c_in: int) -> np.ndarray:
    """Drop the gradient of the appended zero channels."""
    dy = np.asarray(dy)
    if dy.ndim != 4 or dy.shape[1] < c_in:
        raise ShapeError(f"gradient shape {dy.shape} cannot be cut to {c_in} channels")
    return dy[:, :c_in].copy()


def finite_difference_check(
    f: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x: np.ndarray,
    step: float = 1e-5,
    f_ref: Optional[Callable[[np.ndarray], float]] = None,
) -> float:
    """Max relative error between an analytic gradient and central differences.

    f maps a tensor to (scalar value, gradient of the scalar w.r.t. x).
    Perturbed points are evaluated in float64. When checking a float32
    pipeline, pass `f_ref`, a float64 scalar-only version of f, so the
    difference quotients are not drowned in single-precision rounding.

    Returns max over elements of |analytic - numeric| / max(|analytic|,
    |numeric|, 1e-12).
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    value, grad = f(x)
    if not np.isfinite(value):
        raise ValueError("f(x) is not finite")
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != np.shape(x):
        raise ShapeError(f"gradient shape {grad.shape} does not match x {np.shape(x)}")
    if f_ref is None:
        f_ref = lambda t: f(t)[0]  # noqa: E731

    xw = np.array(x, dtype=np.float64)
    flat = xw.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = float(flat[i])
        flat[i] = orig + step
        f_plus = f_ref(xw)
        flat[i] = orig - step
        f_minus = f_ref(xw)
        flat[i] = orig
        # subtract in f_ref's own precision, divide by the span the
        # perturbed points actually realized in float64
        span = (orig + step) - (orig - step)
        numeric = float((f_plus - f_minus) / span)
        analytic = grad.reshape(-1)[i]
        denom = max(abs(analytic), abs(numeric), GUARD_EPS)
        worst = max(worst, abs(analytic - numeric) / denom)
    return worst
