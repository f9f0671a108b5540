"""Neural-network operations on :class:`~tame.autodiff.tensor.Tensor`.

All image tensors are laid out ``N x C x H x W``.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from tame.autodiff.tensor import Tensor, as_tensor
from tame.errors import ShapeError


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation (im2col + one GEMM per sample)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = weight.shape
    if c_in != c:
        raise ShapeError(f"conv2d: input channels (axis 1) = {c} but weight axis 1 = {c_in}")
    if kh != kw:
        raise ShapeError(f"conv2d: kernel must be square, got axes 2,3 = {kh}x{kw}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match output channels {c_out}")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be >= 1 and padding >= 0")
    k, s, p = kh, stride, padding
    h_out = (h + 2 * p - k) // s + 1
    w_out = (w + 2 * p - k) // s + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {h + 2 * p}x{w + 2 * p}")

    xd = x.data
    if k == 1 and s == 1 and p == 0:
        cols = xd.reshape(n, c, h * w)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
        cols6 = np.empty((n, c, k, k, h_out, w_out), dtype=xd.dtype)
        for i in range(k):
            for j in range(k):
                cols6[:, :, i, j] = xp[:, :, i:i + s * h_out:s, j:j + s * w_out:s]
        cols = cols6.reshape(n, c * k * k, h_out * w_out)
    wmat = weight.data.reshape(c_out, c * k * k)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, c_out, h_out, w_out)

    def _bw(g):
        g = g.reshape(n, c_out, h_out * w_out)
        gx = gw = gb = None
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2))
        if weight.requires_grad:
            gw = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g)
            if k == 1 and s == 1 and p == 0:
                gx = gcols.reshape(x.shape)
            else:
                gcols = gcols.reshape(n, c, k, k, h_out, w_out)
                gxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=g.dtype)
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i:i + s * h_out:s, j:j + s * w_out:s] += gcols[:, :, i, j]
                gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._result(out, parents, _bw, "conv2d")


def maxpool2d(x: Tensor, window: int = 2, stride: Optional[int] = None) -> Tensor:
    """Non-overlapping max pooling; gradient goes to the first maximal element."""
    stride = window if stride is None else stride
    if window != stride:
        raise ValueError("maxpool2d: only window == stride is supported")
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d: expected 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    if h % stride or w % stride:
        raise ShapeError(f"maxpool2d: spatial axes 2,3 = {h}x{w} not divisible by stride {stride}")
    k = window
    ho, wo = h // k, w // k
    win = x.data.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def _bw(g):
        gwin = np.zeros((n, c, ho, wo, k * k), dtype=g.dtype)
        np.put_along_axis(gwin, arg[..., None], g[..., None], axis=-1)
        gx = gwin.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return Tensor._result(out, (x,), _bw, "maxpool2d")


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalisation.

    In training mode the batch statistics over ``(N, H, W)`` normalise the input
    and ``running_mean``/``running_var`` are updated in place (unbiased variance).
    In eval mode the running statistics are used.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d: expected 4-D input, got {x.shape}")
    c = x.shape[1]
    for name, arr in (("gamma", gamma.shape), ("beta", beta.shape), ("running_mean", running_mean.shape),
                      ("running_var", running_var.shape)):
        if arr != (c,):
            raise ShapeError(f"batchnorm2d: {name} shape {arr} does not match channel axis 1 = {c}")
    if eps <= 0:
        raise ValueError("batchnorm2d: eps must be positive")
    xd = x.data
    axes = (0, 2, 3)
    if training:
        m = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mu = xd.mean(axis=axes)
        var = ((xd - mu[None, :, None, None]) ** 2).mean(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * (var * m / (m - 1) if m > 1 else var)
    else:
        mu, var = running_mean.astype(xd.dtype), running_var.astype(xd.dtype)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def _bw(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data[None, :, None, None]
            if training:
                mean_d = dxhat.mean(axis=axes, keepdims=True)
                mean_dx = (dxhat * xhat).mean(axis=axes, keepdims=True)
                gx = (dxhat - mean_d - xhat * mean_dx) * inv_std[None, :, None, None]
            else:
                gx = dxhat * inv_std[None, :, None, None]
        return gx, gg, gb

    return Tensor._result(out, (x, gamma, beta), _bw, "batchnorm2d")


def interpolation_matrix(in_size: int, out_size: int, dtype=np.float64) -> np.ndarray:
    """Row ``d`` holds the linear-interpolation weights of output sample ``d``.

    Half-pixel centres: ``src = (d + 0.5) * in/out - 0.5`` clamped to ``[0, in-1]``.
    """
    scale = in_size / out_size
    mat = np.zeros((out_size, in_size), dtype=dtype)
    for d in range(out_size):
        src = min(max((d + 0.5) * scale - 0.5, 0.0), in_size - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, in_size - 1)
        frac = src - i0
        mat[d, i0] += 1.0 - frac
        mat[d, i1] += frac
    return mat


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of the last two axes to ``out_h x out_w`` (upscaling only)."""
    if x.ndim < 2:
        raise ShapeError(f"bilinear_upsample: need at least 2 axes, got {x.shape}")
    h, w = x.shape[-2:]
    if out_h < h or out_w < w:
        raise ShapeError(f"bilinear_upsample: target {out_h}x{out_w} smaller than input {h}x{w}")
    if (out_h, out_w) == (h, w):
        return Tensor._result(x.data.copy(), (x,), lambda g: (g,), "bilinear_upsample")
    rows = interpolation_matrix(h, out_h, x.dtype)
    cols = interpolation_matrix(w, out_w, x.dtype)
    out = np.matmul(np.matmul(rows, x.data), cols.T)

    def _bw(g):
        return (np.matmul(np.matmul(rows.T, g), cols),)

    return Tensor._result(out, (x,), _bw, "bilinear_upsample")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped ``(out, in)``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape} on axis 1")
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias shape {bias.shape} does not match weight axis 0 = {weight.shape[0]}")
        out = out + bias.data

    def _bw(g):
        return (
            g @ weight.data if x.requires_grad else None,
            g.T @ x.data if weight.requires_grad else None,
            g.sum(axis=0) if bias is not None and bias.requires_grad else None,
        )

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._result(out, parents, lambda g: _bw(g)[: len(parents)], "linear")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._result(out, (x,), _bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def _bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._result(out, (x,), _bw, "log_softmax")


def flatten(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1)


def masked(image: Tensor, mask, fill=None) -> Tensor:
    """Blend an ``N x C x H x W`` image towards ``fill`` where an ``N x H x W`` mask is low.

    Computes ``image * mask + fill * (1 - mask)`` with the mask broadcast over
    channels.  ``fill`` is a per-channel value (default 0, a plain product).
    """
    mask = as_tensor(mask, like=image)
    if mask.ndim == 3:
        mask = mask.reshape(mask.shape[0], 1, mask.shape[1], mask.shape[2])
    out = image * mask
    if fill is None:
        return out
    fill = np.asarray(fill, dtype=image.dtype).reshape(1, -1, 1, 1)
    return out + (1.0 - mask) * Tensor(fill)
