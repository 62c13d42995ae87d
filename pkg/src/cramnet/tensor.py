"""Forward/backward kernels for the layer kinds used by the architectures.

Tensors are plain float64 numpy arrays in channels-last layout:
``(H, W, C)`` for one image, ``(N, H, W, C)`` for a batch. Every kernel
accepts either and returns the matching rank.

Convolution is cross-correlation (no kernel flip), stride 1, computed with
im2col + a single GEMM.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PADDINGS = ("same", "valid")


class ShapeError(ValueError):
    """Raised when operand shapes do not agree."""


@dataclass(frozen=True)
class KernelStack:
    """Conv weights laid out as ``(height, width, in_channels, out_channels)``."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 4:
            raise ShapeError(f"kernel stack must be 4-D, got shape {w.shape}")
        kh, kw = w.shape[:2]
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"kernel extents must be odd, got {kh}x{kw}")
        object.__setattr__(self, "weights", w)

    @property
    def height(self) -> int:
        return self.weights.shape[0]

    @property
    def width(self) -> int:
        return self.weights.shape[1]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[2]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[3]

    @property
    def half_width(self) -> int:
        return (self.width - 1) // 2

    @property
    def half_height(self) -> int:
        return (self.height - 1) // 2


def _as_stack(kernels) -> KernelStack:
    return kernels if isinstance(kernels, KernelStack) else KernelStack(kernels)


def _batched(x: np.ndarray, rank: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == rank - 1:
        return x[None], True
    if x.ndim != rank:
        raise ShapeError(f"expected rank {rank - 1} or {rank}, got shape {x.shape}")
    return x, False


def conv_output_hw(h: int, w: int, kh: int, kw: int, padding: str) -> tuple[int, int]:
    if padding == "same":
        return h, w
    if padding == "valid":
        return h - kh + 1, w - kw + 1
    raise ValueError(f"unknown padding {padding!r}")


def _pad(x: np.ndarray, kh: int, kw: int, padding: str) -> np.ndarray:
    if padding == "valid":
        return x
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    return np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))


def _im2col(xp: np.ndarray, kh: int, kw: int) -> np.ndarray:
    # (N, H', W', C, kh, kw) -> rows ordered (N, H', W'), columns (kh, kw, C)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    n, ho, wo, c = win.shape[:4]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)


def conv2d_forward(x, kernels, biases, padding: str = "same") -> np.ndarray:
    """Multi-channel 2-D correlation plus per-filter bias.

    Output channel ``c`` at ``(i, j)`` is
    ``b[c] + sum_{u,v,k} x[i+u, j+v, k] * K[u, v, k, c]`` over the window.
    """
    ks = _as_stack(kernels)
    xb, squeeze = _batched(x, 4)
    n, h, w, c = xb.shape
    if c != ks.in_channels:
        raise ShapeError(f"input has {c} channels, kernels expect {ks.in_channels}")
    b = np.asarray(biases, dtype=np.float64)
    if b.shape != (ks.out_channels,):
        raise ShapeError(f"bias shape {b.shape} != ({ks.out_channels},)")
    ho, wo = conv_output_hw(h, w, ks.height, ks.width, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"input {h}x{w} too small for {ks.height}x{ks.width} valid conv")
    cols = _im2col(_pad(xb, ks.height, ks.width, padding), ks.height, ks.width)
    out = cols @ ks.weights.reshape(-1, ks.out_channels) + b
    out = out.reshape(n, ho, wo, ks.out_channels)
    return out[0] if squeeze else out


def conv2d_backward(grad_out, cached_input, kernels, padding: str = "same"):
    """Return ``(grad_input, grad_weights, grad_biases)`` for :func:`conv2d_forward`."""
    ks = _as_stack(kernels)
    xb, squeeze = _batched(cached_input, 4)
    gb, _ = _batched(grad_out, 4)
    n, h, w, c = xb.shape
    kh, kw, cout = ks.height, ks.width, ks.out_channels
    if c != ks.in_channels:
        raise ShapeError(f"input has {c} channels, kernels expect {ks.in_channels}")
    ho, wo = conv_output_hw(h, w, kh, kw, padding)
    if gb.shape != (n, ho, wo, cout):
        raise ShapeError(f"grad_out shape {gb.shape} != {(n, ho, wo, cout)}")

    xp = _pad(xb, kh, kw, padding)
    cols = _im2col(xp, kh, kw)
    g2 = gb.reshape(-1, cout)
    grad_w = (cols.T @ g2).reshape(kh, kw, c, cout)
    grad_b = g2.sum(axis=0)

    gcols = (g2 @ ks.weights.reshape(-1, cout).T).reshape(n, ho, wo, kh, kw, c)
    gxp = np.zeros_like(xp)
    for u in range(kh):
        for v in range(kw):
            gxp[:, u:u + ho, v:v + wo, :] += gcols[:, :, :, u, v, :]
    if padding == "same":
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
        gxp = gxp[:, ph:ph + h, pw:pw + w, :]
    return (gxp[0] if squeeze else gxp), grad_w, grad_b


def dense_forward(x, weights, biases) -> np.ndarray:
    """``S_i = sum_p w[i, p] * x[p] + b[i]``; weights are ``(out, in)``."""
    xb, squeeze = _batched(x, 2)
    w = np.asarray(weights, dtype=np.float64)
    b = np.asarray(biases, dtype=np.float64)
    if w.ndim != 2 or xb.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(f"dense shapes disagree: x {xb.shape}, w {w.shape}, b {b.shape}")
    out = xb @ w.T + b
    return out[0] if squeeze else out


def dense_backward(grad_out, cached_input, weights):
    xb, squeeze = _batched(cached_input, 2)
    gb, _ = _batched(grad_out, 2)
    w = np.asarray(weights, dtype=np.float64)
    if gb.shape != (xb.shape[0], w.shape[0]) or xb.shape[1] != w.shape[1]:
        raise ShapeError(f"dense backward shapes disagree: g {gb.shape}, x {xb.shape}, w {w.shape}")
    grad_in = gb @ w
    return (grad_in[0] if squeeze else grad_in), gb.T @ xb, gb.sum(axis=0)


def pool_output_hw(h: int, w: int, window: int = 2, stride: int = 2) -> tuple[int, int]:
    if h < window or w < window:
        raise ShapeError(f"input {h}x{w} smaller than pooling window {window}")
    return (h - window) // stride + 1, (w - window) // stride + 1


def maxpool2d(x, window: int = 2, stride: int = 2):
    """Non-overlapping max pooling; leftover rows/columns are dropped.

    Returns ``(output, argmax)``; ``argmax`` holds the row-major position of
    the first maximum inside each window and is what :func:`maxpool2d_backward`
    needs.
    """
    if window != stride:
        raise ValueError("only non-overlapping pooling (window == stride) is supported")
    xb, squeeze = _batched(x, 4)
    n, h, w, c = xb.shape
    ho, wo = pool_output_hw(h, w, window, stride)
    t = xb[:, :ho * window, :wo * window, :].reshape(n, ho, window, wo, window, c)
    t = t.transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, window * window)
    idx = t.argmax(axis=-1)
    out = np.take_along_axis(t, idx[..., None], axis=-1)[..., 0]
    if squeeze:
        return out[0], idx[0]
    return out, idx


def maxpool2d_backward(grad_out, argmax, input_shape, window: int = 2) -> np.ndarray:
    gb, squeeze = _batched(grad_out, 4)
    idx = np.asarray(argmax)
    if squeeze:
        idx = idx[None]
    if idx.shape != gb.shape:
        raise ShapeError(f"argmax shape {idx.shape} != grad shape {gb.shape}")
    n, ho, wo, c = gb.shape
    flat = np.zeros((n, ho, wo, c, window * window))
    np.put_along_axis(flat, idx[..., None], gb[..., None], axis=-1)
    flat = flat.reshape(n, ho, wo, c, window, window).transpose(0, 1, 4, 2, 5, 3)
    full_shape = (n,) + tuple(input_shape[-3:])
    grad = np.zeros(full_shape)
    grad[:, :ho * window, :wo * window, :] = flat.reshape(n, ho * window, wo * window, c)
    return grad[0] if squeeze else grad


def relu(x) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(max(x, 0), mask)`` where ``mask`` is 1.0 on positive entries."""
    x = np.asarray(x, dtype=np.float64)
    mask = (x > 0).astype(np.float64)
    return np.where(x > 0, x, 0.0), mask


def relu_backward(grad_out, mask) -> np.ndarray:
    return np.asarray(grad_out, dtype=np.float64) * mask
