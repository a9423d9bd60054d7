"""Differentiable building blocks: convolutions, rectification, concat, aggregation.

All functions operate on raw (C, H, W) float64 arrays. Forward passes are
plain cross-correlations computed as a small loop over kernel offsets with a
``tensordot`` per offset; backward passes are the exact adjoints.

Conv2D forward, for each output channel o and output position (i, j):

    y[o, i, j] = b[o] + sum_{c, u, v} K[o, c, u, v] * xp[c, i*s + u, j*s + v]

where xp is the zero-padded input and s the stride. Output dims follow
H_out = (H + 2p - kh) // s + 1. Transposed conv is the adjoint map: each
input pixel stamps the kernel into the output at a stride-s offset, so
H_out = (H - 1) * s + kh - 2p.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError
from .tensor import Array, FeatureMap


@dataclass
class ConvParams:
    """Weights of one (possibly transposed) convolution."""

    kernel: Array  # (out_ch, in_ch, kh, kw)
    bias: Array | None  # (out_ch,) or None
    stride: int = 1
    padding: int = 0

    def __post_init__(self) -> None:
        self.kernel = np.ascontiguousarray(self.kernel, dtype=np.float64)
        if self.kernel.ndim != 4:
            raise ShapeError(f"kernel must be 4-d (out,in,kh,kw), got {self.kernel.shape}")
        if self.bias is not None:
            self.bias = np.ascontiguousarray(self.bias, dtype=np.float64)
            if self.bias.shape != (self.kernel.shape[0],):
                raise ShapeError(
                    f"bias shape {self.bias.shape} does not match out_ch {self.kernel.shape[0]}"
                )
        if not np.isfinite(self.kernel).all() or (
            self.bias is not None and not np.isfinite(self.bias).all()
        ):
            raise NumericError("convolution parameters must be finite")
        if self.stride < 1 or self.padding < 0:
            raise ShapeError(f"bad stride/padding ({self.stride}, {self.padding})")


def _conv_out_dim(size: int, k: int, stride: int, padding: int) -> int:
    padded = size + 2 * padding
    if padded < k:
        raise ShapeError(f"kernel size {k} exceeds padded input {padded}")
    return (padded - k) // stride + 1


def conv2d_forward(
    x: Array, kernel: Array, bias: Array | None, stride: int = 1, padding: int = 0
) -> Array:
    c_out, c_in, kh, kw = kernel.shape
    if x.shape[0] != c_in:
        raise ShapeError(f"input has {x.shape[0]} channels, kernel expects {c_in}")
    h_out = _conv_out_dim(x.shape[1], kh, stride, padding)
    w_out = _conv_out_dim(x.shape[2], kw, stride, padding)
    xp = x
    if padding:
        xp = np.zeros((c_in, x.shape[1] + 2 * padding, x.shape[2] + 2 * padding))
        xp[:, padding : padding + x.shape[1], padding : padding + x.shape[2]] = x
    y = np.zeros((c_out, h_out, w_out))
    for u in range(kh):
        for v in range(kw):
            patch = xp[
                :, u : u + stride * (h_out - 1) + 1 : stride, v : v + stride * (w_out - 1) + 1 : stride
            ]
            y += np.tensordot(kernel[:, :, u, v], patch, axes=(1, 0))
    if bias is not None:
        y += bias[:, None, None]
    return y


def conv2d_backward(
    x: Array, kernel: Array, stride: int, padding: int, gy: Array
) -> tuple[Array, Array, Array]:
    """Gradients (gx, gkernel, gbias) of a conv for upstream gradient ``gy``."""
    c_out, c_in, kh, kw = kernel.shape
    h, w = x.shape[1], x.shape[2]
    h_out, w_out = gy.shape[1], gy.shape[2]
    hp, wp = h + 2 * padding, w + 2 * padding
    xp = x
    if padding:
        xp = np.zeros((c_in, hp, wp))
        xp[:, padding : padding + h, padding : padding + w] = x
    gxp = np.zeros((c_in, hp, wp))
    gk = np.zeros_like(kernel)
    for u in range(kh):
        for v in range(kw):
            rows = slice(u, u + stride * (h_out - 1) + 1, stride)
            cols = slice(v, v + stride * (w_out - 1) + 1, stride)
            gk[:, :, u, v] = np.tensordot(gy, xp[:, rows, cols], axes=([1, 2], [1, 2]))
            gxp[:, rows, cols] += np.tensordot(kernel[:, :, u, v], gy, axes=([0], [0]))
    gx = gxp[:, padding : padding + h, padding : padding + w]
    if padding:
        gx = np.ascontiguousarray(gx)
    return gx, gk, gy.sum(axis=(1, 2))


def tconv2d_forward(
    x: Array, kernel: Array, bias: Array | None, stride: int = 2, padding: int = 0
) -> Array:
    c_out, c_in, kh, kw = kernel.shape
    if x.shape[0] != c_in:
        raise ShapeError(f"input has {x.shape[0]} channels, kernel expects {c_in}")
    h, w = x.shape[1], x.shape[2]
    hf = (h - 1) * stride + kh
    wf = (w - 1) * stride + kw
    if hf <= 2 * padding or wf <= 2 * padding:
        raise ShapeError("transposed conv output collapsed by padding")
    yf = np.zeros((c_out, hf, wf))
    for u in range(kh):
        for v in range(kw):
            yf[:, u : u + stride * (h - 1) + 1 : stride, v : v + stride * (w - 1) + 1 : stride] += (
                np.tensordot(kernel[:, :, u, v], x, axes=(1, 0))
            )
    y = yf
    if padding:
        y = np.ascontiguousarray(yf[:, padding:-padding, padding:-padding])
    if bias is not None:
        y = y + bias[:, None, None]
    return y


def tconv2d_backward(
    x: Array, kernel: Array, stride: int, padding: int, gy: Array
) -> tuple[Array, Array, Array]:
    c_out, c_in, kh, kw = kernel.shape
    h, w = x.shape[1], x.shape[2]
    hf = (h - 1) * stride + kh
    wf = (w - 1) * stride + kw
    gyf = gy
    if padding:
        gyf = np.zeros((c_out, hf, wf))
        gyf[:, padding:-padding, padding:-padding] = gy
    gx = np.zeros_like(x)
    gk = np.zeros_like(kernel)
    for u in range(kh):
        for v in range(kw):
            sl = gyf[:, u : u + stride * (h - 1) + 1 : stride, v : v + stride * (w - 1) + 1 : stride]
            gk[:, :, u, v] = np.tensordot(sl, x, axes=([1, 2], [1, 2]))
            gx += np.tensordot(kernel[:, :, u, v], sl, axes=([0], [0]))
    return gx, gk, gy.sum(axis=(1, 2))


def rectify_forward(x: Array) -> Array:
    return np.maximum(x, 0.0)


def rectify_backward(x: Array, gy: Array) -> Array:
    # Subgradient at 0 is taken as 0.
    return gy * (x > 0.0)


def scale_bias_forward(x: Array, scale: Array, bias: Array) -> Array:
    return x * scale[:, None, None] + bias[:, None, None]


def scale_bias_backward(
    x: Array, scale: Array, gy: Array
) -> tuple[Array, Array, Array]:
    gscale = (gy * x).sum(axis=(1, 2))
    gbias = gy.sum(axis=(1, 2))
    gx = gy * scale[:, None, None]
    return gx, gscale, gbias


def logistic_forward(z: Array) -> Array:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def logistic_backward(y: Array, gy: Array) -> Array:
    return gy * y * (1.0 - y)


def concat_channels(a: Array, b: Array) -> Array:
    if a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"concat spatial dims differ: {a.shape[1:]} vs {b.shape[1:]}")
    return np.concatenate([a, b], axis=0)


def split_channels(g: Array, first_channels: int) -> tuple[Array, Array]:
    return g[:first_channels].copy(), g[first_channels:].copy()


# FeatureMap-level surface. These wrappers carry stride metadata so networks
# can assert that declared strides match realized spatial dimensions.


def conv2d(params: ConvParams, x: FeatureMap) -> FeatureMap:
    y = conv2d_forward(x.values, params.kernel, params.bias, params.stride, params.padding)
    return x.like(y, stride=x.stride * params.stride)


def tconv2d(params: ConvParams, x: FeatureMap) -> FeatureMap:
    if x.stride % params.stride != 0:
        raise ShapeError(
            f"cannot upsample stride-{x.stride} map by factor {params.stride}"
        )
    y = tconv2d_forward(x.values, params.kernel, params.bias, params.stride, params.padding)
    return x.like(y, stride=x.stride // params.stride)


def rectify(x: FeatureMap) -> FeatureMap:
    return x.like(rectify_forward(x.values))


def concat(a: FeatureMap, b: FeatureMap) -> FeatureMap:
    if a.stride != b.stride:
        raise ShapeError(f"concat stride mismatch: {a.stride} vs {b.stride}")
    return a.like(concat_channels(a.values, b.values))


def aggregate(params_1x1: ConvParams, a: FeatureMap, b: FeatureMap) -> FeatureMap:
    """Fuse two same-resolution maps: concat channels, then a 1x1 convolution."""
    if params_1x1.kernel.shape[2:] != (1, 1):
        raise ShapeError("aggregate requires a 1x1 kernel")
    return conv2d(params_1x1, concat(a, b))
