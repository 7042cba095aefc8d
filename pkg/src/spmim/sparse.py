"""Mask-aware neural layers.

Sparse convolution is realized as a zero-in/zero-out emulation: the input
is zeroed at masked positions, a dense convolution runs, and the output is
zeroed at masked output positions. For block-regular masks this is exactly
equivalent to evaluating the convolution on visible positions only, and it
keeps the guarantee that no masked pixel can influence any visible
activation ("leakage invariance").

:func:`conv2d_compact` is the gather/scatter execution variant for
inference: it evaluates only the visible output columns and therefore
skips work proportional to the mask ratio. With an all-visible mask it is
bitwise identical to the emulation; under partial masks the two paths
compute the same dot products with different summation grouping inside the
BLAS kernels, so they agree to float64 reassociation error (tested at
1e-10) rather than bit-for-bit.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    ArgumentError,
    DegenerateBatchError,
    DimensionError,
    GeometryError,
)
from .masking import apply_mask_zero
from .module import Module
from .tensor import (
    Tensor,
    _im2col,
    conv2d,
    dropout,
    mul,
    reshape,
    sqrt,
    tsum,
)

__all__ = [
    "sparse_conv",
    "conv2d_compact",
    "BatchNorm",
    "MaskEmbedding",
    "densify",
    "dropout",
]


def _mask_factor(mask: np.ndarray, x_shape) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim == 2:
        if tuple(x_shape[-2:]) != mask.shape:
            raise DimensionError(
                f"mask {mask.shape} does not match spatial dims {tuple(x_shape[-2:])}"
            )
        return mask.astype(np.float64)[None, None]
    if mask.ndim == 4 and mask.shape[1] == 1:
        if x_shape[0] != mask.shape[0] or tuple(x_shape[-2:]) != mask.shape[-2:]:
            raise DimensionError(
                f"per-sample mask {mask.shape} does not match input {tuple(x_shape)}"
            )
        return mask.astype(np.float64)
    raise DimensionError("mask must be (h, w) or (N, 1, h, w)")


def sparse_conv(x: Tensor, w: Tensor, bias: Tensor | None = None,
                stride: int = 1, padding: int = 0, groups: int = 1,
                mask_in: np.ndarray | None = None,
                mask_out: np.ndarray | None = None) -> Tensor:
    """Convolution restricted to visible positions (zero-in/zero-out).

    ``mask_in`` must match the input resolution and ``mask_out`` the
    output resolution implied by the stride geometry; masked output
    positions are exactly zero.
    """
    if mask_in is not None:
        x = apply_mask_zero(x, mask_in)
    y = conv2d(x, w, bias, stride=stride, padding=padding, groups=groups)
    if mask_out is not None:
        out_mask = np.asarray(mask_out)
        if tuple(y.shape[-2:]) != tuple(out_mask.shape[-2:]):
            raise GeometryError(
                f"output mask {out_mask.shape[-2:]} does not match conv output "
                f"{tuple(y.shape[-2:])} (stride geometry mismatch)"
            )
        y = apply_mask_zero(y, out_mask)
    return y


def conv2d_compact(x: np.ndarray, w: np.ndarray, bias: np.ndarray | None,
                   stride: int, padding: int, groups: int,
                   mask_in: np.ndarray | None,
                   mask_out: np.ndarray) -> np.ndarray:
    """Forward-only sparse convolution evaluating visible outputs only.

    Gathers the visible output columns of the im2col matrix, multiplies
    them through the weight matrix, and scatters the results into a
    zero-filled output. Masked output positions are never computed.
    """
    n, cin, h, wdt = x.shape
    cout, cpg, kh, kw = w.shape
    if mask_in is not None:
        x = x * _mask_factor(mask_in, x.shape)
    if padding:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    out_mask = np.asarray(mask_out)
    if out_mask.ndim == 2:
        out_mask = np.broadcast_to(out_mask[None, None], (n, 1, ho, wo))
    if out_mask.shape[-2:] != (ho, wo):
        raise GeometryError(
            f"output mask {out_mask.shape[-2:]} does not match conv output {(ho, wo)}"
        )
    w2 = w.reshape(groups, cout // groups, cpg * kh * kw)
    if out_mask.all():
        # no work to skip: use the batched dense kernel (bitwise identical)
        cols, _, _ = _im2col(xp, kh, kw, stride, groups)
        out = np.matmul(w2[None], cols).reshape(n, cout, ho, wo)
        if bias is not None:
            out += bias.reshape(1, cout, 1, 1)
        return out
    out = np.zeros((n, cout, ho * wo))
    for b in range(n):
        vis_y, vis_x = np.nonzero(out_mask[b, 0])
        if vis_y.size == 0:
            continue
        # copy only the visible windows, one kernel offset at a time
        sy, sx = vis_y * stride, vis_x * stride
        gathered = np.empty((cin, kh, kw, vis_y.size))
        for i in range(kh):
            for j in range(kw):
                gathered[:, i, j, :] = xp[b][:, sy + i, sx + j]
        cols = gathered.reshape(groups, cpg * kh * kw, vis_y.size)
        out[b][:, vis_y * wo + vis_x] = np.matmul(w2, cols).reshape(
            cout, vis_y.size
        )
    out = out.reshape(n, cout, ho, wo)
    if bias is not None:
        out += bias.reshape(1, cout, 1, 1)
        out *= out_mask  # bias must not leak into masked positions
    return out


class BatchNorm(Module):
    """Batch normalization whose train-mode statistics see visible
    positions only.

    Population (biased) variance is used for both the normalization and
    the running statistics. Eval mode normalizes with the running
    statistics; when a mask is supplied the output is re-zeroed at masked
    positions (the affine shift would otherwise repopulate them).
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self._momentum = momentum
        self._eps = eps
        self._channels = channels

    def __call__(self, x: Tensor, mask: np.ndarray | None = None,
                 training: bool = True) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self._channels:
            raise DimensionError(
                f"expected (N, {self._channels}, h, w) input, got {x.shape}"
            )
        n = x.shape[0]
        c = self._channels
        gamma = reshape(self.gamma, (1, c, 1, 1))
        beta = reshape(self.beta, (1, c, 1, 1))

        if not training:
            scale = 1.0 / np.sqrt(self.running_var + self._eps)
            y = (x - Tensor(self.running_mean.reshape(1, c, 1, 1))) * Tensor(
                scale.reshape(1, c, 1, 1)
            )
            y = gamma * y + beta
            return y if mask is None else apply_mask_zero(y, mask)

        if mask is None:
            count = float(n * x.shape[2] * x.shape[3])
            mean = tsum(x, axis=(0, 2, 3), keepdims=True) * (1.0 / count)
            diff = x - mean
            var = tsum(diff * diff, axis=(0, 2, 3), keepdims=True) * (1.0 / count)
            xhat = diff / sqrt(var + self._eps)
            y = gamma * xhat + beta
        else:
            factor = _mask_factor(mask, x.shape)
            count = float(factor.sum()) * (n if factor.shape[0] == 1 else 1)
            if count == 0:
                raise DegenerateBatchError(
                    "no visible positions for train-mode batch statistics"
                )
            fmask = Tensor(factor)
            xm = mul(x, fmask)
            mean = tsum(xm, axis=(0, 2, 3), keepdims=True) * (1.0 / count)
            diff = mul(x - mean, fmask)
            var = tsum(diff * diff, axis=(0, 2, 3), keepdims=True) * (1.0 / count)
            xhat = (x - mean) / sqrt(var + self._eps)
            y = mul(gamma * xhat + beta, fmask)

        m = self._momentum
        self.running_mean = (1 - m) * self.running_mean + m * mean.data.reshape(c)
        self.running_var = (1 - m) * self.running_var + m * var.data.reshape(c)
        return y

    def eval_arrays(self, x: np.ndarray,
                    mask: np.ndarray | None = None) -> np.ndarray:
        """Eval-mode normalization on raw arrays (compact inference path)."""
        c = self._channels
        scale = 1.0 / np.sqrt(self.running_var + self._eps)
        y = (x - self.running_mean.reshape(1, c, 1, 1)) * scale.reshape(1, c, 1, 1)
        y = self.gamma.data.reshape(1, c, 1, 1) * y + self.beta.data.reshape(1, c, 1, 1)
        if mask is not None:
            y = y * _mask_factor(mask, x.shape)
        return y


class MaskEmbedding(Module):
    """Learned per-scale vectors substituted at masked feature positions."""

    def __init__(self, channels_per_scale: list[int], rng: np.random.Generator,
                 init_scale: float = 0.02):
        if init_scale < 0:
            raise ArgumentError("init_scale must be non-negative")
        self.vectors = [
            Tensor(rng.standard_normal(c) * init_scale, requires_grad=True)
            for c in channels_per_scale
        ]

    def __len__(self) -> int:
        return len(self.vectors)

    def vector(self, scale: int) -> Tensor:
        """Embedding for scale i (1-based, matching pyramid levels)."""
        if not 1 <= scale <= len(self.vectors):
            raise ArgumentError(f"no embedding for scale {scale}")
        return self.vectors[scale - 1]


def densify(features: Tensor, mask: np.ndarray, embedding: Tensor) -> Tensor:
    """Fill masked feature positions with the scale's learned embedding.

    Visible positions copy ``features``; masked positions receive the
    broadcast embedding vector, so the decoder always sees a fully
    populated map.
    """
    c = features.shape[1]
    if embedding.shape != (c,):
        raise DimensionError(
            f"embedding has {embedding.shape} channels, features have {c}"
        )
    factor = _mask_factor(mask, features.shape)
    visible = mul(features, Tensor(factor))
    filled = mul(reshape(embedding, (1, c, 1, 1)), Tensor(1.0 - factor))
    return visible + filled
