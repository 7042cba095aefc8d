"""Hierarchical inverted-bottleneck encoder with mask-aware layers.

The encoder is a stem convolution followed by stages of inverted linear
residual bottlenecks (pointwise expansion, depthwise convolution,
pointwise linear projection, residual when shapes permit). Each stride-2
layer halves the resolution; the feature map left at each resolution is
the scale tap consumed by the decoder.

Output geometry is exact, never floored, so stride-2 layers use 4x4
kernels (pad 1) to halve even extents and stride-1 layers use 3x3 (pad 1).
Exact channel widths are deliberately configuration-driven: the stage
table, expansion ratios, repeats, dropout probabilities and an optional
permutation of the stage width sequence are all config fields.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, GeometryError
from .masking import MaskPyramid, MaskStack
from .module import Module
from .sparse import BatchNorm, _mask_factor, conv2d_compact, sparse_conv
from .tensor import Tensor, conv2d_forward_arrays, dropout, relu6

DROPOUT_SITES = ("after_expand", "after_depthwise", "after_project")


@dataclass(frozen=True)
class StageSpec:
    out_channels: int
    stride: int = 1
    expansion: float = 4.0
    repeats: int = 1
    dropout_p: float = 0.0


@dataclass(frozen=True)
class EncoderConfig:
    stem_channels: int = 16
    stem_stride: int = 2
    stages: tuple[StageSpec, ...] = (
        StageSpec(24, stride=2, expansion=4.0, repeats=2, dropout_p=0.05),
        StageSpec(40, stride=2, expansion=4.0, repeats=2, dropout_p=0.05),
        StageSpec(80, stride=2, expansion=4.0, repeats=2, dropout_p=0.10),
        StageSpec(160, stride=2, expansion=4.0, repeats=2, dropout_p=0.10),
    )
    dropout_site: str = "after_depthwise"
    channel_order: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.stem_stride not in (1, 2):
            raise ConfigError("stem_stride must be 1 or 2")
        if self.dropout_site not in DROPOUT_SITES:
            raise ConfigError(f"dropout_site must be one of {DROPOUT_SITES}")
        for s in self.stages:
            if s.stride not in (1, 2):
                raise ConfigError("stage stride must be 1 or 2")
            if s.expansion < 1.0:
                raise ConfigError("stage expansion must be >= 1")
            if s.repeats < 1:
                raise ConfigError("stage repeats must be >= 1")
            if not 0.0 <= s.dropout_p < 1.0:
                raise ConfigError("stage dropout_p must be in [0, 1)")
        if self.channel_order is not None:
            if sorted(self.channel_order) != list(range(len(self.stages))):
                raise ConfigError(
                    "channel_order must be a permutation of stage indices"
                )

    def effective_stages(self) -> tuple[StageSpec, ...]:
        """Stage list with the configured width permutation applied."""
        if self.channel_order is None:
            return self.stages
        widths = [self.stages[i].out_channels for i in self.channel_order]
        return tuple(
            replace(stage, out_channels=width)
            for stage, width in zip(self.stages, widths)
        )

    @property
    def downsample_ratio(self) -> int:
        ratio = self.stem_stride
        for s in self.stages:
            ratio *= s.stride
        return ratio

    @property
    def depth(self) -> int:
        """Number of resolution reductions (pyramid levels)."""
        return int(self.downsample_ratio).bit_length() - 1

    def scale_channels(self) -> list[int]:
        """Channel count of the deepest feature map at each scale 1..depth."""
        channels = {}
        scale = 1 if self.stem_stride == 2 else 0
        current = self.stem_channels
        if scale:
            channels[scale] = current
        for stage in self.effective_stages():
            if stage.stride == 2:
                scale += 1
            current = stage.out_channels
            channels[scale] = current
        return [channels[i] for i in range(1, self.depth + 1)]


def _he_conv(rng: np.random.Generator, cout: int, cpg: int, kh: int, kw: int) -> Tensor:
    fan_in = cpg * kh * kw
    std = np.sqrt(2.0 / fan_in)
    return Tensor(rng.standard_normal((cout, cpg, kh, kw)) * std, requires_grad=True)


class ConvBnAct(Module):
    """Convolution + batch norm + clipped activation, mask-aware."""

    def __init__(self, in_ch: int, out_ch: int, stride: int,
                 rng: np.random.Generator, groups: int = 1):
        kernel = 4 if stride == 2 else 3
        self.weight = _he_conv(rng, out_ch, in_ch // groups, kernel, kernel)
        self.bn = BatchNorm(out_ch)
        self._stride = stride
        self._groups = groups

    def __call__(self, x, mask_in=None, mask_out=None, training=True):
        y = sparse_conv(x, self.weight, stride=self._stride, padding=1,
                        groups=self._groups, mask_in=mask_in, mask_out=mask_out)
        y = self.bn(y, mask=mask_out, training=training)
        return relu6(y)

    def forward_arrays(self, x, mask_in=None, mask_out=None, compact=False):
        if compact and mask_out is not None:
            y = conv2d_compact(x, self.weight.data, None, self._stride, 1,
                               self._groups, mask_in, mask_out)
        else:
            if mask_in is not None:
                x = x * _mask_factor(mask_in, x.shape)
            y = conv2d_forward_arrays(x, self.weight.data, None,
                                      stride=self._stride, padding=1,
                                      groups=self._groups)
            if mask_out is not None:
                y = y * _mask_factor(mask_out, y.shape)
        y = self.bn.eval_arrays(y, mask=mask_out)
        return np.clip(y, 0.0, 6.0)


class InvertedBottleneck(Module):
    """Pointwise expand, depthwise, pointwise linear project; residual when
    stride is 1 and channel counts match."""

    def __init__(self, in_ch: int, out_ch: int, stride: int, expansion: float,
                 dropout_p: float, dropout_site: str, rng: np.random.Generator):
        hidden = int(round(in_ch * expansion))
        self.expand_w = (
            _he_conv(rng, hidden, in_ch, 1, 1) if hidden != in_ch else None
        )
        self.expand_bn = BatchNorm(hidden) if self.expand_w is not None else None
        k = 4 if stride == 2 else 3
        self.depthwise_w = _he_conv(rng, hidden, 1, k, k)
        self.depthwise_bn = BatchNorm(hidden)
        self.project_w = _he_conv(rng, out_ch, hidden, 1, 1)
        self.project_bn = BatchNorm(out_ch)
        self.use_residual = stride == 1 and in_ch == out_ch
        self._stride = stride
        self._hidden = hidden
        self._dropout_p = dropout_p
        self._dropout_site = dropout_site

    def _maybe_dropout(self, y, site, training, rng):
        if self._dropout_p > 0.0 and site == self._dropout_site and training:
            return dropout(y, self._dropout_p, rng=rng, training=True)
        return y

    def __call__(self, x, mask_in=None, mask_out=None, training=True, rng=None):
        h = x
        if self.expand_w is not None:
            h = sparse_conv(h, self.expand_w, mask_in=mask_in, mask_out=mask_in)
            h = relu6(self.expand_bn(h, mask=mask_in, training=training))
            h = self._maybe_dropout(h, "after_expand", training, rng)
        h = sparse_conv(h, self.depthwise_w, stride=self._stride, padding=1,
                        groups=self._hidden, mask_in=mask_in, mask_out=mask_out)
        h = relu6(self.depthwise_bn(h, mask=mask_out, training=training))
        h = self._maybe_dropout(h, "after_depthwise", training, rng)
        h = sparse_conv(h, self.project_w, mask_in=mask_out, mask_out=mask_out)
        h = self.project_bn(h, mask=mask_out, training=training)
        h = self._maybe_dropout(h, "after_project", training, rng)
        if self.use_residual:
            h = h + x
        return h

    def forward_arrays(self, x, mask_in=None, mask_out=None, compact=False):
        def masked(y, m):
            return y if m is None else y * _mask_factor(m, y.shape)

        h = x
        if self.expand_w is not None:
            if compact and mask_in is not None:
                h = conv2d_compact(h, self.expand_w.data, None, 1, 0, 1,
                                   mask_in, mask_in)
            else:
                h = masked(
                    conv2d_forward_arrays(masked(h, mask_in), self.expand_w.data),
                    mask_in,
                )
            h = np.clip(self.expand_bn.eval_arrays(h, mask=mask_in), 0.0, 6.0)
        if compact and mask_out is not None:
            h = conv2d_compact(h, self.depthwise_w.data, None, self._stride, 1,
                               self._hidden, mask_in, mask_out)
        else:
            h = masked(
                conv2d_forward_arrays(masked(h, mask_in), self.depthwise_w.data,
                                      stride=self._stride, padding=1,
                                      groups=self._hidden),
                mask_out,
            )
        h = np.clip(self.depthwise_bn.eval_arrays(h, mask=mask_out), 0.0, 6.0)
        if compact and mask_out is not None:
            h = conv2d_compact(h, self.project_w.data, None, 1, 0, 1,
                               mask_out, mask_out)
        else:
            h = masked(
                conv2d_forward_arrays(masked(h, mask_out), self.project_w.data),
                mask_out,
            )
        h = self.project_bn.eval_arrays(h, mask=mask_out)
        if self.use_residual:
            h = h + x
        return h


class Encoder(Module):
    """Stem plus bottleneck stages, emitting one tap per resolution scale."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        self.stem = ConvBnAct(3, config.stem_channels, config.stem_stride, rng)
        blocks = []
        plan = []  # (scale_before, scale_after) per block
        scale = 1 if config.stem_stride == 2 else 0
        in_ch = config.stem_channels
        for stage in config.effective_stages():
            for r in range(stage.repeats):
                stride = stage.stride if r == 0 else 1
                before = scale
                if stride == 2:
                    scale += 1
                blocks.append(
                    InvertedBottleneck(in_ch, stage.out_channels, stride,
                                       stage.expansion, stage.dropout_p,
                                       config.dropout_site, rng)
                )
                plan.append((before, scale))
                in_ch = stage.out_channels
        self.blocks = blocks
        self._config = config
        self._plan = plan
        self._depth = config.depth

    @property
    def config(self) -> EncoderConfig:
        return self._config

    @property
    def depth(self) -> int:
        return self._depth

    def _validate_geometry(self, image, pyramid):
        h, w = image.shape[-2:]
        ratio = 2 ** self._depth
        if h % ratio or w % ratio:
            raise GeometryError(
                f"input ({h}, {w}) not divisible by downsample ratio {ratio}"
            )
        if pyramid is not None:
            if pyramid.depth != self._depth:
                raise GeometryError(
                    f"pyramid depth {pyramid.depth} != encoder depth {self._depth}"
                )
            if pyramid.level(1).shape[-2:] != (h // 2, w // 2):
                raise GeometryError("pyramid built for a different resolution")

    def _mask_at(self, pyramid, scale):
        if pyramid is None:
            return None
        if scale == 0:
            return pyramid.input_mask()
        return pyramid.level(scale)

    def forward(self, image: Tensor,
                pyramid: MaskPyramid | MaskStack | None = None,
                training: bool = False,
                rng: np.random.Generator | None = None) -> list[Tensor]:
        """Per-scale feature maps (scales 1..depth, shallow to deep)."""
        self._validate_geometry(image, pyramid)
        stem_out_scale = 1 if self._config.stem_stride == 2 else 0
        x = self.stem(image,
                      mask_in=self._mask_at(pyramid, 0),
                      mask_out=self._mask_at(pyramid, stem_out_scale),
                      training=training)
        taps = {}
        if stem_out_scale >= 1:
            taps[stem_out_scale] = x
        for block, (before, after) in zip(self.blocks, self._plan):
            x = block(x,
                      mask_in=self._mask_at(pyramid, before),
                      mask_out=self._mask_at(pyramid, after),
                      training=training, rng=rng)
            taps[after] = x
        missing = [i for i in range(1, self._depth + 1) if i not in taps]
        if missing:
            raise ConfigError(f"no feature map produced at scales {missing}")
        return [taps[i] for i in range(1, self._depth + 1)]

    def forward_arrays(self, image: np.ndarray,
                       pyramid: MaskPyramid | MaskStack | None = None,
                       compact: bool = False) -> list[np.ndarray]:
        """Eval-mode forward on raw arrays (dense, emulated, or compact)."""
        self._validate_geometry(image, pyramid)
        stem_out_scale = 1 if self._config.stem_stride == 2 else 0
        x = self.stem.forward_arrays(
            image,
            mask_in=self._mask_at(pyramid, 0),
            mask_out=self._mask_at(pyramid, stem_out_scale),
            compact=compact,
        )
        taps = {}
        if stem_out_scale >= 1:
            taps[stem_out_scale] = x
        for block, (before, after) in zip(self.blocks, self._plan):
            x = block.forward_arrays(
                x,
                mask_in=self._mask_at(pyramid, before),
                mask_out=self._mask_at(pyramid, after),
                compact=compact,
            )
            taps[after] = x
        return [taps[i] for i in range(1, self._depth + 1)]


def build_encoder(config: EncoderConfig, seed: int,
                  downsample_ratio: int = 32) -> Encoder:
    """Construct an encoder with deterministic parameter initialization.

    Conv weights use fan-in scaled normals, norms start at identity.
    The config's total stride must equal ``downsample_ratio`` (32 by
    default; pass the matching ratio when the masking geometry is adjusted
    for a different depth).
    """
    if config.downsample_ratio != downsample_ratio:
        raise ConfigError(
            f"config downsamples by {config.downsample_ratio}, expected "
            f"{downsample_ratio}; adjust stages or the masking geometry"
        )
    rng = np.random.default_rng(seed)
    return Encoder(config, rng)
