"""Lightweight upsampling decoder with additive projection skips.

The deepest densified feature map is projected to the decoder width, then
each block doubles the resolution (nearest upsample, 3x3 convolution,
batch norm, clipped activation) and adds the projection of the matching
encoder scale. A final upsample plus 1x1 convolution maps the shallowest
state back to a 3-channel image. The decoder runs dense: after mask
embeddings are substituted, every position carries information.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .module import Module
from .sparse import BatchNorm
from .tensor import Tensor, conv2d, relu6, upsample_nearest2x


@dataclass(frozen=True)
class DecoderConfig:
    """Per-scale decoder widths, shallowest scale first."""

    channels: tuple[int, ...] = (64, 64, 64, 64, 64)

    def __post_init__(self):
        if not self.channels or any(c < 1 for c in self.channels):
            raise ConfigError("decoder channels must be positive")


class Projection(Module):
    """1x1 convolution (with bias) aligning encoder and decoder widths."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator):
        std = np.sqrt(2.0 / in_ch)
        self.weight = Tensor(
            rng.standard_normal((out_ch, in_ch, 1, 1)) * std, requires_grad=True
        )
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.weight.shape[1]:
            raise DimensionError(
                f"projection expects {self.weight.shape[1]} channels, "
                f"got {x.shape[1]}"
            )
        return conv2d(x, self.weight, self.bias)


class UpBlock(Module):
    """Nearest 2x upsample, 3x3 convolution, batch norm, clipped activation."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator):
        std = np.sqrt(2.0 / (in_ch * 9))
        self.weight = Tensor(
            rng.standard_normal((out_ch, in_ch, 3, 3)) * std, requires_grad=True
        )
        self.bn = BatchNorm(out_ch)

    def __call__(self, x: Tensor, training: bool = True) -> Tensor:
        y = upsample_nearest2x(x)
        y = conv2d(y, self.weight, padding=1)
        y = self.bn(y, training=training)
        return relu6(y)


class Decoder(Module):
    """Projections, upsampling blocks and the image reconstruction head."""

    def __init__(self, config: DecoderConfig, encoder_channels: list[int],
                 rng: np.random.Generator):
        depth = len(encoder_channels)
        if len(config.channels) != depth:
            raise ConfigError(
                f"decoder expects {depth} channel entries, config has "
                f"{len(config.channels)}"
            )
        self.projections = [
            Projection(encoder_channels[i], config.channels[i], rng)
            for i in range(depth)
        ]
        self.blocks = [
            UpBlock(config.channels[i + 1], config.channels[i], rng)
            for i in range(depth - 1)
        ]
        self.head = Projection(config.channels[0], 3, rng)
        self._depth = depth

    @property
    def depth(self) -> int:
        return self._depth

    def decode(self, s_primes: list[Tensor], training: bool = True) -> list[Tensor]:
        """Run the recursion over densified scales; returns decoder states
        shallowest-first (index i-1 holds the state at scale i)."""
        if len(s_primes) != self._depth:
            raise DimensionError(
                f"expected {self._depth} scale maps, got {len(s_primes)}"
            )
        deepest = self._depth - 1
        state = self.projections[deepest](s_primes[deepest])
        states = [None] * self._depth
        states[deepest] = state
        for i in range(deepest - 1, -1, -1):
            state = self.blocks[i](state, training=training) + self.projections[i](
                s_primes[i]
            )
            states[i] = state
        return states

    def reconstruct_head(self, shallowest: Tensor) -> Tensor:
        """Final 2x upsample and 1x1 convolution to 3 image channels."""
        return self.head(upsample_nearest2x(shallowest))

    def forward(self, s_primes: list[Tensor], training: bool = True) -> Tensor:
        return self.reconstruct_head(self.decode(s_primes, training=training)[0])


def build_decoder(config: DecoderConfig, encoder_channels: list[int],
                  seed: int) -> Decoder:
    """Decoder with deterministic initialization from an integer seed."""
    return Decoder(config, encoder_channels, np.random.default_rng(seed))
