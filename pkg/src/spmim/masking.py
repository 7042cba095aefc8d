"""Patch-mask sampling and per-scale mask pyramids.

Convention used across the whole package: boolean ``True`` means a
position is *visible*, ``False`` means it is masked. Masked-cell counts
are exact (round-half-up of ratio x cells, sampled without replacement),
never Bernoulli draws, so a given ratio always hides the same number of
patches.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, DimensionError, GeometryError
from .tensor import Tensor, mul


def _round_half_up(value: float) -> int:
    return int(np.floor(value + 0.5))


@dataclass(frozen=True)
class MaskGrid:
    """Boolean patch-visibility grid at the coarsest (base) resolution."""

    rows: int
    cols: int
    visible: np.ndarray
    seed: int

    def __post_init__(self):
        if self.visible.shape != (self.rows, self.cols):
            raise DimensionError("visible grid shape does not match rows/cols")

    @property
    def masked_count(self) -> int:
        return int(np.count_nonzero(~self.visible))


@dataclass(frozen=True)
class MaskPyramid:
    """The base grid expanded to each encoder scale.

    ``levels[i]`` is the visibility map at scale ``i + 1`` (spatial size
    ``H / 2**(i+1)``); the last level equals the base grid when the grid
    matches the encoder's full downsampling ratio.
    """

    base: MaskGrid
    height: int
    width: int
    levels: list = field(default_factory=list)

    def level(self, i: int) -> np.ndarray:
        """Visibility map for scale i (1-based, matching encoder scales)."""
        if not 1 <= i <= len(self.levels):
            raise ArgumentError(f"pyramid has levels 1..{len(self.levels)}, got {i}")
        return self.levels[i - 1]

    @property
    def depth(self) -> int:
        return len(self.levels)

    def input_mask(self) -> np.ndarray:
        """Visibility map expanded to the full input resolution."""
        return expand_mask(self.base, self.height, self.width)


def sample_mask(rows: int, cols: int, ratio: float, seed: int) -> MaskGrid:
    """Uniform random patch mask hiding exactly round(ratio * cells) cells."""
    if rows < 1 or cols < 1:
        raise ArgumentError("mask grid must have at least one row and column")
    if not 0.0 <= ratio <= 1.0:
        raise ArgumentError(f"mask ratio must lie in [0, 1], got {ratio}")
    cells = rows * cols
    hidden = _round_half_up(ratio * cells)
    rng = np.random.default_rng(seed)
    order = rng.permutation(cells)
    visible = np.ones(cells, dtype=bool)
    visible[order[:hidden]] = False
    return MaskGrid(rows=rows, cols=cols, visible=visible.reshape(rows, cols), seed=seed)


def expand_mask(base: MaskGrid, height: int, width: int) -> np.ndarray:
    """Nearest-neighbor expansion of the base grid to (height, width)."""
    if height % base.rows != 0 or width % base.cols != 0:
        raise GeometryError(
            f"({height}, {width}) not divisible by base grid "
            f"({base.rows}, {base.cols})"
        )
    return np.repeat(
        np.repeat(base.visible, height // base.rows, axis=0),
        width // base.cols,
        axis=1,
    )


def build_mask_pyramid(base: MaskGrid, height: int, width: int,
                       depth: int = 5) -> MaskPyramid:
    """Expand a base grid into per-scale masks for ``depth`` downsamplings.

    The base grid must sit at the deepest scale: its dimensions must equal
    (height / 2**depth, width / 2**depth).
    """
    ratio = 2 ** depth
    if height % ratio != 0 or width % ratio != 0:
        raise GeometryError(
            f"input ({height}, {width}) not divisible by 2**{depth}"
        )
    if (base.rows, base.cols) != (height // ratio, width // ratio):
        raise GeometryError(
            f"base grid ({base.rows}, {base.cols}) does not match "
            f"({height // ratio}, {width // ratio})"
        )
    levels = [
        expand_mask(base, height // 2 ** i, width // 2 ** i)
        for i in range(1, depth + 1)
    ]
    return MaskPyramid(base=base, height=height, width=width, levels=levels)


@dataclass(frozen=True)
class MaskStack:
    """Per-sample mask pyramids stacked for batched forward passes.

    Mirrors the :class:`MaskPyramid` access interface with arrays of shape
    (N, 1, h, w) so every sample in a batch can carry its own mask.
    """

    grids: list
    height: int
    width: int
    levels: list = field(default_factory=list)

    @property
    def depth(self) -> int:
        return len(self.levels)

    def level(self, i: int) -> np.ndarray:
        if not 1 <= i <= len(self.levels):
            raise ArgumentError(f"stack has levels 1..{len(self.levels)}, got {i}")
        return self.levels[i - 1]

    def input_mask(self) -> np.ndarray:
        return np.stack(
            [expand_mask(g, self.height, self.width) for g in self.grids]
        )[:, None]


def stack_pyramids(pyramids: list[MaskPyramid]) -> MaskStack:
    """Combine per-sample pyramids into batched (N, 1, h, w) level maps."""
    if not pyramids:
        raise ArgumentError("cannot stack an empty list of pyramids")
    depth = pyramids[0].depth
    hw = (pyramids[0].height, pyramids[0].width)
    for p in pyramids:
        if p.depth != depth or (p.height, p.width) != hw:
            raise GeometryError("pyramids in a batch must share geometry")
    levels = [
        np.stack([p.level(i) for p in pyramids])[:, None]
        for i in range(1, depth + 1)
    ]
    return MaskStack(grids=[p.base for p in pyramids], height=hw[0],
                     width=hw[1], levels=levels)


def apply_mask_zero(x: Tensor, mask: np.ndarray) -> Tensor:
    """Zero all channels at masked spatial positions; visible pass through.

    ``mask`` is either a 2-D (h, w) map shared across the batch or a
    per-sample (N, 1, h, w) stack.
    """
    mask = np.asarray(mask)
    if mask.ndim == 2:
        if x.shape[-2:] != mask.shape:
            raise DimensionError(
                f"mask {mask.shape} does not match spatial dims {x.shape[-2:]}"
            )
        factor = mask.astype(np.float64)[None, None]
    elif mask.ndim == 4 and mask.shape[1] == 1:
        if x.shape[0] != mask.shape[0] or x.shape[-2:] != mask.shape[-2:]:
            raise DimensionError(
                f"per-sample mask {mask.shape} does not match input {x.shape}"
            )
        factor = mask.astype(np.float64)
    else:
        raise DimensionError("mask must be (h, w) or (N, 1, h, w)")
    return mul(x, Tensor(factor))
