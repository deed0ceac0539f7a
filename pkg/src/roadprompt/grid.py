"""Patch geometry: the fixed tiling that bounds every point prompt's influence.

Coordinates are (row, col) with origin at the top-left pixel throughout the
package. Masks are 2-D numpy arrays over {0, 1}.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, NamedTuple

import numpy as np

POSITIVE = "positive"
NEGATIVE = "negative"


def validate_mask(mask: np.ndarray) -> np.ndarray:
    """Check that ``mask`` is a 2-D {0,1} array and return it as uint8."""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {arr.shape}")
    if arr.shape[0] <= 0 or arr.shape[1] <= 0:
        raise ValueError(f"mask dimensions must be positive, got {arr.shape}")
    if not np.isin(arr, (0, 1)).all():
        bad = np.unique(arr[~np.isin(arr, (0, 1))])
        raise ValueError(f"mask values must be 0 or 1, found {bad[:5]}")
    return arr.astype(np.uint8, copy=False)


@dataclass(frozen=True)
class PointPrompt:
    """A pixel coordinate plus polarity. h is the row index, w the column."""

    h: int
    w: int
    polarity: str

    def __post_init__(self):
        if self.polarity not in (POSITIVE, NEGATIVE):
            raise ValueError(f"polarity must be '{POSITIVE}' or '{NEGATIVE}', got {self.polarity!r}")


class PatchIndex(NamedTuple):
    i: int
    j: int


class PatchRect(NamedTuple):
    """Half-open pixel rectangle [row0, row1) x [col0, col1)."""

    row0: int
    row1: int
    col0: int
    col1: int


@dataclass(frozen=True)
class PatchGrid:
    """Non-overlapping l_h x l_w tiling of an H x W image.

    Edge patches are truncated when the image size is not a multiple of the
    patch size, so arbitrary rasters work.
    """

    l_h: int
    l_w: int
    height: int
    width: int

    def __post_init__(self):
        if self.l_h < 1 or self.l_w < 1:
            raise ValueError(f"patch size must be >= 1, got {self.l_h}x{self.l_w}")
        if self.height < 1 or self.width < 1:
            raise ValueError(f"image size must be positive, got {self.height}x{self.width}")

    @property
    def n_rows(self) -> int:
        return -(-self.height // self.l_h)

    @property
    def n_cols(self) -> int:
        return -(-self.width // self.l_w)

    def contains_point(self, h: int, w: int) -> bool:
        return 0 <= h < self.height and 0 <= w < self.width


def patch_of(point: PointPrompt, grid: PatchGrid) -> PatchIndex:
    """Map a point to the patch that contains it (floor division)."""
    if not grid.contains_point(point.h, point.w):
        raise ValueError(
            f"point (h={point.h}, w={point.w}) outside image bounds "
            f"{grid.height}x{grid.width}"
        )
    return PatchIndex(point.h // grid.l_h, point.w // grid.l_w)


def patch_pixels(idx: PatchIndex, grid: PatchGrid) -> PatchRect:
    """Half-open pixel rectangle covered by a patch, clamped at image edges."""
    i, j = idx
    if not (0 <= i < grid.n_rows and 0 <= j < grid.n_cols):
        raise ValueError(
            f"patch index ({i}, {j}) outside grid {grid.n_rows}x{grid.n_cols}"
        )
    return PatchRect(
        row0=i * grid.l_h,
        row1=min((i + 1) * grid.l_h, grid.height),
        col0=j * grid.l_w,
        col1=min((j + 1) * grid.l_w, grid.width),
    )


def patch_union_mask(indices: Iterable[PatchIndex], grid: PatchGrid) -> np.ndarray:
    """Mask that is 1 exactly on pixels covered by any of the listed patches."""
    out = np.zeros((grid.height, grid.width), dtype=np.uint8)
    for idx in set(indices):
        r = patch_pixels(PatchIndex(*idx), grid)
        out[r.row0 : r.row1, r.col0 : r.col1] = 1
    return out


def patches_of_points(points: Iterable[PointPrompt], grid: PatchGrid) -> set[PatchIndex]:
    return {patch_of(p, grid) for p in points}
