"""Error maps, pooling-based binary morphology, and test-time prompt synthesis.

Erosion and dilation run as stride-1 min/max pooling passes so the same code
path parallelizes on GPU; out-of-bounds pixels count as background for both.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F

from .grid import (
    NEGATIVE,
    POSITIVE,
    PatchGrid,
    PatchIndex,
    PointPrompt,
    patch_pixels,
    validate_mask,
)
from .sampling import PromptBatch


class ErrorMaps(NamedTuple):
    fnm: np.ndarray  # road pixels the prediction missed
    fpm: np.ndarray  # pixels falsely predicted as road


@dataclass(frozen=True)
class OpeningConfig:
    """Opening kernel per error map plus prompts emitted per qualifying patch."""

    fnm_kernel: int = 3
    fpm_kernel: int = 7
    density: int = 1

    def __post_init__(self):
        for name in ("fnm_kernel", "fpm_kernel"):
            k = getattr(self, name)
            if k < 1 or k % 2 == 0:
                raise ValueError(f"{name} must be odd and >= 1, got {k}")
        if self.density < 1:
            raise ValueError(f"density must be >= 1, got {self.density}")


def error_maps(prediction: np.ndarray, truth: np.ndarray) -> ErrorMaps:
    prediction = validate_mask(prediction)
    truth = validate_mask(truth)
    if prediction.shape != truth.shape:
        raise ValueError(f"shape mismatch: prediction {prediction.shape} vs truth {truth.shape}")
    fnm = truth * (1 - prediction)
    fpm = prediction * (1 - truth)
    return ErrorMaps(fnm=fnm, fpm=fpm)


def _check_kernel(k: int):
    if k < 1 or k % 2 == 0:
        raise ValueError(f"kernel size must be odd and >= 1, got {k}")


def erode(mask: np.ndarray, k: int) -> np.ndarray:
    """Stride-1 minimum pooling with a k x k window; borders padded with 0."""
    _check_kernel(k)
    mask = validate_mask(mask)
    if k == 1:
        return mask.copy()
    t = torch.from_numpy(mask).to(torch.float32)[None, None]
    pad = k // 2
    t = F.pad(t, (pad, pad, pad, pad), value=0.0)
    out = -F.max_pool2d(-t, kernel_size=k, stride=1)
    return out[0, 0].to(torch.uint8).numpy()


def dilate(mask: np.ndarray, k: int) -> np.ndarray:
    """Stride-1 maximum pooling with a k x k window; borders padded with 0."""
    _check_kernel(k)
    mask = validate_mask(mask)
    if k == 1:
        return mask.copy()
    t = torch.from_numpy(mask).to(torch.float32)[None, None]
    pad = k // 2
    t = F.pad(t, (pad, pad, pad, pad), value=0.0)
    out = F.max_pool2d(t, kernel_size=k, stride=1)
    return out[0, 0].to(torch.uint8).numpy()


def opening(mask: np.ndarray, k: int) -> np.ndarray:
    """Erosion followed by dilation; removes regions smaller than the kernel."""
    return dilate(erode(mask, k), k)


def _nearest_to_center(
    local: np.ndarray, rect, count: int
) -> list[tuple[int, int]]:
    """Foreground pixels of a patch ordered by distance to the patch center.

    Ties break row-major. Returns at most ``count`` absolute coordinates.
    """
    rows, cols = np.nonzero(local)
    if rows.size == 0:
        return []
    rows = rows + rect.row0
    cols = cols + rect.col0
    center_r = (rect.row0 + rect.row1 - 1) / 2.0
    center_c = (rect.col0 + rect.col1 - 1) / 2.0
    d2 = (rows - center_r) ** 2 + (cols - center_c) ** 2
    order = np.lexsort((cols, rows, d2))
    return [(int(rows[k]), int(cols[k])) for k in order[:count]]


def generate_prompts(
    errs: ErrorMaps, cfg: OpeningConfig, grid: PatchGrid
) -> PromptBatch:
    """Synthesize corrective prompts from opened error maps.

    Each patch whose opened false-negative restriction is nonempty emits
    ``density`` positive prompts at the foreground pixels nearest the patch
    center; negative prompts come symmetrically from the opened false-positive
    map. Placement is deterministic so evaluations are reproducible.
    """
    fnm, fpm = errs
    if fnm.shape != (grid.height, grid.width) or fpm.shape != (grid.height, grid.width):
        raise ValueError(
            f"error maps {fnm.shape}/{fpm.shape} do not match grid "
            f"{grid.height}x{grid.width}"
        )
    opened_fnm = opening(fnm, cfg.fnm_kernel)
    opened_fpm = opening(fpm, cfg.fpm_kernel)

    def collect(opened: np.ndarray, polarity: str) -> tuple[PointPrompt, ...]:
        prompts = []
        for i in range(grid.n_rows):
            for j in range(grid.n_cols):
                rect = patch_pixels(PatchIndex(i, j), grid)
                local = opened[rect.row0 : rect.row1, rect.col0 : rect.col1]
                for h, w in _nearest_to_center(local, rect, cfg.density):
                    prompts.append(PointPrompt(h, w, polarity))
        return tuple(prompts)

    return PromptBatch(
        positives=collect(opened_fnm, POSITIVE),
        negatives=collect(opened_fpm, NEGATIVE),
    )
