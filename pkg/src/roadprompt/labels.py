"""Dynamic synthesis of localized supervision masks from sampled prompts.

The positive label keeps ground truth only inside patches holding a positive
prompt; the negative label removes every patch holding a negative prompt.
A patch holding both prompts is kept by the positive label and zeroed by the
negative one: the two labels supervise different decoders and never merge.
"""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .grid import PatchGrid, PointPrompt, patch_union_mask, patches_of_points, validate_mask


def make_positive_label(
    mask: np.ndarray, positives: Iterable[PointPrompt], grid: PatchGrid
) -> np.ndarray:
    """Ground truth restricted to the union of positively prompted patches."""
    mask = validate_mask(mask)
    union = patch_union_mask(patches_of_points(positives, grid), grid)
    return mask * union


def make_negative_label(
    mask: np.ndarray, negatives: Iterable[PointPrompt], grid: PatchGrid
) -> np.ndarray:
    """Ground truth with every negatively prompted patch zeroed."""
    mask = validate_mask(mask)
    union = patch_union_mask(patches_of_points(negatives, grid), grid)
    return mask * (1 - union)


def removed_region(mask: np.ndarray, negative_label: np.ndarray) -> np.ndarray:
    """Road pixels scheduled for removal: (1 - m_n) * M."""
    mask = validate_mask(mask)
    negative_label = validate_mask(negative_label)
    if negative_label.shape != mask.shape:
        raise ValueError(
            f"shape mismatch: mask {mask.shape} vs negative label {negative_label.shape}"
        )
    if (negative_label > mask).any():
        raise ValueError("negative label must be a restriction of the ground truth")
    return (1 - negative_label) * mask
