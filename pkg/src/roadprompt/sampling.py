"""Training-time random sampling of prompt counts, ratios, and positions.

Both polarities are drawn from the road foreground of the ground-truth mask;
at test time negatives come from false-positive regions instead (see morph).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .grid import NEGATIVE, POSITIVE, PointPrompt, validate_mask


@dataclass(frozen=True)
class SamplerConfig:
    """Base count / ratio and their jitter ranges."""

    base_points: int = 20
    positive_ratio: float = 0.5
    delta_n: float = 1.3
    delta_r: float = 1.0

    def __post_init__(self):
        if self.base_points < 0:
            raise ValueError(f"base_points must be >= 0, got {self.base_points}")
        if not 0.0 <= self.positive_ratio <= 1.0:
            raise ValueError(f"positive_ratio must be in [0, 1], got {self.positive_ratio}")
        if self.delta_n < 0 or self.delta_r < 0:
            raise ValueError("jitter factors must be >= 0")


@dataclass(frozen=True)
class PromptBatch:
    positives: tuple[PointPrompt, ...] = field(default=())
    negatives: tuple[PointPrompt, ...] = field(default=())

    def __post_init__(self):
        if any(p.polarity != POSITIVE for p in self.positives):
            raise ValueError("positives must all have positive polarity")
        if any(p.polarity != NEGATIVE for p in self.negatives):
            raise ValueError("negatives must all have negative polarity")

    def __len__(self) -> int:
        return len(self.positives) + len(self.negatives)


def draw_counts(cfg: SamplerConfig, rng: np.random.Generator) -> tuple[int, int, int]:
    """Draw (N, N_P, N_N) for one batch iteration.

    N jitters around the base count by a uniform integer in
    [-trunc(N_B*delta_n), +trunc(N_B*delta_n)] (inclusive), clamped at 0. The
    positive ratio jitters uniformly and is clipped to [0, 1]; N_P floors.
    """
    bound = math.trunc(cfg.base_points * cfg.delta_n)
    jitter = int(rng.integers(-bound, bound, endpoint=True)) if bound > 0 else 0
    n = max(0, cfg.base_points + jitter)
    ratio = float(np.clip(cfg.positive_ratio + rng.uniform(-cfg.delta_r, cfg.delta_r), 0.0, 1.0))
    n_pos = int(n * ratio)
    n_neg = n - n_pos
    return n, n_pos, n_neg


def sample_points(
    mask: np.ndarray, n_pos: int, n_neg: int, rng: np.random.Generator
) -> PromptBatch:
    """Sample prompt positions uniformly without replacement from mask foreground.

    Positive and negative draws are independent, so one pixel may receive both
    polarities. A polarity is truncated when the foreground is smaller than
    its requested count; an empty foreground yields an empty batch.
    """
    if n_pos < 0 or n_neg < 0:
        raise ValueError(f"counts must be >= 0, got ({n_pos}, {n_neg})")
    mask = validate_mask(mask)
    fg_rows, fg_cols = np.nonzero(mask)
    n_fg = fg_rows.size
    if n_fg == 0:
        return PromptBatch()

    def draw(count: int, polarity: str) -> tuple[PointPrompt, ...]:
        count = min(count, n_fg)
        if count == 0:
            return ()
        picks = rng.choice(n_fg, size=count, replace=False)
        return tuple(
            PointPrompt(int(fg_rows[k]), int(fg_cols[k]), polarity) for k in picks
        )

    return PromptBatch(positives=draw(n_pos, POSITIVE), negatives=draw(n_neg, NEGATIVE))
