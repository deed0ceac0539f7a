"""Training losses: Dice+Focal composites per head, the negative-region loss
that concentrates gradient on road pixels a negative prompt should remove, the
recall-biased loss for the high-recall head, and the weighted total.

All functions accept torch tensors (any shape, probabilities or logits as
documented) and reduce to a scalar tensor; targets may be numpy masks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

_LOG_FLOOR = 1e-12  # guards log(0) on exactly saturated probabilities


@dataclass(frozen=True)
class LossConfig:
    dice_weight: float = 0.3
    focal_weight: float = 0.7
    hr_dice: float = 0.3
    hr_focal: float = 0.65
    hr_recall: float = 0.05
    alphas: tuple[float, float, float, float, float] = (1.0, 1.0, 1.0, 1.0, 1.0)
    focal_gamma: float = 2.0
    focal_balance: float = 0.25
    dice_eps: float = 1.0

    def __post_init__(self):
        if len(self.alphas) != 5:
            raise ValueError(f"alphas must have 5 entries, got {len(self.alphas)}")
        weights = (self.dice_weight, self.focal_weight, self.hr_dice, self.hr_focal,
                   self.hr_recall, *self.alphas)
        if any(w < 0 for w in weights):
            raise ValueError("loss weights must be >= 0")


def _as_target(t, like: torch.Tensor) -> torch.Tensor:
    if isinstance(t, np.ndarray):
        t = torch.from_numpy(np.ascontiguousarray(t))
    t = t.to(dtype=like.dtype, device=like.device)
    if t.shape != like.shape:
        raise ValueError(f"shape mismatch: prediction {tuple(like.shape)} vs target {tuple(t.shape)}")
    return t


def dice_loss(p: torch.Tensor, target, eps: float = 1.0) -> torch.Tensor:
    """1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps)."""
    t = _as_target(target, p)
    inter = (p * t).sum()
    return 1.0 - (2.0 * inter + eps) / (p.sum() + t.sum() + eps)


def focal_loss(
    p: torch.Tensor, target, gamma: float = 2.0, balance: float = 0.25
) -> torch.Tensor:
    """Mean of -balance_t * (1 - p_t)^gamma * log(p_t) over all pixels.

    p_t is the predicted probability of the true class; foreground pixels are
    weighted by ``balance``, background by ``1 - balance``.
    """
    t = _as_target(target, p)
    p_t = p * t + (1.0 - p) * (1.0 - t)
    alpha_t = balance * t + (1.0 - balance) * (1.0 - t)
    return (-alpha_t * (1.0 - p_t) ** gamma * torch.log(p_t.clamp_min(_LOG_FLOOR))).mean()


def head_loss(logits: torch.Tensor, target, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Per-head composite: 0.3 * dice + 0.7 * focal on sigmoid probabilities."""
    p = torch.sigmoid(logits)
    return cfg.dice_weight * dice_loss(p, target, cfg.dice_eps) + cfg.focal_weight * focal_loss(
        p, target, cfg.focal_gamma, cfg.focal_balance
    )


def negative_region_loss(
    o_a: torch.Tensor, mask, negative_label, cfg: LossConfig = LossConfig()
) -> torch.Tensor:
    """Composite loss between sigmoid(-o_a) restricted to road pixels and the
    road pixels scheduled for removal; its gradient vanishes off the road."""
    m = _as_target(mask, o_a)
    m_n = _as_target(negative_label, o_a)
    if (m_n > m).any():
        raise ValueError("negative label must be a restriction of the ground truth")
    p_rm = torch.sigmoid(-o_a) * m
    target_rm = (1.0 - m_n) * m
    return cfg.dice_weight * dice_loss(p_rm, target_rm, cfg.dice_eps) + cfg.focal_weight * focal_loss(
        p_rm, target_rm, cfg.focal_gamma, cfg.focal_balance
    )


def highrecall_loss(o_hr: torch.Tensor, mask, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """0.3 * dice + 0.65 * focal + 0.05 * recall term.

    The recall term scores p*M against M, so false positives carry no penalty
    there and the head is biased toward covering every road pixel.
    """
    m = _as_target(mask, o_hr)
    p = torch.sigmoid(o_hr)
    masked = p * m
    recall_term = cfg.dice_weight * dice_loss(masked, m, cfg.dice_eps) + cfg.focal_weight * focal_loss(
        masked, m, cfg.focal_gamma, cfg.focal_balance
    )
    return (
        cfg.hr_dice * dice_loss(p, m, cfg.dice_eps)
        + cfg.hr_focal * focal_loss(p, m, cfg.focal_gamma, cfg.focal_balance)
        + cfg.hr_recall * recall_term
    )


def total_loss(
    o_a: torch.Tensor,
    o_p: torch.Tensor,
    o_hr: torch.Tensor,
    o_m: torch.Tensor,
    mask,
    positive_label,
    negative_label,
    cfg: LossConfig = LossConfig(),
) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted sum over the five components; also returns them for logging."""
    a1, a2, a3, a4, a5 = cfg.alphas
    components = {
        "loss_auto": head_loss(o_a, negative_label, cfg),
        "loss_prompted": head_loss(o_p, positive_label, cfg),
        "loss_highrecall": highrecall_loss(o_hr, mask, cfg),
        "loss_fused": head_loss(o_m, mask, cfg),
        "loss_negative_region": negative_region_loss(o_a, mask, negative_label, cfg),
    }
    total = (
        a1 * components["loss_auto"]
        + a2 * components["loss_prompted"]
        + a3 * components["loss_highrecall"]
        + a4 * components["loss_fused"]
        + a5 * components["loss_negative_region"]
    )
    return total, {k: float(v.detach()) for k, v in components.items()}
