"""Three-stage interactive inference, mask fusion strategies, pixel metrics
with confusion accumulation, and the automated refinement simulator.

Stage 1 runs the encoder once and decodes the automatic and high-recall
masks. Stage 2 re-decodes the automatic head with negative prompts (patch
removal); Stage 3 decodes the prompted head with positive prompts (patch
addition). The final mask is either the elementwise OR of the Stage-2/3
masks ("sum") or the binarized output of the feature-fusion head ("mfm").
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch

from .data import DatasetManifest, load_pair
from .grid import NEGATIVE, POSITIVE, PatchGrid, PointPrompt, validate_mask
from .model import ImageEmbedding, PromptableRoadModel
from .morph import OpeningConfig, error_maps, generate_prompts

BINARIZE_THRESHOLD = 0.5
STRATEGIES = ("sum", "mfm")


@dataclass
class StageResult:
    auto_mask: np.ndarray
    highrecall_mask: np.ndarray
    stage2_mask: np.ndarray
    stage3_mask: np.ndarray
    final_mask: np.ndarray
    strategy: str


@dataclass(frozen=True)
class MetricReport:
    precision: float
    recall: float
    iou: float
    f1: float

    def as_dict(self) -> dict[str, float]:
        return {"precision": self.precision, "recall": self.recall, "iou": self.iou, "f1": self.f1}


def binarize(logits: torch.Tensor, threshold: float = BINARIZE_THRESHOLD) -> np.ndarray:
    return (torch.sigmoid(logits) >= threshold).numpy().astype(np.uint8)


def stage1(
    image: np.ndarray, model: PromptableRoadModel
) -> tuple[np.ndarray, np.ndarray, ImageEmbedding]:
    """One encoder pass; automatic and high-recall masks binarized at 0.5."""
    model.eval()
    emb = model.encode_image(image)
    logits_a, _ = model.decode_auto(emb, [])
    logits_hr = model.decode_highrecall(emb)
    return binarize(logits_a), binarize(logits_hr), emb


def stage2_remove(
    model: PromptableRoadModel, emb: ImageEmbedding, negatives: Sequence[PointPrompt]
) -> tuple[np.ndarray, torch.Tensor]:
    if any(p.polarity != NEGATIVE for p in negatives):
        raise ValueError("stage2 accepts only negative-polarity prompts")
    logits, feat = model.decode_auto(emb, list(negatives))
    return binarize(logits), feat


def stage3_add(
    model: PromptableRoadModel, emb: ImageEmbedding, positives: Sequence[PointPrompt]
) -> tuple[np.ndarray, torch.Tensor]:
    if any(p.polarity != POSITIVE for p in positives):
        raise ValueError("stage3 accepts only positive-polarity prompts")
    logits, feat = model.decode_prompted(emb, list(positives))
    return binarize(logits), feat


def finalize(
    stage2_mask: np.ndarray,
    stage3_mask: np.ndarray,
    feats: tuple[torch.Tensor, torch.Tensor] | None,
    strategy: str,
    model: PromptableRoadModel | None = None,
) -> np.ndarray:
    """Combine the removal and addition stages into the final mask."""
    stage2_mask = validate_mask(stage2_mask)
    stage3_mask = validate_mask(stage3_mask)
    if stage2_mask.shape != stage3_mask.shape:
        raise ValueError(
            f"shape mismatch: stage2 {stage2_mask.shape} vs stage3 {stage3_mask.shape}"
        )
    if strategy == "sum":
        return stage2_mask | stage3_mask
    if strategy == "mfm":
        if feats is None or model is None:
            raise ValueError("mfm strategy requires decoder features and the model")
        feat_a, feat_p = feats
        with torch.no_grad():
            logits = model.fuse(feat_a, feat_p, stage2_mask.shape)
        return binarize(logits)
    raise ValueError(f"unknown fusion strategy: {strategy!r} (expected one of {STRATEGIES})")


def run_stages(
    model: PromptableRoadModel,
    emb: ImageEmbedding,
    positives: Sequence[PointPrompt],
    negatives: Sequence[PointPrompt],
    strategy: str = "sum",
) -> StageResult:
    """Decode all stages from a cached embedding (the encoder does not run).

    Session-level semantics for the empty prompt set are exact: no negatives
    leaves the automatic mask untouched (same decode path, bit-equal) and no
    positives contributes an empty addition mask.
    """
    auto_mask, _ = stage2_remove(model, emb, [])
    highrecall_mask = binarize(model.decode_highrecall(emb))
    stage2_mask, feat_a = stage2_remove(model, emb, negatives)
    stage3_mask, feat_p = stage3_add(model, emb, positives)
    if not positives:
        stage3_mask = np.zeros_like(stage3_mask)
    final = finalize(stage2_mask, stage3_mask, (feat_a, feat_p), strategy, model)
    return StageResult(
        auto_mask=auto_mask,
        highrecall_mask=highrecall_mask,
        stage2_mask=stage2_mask,
        stage3_mask=stage3_mask,
        final_mask=final,
        strategy=strategy,
    )


class ConfusionAccumulator:
    """Pixel confusion counts accumulated across images before the ratios are
    taken, the standard convention for imbalanced road pixels."""

    def __init__(self):
        self.tp = 0
        self.fp = 0
        self.fn = 0

    def add(self, pred: np.ndarray, truth: np.ndarray):
        pred = validate_mask(pred)
        truth = validate_mask(truth)
        if pred.shape != truth.shape:
            raise ValueError(f"shape mismatch: pred {pred.shape} vs truth {truth.shape}")
        self.tp += int((pred & truth).sum())
        self.fp += int((pred & (1 - truth)).sum())
        self.fn += int(((1 - pred) & truth).sum())

    def merge(self, other: "ConfusionAccumulator"):
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn

    def report(self) -> MetricReport:
        return report_from_counts(self.tp, self.fp, self.fn)


def report_from_counts(tp: int, fp: int, fn: int) -> MetricReport:
    """Percent metrics with the empty-denominator convention: a ratio whose
    denominator is zero scores 100 when both masks are empty, otherwise 0."""
    both_empty = tp == 0 and fp == 0 and fn == 0

    def ratio(num: int, denom: int) -> float:
        if denom == 0:
            return 100.0 if both_empty else 0.0
        return 100.0 * num / denom

    precision = ratio(tp, tp + fp)
    recall = ratio(tp, tp + fn)
    iou = ratio(tp, tp + fp + fn)
    if precision + recall == 0:
        f1 = 100.0 if both_empty else 0.0
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return MetricReport(precision=precision, recall=recall, iou=iou, f1=f1)


def metrics(pred: np.ndarray, truth: np.ndarray) -> MetricReport:
    acc = ConfusionAccumulator()
    acc.add(pred, truth)
    return acc.report()


def _iter_pairs(dataset: DatasetManifest | Iterable[tuple[np.ndarray, np.ndarray]]):
    if isinstance(dataset, DatasetManifest):
        for entry in dataset.entries:
            yield load_pair(entry)
    else:
        yield from dataset


def simulate_refinement(
    dataset: DatasetManifest | Iterable[tuple[np.ndarray, np.ndarray]],
    model: PromptableRoadModel,
    cfg: OpeningConfig,
    patch_size: tuple[int, int],
    strategy: str = "sum",
) -> dict:
    """Automated refinement over a labeled set: Stage 1, error maps against
    ground truth, morphological prompt synthesis, Stages 2+3, fusion. Returns
    aggregate before/after metrics plus prompt accounting."""
    model.eval()
    before = ConfusionAccumulator()
    after = ConfusionAccumulator()
    n_pos = n_neg = n_images = 0
    for image, truth in _iter_pairs(dataset):
        grid = PatchGrid(patch_size[0], patch_size[1], *truth.shape)
        auto_mask, _, emb = stage1(image, model)
        errs = error_maps(auto_mask, truth)
        prompts = generate_prompts(errs, cfg, grid)
        stage2_mask, feat_a = stage2_remove(model, emb, prompts.negatives)
        stage3_mask, feat_p = stage3_add(model, emb, prompts.positives)
        final = finalize(stage2_mask, stage3_mask, (feat_a, feat_p), strategy, model)
        before.add(auto_mask, truth)
        after.add(final, truth)
        n_pos += len(prompts.positives)
        n_neg += len(prompts.negatives)
        n_images += 1
    return {
        "fnm_kernel": cfg.fnm_kernel,
        "fpm_kernel": cfg.fpm_kernel,
        "density": cfg.density,
        "strategy": strategy,
        "images": n_images,
        "positive_prompts": n_pos,
        "negative_prompts": n_neg,
        "before": before.report().as_dict(),
        "after": after.report().as_dict(),
    }


def sweep_refinement(
    dataset: DatasetManifest | list[tuple[np.ndarray, np.ndarray]],
    model: PromptableRoadModel,
    patch_size: tuple[int, int],
    fnm_kernels: Sequence[int] = (1, 3, 5, 7),
    densities: Sequence[int] = (1, 2, 4),
    fpm_kernel: int = 7,
    strategy: str = "sum",
) -> list[dict]:
    """Grid over the opening kernel and per-patch prompt density; one report
    row per combination."""
    pairs = list(_iter_pairs(dataset))
    rows = []
    for density in densities:
        for k in fnm_kernels:
            cfg = OpeningConfig(fnm_kernel=k, fpm_kernel=fpm_kernel, density=density)
            rows.append(simulate_refinement(pairs, model, cfg, patch_size, strategy))
    return rows


def format_report_table(rows: list[dict]) -> str:
    """Human-readable summary of simulation/sweep rows."""
    header = (
        f"{'fnm':>4} {'fpm':>4} {'dens':>5} {'strat':>5} {'+pts':>7} {'-pts':>7} "
        f"{'IoU0':>7} {'IoU1':>7} {'P1':>7} {'R1':>7} {'F1':>7}"
    )
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(
            f"{r['fnm_kernel']:>4} {r['fpm_kernel']:>4} {r['density']:>5} {r['strategy']:>5} "
            f"{r['positive_prompts']:>7} {r['negative_prompts']:>7} "
            f"{r['before']['iou']:>7.2f} {r['after']['iou']:>7.2f} "
            f"{r['after']['precision']:>7.2f} {r['after']['recall']:>7.2f} {r['after']['f1']:>7.2f}"
        )
    return "\n".join(lines)
