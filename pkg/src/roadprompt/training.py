"""Fine-tuning loop: per-batch prompt sampling, dynamic label synthesis,
forward over all heads, weighted total loss, poly learning-rate schedule,
augmentation, and checkpointing.

Learning-rate groups follow the fine-tuning recipe: the automatic and
high-recall decoders step at ``lr_decoders``; the prompted decoder, fusion
head, and encoder adapters step at ``lr_prompted``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import DatasetManifest, load_pair
from .grid import PatchGrid
from .labels import make_negative_label, make_positive_label
from .losses import LossConfig, total_loss
from .model import BackboneSpec, PromptableRoadModel, build_model, save_checkpoint
from .sampling import SamplerConfig, draw_counts, sample_points


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 4
    lr_decoders: float = 1e-5
    lr_prompted: float = 1e-4
    poly_power: float = 3.0
    weight_decay: float = 0.0
    patch_h: int = 32
    patch_w: int = 32
    seed: int = 0
    augment_geometric: bool = True
    augment_jitter: bool = True
    target_val_iou: float | None = None  # optional early stop on Stage-1 IoU
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    backbone: BackboneSpec = field(default_factory=BackboneSpec)


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    best_val_iou: float = 0.0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    @classmethod
    def fresh(cls, seed: int) -> "TrainState":
        return cls(rng=np.random.default_rng(seed))

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "epoch": self.epoch,
            "best_val_iou": self.best_val_iou,
            "rng_state": self.rng.bit_generator.state,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainState":
        rng = np.random.default_rng(0)
        rng.bit_generator.state = d["rng_state"]
        return cls(step=d["step"], epoch=d["epoch"], best_val_iou=d["best_val_iou"], rng=rng)


def config_to_dict(cfg: TrainConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    if "sampler" in d:
        d["sampler"] = SamplerConfig(**d["sampler"])
    if "loss" in d:
        loss = dict(d["loss"])
        if "alphas" in loss:
            loss["alphas"] = tuple(loss["alphas"])
        d["loss"] = LossConfig(**loss)
    if "backbone" in d:
        d["backbone"] = BackboneSpec(**d["backbone"])
    return TrainConfig(**d)


def poly_lr(base: float, iteration: int, max_iter: int, power: float) -> float:
    """base * (1 - iter/max_iter)^power."""
    if max_iter <= 0:
        raise ValueError(f"max_iter must be > 0, got {max_iter}")
    if not 0 <= iteration <= max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {max_iter}]")
    return base * (1.0 - iteration / max_iter) ** power


def augment(
    image: np.ndarray,
    mask: np.ndarray,
    rng: np.random.Generator,
    geometric: bool = True,
    jitter: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Random flips + 90-degree rotations applied identically to image and
    mask; color jitter touches the image only. Rotations are right-angle so
    the mask stays binary without interpolation."""
    if image.shape[:2] != mask.shape:
        raise ValueError(f"paired dims required, got image {image.shape} mask {mask.shape}")
    if geometric:
        if rng.uniform() < 0.5:
            image, mask = image[:, ::-1], mask[:, ::-1]
        if rng.uniform() < 0.5:
            image, mask = image[::-1], mask[::-1]
        k = int(rng.integers(4))
        image, mask = np.rot90(image, k), np.rot90(mask, k)
    if jitter:
        scale = rng.uniform(0.88, 1.12, size=3)
        shift = rng.uniform(-14, 14, size=3)
        image = np.clip(image.astype(np.float32) * scale + shift, 0, 255).astype(np.uint8)
    return np.ascontiguousarray(image), np.ascontiguousarray(mask)


def _to_batch_tensor(images: list[np.ndarray]) -> torch.Tensor:
    stack = np.stack(images).astype(np.float32) / 255.0
    stack = (stack - 0.5) / 0.25
    return torch.from_numpy(stack).permute(0, 3, 1, 2)


def make_optimizer(model: PromptableRoadModel, cfg: TrainConfig) -> torch.optim.AdamW:
    groups = model.parameter_groups()
    return torch.optim.AdamW(
        [
            {"params": groups["decoders_auto_hr"], "lr": cfg.lr_decoders, "name": "decoders_auto_hr"},
            {"params": groups["prompted_fusion_adapters"], "lr": cfg.lr_prompted, "name": "prompted_fusion_adapters"},
        ],
        weight_decay=cfg.weight_decay,
    )


def train_step(
    model: PromptableRoadModel,
    optimizer: torch.optim.Optimizer,
    images: list[np.ndarray],
    masks: list[np.ndarray],
    batch_indices: list[int],
    state: TrainState,
    cfg: TrainConfig,
    max_iter: int,
) -> dict:
    """One optimizer update; returns the per-step log record."""
    model.train()
    h, w = masks[0].shape
    grid = PatchGrid(cfg.patch_h, cfg.patch_w, h, w)

    aug_images, aug_masks, positives, negatives = [], [], [], []
    for image, mask in zip(images, masks):
        image, mask = augment(
            image, mask, state.rng, geometric=cfg.augment_geometric, jitter=cfg.augment_jitter
        )
        _, n_pos, n_neg = draw_counts(cfg.sampler, state.rng)
        batch = sample_points(mask, n_pos, n_neg, state.rng)
        aug_images.append(image)
        aug_masks.append(mask)
        positives.append(list(batch.positives))
        negatives.append(list(batch.negatives))

    outputs = model.forward_training(_to_batch_tensor(aug_images), positives, negatives)

    per_image_totals = []
    component_sums: dict[str, float] = {}
    for i, mask in enumerate(aug_masks):
        m_p = make_positive_label(mask, positives[i], grid)
        m_n = make_negative_label(mask, negatives[i], grid)
        loss_i, comps = total_loss(
            outputs["o_a"][i], outputs["o_p"][i], outputs["o_hr"][i], outputs["o_m"][i],
            mask, m_p, m_n, cfg.loss,
        )
        per_image_totals.append(loss_i)
        for k, v in comps.items():
            component_sums[k] = component_sums.get(k, 0.0) + v

    finite = [bool(torch.isfinite(t.detach())) for t in per_image_totals]
    if not all(finite):
        bad = [batch_indices[i] for i, ok in enumerate(finite) if not ok]
        raise RuntimeError(
            f"non-finite loss at step {state.step} for dataset indices {bad}"
        )

    loss = torch.stack(per_image_totals).mean()
    lr_slow = poly_lr(cfg.lr_decoders, state.step, max_iter, cfg.poly_power)
    lr_fast = poly_lr(cfg.lr_prompted, state.step, max_iter, cfg.poly_power)
    for group in optimizer.param_groups:
        group["lr"] = lr_slow if group["name"] == "decoders_auto_hr" else lr_fast

    optimizer.zero_grad()
    loss.backward()
    optimizer.step()

    record = {
        "step": state.step,
        "epoch": state.epoch,
        "lr_decoders": lr_slow,
        "lr_prompted": lr_fast,
        "loss_total": float(loss.detach()),
    }
    n = len(aug_masks)
    record.update({k: v / n for k, v in component_sums.items()})
    state.step += 1
    return record


def _load_split(manifest: DatasetManifest) -> tuple[list[np.ndarray], list[np.ndarray]]:
    images, masks = [], []
    for entry in manifest.entries:
        image, mask = load_pair(entry)
        images.append(image)
        masks.append(mask)
    return images, masks


@torch.no_grad()
def validation_iou(model: PromptableRoadModel, images, masks) -> float:
    """Aggregate Stage-1 automatic IoU over a split (confusion accumulated
    across images before the ratio)."""
    model.eval()
    tp = fp = fn = 0
    for image, mask in zip(images, masks):
        emb = model.encode_image(image)
        logits, _ = model.decode_auto(emb, [])
        pred = (torch.sigmoid(logits) >= 0.5).numpy().astype(np.uint8)
        tp += int(((pred == 1) & (mask == 1)).sum())
        fp += int(((pred == 1) & (mask == 0)).sum())
        fn += int(((pred == 0) & (mask == 1)).sum())
    denom = tp + fp + fn
    return tp / denom if denom else 1.0


def fit(
    train_manifest: DatasetManifest,
    val_manifest: DatasetManifest,
    cfg: TrainConfig,
    out_dir: str | Path,
    log_every: int = 1,
) -> Path:
    """Train, validate once per epoch, checkpoint best and last; returns the
    best-checkpoint path."""
    if len(train_manifest) == 0:
        raise ValueError("training dataset is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    model = build_model(cfg.backbone, seed=cfg.seed)
    optimizer = make_optimizer(model, cfg)
    state = TrainState.fresh(cfg.seed)

    train_images, train_masks = _load_split(train_manifest)
    val_images, val_masks = _load_split(val_manifest)

    patch_size = (cfg.patch_h, cfg.patch_w)
    best_path = out_dir / "best.pt"
    last_path = out_dir / "last.pt"
    log_path = out_dir / "train_log.jsonl"

    def snapshot(path: Path, val_iou: float):
        save_checkpoint(
            path, model, patch_size,
            extra={"val_iou": val_iou, "train_config": config_to_dict(cfg), "state": state.to_dict()},
        )

    if cfg.epochs == 0:
        snapshot(best_path, 0.0)
        snapshot(last_path, 0.0)
        return best_path

    n = len(train_images)
    steps_per_epoch = max(1, (n + cfg.batch_size - 1) // cfg.batch_size)
    max_iter = cfg.epochs * steps_per_epoch

    with log_path.open("w") as log:
        for epoch in range(cfg.epochs):
            state.epoch = epoch
            order = state.rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                idx = order[start : start + cfg.batch_size].tolist()
                record = train_step(
                    model, optimizer,
                    [train_images[i] for i in idx], [train_masks[i] for i in idx],
                    idx, state, cfg, max_iter,
                )
                if record["step"] % log_every == 0:
                    log.write(json.dumps(record) + "\n")
            val_iou = validation_iou(model, val_images, val_masks) if val_images else 0.0
            log.write(json.dumps({"epoch": epoch, "val_iou": val_iou}) + "\n")
            log.flush()
            if val_iou >= state.best_val_iou or not best_path.exists():
                state.best_val_iou = max(state.best_val_iou, val_iou)
                snapshot(best_path, val_iou)
            snapshot(last_path, val_iou)
            if cfg.target_val_iou is not None and val_iou >= cfg.target_val_iou:
                break
    return best_path
