"""Measure how tightly prompt influence is confined to its patch.

For a trained checkpoint and a labeled split, probes single prompts on random
images and reports:
  - negative prompts: mean fraction of image pixels changed outside the
    prompted patch, and mean fraction of predicted road removed inside it,
  - positive prompts: mean fraction of the addition mask inside the patch,
  - aggregate automatic vs high-recall recall.

    python3 scripts/measure_locality.py --checkpoint runs/toy/run/last.pt \
        --data runs/toy/data --split test --probes 100
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

REPO = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(REPO / "src"))

from roadprompt.data import DatasetManifest, load_pair  # noqa: E402
from roadprompt.grid import (  # noqa: E402
    NEGATIVE,
    POSITIVE,
    PatchGrid,
    PointPrompt,
    patch_of,
    patch_pixels,
)
from roadprompt.model import load_checkpoint  # noqa: E402
from roadprompt.pipeline import ConfusionAccumulator, stage1, stage2_remove, stage3_add  # noqa: E402


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--checkpoint", required=True, type=Path)
    parser.add_argument("--data", required=True, type=Path)
    parser.add_argument("--split", default="test")
    parser.add_argument("--probes", type=int, default=100)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    model, patch, _ = load_checkpoint(args.checkpoint)
    pairs = [load_pair(e) for e in DatasetManifest.scan(args.data, args.split).entries]
    rng = np.random.default_rng(args.seed)

    outside, removal, containment = [], [], []
    auto_acc, hr_acc = ConfusionAccumulator(), ConfusionAccumulator()
    cache = {}
    done = 0
    while done < args.probes:
        i = int(rng.integers(len(pairs)))
        image, truth = pairs[i]
        if i not in cache:
            auto, hr, emb = stage1(image, model)
            cache[i] = (auto, emb)
            auto_acc.add(auto, truth)
            hr_acc.add(hr, truth)
        auto, emb = cache[i]
        grid = PatchGrid(patch[0], patch[1], *truth.shape)
        pred_px = np.argwhere(auto)
        true_px = np.argwhere(truth)
        if len(pred_px) == 0 or len(true_px) == 0:
            continue
        done += 1

        h, w = pred_px[int(rng.integers(len(pred_px)))]
        neg = PointPrompt(int(h), int(w), NEGATIVE)
        s2, _ = stage2_remove(model, emb, [neg])
        rect = patch_pixels(patch_of(neg, grid), grid)
        inside = np.zeros_like(auto)
        inside[rect.row0 : rect.row1, rect.col0 : rect.col1] = 1
        outside.append(float(((s2 != auto) & (inside == 0)).sum() / auto.size))
        in_road = int((auto & inside).sum())
        if in_road:
            removal.append(float((auto & ~s2 & inside).sum() / in_road))

        h, w = true_px[int(rng.integers(len(true_px)))]
        pos = PointPrompt(int(h), int(w), POSITIVE)
        s3, _ = stage3_add(model, emb, [pos])
        rect = patch_pixels(patch_of(pos, grid), grid)
        inside = np.zeros_like(auto)
        inside[rect.row0 : rect.row1, rect.col0 : rect.col1] = 1
        fg = int(s3.sum())
        if fg:
            containment.append(float((s3 & inside).sum() / fg))

    print(json.dumps({
        "probes": done,
        "negative_outside_change_mean": float(np.mean(outside)),
        "negative_inside_removal_mean": float(np.mean(removal)),
        "positive_containment_mean": float(np.mean(containment)),
        "auto_recall": auto_acc.report().recall,
        "highrecall_recall": hr_acc.report().recall,
    }, indent=2))


if __name__ == "__main__":
    torch.set_num_threads(max(1, torch.get_num_threads()))
    main()
