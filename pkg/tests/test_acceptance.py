"""Acceptance suite: one test per criterion, each printing a pass/fail line.

The patch-constraint, refinement-gain, sweep, and service criteria share one
trained desk-scale model (session fixture): a 500-image synthetic corpus and
the configs/toy.yaml training recipe. Set ROADPROMPT_ACCEPT_CACHE to a
directory to reuse the corpus and checkpoint across runs. Everything here
runs without any UI built.
"""

import json
import os
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest
import torch
import yaml

from roadprompt.cli import main as cli_main
from roadprompt.data import DatasetManifest, SyntheticSpec, generate_synthetic, render_example
from roadprompt.grid import (
    NEGATIVE,
    POSITIVE,
    PatchGrid,
    PointPrompt,
    patch_of,
    patch_pixels,
)
from roadprompt.labels import make_negative_label, make_positive_label
from roadprompt.losses import (
    LossConfig,
    dice_loss,
    focal_loss,
    head_loss,
    highrecall_loss,
    negative_region_loss,
)
from roadprompt.model import build_model, load_checkpoint
from roadprompt.morph import OpeningConfig, dilate, erode, opening
from roadprompt.pipeline import (
    ConfusionAccumulator,
    simulate_refinement,
    stage1,
    stage2_remove,
    stage3_add,
)
from roadprompt.sampling import SamplerConfig, draw_counts, sample_points
from roadprompt.training import (
    TrainState,
    config_from_dict,
    fit,
    make_optimizer,
    train_step,
)
from tests.conftest import random_mask
from tests.test_losses import fd_gradient, probe_pixels
from tests.test_morph import _scan_dilate, _scan_erode

REPO = Path(__file__).resolve().parents[1]
TOY_CONFIG = REPO / "configs" / "toy.yaml"
CORPUS_SEED = 11
CORPUS_SIZE = 500

torch.set_num_threads(max(1, os.cpu_count() or 1))


@contextmanager
def criterion(name: str):
    try:
        yield
    except Exception:
        print(f"[FAIL] {name}")
        raise
    print(f"[PASS] {name}")


# --------------------------------------------------------------------------
# criterion 1: label-synthesis oracle
# --------------------------------------------------------------------------

def _pixel_patch_ids(h, w, grid: PatchGrid):
    rows = np.arange(h)[:, None] // grid.l_h
    cols = np.arange(w)[None, :] // grid.l_w
    return rows * grid.n_cols + cols


def test_label_synthesis_oracle():
    with criterion("label-synthesis oracle: 1000 random triples, bit-exact, < 1 min"):
        rng = np.random.default_rng(101)
        start = time.monotonic()
        for _ in range(1000):
            h, w = (int(v) for v in rng.integers(8, 161, size=2))
            grid = PatchGrid(int(rng.integers(4, 49)), int(rng.integers(4, 49)), h, w)
            mask = random_mask(rng, h, w, p=float(rng.uniform(0.05, 0.6)))
            n = int(rng.integers(0, 9))
            coords = [(int(rng.integers(h)), int(rng.integers(w))) for _ in range(n)]
            pos = [PointPrompt(a, b, POSITIVE) for a, b in coords]
            neg = [PointPrompt(a, b, NEGATIVE) for a, b in coords]

            ids = _pixel_patch_ids(h, w, grid)
            prompted = np.isin(
                ids, [a // grid.l_h * grid.n_cols + b // grid.l_w for a, b in coords]
            )
            assert (make_positive_label(mask, pos, grid) == mask * prompted).all()
            assert (make_negative_label(mask, neg, grid) == mask * ~prompted).all()
        elapsed = time.monotonic() - start
        assert elapsed < 60, f"took {elapsed:.1f}s"


# --------------------------------------------------------------------------
# criterion 2: morphology oracle
# --------------------------------------------------------------------------

def test_morphology_oracle():
    with criterion("morphology oracle: 500 masks vs double-loop reference, < 2 min"):
        rng = np.random.default_rng(202)
        # prime the jitted reference outside the timed region
        _scan_erode(np.zeros((4, 4), np.uint8), 3)
        _scan_dilate(np.zeros((4, 4), np.uint8), 3)
        start = time.monotonic()
        for _ in range(500):
            h, w = (int(v) for v in rng.integers(8, 257, size=2))
            mask = random_mask(rng, h, w, p=float(rng.uniform(0.1, 0.9)))
            k = int(rng.choice([1, 3, 5, 7]))
            eroded = erode(mask, k)
            dilated = dilate(mask, k)
            opened = opening(mask, k)
            assert (eroded == _scan_erode(mask, k)).all()
            assert (dilated == _scan_dilate(mask, k)).all()
            assert (opened == _scan_dilate(_scan_erode(mask, k), k)).all()
            assert (opening(opened, k) == opened).all()  # idempotence
        elapsed = time.monotonic() - start
        assert elapsed < 120, f"took {elapsed:.1f}s"


# --------------------------------------------------------------------------
# criterion 3: sampler bounds + uniformity
# --------------------------------------------------------------------------

def test_sampler_bounds_and_uniformity():
    from scipy import stats

    with criterion("sampler bounds: 10k draws, N in [0,46], counts add up, chi-square p > 0.01"):
        cfg = SamplerConfig(base_points=20, positive_ratio=0.5, delta_n=1.3, delta_r=1.0)
        rng = np.random.default_rng(303)
        mask = np.zeros((32, 32), np.uint8)
        fg = rng.choice(32 * 32, size=48, replace=False)
        mask[np.unravel_index(fg, mask.shape)] = 1
        hits = np.zeros_like(mask, dtype=np.int64)
        for _ in range(10_000):
            n, n_pos, n_neg = draw_counts(cfg, rng)
            assert 0 <= n <= 46
            assert n_pos + n_neg == n
            batch = sample_points(mask, n_pos, n_neg, rng)
            for p in batch.positives + batch.negatives:
                assert mask[p.h, p.w] == 1
            for p in batch.positives:
                hits[p.h, p.w] += 1
        counts = hits[mask == 1]
        _, p_value = stats.chisquare(counts)
        assert p_value > 0.01, f"chi-square p = {p_value}"


# --------------------------------------------------------------------------
# criterion 4: loss correctness
# --------------------------------------------------------------------------

def _fd_check(fn, logits, rng, rtol=1e-3):
    logits = logits.clone().requires_grad_(True)
    fn(logits).backward()
    analytic = logits.grad
    for idx, fd in fd_gradient(fn, logits.detach(), probe_pixels(rng, logits.shape, 20)).items():
        an = float(analytic[idx])
        scale = max(abs(an), abs(fd), 1e-6)
        assert abs(an - fd) / scale < rtol, f"{an} vs {fd} at {idx}"


def test_loss_correctness():
    with criterion("loss correctness: FD gradients < 1e-3, exact off-road zeros, weights to 1e-6"):
        rng = np.random.default_rng(404)
        mask = random_mask(rng, 12, 12, p=0.4)
        m_p = random_mask(rng, 12, 12, p=0.3) * mask
        m_n = random_mask(rng, 12, 12, p=0.6) * mask
        logits = torch.from_numpy(rng.normal(size=(12, 12)))

        _fd_check(lambda o: dice_loss(torch.sigmoid(o), mask), logits, rng)
        _fd_check(lambda o: focal_loss(torch.sigmoid(o), mask), logits, rng)
        _fd_check(lambda o: head_loss(o, m_p), logits, rng)
        _fd_check(lambda o: negative_region_loss(o, mask, m_n), logits, rng)
        _fd_check(lambda o: highrecall_loss(o, mask), logits, rng)

        probe = logits.clone().requires_grad_(True)
        negative_region_loss(probe, mask, m_n).backward()
        assert (probe.grad[mask == 0] == 0).all()

        # composite weights against independently coded components
        p = torch.sigmoid(logits)
        cfg = LossConfig()
        head_expected = 0.3 * float(dice_loss(p, m_n, 1.0)) + 0.7 * float(
            focal_loss(p, m_n, 2.0, 0.25)
        )
        assert abs(float(head_loss(logits, m_n, cfg)) - head_expected) < 1e-6
        masked = p * torch.from_numpy(mask.astype(np.float64))
        l_r = 0.3 * float(dice_loss(masked, mask, 1.0)) + 0.7 * float(
            focal_loss(masked, mask, 2.0, 0.25)
        )
        hr_expected = (
            0.3 * float(dice_loss(p, mask, 1.0))
            + 0.65 * float(focal_loss(p, mask, 2.0, 0.25))
            + 0.05 * l_r
        )
        assert abs(float(highrecall_loss(logits, mask, cfg)) - hr_expected) < 1e-6


# --------------------------------------------------------------------------
# trained desk-scale model shared by the remaining criteria
# --------------------------------------------------------------------------

@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    cache = os.environ.get("ROADPROMPT_ACCEPT_CACHE")
    root = Path(cache) if cache else tmp_path_factory.mktemp("acceptance")
    data_dir = root / "data"
    run_dir = root / "run"
    cfg = config_from_dict(yaml.safe_load(TOY_CONFIG.read_text()))
    if not (data_dir / "manifest.txt").exists():
        generate_synthetic(SyntheticSpec(count=CORPUS_SIZE, seed=CORPUS_SEED), data_dir)
    if not (run_dir / "last.pt").exists():
        fit(
            DatasetManifest.scan(data_dir, "train"),
            DatasetManifest.scan(data_dir, "val"),
            cfg,
            run_dir,
        )
    model, patch, extra = load_checkpoint(run_dir / "last.pt")
    test_manifest = DatasetManifest.scan(data_dir, "test")
    from roadprompt.training import _load_split

    images, masks = _load_split(test_manifest)
    return {
        "model": model,
        "patch": patch,
        "val_iou": extra["val_iou"],
        "data_dir": data_dir,
        "run_dir": run_dir,
        "test_manifest": test_manifest,
        "images": images,
        "masks": masks,
        "cfg": cfg,
    }


# --------------------------------------------------------------------------
# criterion 5: patch-constraint behavior
# --------------------------------------------------------------------------

def test_patch_constraint_behavior(trained):
    model, (l_h, l_w) = trained["model"], trained["patch"]
    images, masks = trained["images"], trained["masks"]
    with criterion("patch constraint: trained val IoU >= 0.80"):
        assert trained["val_iou"] >= 0.80, f"val IoU {trained['val_iou']:.3f}"

    rng = np.random.default_rng(505)
    outside_changes, inside_removals, containments = [], [], []
    embeddings = {}
    probes = 0
    while probes < 100:
        i = int(rng.integers(len(images)))
        if i not in embeddings:
            auto, _, emb = stage1(images[i], model)
            embeddings[i] = (auto, emb)
        auto, emb = embeddings[i]
        truth = masks[i]
        grid = PatchGrid(l_h, l_w, *truth.shape)
        road_rows, road_cols = np.nonzero(auto)
        true_rows, true_cols = np.nonzero(truth)
        if road_rows.size == 0 or true_rows.size == 0:
            continue
        probes += 1
        # (a) one negative prompt on a predicted-road pixel
        k = int(rng.integers(road_rows.size))
        p_neg = PointPrompt(int(road_rows[k]), int(road_cols[k]), NEGATIVE)
        s2, _ = stage2_remove(model, emb, [p_neg])
        rect = patch_pixels(patch_of(p_neg, grid), grid)
        inside = np.zeros_like(auto)
        inside[rect.row0 : rect.row1, rect.col0 : rect.col1] = 1
        outside_changes.append(((s2 != auto) & (inside == 0)).sum() / auto.size)
        in_road = int((auto & inside).sum())
        if in_road:
            inside_removals.append(int((auto & ~s2 & inside).sum()) / in_road)
        # (b) one positive prompt on a ground-truth road pixel
        k = int(rng.integers(true_rows.size))
        p_pos = PointPrompt(int(true_rows[k]), int(true_cols[k]), POSITIVE)
        s3, _ = stage3_add(model, emb, [p_pos])
        rect = patch_pixels(patch_of(p_pos, grid), grid)
        inside = np.zeros_like(auto)
        inside[rect.row0 : rect.row1, rect.col0 : rect.col1] = 1
        fg = int(s3.sum())
        if fg:
            containments.append(int((s3 & inside).sum()) / fg)

    out_mean = float(np.mean(outside_changes))
    rem_mean = float(np.mean(inside_removals))
    cont_mean = float(np.mean(containments))
    with criterion(
        f"patch constraint (a): negative prompt, outside change {out_mean:.4f} < 0.01, "
        f"inside removal {rem_mean:.3f} >= 0.80 over 100 probes"
    ):
        assert out_mean < 0.01
        assert rem_mean >= 0.80

    with criterion(
        f"patch constraint (b): positive prompt containment {cont_mean:.3f} >= 0.95"
    ):
        assert cont_mean >= 0.95

    auto_acc, hr_acc = ConfusionAccumulator(), ConfusionAccumulator()
    for image, truth in zip(images, masks):
        auto, hr, _ = stage1(image, model)
        auto_acc.add(auto, truth)
        hr_acc.add(hr, truth)
    hr_recall = hr_acc.report().recall
    auto_recall = auto_acc.report().recall
    with criterion(
        f"patch constraint (c): high-recall head recall {hr_recall:.2f} >= automatic {auto_recall:.2f}"
    ):
        assert hr_recall >= auto_recall


# --------------------------------------------------------------------------
# criterion 6: end-to-end refinement gain
# --------------------------------------------------------------------------

def test_refinement_gain(trained):
    report = simulate_refinement(
        trained["test_manifest"],
        trained["model"],
        OpeningConfig(fnm_kernel=3, fpm_kernel=7, density=1),
        trained["patch"],
        strategy="sum",
    )
    gain = report["after"]["iou"] - report["before"]["iou"]
    with criterion(
        f"refinement gain: IoU {report['before']['iou']:.2f} -> "
        f"{report['after']['iou']:.2f} (gain {gain:.2f} >= 3)"
    ):
        assert gain >= 3.0


# --------------------------------------------------------------------------
# criterion 7: ablation sweep harness
# --------------------------------------------------------------------------

def test_sweep_harness(trained, tmp_path):
    out = tmp_path / "sweep"
    code = cli_main(
        [
            "sweep",
            "--checkpoint", str(trained["run_dir"] / "last.pt"),
            "--data", str(trained["data_dir"]),
            "--split", "test",
            "--fnm-kernels", "1,3,5,7",
            "--densities", "1,2,4",
            "--out", str(out),
        ]
    )
    assert code == 0
    rows = json.loads((out / "sweep.json").read_text())
    with criterion("sweep: complete 4x3 grid with monotone prompt counts"):
        combos = {(r["fnm_kernel"], r["density"]) for r in rows}
        assert combos == {(k, d) for k in (1, 3, 5, 7) for d in (1, 2, 4)}
        for density in (1, 2, 4):
            by_kernel = sorted(
                (r["fnm_kernel"], r["positive_prompts"]) for r in rows if r["density"] == density
            )
            counts = [c for _, c in by_kernel]
            assert all(a >= b for a, b in zip(counts, counts[1:])), (density, counts)
        assert (out / "sweep.csv").exists()


# --------------------------------------------------------------------------
# criterion 8: determinism
# --------------------------------------------------------------------------

def test_determinism(trained, tmp_path):
    with criterion("determinism: corpora byte-identical for equal seeds"):
        spec = SyntheticSpec(count=8, seed=77)
        for index in range(8):
            img_a, mask_a = render_example(spec, index)
            img_b, mask_b = render_example(spec, index)
            assert (img_a == img_b).all() and (mask_a == mask_b).all()
        generate_synthetic(spec, tmp_path / "a")
        generate_synthetic(spec, tmp_path / "b")
        for fa, fb in zip(sorted((tmp_path / "a").rglob("*.png")), sorted((tmp_path / "b").rglob("*.png"))):
            assert fa.read_bytes() == fb.read_bytes()

    with criterion("determinism: identical 10-step training loss traces"):
        cfg = trained["cfg"]
        from roadprompt.training import _load_split

        images, masks = trained["images"][:8], trained["masks"][:8]
        traces = []
        for _ in range(2):
            model = build_model(cfg.backbone, seed=cfg.seed)
            opt = make_optimizer(model, cfg)
            state = TrainState.fresh(cfg.seed)
            trace = []
            for step in range(10):
                lo = (step * 4) % 8
                rec = train_step(
                    model, opt, images[lo : lo + 4], masks[lo : lo + 4],
                    list(range(lo, lo + 4)), state, cfg, max_iter=10,
                )
                trace.append(rec["loss_total"])
            traces.append(trace)
        assert traces[0] == traces[1]

    with criterion("determinism: identical simulation reports"):
        pairs = list(zip(trained["images"][:10], trained["masks"][:10]))
        a = simulate_refinement(pairs, trained["model"], OpeningConfig(), trained["patch"])
        b = simulate_refinement(pairs, trained["model"], OpeningConfig(), trained["patch"])
        assert a == b


# --------------------------------------------------------------------------
# criterion 9: service contract
# --------------------------------------------------------------------------

def test_service_contract(trained):
    import io

    from fastapi.testclient import TestClient
    from PIL import Image

    from roadprompt.service import create_app

    model = trained["model"]
    app = create_app(model, patch_size=trained["patch"])

    def upload(client, image):
        buf = io.BytesIO()
        Image.fromarray(image).save(buf, format="PNG")
        resp = client.post("/sessions", files={"image": ("i.png", buf.getvalue(), "image/png")})
        assert resp.status_code == 200
        return resp.json()

    with TestClient(app) as client:
        with criterion("service: encoder-once counter == 1 across a 20-step sequence"):
            model.encode_calls = 0
            body = upload(client, trained["images"][0])
            sid = body["id"]
            rng = np.random.default_rng(606)
            snapshots = [body["masks"]]
            for step in range(20):
                action = step % 4
                if action in (0, 1):
                    h, w = (int(rng.integers(128)) for _ in range(2))
                    key = "positives" if action == 0 else "negatives"
                    out = client.post(f"/sessions/{sid}/refine", json={key: [[h, w]]}).json()
                    snapshots.append(out["masks"])
                elif action == 2:
                    out = client.post(f"/sessions/{sid}/undo").json()
                    snapshots.pop()
                    assert out["masks"] == snapshots[-1]  # undo replay, bit-exact
                else:
                    assert client.get(f"/sessions/{sid}/masks/final").status_code == 200
            assert model.encode_calls == 1

        with criterion("service: undo replay restores masks bit-exactly"):
            body = upload(client, trained["images"][1])
            sid = body["id"]
            first = client.post(f"/sessions/{sid}/refine", json={"negatives": [[40, 40]]}).json()
            client.post(f"/sessions/{sid}/refine", json={"positives": [[80, 80]]}).json()
            after_undo = client.post(f"/sessions/{sid}/undo").json()
            assert after_undo["masks"] == first["masks"]
            back_to_start = client.post(f"/sessions/{sid}/undo").json()
            assert back_to_start["masks"] == body["masks"]

        with criterion("service: session isolation under interleaved calls"):
            a = upload(client, trained["images"][2])
            b = upload(client, trained["images"][3])
            b_before = client.get(f"/sessions/{b['id']}/masks/final").content
            client.post(f"/sessions/{a['id']}/refine", json={"negatives": [[10, 10]]})
            client.post(f"/sessions/{a['id']}/refine", json={"positives": [[90, 90]]})
            assert client.get(f"/sessions/{b['id']}/masks/final").content == b_before
            a_masks = client.post(f"/sessions/{a['id']}/undo").json()["masks"]
            assert client.get(f"/sessions/{b['id']}/masks/final").content == b_before
            assert a_masks is not None
