import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from roadprompt.grid import (
    NEGATIVE,
    POSITIVE,
    PatchGrid,
    PointPrompt,
    patch_of,
    patch_union_mask,
)
from roadprompt.labels import make_negative_label, make_positive_label, removed_region
from tests.conftest import random_mask


def oracle_positive(mask, prompts, grid):
    """Per-pixel reference: a pixel is kept iff its own patch (by floor
    division) holds a positive prompt."""
    wanted = {(p.h // grid.l_h, p.w // grid.l_w) for p in prompts}
    out = np.zeros_like(mask)
    for h in range(mask.shape[0]):
        for w in range(mask.shape[1]):
            if mask[h, w] and (h // grid.l_h, w // grid.l_w) in wanted:
                out[h, w] = 1
    return out


def oracle_negative(mask, prompts, grid):
    dropped = {(p.h // grid.l_h, p.w // grid.l_w) for p in prompts}
    out = np.zeros_like(mask)
    for h in range(mask.shape[0]):
        for w in range(mask.shape[1]):
            if mask[h, w] and (h // grid.l_h, w // grid.l_w) not in dropped:
                out[h, w] = 1
    return out


def test_positive_label_trivial_cases(rng):
    grid = PatchGrid(32, 32, 64, 64)
    mask = random_mask(rng, 64, 64)
    assert make_positive_label(mask, [], grid).sum() == 0
    everywhere = [
        PointPrompt(16 + 32 * i, 16 + 32 * j, POSITIVE) for i in range(2) for j in range(2)
    ]
    assert (make_positive_label(mask, everywhere, grid) == mask).all()


def test_positive_label_single_prompt(rng):
    grid = PatchGrid(32, 32, 128, 128)
    mask = random_mask(rng, 128, 128)
    out = make_positive_label(mask, [PointPrompt(40, 70, POSITIVE)], grid)
    assert (out == oracle_positive(mask, [PointPrompt(40, 70, POSITIVE)], grid)).all()
    assert (out[32:64, 64:96] == mask[32:64, 64:96]).all()
    out[32:64, 64:96] = 0
    assert out.sum() == 0


def test_negative_label_trivial_cases(rng):
    grid = PatchGrid(32, 32, 64, 64)
    mask = random_mask(rng, 64, 64)
    assert (make_negative_label(mask, [], grid) == mask).all()
    everywhere = [
        PointPrompt(16 + 32 * i, 16 + 32 * j, NEGATIVE) for i in range(2) for j in range(2)
    ]
    assert make_negative_label(mask, everywhere, grid).sum() == 0


def test_negative_label_single_prompt(rng):
    grid = PatchGrid(32, 32, 128, 128)
    mask = random_mask(rng, 128, 128)
    prompt = [PointPrompt(40, 70, NEGATIVE)]
    out = make_negative_label(mask, prompt, grid)
    assert (out == oracle_negative(mask, prompt, grid)).all()
    assert out[32:64, 64:96].sum() == 0


def test_removed_region_examples(rng):
    grid = PatchGrid(32, 32, 128, 128)
    mask = random_mask(rng, 128, 128)
    assert removed_region(mask, mask).sum() == 0
    assert (removed_region(mask, np.zeros_like(mask)) == mask).all()
    m_n = make_negative_label(mask, [PointPrompt(40, 70, NEGATIVE)], grid)
    removed = removed_region(mask, m_n)
    expected = mask.copy()
    expected[: , :] = 0
    expected[32:64, 64:96] = mask[32:64, 64:96]
    assert (removed == expected).all()


def test_removed_region_rejects_non_restriction():
    mask = np.zeros((4, 4), np.uint8)
    bad = np.ones((4, 4), np.uint8)
    with pytest.raises(ValueError):
        removed_region(mask, bad)


@st.composite
def label_cases(draw):
    l_h = draw(st.integers(4, 48))
    l_w = draw(st.integers(4, 48))
    h = draw(st.integers(8, 96))
    w = draw(st.integers(8, 96))
    grid = PatchGrid(l_h, l_w, h, w)
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    mask = random_mask(rng, h, w)
    n_prompts = draw(st.integers(0, 8))
    points = [
        (int(rng.integers(h)), int(rng.integers(w))) for _ in range(n_prompts)
    ]
    return grid, mask, points


@given(label_cases())
@settings(max_examples=60, deadline=None)
def test_labels_match_pixel_oracle(case):
    grid, mask, points = case
    pos = [PointPrompt(h, w, POSITIVE) for h, w in points]
    neg = [PointPrompt(h, w, NEGATIVE) for h, w in points]
    assert (make_positive_label(mask, pos, grid) == oracle_positive(mask, pos, grid)).all()
    assert (make_negative_label(mask, neg, grid) == oracle_negative(mask, neg, grid)).all()


@given(label_cases())
@settings(max_examples=60, deadline=None)
def test_label_identities(case):
    grid, mask, points = case
    pos = [PointPrompt(h, w, POSITIVE) for h, w in points]
    neg = [PointPrompt(h, w, NEGATIVE) for h, w in points]
    union = patch_union_mask({patch_of(p, grid) for p in pos}, grid)
    assert (make_positive_label(mask, pos, grid) == mask * union).all()
    assert (make_negative_label(mask, neg, grid) == mask * (1 - union)).all()
    # removed_region and the negative label partition the ground truth
    m_n = make_negative_label(mask, neg, grid)
    removed = removed_region(mask, m_n)
    assert ((removed | m_n) == mask).all()
    assert (removed & m_n).sum() == 0


def test_shared_patch_set_reconstructs(rng):
    # positives keep patch set S, negatives remove the same S: the two labels
    # partition the ground truth exactly
    grid = PatchGrid(32, 32, 128, 128)
    mask = random_mask(rng, 128, 128)
    patches = [(0, 0), (1, 1), (2, 2), (3, 3), (0, 3)]
    pos = [PointPrompt(32 * i + 5, 32 * j + 5, POSITIVE) for i, j in patches]
    neg = [PointPrompt(32 * i + 5, 32 * j + 5, NEGATIVE) for i, j in patches]
    m_p = make_positive_label(mask, pos, grid)
    m_n = make_negative_label(mask, neg, grid)
    assert ((m_p | m_n) == mask).all()
    assert (m_p & m_n).sum() == 0
