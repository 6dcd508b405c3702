import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from steerclone.augment import (
    AugmentConfig,
    augment_one,
    augment_stream,
    batches_per_epoch,
    darken_region,
    hflip_pair,
    iterate_batches,
    normalize_image,
    sample_region,
    vshift,
)
from steerclone.datasetio import FrameArrays


def _frames(n, seed=0, masks=False):
    rng = np.random.default_rng(seed)
    imgs = rng.integers(0, 256, (n, 224, 224, 3), dtype=np.uint8)
    steer = rng.uniform(-0.5, 0.5, n)
    m = rng.integers(0, 256, (n, 224, 224), dtype=np.uint8) if masks else None
    return FrameArrays(imgs, steer, [f"f{i}" for i in range(n)], m)


small_imgs = arrays(np.uint8, (6, 5, 3))


def test_forced_flip_negates_steering(rng):
    img = rng.integers(0, 256, (224, 224, 3), dtype=np.uint8)
    out, s = hflip_pair(img, -0.2, force=True)
    assert s == 0.2
    assert np.array_equal(out, img[:, ::-1])


@given(small_imgs, st.floats(-0.5, 0.5))
def test_flip_is_an_involution(img, s):
    a, sa = hflip_pair(img, s, force=True)
    b, sb = hflip_pair(a, sa, force=True)
    assert np.array_equal(b, img) and sb == s


def test_flip_handles_chw_float(rng):
    x = rng.random((3, 8, 5)).astype(np.float32)
    out, _ = hflip_pair(x, 0.1, force=True)
    assert np.array_equal(out, x[..., ::-1])


def test_flip_rate_monte_carlo():
    rng = np.random.default_rng(0)
    img = np.zeros((4, 4, 3), np.uint8)
    flips = sum(hflip_pair(img, 0.3, rng)[1] == -0.3 for _ in range(10000))
    assert 0.48 <= flips / 10000 <= 0.52


def test_vshift_zero_is_identity(rng):
    img = rng.integers(0, 256, (224, 224, 3), dtype=np.uint8)
    assert np.array_equal(vshift(img, offset=0), img)


def test_vshift_index_mapping(rng):
    img = rng.integers(0, 256, (224, 224, 3), dtype=np.uint8)
    out = vshift(img, offset=44)
    assert np.array_equal(out[44:224], img[0:180])
    # vacated rows replicate the edge row
    assert all(np.array_equal(out[r], img[0]) for r in range(44))
    neg = vshift(img, offset=-30)
    assert np.array_equal(neg[:194], img[30:])
    assert all(np.array_equal(neg[r], img[-1]) for r in range(194, 224))


def test_vshift_chw_matches_hwc(rng):
    img = rng.random((224, 224, 3)).astype(np.float32)
    chw = np.moveaxis(img, -1, 0)
    assert np.array_equal(np.moveaxis(vshift(chw, offset=17), 0, -1), vshift(img, offset=17))


def test_vshift_random_offsets_are_bounded():
    rng = np.random.default_rng(2)
    img = np.repeat(np.arange(224, dtype=np.float32)[:, None, None], 3, axis=2) * np.ones((1, 4, 1), np.float32)
    img /= 223.0
    for _ in range(300):
        out = vshift(img, rng)
        assert 0.0 <= out.min() and out.max() <= 1.0
        shift = round((out[112, 0, 0] - img[112, 0, 0]) * -223.0)
        assert abs(shift) <= math.floor(0.2 * 224)


def test_darken_full_image_halves(rng):
    img = rng.random((224, 224, 3)).astype(np.float32)
    out = darken_region(img, region=(0, 224, 0, 224))
    assert np.array_equal(out, img * np.float32(0.5))


def test_darken_outside_region_untouched(rng):
    img = rng.integers(0, 256, (224, 224, 3), dtype=np.uint8)
    out = darken_region(img, region=(10, 60, 20, 120))
    inside = np.zeros((224, 224), bool)
    inside[10:60, 20:120] = True
    assert np.array_equal(out[~inside], img[~inside])
    assert np.array_equal(out[inside], img[inside] // 2)


def test_region_area_over_many_draws():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        r0, r1, c0, c1 = sample_region(224, 224, rng)
        frac = (r1 - r0) * (c1 - c0) / 224**2
        assert 0.1 <= frac <= 0.5
        assert 0 <= r0 < r1 <= 224 and 0 <= c0 < c1 <= 224


def test_normalize_endpoints():
    x = normalize_image(np.array([[[0, 255, 128]]], np.uint8))
    assert x.shape == (3, 1, 1) and x.dtype == np.float32
    assert x[0, 0, 0] == -0.5 and x[1, 0, 0] == 0.5
    assert x[2, 0, 0] == pytest.approx(128 / 255 - 0.5, abs=1e-7)


def test_normalize_is_monotone_and_invertible():
    levels = np.arange(256, dtype=np.uint8).reshape(1, 256, 1)
    x = normalize_image(levels)[0, 0]
    assert np.all(np.diff(x) > 0)
    back = np.round((x + 0.5) * 255).astype(np.uint8)
    assert np.array_equal(back, np.arange(256))


def test_augment_one_keeps_range():
    rng = np.random.default_rng(9)
    img = np.full((224, 224, 3), 200, np.uint8)
    for _ in range(50):
        out, s, flipped = augment_one(img, 0.4, rng)
        assert out.dtype == np.uint8 and out.shape == img.shape
        assert s == (-0.4 if flipped else 0.4)


def test_disabled_stream_is_deterministic_and_pure():
    data = _frames(10)
    a = list(iterate_batches(data, 4, seed=3, epoch=1))
    b = list(iterate_batches(data, 4, seed=3, epoch=1))
    assert all(np.array_equal(x[0], y[0]) and np.array_equal(x[1], y[1]) for x, y in zip(a, b))
    # pure reordering: every frame appears once, normalised and unmodified
    seen = np.concatenate([s for _, s in a])
    assert sorted(seen.tolist()) == sorted(data.steering.astype(np.float32).tolist())
    flat = np.concatenate([x for x, _ in a])
    ref = normalize_image(data.images)
    for img, s in zip(flat, seen):
        i = int(np.flatnonzero(data.steering.astype(np.float32) == s)[0])
        assert np.array_equal(img, ref[i])


def test_epochs_reshuffle():
    data = _frames(12)
    e0 = np.concatenate([s for _, s in iterate_batches(data, 4, seed=0, epoch=0)])
    e1 = np.concatenate([s for _, s in iterate_batches(data, 4, seed=0, epoch=1)])
    assert not np.array_equal(e0, e1)


def test_enabled_stream_labels_in_range():
    data = _frames(9)
    for _, s in iterate_batches(data, 4, enabled=True, seed=1):
        assert np.all(np.abs(s) <= 0.5)
    flipped = [s for _, s in iterate_batches(data, 9, enabled=True, seed=1, shuffle=False)][0]
    assert np.all(np.isin(np.abs(flipped), np.abs(data.steering.astype(np.float32))))


def test_masks_follow_the_flip():
    data = _frames(6, masks=True)
    cfg = AugmentConfig(flip_prob=1.0, shift_prob=0.0, darken_prob=0.0)
    imgs, steer, masks = next(iterate_batches(data, 6, enabled=True, shuffle=False, with_masks=True, cfg=cfg))
    assert np.array_equal(steer, -data.steering.astype(np.float32))
    assert np.array_equal(masks[:, 0], data.masks[:, :, ::-1] / np.float32(255.0))
    assert np.array_equal(imgs, normalize_image(data.images[:, :, ::-1]))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 23), st.integers(1, 9))
def test_batch_count(n, bs):
    data = FrameArrays(np.zeros((n, 2, 2, 3), np.uint8), np.zeros(n), [])
    batches = list(iterate_batches(data, bs))
    assert len(batches) == batches_per_epoch(n, bs) == math.ceil(n / bs)
    assert sum(len(s) for _, s in batches) == n


def test_stream_bad_arguments():
    with pytest.raises(ValueError):
        list(iterate_batches(FrameArrays(np.zeros((0, 2, 2, 3), np.uint8), np.zeros(0), []), 4))
    with pytest.raises(ValueError):
        list(iterate_batches(_frames(2), 0))
    with pytest.raises(ValueError):
        list(iterate_batches(_frames(2), 1, with_masks=True))


def test_augment_stream_spans_epochs():
    data = _frames(5)
    batches = list(augment_stream(data, 2, epochs=3))
    assert len(batches) == 9
