from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capsynth.geomcore import polygon_contains, rasterize_polygon
from capsynth.segmentation import Cutout
from capsynth.synthesis import (
    AugmentConfig,
    RackBackground,
    SynthConfig,
    SynthesisError,
    adjust_brightness,
    adjust_contrast,
    augment_cutout,
    blur,
    image_rng,
    occlusion_fraction,
    prepare_background,
    rescale,
    sample_in_polygon,
    swap_background,
    synthesize_image,
)

from oracles import occlusion_violations, tight_bounds

NO_AUG = AugmentConfig(scale_p=0, blur_p=0, brightness_p=0, contrast_p=0)


def disc(radius, class_id, value=0.5):
    d = 2 * radius + 1
    yy, xx = np.mgrid[0:d, 0:d]
    alpha = (xx - radius) ** 2 + (yy - radius) ** 2 <= radius**2
    return Cutout(np.full((d, d), value), alpha, class_id, {"r": radius})


def rack_background(size=200, margin=40):
    img = np.full((size, size), 0.7)
    poly = np.array([[margin, margin], [size - margin, margin], [size - margin, size - margin],
                     [margin, size - margin]], float)
    return RackBackground(img, poly)


POOL = [disc(8, 0, 0.3), disc(6, 1, 0.5), disc(10, 2, 0.9), disc(7, 3, 0.6)]


def _full_masks(img, canvas):
    return [inst.full_mask(canvas) for inst in img.instances]


# --- augmentation -----------------------------------------------------------------


def test_no_augmentation_is_identity():
    cut = disc(5, 0)
    out = augment_cutout(cut, NO_AUG, np.random.default_rng(0))
    assert np.array_equal(out.patch, cut.patch) and np.array_equal(out.alpha, cut.alpha)
    assert out.ops == ()


def test_forced_scale():
    cut = Cutout(np.full((100, 100), 0.5), np.ones((100, 100), bool), 0)
    big = rescale(cut, 1.1)
    assert abs(big.alpha.shape[0] - 110) <= 1 and abs(big.alpha.shape[1] - 110) <= 1
    assert big.ops == (("scale", 1.1),)
    assert big.is_tight()


def test_forced_brightness():
    cut = Cutout(np.full((10, 10), 0.5), np.ones((10, 10), bool), 0)
    out = adjust_brightness(cut, 0.9)
    assert np.allclose(out.patch, 0.45, atol=1e-12)
    assert adjust_brightness(Cutout(np.full((3, 3), 0.95), np.ones((3, 3), bool)), 1.1).patch.max() == 1.0


def test_contrast_and_blur_stay_in_range():
    rng = np.random.default_rng(1)
    cut = Cutout(rng.random((12, 12)), np.ones((12, 12), bool), 0)
    for f in (0.9, 1.1, 3.0):
        p = adjust_contrast(cut, f).patch
        assert p.min() >= 0 and p.max() <= 1
    b = blur(cut, 3)
    assert np.isclose(b.patch[5, 5], cut.patch[4:7, 4:7].mean())


def test_augment_config_validation():
    with pytest.raises(ValueError):
        AugmentConfig(scale_range=(1.1, 1.2))
    with pytest.raises(ValueError):
        AugmentConfig(blur_p=2)


def test_scaled_to_nothing_errors():
    # an anti-diagonal 2x2 alpha loses its only sampled pixel at half size
    cut = Cutout(np.zeros((2, 2)), np.array([[0, 1], [1, 0]], bool), 0)
    with pytest.raises(SynthesisError):
        rescale(cut, 0.5)


# --- occlusion fraction -------------------------------------------------------------


def test_occlusion_fraction_examples():
    a = np.zeros((20, 20), bool)
    a[0:10, 0:10] = True
    assert occlusion_fraction(a, np.zeros_like(a)) == 0.0
    assert occlusion_fraction(a, np.ones_like(a)) == 1.0
    half = np.zeros_like(a)
    half[0:10, 0:5] = True
    assert occlusion_fraction(a, half) == 0.5
    with pytest.raises(ValueError):
        occlusion_fraction(np.zeros_like(a), a)


# --- synthesis ---------------------------------------------------------------------


def test_single_paste():
    bg = rack_background()
    cfg = SynthConfig(T=1, canvas=(200, 200), background_swap_p=0)
    img = synthesize_image(bg, POOL, cfg, NO_AUG, [], np.random.default_rng(0))
    assert len(img.instances) == 1 and len(img.labels) == 1


def test_constraint_holds_under_oracle():
    bg = rack_background(400, 60)
    cfg = SynthConfig(T=30, t_per_class={}, t_default=0.15, canvas=(400, 400), background_swap_p=0)
    for i in range(10):
        img = synthesize_image(bg, POOL, cfg, AugmentConfig(), [], image_rng(3, i))
        assert len(img.instances) <= 30
        masks = _full_masks(img, cfg.canvas)
        assert occlusion_violations(masks, [m.class_id for m in img.instances], {}, 0.15) == []


def test_zero_threshold_means_disjoint():
    bg = rack_background()
    cfg = SynthConfig(T=30, t_per_class={}, t_default=0.0, canvas=(200, 200), background_swap_p=0)
    img = synthesize_image(bg, POOL, cfg, NO_AUG, [], np.random.default_rng(2))
    masks = _full_masks(img, cfg.canvas)
    assert len(masks) > 1
    assert np.sum(masks, axis=0).max() == 1


def test_crowding_stops_early():
    # a tiny polygon leaves room for only a few instances
    bg = RackBackground(np.zeros((100, 100)), np.array([[48, 48], [52, 48], [52, 52], [48, 52]], float))
    cfg = SynthConfig(T=30, t_per_class={}, t_default=0.1, canvas=(100, 100), background_swap_p=0,
                      max_attempts_per_paste=20)
    img = synthesize_image(bg, POOL, cfg, NO_AUG, [], np.random.default_rng(4))
    assert 1 <= len(img.instances) < 30


def test_centres_inside_polygon_and_labels_tight():
    bg = rack_background(300, 50)
    cfg = SynthConfig(T=20, canvas=(300, 300), background_swap_p=0)
    img = synthesize_image(bg, POOL, cfg, AugmentConfig(), [], np.random.default_rng(5))
    assert polygon_contains(bg.polygon, np.array([i.center for i in img.instances])).all()
    for inst, (cid, box) in zip(img.instances, img.labels):
        assert tuple(box) == tight_bounds(inst.full_mask(cfg.canvas))
        assert cid == inst.class_id
    assert [i.order for i in img.instances] == list(range(len(img.instances)))


def test_paste_clipped_at_canvas_edge():
    bg = RackBackground(np.zeros((60, 60)), np.array([[0, 0], [3, 0], [3, 3], [0, 3]], float))
    cfg = SynthConfig(T=5, canvas=(60, 60), background_swap_p=0, t_default=1.0, t_per_class={})
    img = synthesize_image(bg, [disc(10, 1)], cfg, NO_AUG, [], np.random.default_rng(6))
    for inst in img.instances:
        x0, y0, x1, y1 = inst.bbox
        assert x0 >= 0 and y0 >= 0 and x1 <= 60 and y1 <= 60
        assert inst.mask.shape[0] < 21 or inst.mask.shape[1] < 21


def test_painter_order_compositing():
    bg = rack_background()
    cfg = SynthConfig(T=10, t_per_class={}, t_default=1.0, canvas=(200, 200), background_swap_p=0)
    img = synthesize_image(bg, POOL, cfg, NO_AUG, [], np.random.default_rng(7))
    expect = bg.image.copy()
    for inst in img.instances:
        val = POOL[[c.class_id for c in POOL].index(inst.class_id)].patch[0, 0]
        expect[inst.full_mask(cfg.canvas)] = val
    assert np.allclose(img.image, expect)


def test_synthesis_errors():
    bg = rack_background()
    cfg = SynthConfig(canvas=(200, 200))
    with pytest.raises(SynthesisError):
        synthesize_image(bg, [], cfg, NO_AUG, [], np.random.default_rng(0))
    flat = RackBackground(bg.image, np.array([[0, 0], [10, 10], [20, 20]], float))
    with pytest.raises(SynthesisError):
        synthesize_image(flat, POOL, cfg, NO_AUG, [], np.random.default_rng(0))


def test_deterministic_per_seed():
    bg = rack_background()
    cfg = SynthConfig(T=15, canvas=(200, 200))
    pool_bg = [np.random.default_rng(1).random((50, 50))]
    a = synthesize_image(bg, POOL, cfg, AugmentConfig(), pool_bg, image_rng(9, 4))
    b = synthesize_image(bg, POOL, cfg, AugmentConfig(), pool_bg, image_rng(9, 4))
    assert np.array_equal(a.image, b.image) and a.labels == b.labels
    c = synthesize_image(bg, POOL, cfg, AugmentConfig(), pool_bg, image_rng(9, 5))
    assert not np.array_equal(a.image, c.image)


# --- background swap ----------------------------------------------------------------


def test_swap_background():
    img = np.full((50, 50), 0.2)
    poly = np.array([[10, 10], [40, 10], [40, 40], [10, 40]], float)
    bg = np.random.default_rng(2).random((50, 50))
    same, k = swap_background(img, poly, [bg], 0.0, np.random.default_rng(0))
    assert k is None and np.array_equal(same, img)
    out, k = swap_background(img, poly, [bg], 1.0, np.random.default_rng(0))
    inside = rasterize_polygon(poly, (50, 50))
    assert k == 0
    assert np.array_equal(out[inside], img[inside]) and np.array_equal(out[~inside], bg[~inside])
    with pytest.raises(SynthesisError):
        swap_background(img, poly, [], 0.5, np.random.default_rng(0))


def test_swap_rate():
    img = np.zeros((8, 8))
    poly = np.array([[2, 2], [5, 2], [5, 5]], float)
    n = sum(swap_background(img, poly, [img], 0.5, image_rng(1, i))[1] is not None for i in range(1000))
    assert 453 <= n <= 547


# --- polygon sampling -----------------------------------------------------------------


def test_sample_in_polygon_uniform():
    poly = np.array([[0, 0], [4, 0], [4, 1], [0, 1]], float)
    rng = np.random.default_rng(0)
    pts = np.array([sample_in_polygon(poly, rng) for _ in range(4000)])
    assert (pts[:, 0] >= 0).all() and (pts[:, 0] <= 4).all()
    left = np.mean(pts[:, 0] < 2)
    assert abs(left - 0.5) < 3 * np.sqrt(0.25 / 4000)


@given(st.integers(20, 80), st.integers(100, 300))
@settings(max_examples=10, deadline=None)
def test_prepare_background_scales_polygon(w, W):
    gray = np.zeros((w, w))
    poly = np.array([[0, 0], [w - 1, 0], [w - 1, w - 1], [0, w - 1]], float)
    bg = prepare_background(gray, poly, (W, W))
    assert bg.image.shape == (W, W)
    s = W / w
    assert np.isclose(bg.polygon[:, 0].min(), 0.5 * s - 0.5)
    assert np.isclose(bg.polygon[:, 0].max(), (w - 0.5) * s - 0.5)
