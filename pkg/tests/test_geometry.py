import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskstrike.geometry import (
    BinaryMask,
    Box,
    GradientPlan,
    Image,
    boxes_intersecting_mask,
    clamp_image,
    iou,
    mask_gradient,
    permute_perturbation,
    rasterize_mask,
    rescale_image,
    rescale_to_shape,
    scaled_shape,
)


def boxes_strategy():
    coord = st.floats(0.0, 100.0, allow_nan=False, width=32)
    side = st.floats(0.5, 50.0, allow_nan=False, width=32)
    return st.builds(
        lambda x, y, w, h: Box(x, y, x + w, y + h), coord, coord, side, side
    )


class TestBox:
    def test_degenerate_raises(self):
        with pytest.raises(ValueError):
            Box(5, 5, 5, 9)
        with pytest.raises(ValueError):
            Box(0, 0, 4, -1)

    def test_area(self):
        assert Box(1, 2, 4, 6).area == 12.0

    def test_clipped(self):
        b = Box(-3, -1, 5, 7).clipped(width=4, height=6)
        assert b.as_tuple() == (0, 0, 4, 6)


class TestIou:
    def test_identical(self):
        b = Box(10, 10, 20, 30)
        assert iou(b, b) == 1.0

    def test_disjoint(self):
        assert iou(Box(0, 0, 1, 1), Box(5, 5, 6, 6)) == 0.0

    def test_known_overlap(self):
        # inter 5x5=25, union 100+100-25
        a = Box(0, 0, 10, 10)
        b = Box(5, 5, 15, 15)
        assert iou(a, b) == pytest.approx(25 / 175)

    def test_no_plus_one(self):
        # continuous areas: unit boxes sharing an edge do not intersect
        assert iou(Box(0, 0, 1, 1), Box(1, 0, 2, 1)) == 0.0

    @given(boxes_strategy(), boxes_strategy())
    def test_symmetric_and_bounded(self, a, b):
        v = iou(a, b)
        assert v == iou(b, a)
        assert 0.0 <= v <= 1.0


class TestRasterize:
    def test_integer_box(self):
        m = rasterize_mask([Box(2, 2, 4, 4)], (8, 8))
        assert m.pixel_count == 4
        assert m.bits[2:4, 2:4].all()

    def test_union(self):
        m = rasterize_mask([Box(0, 0, 3, 3), Box(1, 1, 4, 4)], (8, 8))
        assert m.pixel_count == 14

    def test_fractional_floor_ceil(self):
        # x: floor(.2)=0 .. ceil(2.1)=3, y: floor(.5)=0 .. ceil(1.0)=1
        m = rasterize_mask([Box(0.2, 0.5, 2.1, 1.0)], (4, 4))
        assert m.pixel_count == 3
        assert m.bits[0, :3].all()

    def test_clips_to_image(self):
        m = rasterize_mask([Box(-5, -5, 100, 100)], (6, 7))
        assert m.pixel_count == 42

    def test_empty(self):
        assert rasterize_mask([], (5, 5)).pixel_count == 0


class TestRescale:
    def test_shape_rule(self):
        assert scaled_shape((100, 200), 128) == (128, 256)
        assert scaled_shape((200, 100), 128) == (256, 128)
        assert scaled_shape((600, 800), 600) == (600, 800)

    def test_identity_when_short_side_matches(self):
        img = Image(np.random.default_rng(1).uniform(0, 255, (32, 48, 3)))
        out = rescale_image(img, 32)
        assert np.array_equal(out.pixels, img.pixels)
        assert out.pixels is not img.pixels

    def test_constant_preserved(self):
        img = Image(np.full((40, 60, 3), 137.5))
        out = rescale_image(img, 128)
        assert out.shape == (128, 192)
        assert np.allclose(out.pixels, 137.5)

    def test_rescale_to_shape_roundtrip_shape(self):
        g = np.random.default_rng(2).normal(size=(16, 24, 3))
        assert rescale_to_shape(g, (40, 50)).shape == (40, 50, 3)

    def test_known_1d_midpoint(self):
        # 1x2 -> 1x4 bilinear with half-pixel centers: edge pixels replicate,
        # interior pixels sit 1/4 and 3/4 of the way between the sources
        arr = np.zeros((1, 2, 3))
        arr[0, 0] = 0.0
        arr[0, 1] = 4.0
        out = rescale_to_shape(arr, (1, 4))
        assert np.allclose(out[0, :, 0], [0.0, 1.0, 3.0, 4.0])


class TestMaskGradient:
    def test_zero_outside_mask_bit_exact(self):
        rng = np.random.default_rng(3)
        g = rng.normal(size=(16, 20, 3)) * 1e6
        plan = GradientPlan(g, original_shape=(32, 40), learning_rate=2.5)
        bits = rng.random((32, 40)) < 0.3
        masked = mask_gradient(plan, BinaryMask(bits))
        assert masked.shape == (32, 40, 3)
        outside = masked[~bits]
        assert outside.size and np.all(outside == 0.0)

    def test_learning_rate_is_linear(self):
        g = np.random.default_rng(4).normal(size=(8, 8, 3))
        bits = np.ones((8, 8), dtype=bool)
        m1 = mask_gradient(GradientPlan(g, (8, 8), 1.0), BinaryMask(bits))
        m3 = mask_gradient(GradientPlan(g, (8, 8), 3.0), BinaryMask(bits))
        assert np.allclose(m3, 3.0 * m1)

    def test_shape_mismatch_raises(self):
        plan = GradientPlan(np.zeros((8, 8, 3)), (8, 8))
        with pytest.raises(ValueError):
            mask_gradient(plan, BinaryMask.empty((9, 8)))

    def test_nonfinite_gradient_rejected(self):
        g = np.zeros((4, 4, 3))
        g[0, 0, 0] = np.inf
        with pytest.raises(ValueError):
            GradientPlan(g, (4, 4))


class TestClamp:
    def test_in_range_untouched(self):
        px = np.random.default_rng(5).uniform(0.0, 255.0, (10, 10, 3))
        out = clamp_image(Image(px))
        assert np.array_equal(out.pixels, px)

    def test_clamps_and_idempotent(self):
        px = np.array([[[-4.0, 300.0, 128.25]]])
        once = clamp_image(Image(px))
        assert once.pixels.tolist() == [[[0.0, 255.0, 128.25]]]
        assert np.array_equal(clamp_image(once).pixels, once.pixels)


def _loop_shuffle(arr, seed):
    """Independent pixel-by-pixel shuffle used as the reference."""
    h, w, _ = arr.shape
    perm = np.random.default_rng(seed).permutation(h * w)
    pixels = [arr[i // w, i % w].tolist() for i in range(h * w)]
    return np.array([pixels[j] for j in perm]).reshape(h, w, 3)


class TestPermutation:
    def test_frozen_2x2_seed0(self):
        arr = np.arange(12, dtype=np.float64).reshape(2, 2, 3)
        expected = np.array(
            [[[6.0, 7.0, 8.0], [0.0, 1.0, 2.0]], [[3.0, 4.0, 5.0], [9.0, 10.0, 11.0]]]
        )
        assert np.array_equal(permute_perturbation(arr, 0), expected)

    def test_matches_loop_reference(self):
        rng = np.random.default_rng(6)
        for seed in range(5):
            arr = rng.normal(size=(5, 7, 3))
            assert np.array_equal(
                permute_perturbation(arr, seed), _loop_shuffle(arr, seed)
            )

    @given(st.integers(0, 10_000), st.integers(1, 12), st.integers(1, 12))
    @settings(max_examples=40, deadline=None)
    def test_l2_preserved_channels_together(self, seed, h, w):
        arr = np.random.default_rng(seed + 1).normal(size=(h, w, 3))
        out = permute_perturbation(arr, seed)
        # exact norm preservation: same multiset of pixel triples
        a = sorted(map(tuple, arr.reshape(-1, 3).tolist()))
        b = sorted(map(tuple, out.reshape(-1, 3).tolist()))
        assert a == b

    def test_deterministic(self):
        arr = np.random.default_rng(7).normal(size=(6, 6, 3))
        assert np.array_equal(
            permute_perturbation(arr, 42), permute_perturbation(arr, 42)
        )


class TestImageIO:
    def test_png_roundtrip(self, tmp_path):
        px = np.random.default_rng(8).integers(0, 256, (20, 30, 3)).astype(np.float64)
        p = tmp_path / "img.png"
        Image(px).save(p)
        assert np.array_equal(Image.load(p).pixels, px)

    def test_save_quantizes_not_the_object(self, tmp_path):
        px = np.full((4, 4, 3), 10.6)
        img = Image(px)
        img.save(tmp_path / "q.png")
        assert np.array_equal(img.pixels, px)  # object untouched
        assert np.all(Image.load(tmp_path / "q.png").pixels == 11.0)

    def test_mask_roundtrip(self, tmp_path):
        bits = np.random.default_rng(9).random((16, 16)) < 0.4
        p = tmp_path / "m.png"
        BinaryMask(bits).save(p)
        assert np.array_equal(BinaryMask.load(p).bits, bits)


class TestBoxesIntersectingMask:
    def test_basic(self):
        mask = rasterize_mask([Box(4, 4, 8, 8)], (16, 16))
        boxes = [Box(0, 0, 2, 2), Box(6, 6, 12, 12), Box(7.5, 0, 9, 5)]
        assert boxes_intersecting_mask(boxes, mask) == [1, 2]

    def test_edge_touch_does_not_count(self):
        # raster windows [4,8) and [8,10) share no pixel
        mask = rasterize_mask([Box(4, 4, 8, 8)], (16, 16))
        assert boxes_intersecting_mask([Box(8, 4, 10, 6)], mask) == []
