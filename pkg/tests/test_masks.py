import numpy as np
import pycocotools.mask as coco
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from wsmots.masks import (BBox, RleError, RleMask, bbox_iou, crop_and_rasterize, mask_iou, resize_bilinear,
                          rle_decode, rle_encode, rle_to_bbox)

masks_2d = st.tuples(st.integers(1, 64), st.integers(1, 64)).flatmap(
    lambda hw: arrays(bool, hw))
mask_pairs = st.tuples(st.integers(1, 16), st.integers(1, 16)).flatmap(
    lambda hw: st.tuples(arrays(bool, hw), arrays(bool, hw)))


def brute_iou(a, b):
    inter = union = 0
    for x, y in zip(np.ravel(a), np.ravel(b)):
        inter += bool(x and y)
        union += bool(x or y)
    return inter / union if union else 0.0


class TestMaskIou:
    def test_identity(self, rng):
        m = rng.random((9, 7)) < 0.5
        m[0, 0] = True
        assert mask_iou(m, m) == 1.0

    def test_disjoint(self):
        a = np.zeros((4, 4), bool)
        b = np.zeros((4, 4), bool)
        a[:2] = True
        b[2:] = True
        assert mask_iou(a, b) == 0.0

    def test_half(self):
        a = np.ones((2, 2), bool)
        b = np.array([[1, 1], [0, 0]], bool)
        assert mask_iou(a, b) == 0.5

    def test_empty_union_is_zero(self):
        z = np.zeros((3, 3), bool)
        assert mask_iou(z, z) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mask_iou(np.zeros((2, 2)), np.zeros((2, 3)))

    @given(mask_pairs)
    @settings(max_examples=200, deadline=None)
    def test_properties(self, pair):
        a, b = pair
        v = mask_iou(a, b)
        assert v == mask_iou(b, a)
        assert 0.0 <= v <= 1.0
        assert v == pytest.approx(brute_iou(a, b))
        if a.any():
            assert mask_iou(a, a) == 1.0
        if v == 1.0:
            assert (a == b).all()


class TestBboxIou:
    def test_identical(self):
        assert bbox_iou(BBox(1, 2, 5, 7), BBox(1, 2, 5, 7)) == 1.0

    def test_disjoint(self):
        assert bbox_iou(BBox(0, 0, 2, 2), BBox(2, 0, 4, 2)) == 0.0

    def test_third(self):
        assert bbox_iou(BBox(0, 0, 2, 2), BBox(1, 0, 3, 2)) == pytest.approx(1 / 3)

    def test_rasterized_oracle(self, rng):
        for _ in range(50):
            a = BBox(*rng.integers(0, 10, 2), *rng.integers(11, 20, 2))
            b = BBox(*rng.integers(0, 10, 2), *rng.integers(11, 20, 2))
            grid = np.zeros((2, 20, 20), bool)
            for k, box in enumerate((a, b)):
                grid[k, int(box.y0):int(box.y1), int(box.x0):int(box.x1)] = True
            assert bbox_iou(a, b) == pytest.approx(mask_iou(grid[0], grid[1]))

    def test_degenerate_box_rejected(self):
        with pytest.raises(ValueError):
            BBox(3, 0, 3, 4)


class TestRle:
    def test_all_zero_single_run(self):
        r = rle_encode(np.zeros((2, 2), bool))
        assert r.counts == "4"
        assert (r.height, r.width) == (2, 2)

    def test_column_major(self):
        m = np.array([[1, 0], [0, 0]], bool)
        # column-major: 1,0,0,0 -> runs [0, 1, 3]
        assert rle_decode(RleMask(2, 2, rle_encode(m).counts)).tolist() == m.tolist()
        assert rle_encode(m).counts == coco.encode(np.asfortranarray(m.astype(np.uint8)))["counts"].decode()

    @given(masks_2d)
    @settings(max_examples=300, deadline=None)
    def test_matches_reference_codec(self, m):
        ref = coco.encode(np.asfortranarray(m.astype(np.uint8)))["counts"].decode()
        r = rle_encode(m)
        assert r.counts == ref
        assert (rle_decode(r) == m).all()

    def test_roundtrip_many(self, rng):
        for _ in range(2000):
            h, w = rng.integers(1, 65, 2)
            m = rng.random((h, w)) < rng.random()
            assert (rle_decode(rle_encode(m)) == m).all()

    def test_long_runs_need_several_groups(self):
        m = np.zeros((300, 300), bool)
        m[100:, 200:] = True
        r = rle_encode(m)
        ref = coco.encode(np.asfortranarray(m.astype(np.uint8)))["counts"].decode()
        assert r.counts == ref
        assert (rle_decode(r) == m).all()

    def test_reference_fixture(self, fixtures):
        masks = np.load(fixtures / "coco_reference_masks.npz")
        for line in (fixtures / "coco_reference.txt").read_text().splitlines():
            f, oid, _, h, w, counts = line.split()
            m = rle_decode(RleMask(int(h), int(w), counts))
            assert m.shape == (int(h), int(w))
            assert (m == masks[f"{f}_{oid}"]).all()

    def test_truncated(self):
        m = np.zeros((300, 300), bool)
        m[100:, 200:] = True
        counts = rle_encode(m).counts
        # the first run (200*300) needs several groups; cut inside it
        with pytest.raises(RleError):
            rle_decode(RleMask(300, 300, counts[:2]))

    def test_sum_mismatch(self):
        with pytest.raises(RleError):
            rle_decode(RleMask(2, 3, "4"))

    def test_bad_character(self):
        with pytest.raises(RleError):
            rle_decode(RleMask(2, 2, "4 "))

    def test_rle_to_bbox(self):
        m = np.zeros((5, 6), bool)
        m[1:3, 2:5] = True
        assert rle_to_bbox(rle_encode(m)).as_list() == [2, 1, 5, 3]
        assert rle_to_bbox(rle_encode(np.zeros((2, 2), bool))) is None


class TestResize:
    def test_constant(self):
        out = resize_bilinear(np.full((28, 28), 0.3), 128, 128)
        assert np.allclose(out, 0.3)

    def test_identity(self, rng):
        m = rng.random((5, 7))
        assert np.allclose(resize_bilinear(m, 5, 7), m)

    def test_monotone_row(self):
        out = resize_bilinear([[0, 1], [0, 1]], 2, 4)
        # corner-aligned samples at x = 0, 1/3, 2/3, 1
        assert np.allclose(out, [[0, 1 / 3, 2 / 3, 1]] * 2)
        assert (np.diff(out, axis=1) >= 0).all()

    @given(arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 12)),
                  elements=st.floats(0, 1)), st.integers(1, 40), st.integers(1, 40))
    @settings(max_examples=100, deadline=None)
    def test_range_preserved(self, m, oh, ow):
        out = resize_bilinear(m, oh, ow)
        assert out.shape == (oh, ow)
        assert out.min() >= m.min() and out.max() <= m.max()

    def test_bad_target(self):
        with pytest.raises(ValueError):
            resize_bilinear(np.zeros((2, 2)), 0, 3)


def brute_crop(frame, box, size=28):
    out = np.zeros((size, size), bool)
    for i in range(size):
        for j in range(size):
            x = box.x0 + (j + 0.5) * (box.x1 - box.x0) / size
            y = box.y0 + (i + 0.5) * (box.y1 - box.y0) / size
            px, py = int(np.floor(x)), int(np.floor(y))
            if 0 <= px < frame.shape[1] and 0 <= py < frame.shape[0]:
                out[i, j] = frame[py, px]
    return out


class TestCrop:
    def test_full_frame_uniform(self):
        out = crop_and_rasterize(np.ones((50, 60), bool), BBox(0, 0, 60, 50))
        assert out.shape == (28, 28) and out.all()

    def test_single_pixel(self):
        frame = np.zeros((10, 10), bool)
        frame[4, 7] = True
        assert crop_and_rasterize(frame, BBox(7, 4, 8, 5)).all()
        assert not crop_and_rasterize(frame, BBox(6, 4, 7, 5)).any()

    def test_against_brute_force(self, rng):
        for _ in range(30):
            frame = rng.random((40, 50)) < 0.4
            x0, y0 = rng.uniform(-10, 45), rng.uniform(-10, 35)
            box = BBox(x0, y0, x0 + rng.uniform(1, 30), y0 + rng.uniform(1, 30))
            if box.x1 <= 0 or box.y1 <= 0:
                with pytest.raises(ValueError):
                    crop_and_rasterize(frame, box)
                continue
            assert (crop_and_rasterize(frame, box) == brute_crop(frame, box)).all()

    def test_outside_frame(self):
        with pytest.raises(ValueError):
            crop_and_rasterize(np.ones((5, 5), bool), BBox(5, 0, 9, 4))
