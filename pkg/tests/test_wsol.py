import numpy as np
import pytest

from attrobust.wsol import (BoundingBox, LocalizationResult, fit_bounding_box,
                            heatmap_postprocess, iou, localize, mask_iou, top1_seg,
                            wsol_metrics)


def pixel_enumeration_iou(a: BoundingBox, b: BoundingBox, size=64):
    grid_a = np.zeros((size, size), dtype=bool)
    grid_b = np.zeros((size, size), dtype=bool)
    grid_a[a.y_min:a.y_max + 1, a.x_min:a.x_max + 1] = True
    grid_b[b.y_min:b.y_max + 1, b.x_min:b.x_max + 1] = True
    union = np.logical_or(grid_a, grid_b).sum()
    return np.logical_and(grid_a, grid_b).sum() / union


class TestHeatmapPostprocess:
    def test_constant_map_is_all_zero(self):
        out = heatmap_postprocess(np.full((8, 8), 3.7))
        assert np.allclose(out, 0.0)

    def test_single_hot_pixel_plateau(self):
        hm = np.zeros((9, 9))
        hm[4, 4] = 5.0
        out = heatmap_postprocess(hm)
        # interior 3x3 around the hot pixel averages to 1/9
        assert np.allclose(out[3:6, 3:6], 1 / 9, atol=1e-12)
        assert out[0, 0] == 0.0

    def test_range_stays_in_unit_interval(self):
        r = np.random.default_rng(3)
        for _ in range(20):
            out = heatmap_postprocess(r.normal(size=(3, 16, 16)))
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_channel_reduce_modes(self):
        arr = np.stack([np.ones((4, 4)), -np.ones((4, 4)), np.zeros((4, 4))])
        assert np.allclose(heatmap_postprocess(arr, "mean"), 0.0)  # cancels, constant
        out = heatmap_postprocess(arr * np.arange(16).reshape(4, 4), "abs_mean")
        assert out.max() <= 1.0


class TestFitBoundingBox:
    def test_rectangle_indicator_recovered_exactly(self):
        hm = np.zeros((32, 32))
        hm[5:12, 8:20] = 1.0
        box = fit_bounding_box(hm, 0.2)
        assert box == BoundingBox(8, 5, 19, 11)

    def test_largest_component_wins(self):
        hm = np.zeros((32, 32))
        hm[2:5, 2:5] = 1.0     # 9 px blob
        hm[10:20, 10:20] = 1.0  # 100 px blob
        box = fit_bounding_box(hm, 0.5)
        assert box == BoundingBox(10, 10, 19, 19)

    def test_threshold_zero_gives_full_image(self):
        hm = np.random.default_rng(0).uniform(size=(16, 20))
        assert fit_bounding_box(hm, 0.0) == BoundingBox(0, 0, 19, 15)

    def test_scale_invariance(self):
        hm = np.zeros((16, 16))
        hm[3:9, 4:12] = 0.7
        assert fit_bounding_box(hm, 0.2) == fit_bounding_box(hm * 123.0, 0.2)


class TestIoU:
    def test_identical(self):
        b = BoundingBox(3, 4, 10, 12)
        assert iou(b, b) == 1.0

    def test_known_overlap(self):
        a = BoundingBox(0, 0, 9, 9)
        b = BoundingBox(5, 5, 14, 14)
        assert iou(a, b) == pytest.approx(25 / 175, abs=1e-12)

    def test_disjoint(self):
        assert iou(BoundingBox(0, 0, 2, 2), BoundingBox(10, 10, 12, 12)) == 0.0

    def test_matches_pixel_enumeration(self):
        r = np.random.default_rng(7)
        for _ in range(200):
            ax0, ay0 = r.integers(0, 40, 2)
            bx0, by0 = r.integers(0, 40, 2)
            a = BoundingBox(int(ax0), int(ay0), int(ax0 + r.integers(0, 20)),
                            int(ay0 + r.integers(0, 20)))
            b = BoundingBox(int(bx0), int(by0), int(bx0 + r.integers(0, 20)),
                            int(by0 + r.integers(0, 20)))
            assert iou(a, b) == pytest.approx(pixel_enumeration_iou(a, b), abs=1e-12)
            assert iou(a, b) == iou(b, a)

    def test_degenerate_box_rejected(self):
        with pytest.raises(ValueError):
            BoundingBox(5, 0, 2, 3)


class TestMetrics:
    def test_all_perfect(self):
        b = BoundingBox(0, 0, 5, 5)
        results = [LocalizationResult(b, b, 1.0, True)] * 4
        m = wsol_metrics(results)
        assert (m["gt_known_loc"], m["top1_loc"], m["top1_acc"]) == (1.0, 1.0, 1.0)

    def test_top1_loc_bounded_by_both(self):
        r = np.random.default_rng(11)
        b = BoundingBox(0, 0, 3, 3)
        for _ in range(1000):
            n = int(r.integers(1, 20))
            results = [LocalizationResult(b, b, float(r.uniform(0, 1)), bool(r.integers(0, 2)))
                       for _ in range(n)]
            m = wsol_metrics(results)
            assert m["top1_loc"] <= min(m["gt_known_loc"], m["top1_acc"]) + 1e-12

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            wsol_metrics([])


class TestTop1Seg:
    def test_exact_match_counts(self):
        m = np.zeros((8, 8), dtype=bool)
        m[2:6, 2:6] = True
        assert top1_seg([(m, m, True)]) == 1.0

    def test_disjoint_not_counted(self):
        a = np.zeros((8, 8), dtype=bool)
        b = np.zeros((8, 8), dtype=bool)
        a[:2, :2] = True
        b[6:, 6:] = True
        assert top1_seg([(a, b, True)]) == 0.0

    def test_wrong_prediction_not_counted(self):
        m = np.ones((4, 4), dtype=bool)
        assert top1_seg([(m, m, False)]) == 0.0

    def test_mask_iou_halves(self):
        a = np.zeros((4, 4), dtype=bool)
        b = np.zeros((4, 4), dtype=bool)
        a[:, :2] = True
        b[:, 1:3] = True
        assert mask_iou(a, b) == pytest.approx(4 / 12)


class TestFullPath:
    def test_indicator_heatmap_recovers_box_through_pipeline(self):
        # shape indicator -> normalize -> mean filter -> threshold -> box:
        # the filter dilates the mask by one pixel, so for boxes of side >= 6
        # the IoU against the true box stays >= 0.5
        r = np.random.default_rng(13)
        hits = 0
        n = 50
        for _ in range(n):
            h = w = 32
            side_y = int(r.integers(8, 20))
            side_x = int(r.integers(8, 20))
            y0 = int(r.integers(1, h - side_y - 1))
            x0 = int(r.integers(1, w - side_x - 1))
            indicator = np.zeros((h, w))
            indicator[y0:y0 + side_y, x0:x0 + side_x] = 1.0
            gt = BoundingBox(x0, y0, x0 + side_x - 1, y0 + side_y - 1)
            res = localize(indicator, gt, prediction_correct=True, threshold_fraction=0.2)
            hits += res.iou >= 0.5
        assert hits == n
