import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from stealthpatch.core import Palette, Patch, new_patch, Random
from stealthpatch.detector import DetectionGrid, DetectorDescriptor, decode_grid
from stealthpatch.losses import (LossBreakdown, LossWeights, default_palette,
                                 detection_loss, disappearance_loss, load_palette,
                                 nps_loss, total_objective, tv_loss, TV_EPS)
from .test_detector import DESC_13, grid_from_scores, random_raw


def brute_force_tv(p):
    """Independent double-loop oracle under the declared boundary rule."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim == 2:
        p = p[..., None]
    h, w, c = p.shape
    total = 0.0
    for i in range(h):
        for j in range(w):
            for k in range(c):
                di = p[i, j, k] - p[i + 1, j, k] if i + 1 < h else 0.0
                dj = p[i, j, k] - p[i, j + 1, k] if j + 1 < w else 0.0
                total += math.sqrt(di * di + dj * dj + TV_EPS) - math.sqrt(TV_EPS)
    return total


def brute_force_nps(p, colors):
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    total = 0.0
    for px in p:
        best = min(math.sqrt(((px - c) ** 2).sum()) for c in colors)
        total += best
    return total


class TestTvLoss:
    def test_constant_patch_is_zero(self):
        p = Patch(np.full((12, 9, 3), 0.42))
        assert float(tv_loss(p)) <= TV_EPS * 12 * 9 * 3

    def test_two_pixel_hand_value(self):
        val = float(tv_loss(np.array([[0.0, 1.0]])))
        assert val == pytest.approx(1.0, abs=1e-4)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            p = rng.random((8, 8, 3))
            assert float(tv_loss(p)) == pytest.approx(brute_force_tv(p), abs=1e-6)

    @given(st.floats(-0.3, 0.3))
    @settings(max_examples=30, deadline=None)
    def test_shift_invariance(self, shift):
        p = np.random.default_rng(7).random((6, 6, 3))
        assert float(tv_loss(p + shift)) == pytest.approx(float(tv_loss(p)), abs=1e-9)

    def test_gradient_check(self):
        rng = np.random.default_rng(3)
        base = rng.uniform(0.2, 0.8, (6, 6, 3))
        t = torch.as_tensor(base).requires_grad_(True)
        tv_loss(t).backward()
        g = t.grad.numpy()
        h = 1e-4
        for _ in range(20):
            i, j, c = rng.integers(0, 6), rng.integers(0, 6), rng.integers(0, 3)
            up, dn = base.copy(), base.copy()
            up[i, j, c] += h
            dn[i, j, c] -= h
            fd = (brute_force_tv(up) - brute_force_tv(dn)) / (2 * h)
            assert abs(fd - g[i, j, c]) <= 1e-3 * max(abs(fd), abs(g[i, j, c]), 1e-9)


class TestNpsLoss:
    def test_palette_pixels_score_zero(self):
        pal = default_palette()
        idx = np.random.default_rng(0).integers(0, len(pal.colors), 8 * 8)
        p = pal.colors[idx].reshape(8, 8, 3)
        assert float(nps_loss(p, pal)) < 1e-6

    def test_hand_value(self):
        pal = Palette(np.array([[0, 0, 0], [1, 1, 1]], dtype=float))
        val = float(nps_loss(np.array([[[1.0, 0.0, 0.0]]]), pal))
        assert val == pytest.approx(1.0, abs=1e-9)

    def test_matches_brute_force(self):
        pal = default_palette()
        rng = np.random.default_rng(5)
        for _ in range(50):
            p = rng.random((8, 8, 3))
            assert float(nps_loss(p, pal)) == pytest.approx(
                brute_force_nps(p, pal.colors), abs=1e-6)

    def test_palette_permutation_invariance(self):
        rng = np.random.default_rng(9)
        pal = default_palette()
        perm = Palette(pal.colors[rng.permutation(len(pal.colors))])
        p = rng.random((6, 6, 3))
        assert float(nps_loss(p, pal)) == pytest.approx(float(nps_loss(p, perm)),
                                                        abs=1e-12)

    def test_empty_palette(self):
        with pytest.raises(ValueError):
            Palette(np.zeros((0, 3)))

    def test_gradient_check_away_from_ties(self):
        pal = Palette(np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]))
        rng = np.random.default_rng(11)
        base = rng.uniform(0.1, 0.35, (6, 6, 3))  # nearest color is unambiguous
        t = torch.as_tensor(base).requires_grad_(True)
        nps_loss(t, pal).backward()
        g = t.grad.numpy()
        h = 1e-5
        for _ in range(20):
            i, j, c = rng.integers(0, 6), rng.integers(0, 6), rng.integers(0, 3)
            up, dn = base.copy(), base.copy()
            up[i, j, c] += h
            dn[i, j, c] -= h
            fd = (brute_force_nps(up, pal.colors) - brute_force_nps(dn, pal.colors)) / (2 * h)
            assert abs(fd - g[i, j, c]) <= 1e-3 * max(abs(fd), abs(g[i, j, c]))

    def test_load_palette_round_trip(self, tmp_path):
        path = tmp_path / "pal.txt"
        path.write_text("# two colors\n0 0 0\n0.5 0.25 1\n")
        pal = load_palette(path)
        assert pal.colors.shape == (2, 3)
        assert pal.colors[1].tolist() == [0.5, 0.25, 1.0]


class TestDetectionLoss:
    def test_single_grid(self):
        grid = grid_from_scores(np.full((1, 1, 1), 1.0), np.array([[[[0.9, 0.1]]]]))
        assert float(detection_loss([grid], 0)) == pytest.approx(0.9)

    def test_mean_of_two(self):
        g1 = grid_from_scores(np.full((1, 1, 1), 1.0), np.array([[[[0.2, 0.8]]]]))
        g2 = grid_from_scores(np.full((1, 1, 1), 1.0), np.array([[[[0.8, 0.2]]]]))
        assert float(detection_loss([g1, g2], 0)) == pytest.approx(0.5)

    def test_zero_objectness_annihilates(self):
        grid = grid_from_scores(np.zeros((1, 1, 2)),
                                np.array([[[[1.0, 0.0], [0.9, 0.1]]]]))
        assert float(detection_loss([grid], 0)) == 0.0

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            detection_loss([], 0)

    def test_bounded(self):
        for seed in range(5):
            grid = decode_grid(random_raw(DESC_13, 500 + seed))
            v = float(detection_loss([grid], 0))
            assert 0.0 <= v <= 1.0


def region_grid(centers, p_obj, probs):
    """Grid with explicit box centers for region matching."""
    b = len(centers)
    desc = DetectorDescriptor(grid_size=1, boxes_per_cell=b, num_classes=3,
                              input_size=64, anchors=((1.0, 1.0),) * b)
    boxes = torch.zeros(1, 1, b, 4, dtype=torch.float64)
    for i, (cx, cy) in enumerate(centers):
        boxes[0, 0, i, 0] = cx
        boxes[0, 0, i, 1] = cy
        boxes[0, 0, i, 2:] = 0.1
    return DetectionGrid(boxes=boxes,
                         objectness=torch.as_tensor(p_obj, dtype=torch.float64).reshape(1, 1, b),
                         class_probs=torch.as_tensor(probs, dtype=torch.float64).reshape(1, 1, b, 3),
                         descriptor=desc)


class TestDisappearanceLoss:
    def test_no_centers_inside(self):
        grid = region_grid([(0.1, 0.1)], [0.9], [[0.5, 0.3, 0.2]])
        val = disappearance_loss([grid], [[(0.4, 0.4, 0.6, 0.6)]])
        assert float(val) == 0.0

    def test_in_region_product(self):
        grid = region_grid([(0.5, 0.5)], [0.6], [[0.2, 0.5, 0.3]])
        val = disappearance_loss([grid], [[(0.4, 0.4, 0.6, 0.6)]])
        assert float(val) == pytest.approx(0.30)

    def test_matches_brute_force_scan(self):
        rng = np.random.default_rng(13)
        for _ in range(20):
            centers = [tuple(rng.uniform(0, 1, 2)) for _ in range(6)]
            p_obj = rng.uniform(0, 1, 6)
            probs = rng.dirichlet(np.ones(3), 6)
            rect = (0.3, 0.2, 0.8, 0.7)
            grid = region_grid(centers, p_obj, probs)
            got = float(disappearance_loss([grid], [[rect]]))
            want = 0.0
            for (cx, cy), po, row in zip(centers, p_obj, probs):
                if rect[0] <= cx <= rect[2] and rect[1] <= cy <= rect[3]:
                    want = max(want, po * row.max())
            assert got == pytest.approx(want, abs=1e-12)

    def test_region_outside_image(self):
        grid = region_grid([(0.5, 0.5)], [0.6], [[0.2, 0.5, 0.3]])
        with pytest.raises(ValueError):
            disappearance_loss([grid], [[(0.5, 0.5, 1.2, 0.9)]])


class TestTotalObjective:
    def test_zero_weights_reduce_to_detection(self):
        grid = grid_from_scores(np.full((1, 1, 1), 1.0), np.array([[[[0.7, 0.3]]]]))
        p = new_patch(6, 6, Random(0))
        bd = total_objective(p, [grid], [[]], default_palette(),
                             LossWeights(0.0, 0.0, 0.0), 0)
        assert bd.total == pytest.approx(bd.detection) == pytest.approx(0.7)

    def test_palette_constant_patch_kills_penalties(self):
        pal = default_palette()
        p = Patch(np.broadcast_to(pal.colors[4], (6, 6, 3)).copy())
        grid = grid_from_scores(np.full((1, 1, 1), 1.0), np.array([[[[0.7, 0.3]]]]))
        bd = total_objective(p, [grid], [[]], pal, LossWeights(2.5, 0.01, 0.0), 0)
        assert bd.tv <= 1e-6 and bd.nps <= 1e-6
        assert bd.total == pytest.approx(bd.detection, abs=1e-6)

    def test_recomposition(self):
        rng = np.random.default_rng(21)
        p = Patch(rng.random((8, 8, 3)))
        grids = [decode_grid(random_raw(DESC_13, 900 + k)) for k in range(3)]
        regions = [[(0.2, 0.2, 0.8, 0.8)], [], [(0.1, 0.1, 0.5, 0.5)]]
        w = LossWeights(1.7, 0.03, 0.4)
        bd = total_objective(p, grids, regions, default_palette(), w, 0)
        det = float(detection_loss(grids, 0))
        tv = float(tv_loss(p))
        nps = float(nps_loss(p, default_palette()))
        dis = float(disappearance_loss(grids, regions))
        want = det + w.lambda_tv * tv + w.lambda_nps * nps + w.mu_disappear * dis
        assert bd.total == pytest.approx(want, abs=1e-9)
        assert (bd.detection, bd.tv, bd.nps, bd.disappear) == (det, tv, nps, dis)

    def test_breakdown_invariant(self):
        bd = LossBreakdown(detection=0.5, tv=1.0, nps=2.0, disappear=0.0, total=0.5)
        assert bd.to_dict()["total"] == 0.5

    def test_weights_validation(self):
        with pytest.raises(ValueError):
            LossWeights(lambda_tv=-1.0)
        with pytest.raises(ValueError):
            LossWeights(lambda_nps=float("nan"))
