import math

import numpy as np
import pytest

from app.core.errors import ShapeMismatch, TooFewSites
from app.schemas.schemas import SiteResult
from app.services.metrics import boundary, dice, evaluate_site, hd95, site_std


def brute_dice(p, t):
    p, t = p.astype(bool), t.astype(bool)
    total = p.sum() + t.sum()
    return 1.0 if total == 0 else 2.0 * (p & t).sum() / total


def brute_boundary(mask):
    rows, cols = mask.shape
    points = []
    for r in range(rows):
        for c in range(cols):
            if not mask[r, c]:
                continue
            for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                rr, cc = r + dr, c + dc
                if not (0 <= rr < rows and 0 <= cc < cols) or not mask[rr, cc]:
                    points.append((r, c))
                    break
    return points


def brute_hd95(p, t):
    p, t = p.astype(bool), t.astype(bool)
    if not p.any() and not t.any():
        return 0.0
    if p.any() != t.any():
        return math.inf
    bp, bt = brute_boundary(p), brute_boundary(t)
    directed = [min(math.dist(a, b) for b in bt) for a in bp] + [min(math.dist(a, b) for b in bp) for a in bt]
    directed.sort()
    pos = 0.95 * (len(directed) - 1)
    lo = math.floor(pos)
    hi = min(lo + 1, len(directed) - 1)
    return directed[lo] + (pos - lo) * (directed[hi] - directed[lo])


def square(size, top, left, side):
    mask = np.zeros((size, size), dtype=bool)
    mask[top:top + side, left:left + side] = True
    return mask


class TestDice:
    def test_identical(self):
        m = square(6, 1, 1, 3)
        assert dice(m, m) == 1.0

    def test_disjoint(self):
        assert dice(square(6, 0, 0, 2), square(6, 3, 3, 2)) == 0.0

    def test_half_overlap(self):
        assert dice(square(4, 0, 0, 2), square(4, 0, 1, 2)) == 0.5

    def test_both_empty(self):
        assert dice(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            dice(np.zeros((3, 3)), np.zeros((3, 4)))

    def test_random_against_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            size = int(rng.integers(1, 9))
            p, t = rng.random((size, size)) < 0.4, rng.random((size, size)) < 0.4
            assert dice(p, t) == brute_dice(p, t)
            assert dice(p, t) == dice(t, p)
            assert 0.0 <= dice(p, t) <= 1.0


class TestHd95:
    def test_identical(self):
        m = square(8, 2, 2, 4)
        assert hd95(m, m) == 0.0

    def test_single_pixels(self):
        p, t = np.zeros((5, 5), bool), np.zeros((5, 5), bool)
        p[0, 0], t[3, 4] = True, True
        assert hd95(p, t) == pytest.approx(5.0, abs=1e-12)

    def test_shifted_square(self):
        t = square(10, 2, 2, 4)
        p = square(10, 2, 3, 4)
        assert hd95(p, t) == pytest.approx(brute_hd95(p, t), abs=1e-9)

    def test_empty_conventions(self):
        empty, full = np.zeros((4, 4), bool), square(4, 1, 1, 2)
        assert hd95(empty, empty) == 0.0
        assert math.isinf(hd95(empty, full))
        assert math.isinf(hd95(full, empty))

    def test_border_pixels_are_boundary(self):
        full = np.ones((3, 3), bool)
        assert boundary(full).sum() == 8

    def test_monotone_under_shift(self):
        t = square(16, 4, 4, 5)
        values = [hd95(square(16, 4, 4 + s, 5), t) for s in range(6)]
        assert values == sorted(values)

    def test_random_against_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            size = int(rng.integers(1, 9))
            p, t = rng.random((size, size)) < 0.4, rng.random((size, size)) < 0.4
            expected = brute_hd95(p, t)
            got = hd95(p, t)
            if math.isinf(expected):
                assert math.isinf(got)
            else:
                assert got == pytest.approx(expected, abs=1e-12)
                assert got == pytest.approx(hd95(t, p), abs=1e-12)


class TestSiteStd:
    def test_all_equal(self):
        assert site_std([0.7, 0.7, 0.7]) == 0.0

    def test_population(self):
        assert site_std([0.0, 1.0]) == 0.5

    def test_permutation(self):
        assert site_std([0.1, 0.5, 0.9, 0.2]) == pytest.approx(site_std([0.9, 0.2, 0.1, 0.5]), abs=1e-15)

    def test_too_few(self):
        with pytest.raises(TooFewSites):
            site_std([0.5])


class TestEvaluateSite:
    def test_perfect_prediction(self):
        truth = np.zeros((8, 8), np.uint8)
        truth[2:6, 2:6] = 1
        truth[3:5, 3:5] = 2
        result = evaluate_site("A", [truth], [truth], ("background", "disc", "cup"))
        assert result.dice == {"disc": 1.0, "cup": 1.0}
        assert result.hd95 == {"disc": 0.0, "cup": 0.0}
        assert result.mean_dice == 1.0

    def test_missing_class_uses_diagonal(self):
        truth = np.zeros((6, 8), np.uint8)
        truth[1:4, 1:4] = 1
        pred = np.zeros_like(truth)
        result = evaluate_site("B", [pred], [truth], ("background", "gland"))
        assert result.dice == {"gland": 0.0}
        assert result.hd95["gland"] == pytest.approx(10.0)
        assert result.n_infinite_hd95 == 1

    def test_count_mismatch(self):
        with pytest.raises(ShapeMismatch):
            evaluate_site("C", [np.zeros((2, 2))], [], ("background", "gland"))

    def test_dice_range_validated(self):
        with pytest.raises(ValueError):
            SiteResult(site_id="x", dice={"disc": 1.5}, hd95={}, mean_dice=1.5, mean_hd95=0.0, n_images=1)
