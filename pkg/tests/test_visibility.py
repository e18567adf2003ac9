import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from vecmapdiff.visibility import compare_uncertainty, ray_trace


def segment_enters_open_cell(a, b, cell):
    """Exact test: does segment a->b (cell-center coords) pass through the open unit square `cell`?"""
    s_lo, s_hi = [], []
    for axis in (0, 1):
        lo, hi = Fraction(cell[axis]), Fraction(cell[axis] + 1)
        p0, d = Fraction(a[axis]), Fraction(b[axis]) - Fraction(a[axis])
        if d == 0:
            if not lo < p0 < hi:
                return False
            continue
        t1, t2 = (lo - p0) / d, (hi - p0) / d
        s_lo.append(min(t1, t2))
        s_hi.append(max(t1, t2))
    lo = max(s_lo, default=Fraction(-1))
    hi = min(s_hi, default=Fraction(2))
    return lo < hi and lo < 1 and hi > 0


def brute_force_visibility(occ, ego):
    h, w = occ.shape
    a = (Fraction(2 * ego[0] + 1, 2), Fraction(2 * ego[1] + 1, 2))
    blockers = [tuple(rc) for rc in np.argwhere(occ)]
    vis = np.ones((h, w), dtype=bool)
    for r in range(h):
        for c in range(w):
            b = (Fraction(2 * r + 1, 2), Fraction(2 * c + 1, 2))
            for cell in blockers:
                if cell != (r, c) and segment_enters_open_cell(a, b, cell):
                    vis[r, c] = False
                    break
    return vis


class TestRayTrace:
    def test_empty_grid_all_visible(self):
        assert ray_trace(np.zeros((100, 50), dtype=bool), (50, 25)).all()

    def test_occupied_ego_rejected(self):
        occ = np.zeros((5, 5), dtype=bool)
        occ[2, 2] = True
        with pytest.raises(ValueError):
            ray_trace(occ, (2, 2))

    def test_single_blocker_east(self):
        occ = np.zeros((21, 21), dtype=bool)
        occ[10, 13] = True
        vis = ray_trace(occ, (10, 10))
        np.testing.assert_array_equal(vis, brute_force_visibility(occ, (10, 10)))
        assert vis[10, 13]
        assert not vis[10, 14:].any()
        assert vis[9, 14] and vis[11, 14]  # beside the cone
        assert not vis[10, 20]

    def test_ring_enclosure(self):
        occ = np.zeros((15, 15), dtype=bool)
        occ[4, 4:11] = occ[10, 4:11] = occ[4:11, 4] = occ[4:11, 10] = True
        vis = ray_trace(occ, (7, 7))
        inside = np.zeros_like(occ)
        inside[4:11, 4:11] = True
        np.testing.assert_array_equal(vis, inside)

    def test_corner_touch_does_not_block(self):
        occ = np.zeros((5, 5), dtype=bool)
        occ[1, 2] = True
        # ego (2, 2) -> (0, 0): the diagonal only touches corners of (1, 2) and (2, 1)
        occ2 = occ.copy()
        occ2[2, 1] = True
        assert ray_trace(occ2, (2, 2))[0, 0]
        assert brute_force_visibility(occ2, (2, 2))[0, 0]

    @pytest.mark.parametrize("seed", range(100))
    def test_matches_brute_force_oracle(self, seed):
        rng = np.random.default_rng(seed)
        occ = rng.uniform(size=(20, 20)) < rng.uniform(0.02, 0.2)
        ego = tuple(int(v) for v in rng.integers(0, 20, 2))
        occ[ego] = False
        np.testing.assert_array_equal(ray_trace(occ, ego), brute_force_visibility(occ, ego))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_radially_monotone(self, seed):
        rng = np.random.default_rng(seed)
        occ = rng.uniform(size=(31, 31)) < 0.08
        ego = (15, 15)
        occ[ego] = False
        vis = ray_trace(occ, ego)
        for r, c in np.argwhere(~vis):
            dr, dc = r - 15, c - 15
            j = 2
            while 0 <= 15 + j * dr < 31 and 0 <= 15 + j * dc < 31:
                assert not vis[15 + j * dr, 15 + j * dc]
                j += 1


def scene(u_vis, u_inv, n_vis=30, n_inv=20, size=(10, 10)):
    vis = np.zeros(size, dtype=bool)
    vis.flat[:n_vis] = True
    drv = np.zeros(size, dtype=bool)
    drv.flat[n_vis:n_vis + n_inv] = True
    u = np.where(vis, u_vis, u_inv).astype(float)
    return u, vis, drv


class TestCompareUncertainty:
    def test_constant_uncertainty_not_significant(self):
        res = compare_uncertainty([scene(0.3, 0.3) for _ in range(10)])
        assert res.t_stat == 0.0
        assert res.p_value >= 0.5

    def test_separated_with_jitter_matches_closed_form(self):
        rng = np.random.default_rng(0)
        jit = rng.normal(0, 1e-3, 50)
        res = compare_uncertainty([scene(0.0, 1.0 + e) for e in jit])
        d = 1.0 + jit
        t = d.mean() / (d.std(ddof=1) / math.sqrt(50))
        assert res.t_stat == pytest.approx(t, rel=1e-12)
        assert res.p_value < 1e-10
        assert res.mean_invisible == pytest.approx(d.mean())
        assert res.mean_visible == 0.0

    def test_zero_variance_positive_difference(self):
        res = compare_uncertainty([scene(0.0, 1.0) for _ in range(5)])
        assert res.t_stat == math.inf and res.p_value == 0.0

    def test_universe_excludes_invisible_offroad(self):
        u, vis, drv = scene(0.1, 0.5)
        u[~vis & ~drv] = 100.0  # off-road blind cells must not count
        res = compare_uncertainty([(u, vis, drv)] * 3)
        assert res.mean_invisible == pytest.approx(0.5)
        assert res.invisible_counts[0] == 20

    def test_skips_scenes_without_both_sets(self):
        u, vis, drv = scene(0.1, 0.5)
        all_vis = (u, np.ones_like(vis), drv)
        res = compare_uncertainty([scene(0.1, 0.5), all_vis, scene(0.2, 0.4)])
        assert res.skipped == 1
        assert len(res.visible_means) == 2

    def test_no_valid_scenes(self):
        u, vis, drv = scene(0.1, 0.5)
        with pytest.raises(ValueError, match="no valid scenes"):
            compare_uncertainty([(u, np.ones_like(vis), drv)])

    def test_order_invariant(self):
        rng = np.random.default_rng(2)
        scenes = [scene(rng.uniform(), rng.uniform()) for _ in range(12)]
        a = compare_uncertainty(scenes)
        b = compare_uncertainty(scenes[::-1])
        assert a.t_stat == pytest.approx(b.t_stat, rel=1e-12)
        assert a.p_value == pytest.approx(b.p_value, rel=1e-9)

    def test_welch_variant(self):
        rng = np.random.default_rng(3)
        scenes = [scene(rng.uniform(0, 0.2), rng.uniform(0.3, 0.5)) for _ in range(12)]
        res = compare_uncertainty(scenes, paired=False)
        assert not res.paired
        assert res.p_value < 1e-6

    def test_report_rows(self):
        d = compare_uncertainty([("a", *scene(0.1, 0.2)), ("b", *scene(0.1, 0.3))]).to_dict()
        assert [s["id"] for s in d["scenes"]] == ["a", "b"]
        assert d["ratio"] == pytest.approx(2.5)


@pytest.mark.parametrize("t", [0.3, 1.0, 2.5, 7.0])
def test_t_tail_matches_closed_forms(t):
    # df = 1 is Cauchy; df = 2 has an algebraic tail
    assert stats.t.sf(t, 1) == pytest.approx(0.5 - math.atan(t) / math.pi, abs=1e-12)
    assert stats.t.sf(t, 2) == pytest.approx(0.5 * (1 - t / math.sqrt(t * t + 2)), abs=1e-12)
