import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vecmapdiff.geometry import DEFAULT_FRAME, MapClass, Polyline, VectorMap
from vecmapdiff.metrics import (AP_THRESHOLDS, average_precision, evaluate_ap, gt_raster, macro_auc,
                                roc_curve, roc_from_scores, write_ap_table)
from vecmapdiff.scene_synth import generate_scene


def pairwise_chamfer(a, b):
    wa, wb = DEFAULT_FRAME.denormalize(a), DEFAULT_FRAME.denormalize(b)
    d_ab = [min(math.dist(p, q) for q in wb) for p in wa]
    d_ba = [min(math.dist(p, q) for q in wa) for p in wb]
    return 0.5 * (sum(d_ab) / len(d_ab) + sum(d_ba) / len(d_ba))


def brute_force_ap(preds, gts, c, thr):
    """Independent greedy matcher plus envelope-sum AP (vertex-only Chamfer)."""
    items = []
    for s, pm in enumerate(preds):
        for e, sc in zip(pm.elements, pm.scores):
            if e.class_id == c:
                items.append((sc, s, e.points))
    gt_lists = [[e.points for e in g.elements if e.class_id == c] for g in gts]
    n_gt = sum(map(len, gt_lists))
    used = [[False] * len(g) for g in gt_lists]
    tps = []
    for sc, s, pts in sorted(items, key=lambda it: -it[0]):
        best, best_d = None, thr
        for j, g in enumerate(gt_lists[s]):
            d = pairwise_chamfer(pts, g)
            if not used[s][j] and d < best_d:
                best, best_d = j, d
        if best is not None:
            used[s][best] = True
        tps.append(best is not None)
    precision, hits = [], 0
    for k, tp in enumerate(tps):
        hits += tp
        precision.append(hits / (k + 1))
    return sum(max(precision[k:]) for k, tp in enumerate(tps) if tp) / n_gt


def jitter(points, meters, rng):
    w = DEFAULT_FRAME.denormalize(points) + rng.normal(0, meters, points.shape)
    return DEFAULT_FRAME.normalize(w)


def noisy_predictions(gts, rng, miss=0.2, spurious=1, noise=0.6):
    preds = []
    for g in gts:
        els, scores = [], []
        for e in g.elements:
            if rng.uniform() > miss:
                els.append(Polyline(jitter(e.points, noise * rng.uniform(), rng), e.class_id))
                scores.append(rng.uniform(0.3, 1.0))
        for _ in range(spurious):
            els.append(Polyline(rng.uniform(size=(10, 2)), int(rng.integers(3))))
            scores.append(rng.uniform(0.0, 0.8))
        preds.append(VectorMap(els, np.array(scores)))
    return preds


class TestAP:
    def test_perfect(self):
        gts = [generate_scene(s).gt for s in range(3)]
        preds = [VectorMap(g.elements, np.ones(len(g))) for g in gts]
        res = evaluate_ap(preds, gts)
        for c, per in res.ap.items():
            assert all(v == 1.0 for v in per.values())
        assert res.mAP == 1.0

    def test_no_predictions(self):
        gts = [generate_scene(s).gt for s in range(3)]
        empty = [VectorMap([], np.zeros(0)) for _ in gts]
        assert average_precision(empty, gts, MapClass.BOUNDARY, 1.0) == 0.0

    def test_absent_class_excluded(self):
        gt = VectorMap([Polyline(np.array([[0.2, 0.2], [0.8, 0.2]]), 0)])
        pred = VectorMap(gt.elements, np.ones(1))
        assert average_precision([pred], [gt], MapClass.PED_CROSSING, 1.0) is None
        res = evaluate_ap([pred], [gt])
        assert set(res.ap) == {MapClass.DIVIDER}
        assert res.mAP == 1.0
        assert res.row()["AP_ped"] == ""

    def test_hand_built_three_scenes(self):
        horiz = lambda y: DEFAULT_FRAME.normalize(np.array([[-20.0, y], [20.0, y]]))
        gts = [VectorMap([Polyline(horiz(0.0), 0), Polyline(horiz(5.0), 0)]),
               VectorMap([Polyline(horiz(-5.0), 0)]),
               VectorMap([Polyline(horiz(3.0), 0)])]
        preds = [VectorMap([Polyline(horiz(0.2), 0), Polyline(horiz(0.4), 0)], np.array([0.9, 0.6])),
                 VectorMap([Polyline(horiz(8.0), 0)], np.array([0.8])),
                 VectorMap([Polyline(horiz(3.3), 0)], np.array([0.7]))]
        # ranks: 0.9 TP, 0.8 FP, 0.7 TP, 0.6 FP (its only candidate is 4.6 m away) -> recall 2/4
        expected = {0.5: 0.25 * (1.0 + 2 / 3), 1.0: 0.25 * (1.0 + 2 / 3), 1.5: 0.25 * (1.0 + 2 / 3)}
        for thr, want in expected.items():
            got = average_precision(preds, gts, MapClass.DIVIDER, thr, n_interp=None)
            assert got == pytest.approx(want, abs=1e-12)
            assert got == pytest.approx(brute_force_ap(preds, gts, MapClass.DIVIDER, thr), abs=1e-12)

    @pytest.mark.parametrize("seed", range(15))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        gts = [generate_scene(1000 + 3 * seed + i).gt for i in range(3)]
        preds = noisy_predictions(gts, rng)
        for c in MapClass:
            for thr in AP_THRESHOLDS:
                got = average_precision(preds, gts, c, thr, n_interp=None)
                if got is None:
                    continue
                assert got == pytest.approx(brute_force_ap(preds, gts, c, thr), abs=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31), st.floats(0.01, 100.0))
    def test_threshold_monotone_and_scale_invariant(self, seed, scale):
        rng = np.random.default_rng(seed)
        gts = [generate_scene(int(rng.integers(1 << 20))).gt for _ in range(2)]
        preds = noisy_predictions(gts, rng, noise=1.5)
        res = evaluate_ap(preds, gts)
        scaled = [VectorMap(p.elements, p.scores * scale) for p in preds]
        res2 = evaluate_ap(scaled, gts)
        for c, per in res.ap.items():
            vals = [per[t] for t in AP_THRESHOLDS]
            assert vals == sorted(vals)
            for t in AP_THRESHOLDS:
                assert res2.ap[c][t] == pytest.approx(per[t], abs=1e-12)

    def test_ap_table(self, tmp_path):
        res = evaluate_ap([VectorMap(generate_scene(0).gt.elements, np.ones(len(generate_scene(0).gt)))],
                          [generate_scene(0).gt])
        write_ap_table(tmp_path / "t.csv", [dict(res.row(), k=5)], extra_cols=["k"])
        rows = list(csv.DictReader(open(tmp_path / "t.csv")))
        assert list(rows[0]) == ["k", "AP_ped", "AP_div", "AP_bound", "mAP"]
        assert float(rows[0]["mAP"]) == 1.0


class TestROC:
    def test_perfect(self):
        gt = generate_scene(0).gt
        res = roc_curve(gt_raster(gt), gt)
        assert res.auc == 1.0

    def test_random_scores_half(self):
        gts = [generate_scene(s).gt for s in range(5)]
        rng = np.random.default_rng(0)
        probs = [rng.uniform(size=(3, 100, 50)) for _ in gts]
        assert roc_curve(probs, gts).auc == pytest.approx(0.5, abs=0.02)

    def test_monotone_and_endpoints(self):
        gt = generate_scene(3).gt
        d = np.clip(gt_raster(gt) * 0.6 + np.random.default_rng(1).uniform(0, 0.5, (3, 100, 50)), 0, 1)
        res = roc_curve(d, gt)
        assert (res.fpr[0], res.tpr[0]) == (0.0, 0.0)
        assert (res.fpr[-1], res.tpr[-1]) == (1.0, 1.0)
        assert np.all(np.diff(res.thresholds) <= 0)
        assert np.all(np.diff(res.tpr) >= 0) and np.all(np.diff(res.fpr) >= 0)
        assert 0.0 <= res.auc <= 1.0

    def test_exact_small_case(self):
        scores = np.array([0.9, 0.8, 0.7, 0.6, 0.5, 0.4])
        labels = np.array([1, 1, 0, 1, 0, 0])
        # pairwise ordering oracle: fraction of (pos, neg) pairs ranked correctly
        pos, neg = scores[labels == 1], scores[labels == 0]
        oracle = np.mean([p > n for p in pos for n in neg])
        assert roc_from_scores(scores, labels).auc == pytest.approx(oracle, abs=1e-12)

    def test_degenerate(self):
        with pytest.raises(ValueError, match="degenerate ROC"):
            roc_from_scores(np.ones(4), np.ones(4))

    def test_micro_differs_from_macro(self):
        gt_a = VectorMap([Polyline(np.array([[0.1, 0.5], [0.9, 0.5]]), 0)])
        gt_b = VectorMap([Polyline(np.array([[0.5, 0.1], [0.5, 0.9]]), 1)])
        # each scene separates perfectly on its own, but scene a's background outranks scene b's lines
        da = np.where(gt_raster(gt_a) > 0, 0.9, 0.8)
        db = np.where(gt_raster(gt_b) > 0, 0.3, 0.2)
        assert macro_auc([da, db], [gt_a, gt_b]) == 1.0
        micro = roc_curve([da, db], [gt_a, gt_b]).auc
        # rank-statistic oracle with ties counted half
        scores = np.concatenate([da.ravel(), db.ravel()])
        labels = np.concatenate([gt_raster(gt_a).ravel(), gt_raster(gt_b).ravel()]) > 0
        pos, neg = np.sort(scores[labels]), np.sort(scores[~labels])
        wins = sum(np.searchsorted(neg, p, "left") + 0.5 * (np.searchsorted(neg, p, "right")
                                                            - np.searchsorted(neg, p, "left")) for p in pos)
        assert micro == pytest.approx(wins / (len(pos) * len(neg)), abs=1e-12)
        assert micro < 0.9

    def test_per_class_curves(self):
        gt = generate_scene(0).gt
        micro, per = roc_curve(gt_raster(gt), gt, per_class=True)
        assert micro.auc == 1.0
        assert all(r is None or r.auc == 1.0 for r in per.values())

    def test_csv(self, tmp_path):
        gt = generate_scene(0).gt
        res = roc_curve(gt_raster(gt), gt)
        res.write_csv(tmp_path / "roc.csv")
        lines = (tmp_path / "roc.csv").read_text().splitlines()
        assert lines[0] == "b,FPR,TPR"
        assert lines[-1].startswith("AUC,1")
