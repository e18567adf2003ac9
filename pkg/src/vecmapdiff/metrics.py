"""Vector AP/mAP under Chamfer thresholds and raster ROC/AUC."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import (DEFAULT_FRAME, MapClass, MapFrame, VectorMap, polyline_length,
                       rasterize_class, resample_polyline)

AP_THRESHOLDS = (0.5, 1.0, 1.5)
CHAMFER_INTERP = 100  # dense resampling before Chamfer matching


def _dense(points: np.ndarray, frame: MapFrame, n_interp: int | None) -> np.ndarray:
    w = frame.denormalize(points)
    if n_interp is None or polyline_length(w) == 0:
        return w
    return resample_polyline(w, n_interp)


def chamfer_matrix(a: Sequence[np.ndarray], b: Sequence[np.ndarray], frame: MapFrame = DEFAULT_FRAME,
                   n_interp: int | None = CHAMFER_INTERP) -> np.ndarray:
    """Pairwise symmetric Chamfer distances (meters), shape (len(a), len(b))."""
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    da = [_dense(p, frame, n_interp) for p in a]
    db = [_dense(p, frame, n_interp) for p in b]
    out = np.empty((len(a), len(b)))
    for i, pa in enumerate(da):
        for j, pb in enumerate(db):
            d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
            out[i, j] = 0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean())
    return out


def _ap_from_tp(tp: np.ndarray, n_gt: int) -> float:
    """All-point interpolated AP: area under the monotone precision envelope."""
    if n_gt == 0:
        raise ValueError("AP undefined without ground truth")
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    r = np.concatenate([[0.0], recall])
    p = np.concatenate([[1.0], precision])
    for i in range(len(p) - 2, -1, -1):
        p[i] = max(p[i], p[i + 1])
    return float(np.sum((r[1:] - r[:-1]) * p[1:]))


@dataclass
class _ClassPool:
    scores: np.ndarray
    scene_of: np.ndarray
    dists: list  # per prediction: distances to the GTs of its scene
    n_gt_per_scene: list


def _pool(preds: Sequence[VectorMap], gts: Sequence[VectorMap], c: MapClass, frame, n_interp) -> _ClassPool:
    if len(preds) != len(gts):
        raise ValueError("preds and gts must be aligned by scene")
    scores, scene_of, dists, n_gt = [], [], [], []
    for s, (pm, gm) in enumerate(zip(preds, gts)):
        ppts, pscores = pm.of_class(c)
        gpts, _ = gm.of_class(c)
        n_gt.append(len(gpts))
        m = chamfer_matrix(ppts, gpts, frame, n_interp)
        for i in range(len(ppts)):
            scores.append(pscores[i])
            scene_of.append(s)
            dists.append(m[i])
    return _ClassPool(np.array(scores), np.array(scene_of, dtype=int), dists, n_gt)


def _ap_for_pool(pool: _ClassPool, thr: float) -> float:
    order = np.argsort(-pool.scores, kind="stable")
    matched = [np.zeros(n, dtype=bool) for n in pool.n_gt_per_scene]
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        d = pool.dists[i]
        used = matched[pool.scene_of[i]]
        cand = np.where(~used & (d < thr), d, np.inf)
        if len(cand) and np.isfinite(cand.min()):
            used[int(np.argmin(cand))] = True
            tp[rank] = 1.0
    return _ap_from_tp(tp, sum(pool.n_gt_per_scene))


def average_precision(preds: Sequence[VectorMap], gts: Sequence[VectorMap], c: MapClass, thr: float,
                      frame: MapFrame = DEFAULT_FRAME, n_interp: int | None = CHAMFER_INTERP) -> float | None:
    """AP of class `c` at Chamfer threshold `thr` (meters); None if the class has no GT.

    Predictions are pooled over scenes and visited by descending score; each one
    takes the nearest still-unmatched GT of its own scene closer than `thr`.
    """
    pool = _pool(preds, gts, c, frame, n_interp)
    if sum(pool.n_gt_per_scene) == 0:
        return None
    return _ap_for_pool(pool, thr)


@dataclass
class ApResult:
    ap: dict = field(default_factory=dict)  # {MapClass: {thr: AP}}
    thresholds: tuple = AP_THRESHOLDS

    def class_ap(self, c: MapClass) -> float | None:
        vals = self.ap.get(c)
        return None if vals is None else float(np.mean(list(vals.values())))

    @property
    def mAP(self) -> float:
        vals = [v for per in self.ap.values() if per is not None for v in per.values()]
        return float(np.mean(vals)) if vals else float("nan")

    def row(self) -> dict:
        def fmt(c):
            v = self.class_ap(c)
            return "" if v is None else v
        return {"AP_ped": fmt(MapClass.PED_CROSSING), "AP_div": fmt(MapClass.DIVIDER),
                "AP_bound": fmt(MapClass.BOUNDARY), "mAP": self.mAP}


def evaluate_ap(preds: Sequence[VectorMap], gts: Sequence[VectorMap], frame: MapFrame = DEFAULT_FRAME,
                thresholds: Sequence[float] = AP_THRESHOLDS, n_interp: int | None = CHAMFER_INTERP) -> ApResult:
    res = ApResult(thresholds=tuple(thresholds))
    for c in MapClass:
        pool = _pool(preds, gts, c, frame, n_interp)
        if sum(pool.n_gt_per_scene) == 0:
            continue
        res.ap[c] = {thr: _ap_for_pool(pool, thr) for thr in thresholds}
    return res


# -- ROC --------------------------------------------------------------------------------


@dataclass
class RocResult:
    thresholds: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray
    auc: float

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["b", "FPR", "TPR"])
            for b, f, t in zip(self.thresholds, self.fpr, self.tpr):
                w.writerow([f"{b:.10g}", f"{f:.10g}", f"{t:.10g}"])
            w.writerow(["AUC", f"{self.auc:.10g}", ""])


def default_thresholds(values: np.ndarray, max_exact: int = 4096) -> np.ndarray:
    grid = np.linspace(0.0, 1.0, 256)
    distinct = np.unique(values)
    if len(distinct) <= max_exact:
        grid = np.union1d(grid, distinct[(distinct >= 0) & (distinct <= 1)])
    return grid


def roc_from_scores(scores: np.ndarray, labels: np.ndarray, thresholds: np.ndarray | None = None) -> RocResult:
    """Micro ROC of cell scores against binary labels; positive iff score >= b."""
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).astype(bool).ravel()
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("degenerate ROC")
    if thresholds is None:
        thresholds = default_thresholds(scores)
    thresholds = np.sort(np.asarray(thresholds, dtype=float))[::-1]
    pos = np.sort(scores[labels])
    neg = np.sort(scores[~labels])
    tp = n_pos - np.searchsorted(pos, thresholds, side="left")
    fp = n_neg - np.searchsorted(neg, thresholds, side="left")
    # b -> 1+ limit and b = 0 endpoints
    b = np.concatenate([[np.nextafter(1.0, 2.0)], thresholds, [0.0]])
    tpr = np.concatenate([[0.0], tp / n_pos, [1.0]])
    fpr = np.concatenate([[0.0], fp / n_neg, [1.0]])
    order = np.lexsort((tpr, fpr))
    auc = float(np.trapezoid(tpr[order], fpr[order]))
    return RocResult(b, tpr, fpr, auc)


def gt_raster(gt: VectorMap, frame: MapFrame = DEFAULT_FRAME) -> np.ndarray:
    """Width-1 per-class GT raster (C, H, W), no smoothing."""
    return np.stack([rasterize_class(gt.of_class(c)[0], frame) for c in MapClass])


def roc_curve(probs: Sequence[np.ndarray] | np.ndarray, gts: Sequence[VectorMap] | VectorMap,
              frame: MapFrame = DEFAULT_FRAME, thresholds: np.ndarray | None = None,
              per_class: bool = False):
    """ROC of aggregated class probabilities against rasterized GT.

    Cells are pooled over classes and scenes (micro average). With `per_class`,
    also returns {MapClass: RocResult} computed on each class's cells alone.
    """
    if isinstance(gts, VectorMap):
        probs, gts = [probs], [gts]
    scores = np.stack([np.asarray(p, dtype=float) for p in probs])  # (S, C, H, W)
    labels = np.stack([gt_raster(g, frame) for g in gts])
    micro = roc_from_scores(scores, labels, thresholds)
    if not per_class:
        return micro
    curves = {}
    for c in MapClass:
        try:
            curves[c] = roc_from_scores(scores[:, c], labels[:, c], thresholds)
        except ValueError:
            curves[c] = None
    return micro, curves


def macro_auc(probs: Sequence[np.ndarray], gts: Sequence[VectorMap], frame: MapFrame = DEFAULT_FRAME) -> float:
    """Mean of per-scene AUCs; reported for contrast with the micro contract."""
    return float(np.mean([roc_curve(p, g, frame).auc for p, g in zip(probs, gts)]))


def write_ap_table(path: str | Path, rows: Sequence[dict], extra_cols: Sequence[str] = ()) -> None:
    cols = list(extra_cols) + ["AP_ped", "AP_div", "AP_bound", "mAP"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)

