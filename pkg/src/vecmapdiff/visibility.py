"""Ray-traced visibility masks and the uncertainty-vs-visibility test."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats


def ray_trace(occupancy: np.ndarray, ego: tuple[int, int]) -> np.ndarray:
    """Boolean visibility of every cell from the center of the `ego` cell.

    A cell is visible iff the segment between the two cell centers does not pass
    through the interior of any occupied cell strictly between them. Segments that
    only graze a cell corner do not enter it. Occupied cells are visible themselves.

    All rays are walked in lockstep with an exact integer DDA: with |dr| row
    crossings and |dc| column crossings, the k-th row boundary is crossed at
    s = (2k+1) / (2|dr|), the m-th column boundary at s = (2m+1) / (2|dc|); the
    comparison is done by cross-multiplication, so ties (corners) are exact.
    """
    occ = np.asarray(occupancy).astype(bool)
    h, w = occ.shape
    er, ec = ego
    if occ[er, ec]:
        raise ValueError("ego cell is occupied")
    tr, tc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    tr, tc = tr.ravel(), tc.ravel()
    dr, dc = tr - er, tc - ec
    adr, adc = np.abs(dr), np.abs(dc)
    sr, sc = np.sign(dr), np.sign(dc)
    r = np.full(tr.shape, er)
    c = np.full(tc.shape, ec)
    k = np.zeros_like(r)
    m = np.zeros_like(c)
    blocked = np.zeros(tr.shape, dtype=bool)
    active = (adr + adc) > 0
    while active.any():
        idx = np.nonzero(active)[0]
        kk, mm = k[idx], m[idx]
        rows_left = kk < adr[idx]
        cols_left = mm < adc[idx]
        # compare (2k+1)/(2|dr|) with (2m+1)/(2|dc|)
        lhs = (2 * kk + 1) * adc[idx]
        rhs = (2 * mm + 1) * adr[idx]
        step_r = rows_left & (~cols_left | (lhs <= rhs))
        step_c = cols_left & (~rows_left | (rhs <= lhs))
        r[idx] += np.where(step_r, sr[idx], 0)
        c[idx] += np.where(step_c, sc[idx], 0)
        k[idx] += step_r
        m[idx] += step_c
        arrived = (r[idx] == tr[idx]) & (c[idx] == tc[idx])
        blocked[idx] |= occ[r[idx], c[idx]] & ~arrived
        active[idx] = ~arrived & ~blocked[idx]
    return ~blocked.reshape(h, w)


@dataclass
class VisibilityStats:
    visible_means: np.ndarray
    invisible_means: np.ndarray
    visible_counts: np.ndarray
    invisible_counts: np.ndarray
    skipped: int
    t_stat: float
    p_value: float
    paired: bool = True
    per_scene_ids: list = field(default_factory=list)

    @property
    def mean_visible(self) -> float:
        return float(self.visible_means.mean())

    @property
    def mean_invisible(self) -> float:
        return float(self.invisible_means.mean())

    @property
    def ratio(self) -> float:
        if self.mean_visible > 0:
            return self.mean_invisible / self.mean_visible
        return float("nan") if self.mean_invisible == 0 else float("inf")

    def to_dict(self) -> dict:
        return {
            "paired": self.paired,
            "n_scenes": int(len(self.visible_means)),
            "skipped": self.skipped,
            "mean_visible": self.mean_visible,
            "mean_invisible": self.mean_invisible,
            "ratio": self.ratio,
            "t": self.t_stat,
            "p_one_sided": self.p_value,
            "scenes": [
                {"id": sid, "visible_mean": float(v), "invisible_mean": float(i),
                 "visible_cells": int(nv), "invisible_cells": int(ni)}
                for sid, v, i, nv, ni in zip(self.per_scene_ids, self.visible_means, self.invisible_means,
                                             self.visible_counts, self.invisible_counts)
            ],
        }


def compare_uncertainty(scenes, paired: bool = True) -> VisibilityStats:
    """One-sided test that mean uncertainty is higher in invisible cells.

    Args:
        scenes: iterable of (uncertainty, visible, drivable) grids, or of
            (scene_id, uncertainty, visible, drivable) tuples.
        paired: paired t-test on per-scene differences (default); otherwise
            Welch's two-sample test on the per-scene means.

    The evaluation universe is visible-or-drivable cells. Scenes without both
    visible and invisible universe cells are skipped.
    """
    vis_m, inv_m, vis_n, inv_n, ids = [], [], [], [], []
    skipped = 0
    for i, item in enumerate(scenes):
        if len(item) == 4:
            sid, u, vis, drv = item
        else:
            sid, (u, vis, drv) = i, item
        u = np.asarray(u, dtype=float)
        vis = np.asarray(vis, dtype=bool)
        universe = vis | np.asarray(drv, dtype=bool)
        v_cells, i_cells = universe & vis, universe & ~vis
        if not v_cells.any() or not i_cells.any():
            skipped += 1
            continue
        vis_m.append(u[v_cells].mean())
        inv_m.append(u[i_cells].mean())
        vis_n.append(int(v_cells.sum()))
        inv_n.append(int(i_cells.sum()))
        ids.append(sid)
    if not vis_m:
        raise ValueError("no valid scenes")
    vis_m, inv_m = np.array(vis_m), np.array(inv_m)
    t, p = _one_sided_t(inv_m, vis_m, paired)
    return VisibilityStats(vis_m, inv_m, np.array(vis_n), np.array(inv_n), skipped, t, p, paired, ids)


def _one_sided_t(a: np.ndarray, b: np.ndarray, paired: bool) -> tuple[float, float]:
    """t statistic and p-value for H1: mean(a) > mean(b)."""
    if len(a) < 2:
        return float("nan"), float("nan")
    if paired:
        d = a - b
        # means of a constant field differ by rounding only; treat that as exact
        tol = 1e-12 * max(np.abs(a).max(), np.abs(b).max(), 1e-300)
        d = np.where(np.abs(d) <= tol, 0.0, d)
        sd = d.std(ddof=1)
        mean = d.mean()
        if sd <= tol:
            if abs(mean) <= tol:
                return 0.0, 0.5
            return float(np.sign(mean) * np.inf), 0.0 if mean > 0 else 1.0
        t = mean / (sd / np.sqrt(len(d)))
        return float(t), float(stats.t.sf(t, len(d) - 1))
    res = stats.ttest_ind(a, b, equal_var=False, alternative="greater")
    return float(res.statistic), float(res.pvalue)
