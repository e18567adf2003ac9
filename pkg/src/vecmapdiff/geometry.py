"""Map frame, polylines, rasterization, Chamfer distance and Gaussian smoothing.

Coordinates come in three flavours:

* world: meters in the ego frame, x longitudinal, y lateral;
* normalized: the frame extent mapped onto the unit square;
* grid: (row, col) cell indices, row 0 at the max-x edge, col 0 at the max-y edge,
  so a raster reads like a bird's-eye image with the ego heading up.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.signal import convolve2d


class MapClass(IntEnum):
    DIVIDER = 0
    BOUNDARY = 1
    PED_CROSSING = 2


NUM_CLASSES = len(MapClass)
CLASS_NAMES = {MapClass.DIVIDER: "divider", MapClass.BOUNDARY: "boundary", MapClass.PED_CROSSING: "ped_crossing"}


@dataclass(frozen=True)
class MapFrame:
    x_range: tuple[float, float] = (-30.0, 30.0)
    y_range: tuple[float, float] = (-15.0, 15.0)
    grid_h: int = 100
    grid_w: int = 50

    def __post_init__(self):
        sx = (self.x_range[1] - self.x_range[0]) / self.grid_h
        sy = (self.y_range[1] - self.y_range[0]) / self.grid_w
        if sx <= 0 or sy <= 0:
            raise ValueError("empty frame extent")
        if not np.isclose(sx, sy, rtol=1e-9):
            raise ValueError(f"cells must be square, got {sx} x {sy}")

    @property
    def cell_size(self) -> float:
        return (self.x_range[1] - self.x_range[0]) / self.grid_h

    @property
    def shape(self) -> tuple[int, int]:
        return (self.grid_h, self.grid_w)

    @property
    def span(self) -> np.ndarray:
        return np.array([self.x_range[1] - self.x_range[0], self.y_range[1] - self.y_range[0]])

    @property
    def ego_cell(self) -> tuple[int, int]:
        return self.world_to_cell(np.zeros((1, 2)))[0]

    def normalize(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        lo = np.array([self.x_range[0], self.y_range[0]])
        return (pts - lo) / self.span

    def denormalize(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        lo = np.array([self.x_range[0], self.y_range[0]])
        return pts * self.span + lo

    def continuous_cell(self, pts: np.ndarray) -> np.ndarray:
        """Normalized points -> fractional (row, col); cell (i, j) spans [i, i+1) x [j, j+1)."""
        pts = np.asarray(pts, dtype=float)
        rows = (1.0 - pts[..., 0]) * self.grid_h
        cols = (1.0 - pts[..., 1]) * self.grid_w
        return np.stack([rows, cols], axis=-1)

    def to_cells(self, pts: np.ndarray) -> np.ndarray:
        """Normalized points -> integer cells, clamped to the grid border."""
        rc = np.floor(self.continuous_cell(pts)).astype(np.int64)
        rc[..., 0] = np.clip(rc[..., 0], 0, self.grid_h - 1)
        rc[..., 1] = np.clip(rc[..., 1], 0, self.grid_w - 1)
        return rc

    def world_to_cell(self, pts: np.ndarray) -> list[tuple[int, int]]:
        return [tuple(int(v) for v in rc) for rc in self.to_cells(self.normalize(pts))]

    def cell_centers(self) -> np.ndarray:
        """World coordinates of every cell center, shape (grid_h, grid_w, 2)."""
        rows = (np.arange(self.grid_h) + 0.5) / self.grid_h
        cols = (np.arange(self.grid_w) + 0.5) / self.grid_w
        xn = 1.0 - rows[:, None] * np.ones(self.grid_w)[None, :]
        yn = 1.0 - np.ones(self.grid_h)[:, None] * cols[None, :]
        return self.denormalize(np.stack([xn, yn], axis=-1))

    def to_dict(self) -> dict:
        return {"x_range": list(self.x_range), "y_range": list(self.y_range),
                "grid_h": self.grid_h, "grid_w": self.grid_w}

    @classmethod
    def from_dict(cls, d: dict) -> "MapFrame":
        return cls(tuple(d["x_range"]), tuple(d["y_range"]), int(d["grid_h"]), int(d["grid_w"]))


DEFAULT_FRAME = MapFrame()


@dataclass
class Polyline:
    points: np.ndarray
    class_id: MapClass

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 2)
        self.class_id = MapClass(int(self.class_id))
        if not np.all(np.isfinite(self.points)):
            raise ValueError("non-finite polyline coordinates")

    def __len__(self):
        return len(self.points)


@dataclass
class VectorMap:
    """A set of classed polylines; `scores` is None for ground truth."""

    elements: list[Polyline] = field(default_factory=list)
    scores: np.ndarray | None = None

    def __post_init__(self):
        if self.scores is not None:
            self.scores = np.asarray(self.scores, dtype=float).reshape(-1)
            if len(self.scores) != len(self.elements):
                raise ValueError("scores must align 1:1 with elements")

    def __len__(self):
        return len(self.elements)

    def of_class(self, c: MapClass) -> tuple[list[np.ndarray], np.ndarray]:
        idx = [i for i, e in enumerate(self.elements) if e.class_id == c]
        scores = self.scores[idx] if self.scores is not None else np.ones(len(idx))
        return [self.elements[i].points for i in idx], scores

    def filtered(self, min_score: float) -> "VectorMap":
        """Keep only elements with score strictly above `min_score`."""
        if self.scores is None:
            return self
        keep = [i for i, s in enumerate(self.scores) if s > min_score]
        return VectorMap([self.elements[i] for i in keep], self.scores[keep])

    def to_dict(self, frame: MapFrame = DEFAULT_FRAME) -> dict:
        out: dict = {"frame": frame.to_dict()}
        for c in MapClass:
            pts, scores = self.of_class(c)
            out[CLASS_NAMES[c]] = [p.tolist() for p in pts]
            if self.scores is not None:
                out[CLASS_NAMES[c] + "_scores"] = scores.tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "VectorMap":
        elements, scores = [], []
        has_scores = any(k.endswith("_scores") for k in d)
        for c in MapClass:
            name = CLASS_NAMES[c]
            for i, pts in enumerate(d.get(name, [])):
                elements.append(Polyline(np.array(pts, dtype=float), c))
                if has_scores:
                    scores.append(d[name + "_scores"][i])
        return cls(elements, np.array(scores) if has_scores else None)

    def save(self, path: str | Path, frame: MapFrame = DEFAULT_FRAME) -> None:
        Path(path).write_text(json.dumps(self.to_dict(frame)))

    @classmethod
    def load(cls, path: str | Path) -> "VectorMap":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _dedupe(points: np.ndarray) -> np.ndarray:
    keep = np.ones(len(points), dtype=bool)
    keep[1:] = np.any(np.diff(points, axis=0) != 0, axis=1)
    return points[keep]


def polyline_length(points: np.ndarray) -> float:
    return float(np.linalg.norm(np.diff(points, axis=0), axis=1).sum())


def resample_polyline(raw: Sequence, n_p: int = 10) -> np.ndarray:
    """Resample a point chain to `n_p` points evenly spaced by arc length.

    Endpoints are copied verbatim so they survive round-off.
    """
    if n_p < 2:
        raise ValueError("n_p must be >= 2")
    pts = _dedupe(np.asarray(raw, dtype=float).reshape(-1, 2))
    if len(pts) < 2:
        raise ValueError("zero-length polyline")
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    targets = np.linspace(0.0, s[-1], n_p)
    out = np.stack([np.interp(targets, s, pts[:, 0]), np.interp(targets, s, pts[:, 1])], axis=1)
    out[0], out[-1] = pts[0], pts[-1]
    return out


def chamfer_distance(a: np.ndarray, b: np.ndarray, frame: MapFrame = DEFAULT_FRAME,
                     n_interp: int | None = None) -> float:
    """Symmetric Chamfer distance in meters between two normalized polylines.

    With `n_interp`, both polylines are first resampled densely so the distance
    measures the curves rather than their sparse vertices.
    """
    a = frame.denormalize(a)
    b = frame.denormalize(b)
    if n_interp is not None:
        a = resample_polyline(a, n_interp) if polyline_length(a) > 0 else a
        b = resample_polyline(b, n_interp) if polyline_length(b) > 0 else b
    d = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    return 0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean())


def bresenham(r0: int, c0: int, r1: int, c1: int) -> list[tuple[int, int]]:
    cells = []
    dr, dc = abs(r1 - r0), -abs(c1 - c0)
    sr = 1 if r0 < r1 else -1
    sc = 1 if c0 < c1 else -1
    err = dr + dc
    r, c = r0, c0
    while True:
        cells.append((r, c))
        if r == r1 and c == c1:
            return cells
        e2 = 2 * err
        if e2 >= dc:
            err += dc
            r += sr
        if e2 <= dr:
            err += dr
            c += sc


def rasterize_polyline(points: np.ndarray, frame: MapFrame = DEFAULT_FRAME) -> np.ndarray:
    """Binary raster of a normalized polyline, one cell wide."""
    grid = np.zeros(frame.shape)
    cells = frame.to_cells(np.asarray(points, dtype=float).reshape(-1, 2))
    grid[cells[0, 0], cells[0, 1]] = 1.0
    for (r0, c0), (r1, c1) in zip(cells[:-1], cells[1:]):
        for r, c in bresenham(int(r0), int(c0), int(r1), int(c1)):
            grid[r, c] = 1.0
    return grid


def rasterize_class(polylines: Iterable[np.ndarray], frame: MapFrame = DEFAULT_FRAME) -> np.ndarray:
    """Union of binary rasters."""
    grid = np.zeros(frame.shape)
    for p in polylines:
        np.maximum(grid, rasterize_polyline(p, frame), out=grid)
    return grid


def gaussian_kernel(size: int = 5, sigma: float = 1.0) -> np.ndarray:
    if size < 1 or size % 2 == 0:
        raise ValueError("kernel size must be a positive odd integer")
    r = np.arange(size) - size // 2
    k = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2.0 * sigma**2))
    return k / k.sum()


def convolve_smooth(grid: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Same-size 2-D convolution with zero padding."""
    return convolve2d(grid, kernel, mode="same", boundary="fill", fillvalue=0.0)


def write_pgm(path: str | Path, grid: np.ndarray, vmax: float | None = None) -> None:
    """Binary PGM (P5, maxval 255); values scaled linearly from [0, vmax]."""
    grid = np.asarray(grid, dtype=float)
    if vmax is None:
        vmax = float(grid.max())
    scaled = np.zeros_like(grid) if vmax <= 0 else np.clip(grid / vmax, 0.0, 1.0)
    img = np.round(scaled * 255).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def write_grid_csv(path: str | Path, grid: np.ndarray) -> None:
    np.savetxt(path, np.asarray(grid, dtype=float), delimiter=",", fmt="%.10g")
