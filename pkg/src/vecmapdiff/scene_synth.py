"""Procedural road scenes and occlusion-corrupted observation grids.

A scene is 1-3 road corridors (straight or circular arcs) crossing the frame.
Each corridor contributes two boundaries, its lane dividers and optional
pedestrian crossings. Rectangular occluders sit on or next to the road.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .geometry import (DEFAULT_FRAME, MapClass, MapFrame, Polyline, VectorMap, convolve_smooth,
                       gaussian_kernel, polyline_length, rasterize_class, resample_polyline)
from .visibility import ray_trace

GENERATOR_VERSION = "1"
DIFFICULTIES = ("easy", "medium", "hard")
MAX_ELEMENTS = 12
LANE_WIDTH = 3.5


@dataclass(frozen=True)
class DifficultyProfile:
    max_corridors: int
    max_heading: float  # radians, main corridor
    max_curvature: float  # 1/m
    max_lanes: int
    max_peds: int
    occluders: tuple[int, int]


PROFILES = {
    "easy": DifficultyProfile(1, 0.05, 0.0, 3, 1, (0, 2)),
    "medium": DifficultyProfile(2, 0.12, 1 / 120, 3, 2, (0, 4)),
    "hard": DifficultyProfile(3, 0.2, 1 / 60, 4, 2, (2, 6)),
}


@dataclass
class Scene:
    gt: VectorMap
    occupancy: np.ndarray
    drivable: np.ndarray
    ego_cell: tuple[int, int]
    seed: int
    difficulty: str = "medium"
    frame: MapFrame = DEFAULT_FRAME
    n_points: int = 10

    def to_dict(self) -> dict:
        return {
            "generator_version": GENERATOR_VERSION,
            "seed": self.seed,
            "difficulty": self.difficulty,
            "ego_cell": list(self.ego_cell),
            "gt": self.gt.to_dict(self.frame),
            "occupancy": ["".join("1" if v else "0" for v in row) for row in self.occupancy],
            "drivable": ["".join("1" if v else "0" for v in row) for row in self.drivable],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        gt = VectorMap.from_dict(d["gt"])
        frame = MapFrame.from_dict(d["gt"]["frame"])
        occ = np.array([[c == "1" for c in row] for row in d["occupancy"]], dtype=np.uint8)
        drv = np.array([[c == "1" for c in row] for row in d["drivable"]], dtype=np.uint8)
        n_points = len(gt.elements[0].points) if len(gt) else 10
        return cls(gt, occ, drv, tuple(d["ego_cell"]), int(d["seed"]), d["difficulty"], frame, n_points)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def visibility(self) -> np.ndarray:
        return ray_trace(self.occupancy, self.ego_cell)


@dataclass
class _Corridor:
    origin: np.ndarray
    heading: float
    curvature: float
    width: float
    n_lanes: int
    ped_s: list = field(default_factory=list)

    def centerline(self, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Points and unit normals along the centerline at arc lengths `s`."""
        ang = self.heading + self.curvature * s
        if abs(self.curvature) < 1e-12:
            pts = self.origin + s[:, None] * np.array([np.cos(self.heading), np.sin(self.heading)])
        else:
            k = self.curvature
            pts = self.origin + np.stack([(np.sin(ang) - np.sin(self.heading)) / k,
                                          (np.cos(self.heading) - np.cos(ang)) / k], axis=1)
        normals = np.stack([-np.sin(ang), np.cos(ang)], axis=1)
        return pts, normals

    def offset_curve(self, d: float, s_range=(-90.0, 90.0), step=0.5) -> np.ndarray:
        s = np.arange(s_range[0], s_range[1] + step, step)
        pts, nrm = self.centerline(s)
        return pts + d * nrm


def clip_to_box(points: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray | None:
    """Longest contiguous piece of a chain inside an axis-aligned box (Liang-Barsky per segment)."""
    runs, cur = [], []
    for a, b in zip(points[:-1], points[1:]):
        d = b - a
        t0, t1 = 0.0, 1.0
        ok = True
        for ax in range(2):
            for p, q in ((-d[ax], a[ax] - lo[ax]), (d[ax], hi[ax] - a[ax])):
                if p == 0:
                    if q < 0:
                        ok = False
                else:
                    r = q / p
                    if p < 0:
                        t0 = max(t0, r)
                    else:
                        t1 = min(t1, r)
        if not ok or t0 > t1:
            if cur:
                runs.append(cur)
                cur = []
            continue
        pa, pb = a + t0 * d, a + t1 * d
        if not cur:
            cur = [pa]
        elif t0 > 0:
            runs.append(cur)
            cur = [pa]
        cur.append(pb)
        if t1 < 1:
            runs.append(cur)
            cur = []
    if cur:
        runs.append(cur)
    if not runs:
        return None
    best = max(runs, key=lambda r: polyline_length(np.array(r)) if len(r) > 1 else 0.0)
    return np.array(best) if len(best) > 1 else None


def canonical_order(points: np.ndarray) -> np.ndarray:
    """Orient a chain so its chord angle lies in (-pi/4, 3pi/4]."""
    d = points[-1] - points[0]
    ang = np.arctan2(d[1], d[0])
    if -np.pi / 4 < ang <= 3 * np.pi / 4:
        return points
    return points[::-1].copy()


def _polyline(world: np.ndarray, cls: MapClass, frame: MapFrame, n_points: int,
              min_length: float = 4.0) -> Polyline | None:
    lo = np.array([frame.x_range[0], frame.y_range[0]])
    hi = np.array([frame.x_range[1], frame.y_range[1]])
    clipped = clip_to_box(world, lo, hi)
    if clipped is None or polyline_length(clipped) < min_length:
        return None
    pts = frame.normalize(resample_polyline(canonical_order(clipped), n_points))
    return Polyline(np.clip(pts, 0.0, 1.0), cls)


def _drivable_mask(corridors: list[_Corridor], frame: MapFrame) -> np.ndarray:
    centers = frame.cell_centers().reshape(-1, 2)
    mask = np.zeros(len(centers), dtype=bool)
    half_cell = frame.cell_size / 2
    for cor in corridors:
        dist, _ = cKDTree(cor.offset_curve(0.0, step=0.25)).query(centers)
        mask |= dist <= cor.width / 2 + half_cell
    return mask.reshape(frame.shape).astype(np.uint8)


def generate_scene(seed: int, difficulty: str = "medium", frame: MapFrame = DEFAULT_FRAME,
                   n_points: int = 10, n_occluders: int | None = None, max_attempts: int = 50) -> Scene:
    """Deterministic synthetic scene for (seed, difficulty).

    Args:
        n_occluders: force a number of occluders instead of drawing it.
    """
    if difficulty not in PROFILES:
        raise ValueError(f"unknown difficulty {difficulty!r}")
    prof = PROFILES[difficulty]
    rng = np.random.default_rng([seed, DIFFICULTIES.index(difficulty)])
    for _ in range(max_attempts):
        scene = _try_generate(rng, seed, difficulty, prof, frame, n_points, n_occluders)
        if scene is not None:
            return scene
    raise RuntimeError("generation failed")


def _try_generate(rng, seed, difficulty, prof: DifficultyProfile, frame, n_points, n_occluders):
    corridors = []
    n_lanes = int(rng.integers(1, prof.max_lanes + 1))
    width = n_lanes * LANE_WIDTH + rng.uniform(0.0, 1.0)
    ego_offset = rng.uniform(-width / 2 + 1.5, width / 2 - 1.5) if width > 3.0 else 0.0
    heading = rng.uniform(-prof.max_heading, prof.max_heading)
    curvature = rng.uniform(-prof.max_curvature, prof.max_curvature) if prof.max_curvature else 0.0
    origin = -ego_offset * np.array([-np.sin(heading), np.cos(heading)])
    corridors.append(_Corridor(origin, heading, curvature, width, n_lanes))
    for _ in range(int(rng.integers(0, prof.max_corridors))):
        lanes = int(rng.integers(1, 3))
        side_w = lanes * LANE_WIDTH + rng.uniform(0.0, 1.0)
        if rng.random() < 0.7:
            # crossing road
            x_c = rng.uniform(-24.0, 24.0)
            if abs(x_c) < 4 + side_w / 2:
                x_c = np.sign(x_c or 1.0) * (4 + side_w / 2 + rng.uniform(0, 4))
            h = np.pi / 2 + rng.uniform(-0.25, 0.25)
            corridors.append(_Corridor(np.array([x_c, 0.0]), h, 0.0, side_w, lanes))
        else:
            # parallel road separated by a median
            side = rng.choice([-1.0, 1.0])
            gap = width / 2 + side_w / 2 + rng.uniform(1.5, 4.0)
            o = origin + side * gap * np.array([-np.sin(heading), np.cos(heading)])
            corridors.append(_Corridor(o, heading, curvature, side_w, lanes))

    elements: list[Polyline] = []
    for ci, cor in enumerate(corridors):
        for d in (-cor.width / 2, cor.width / 2):
            pl = _polyline(cor.offset_curve(d), MapClass.BOUNDARY, frame, n_points)
            if pl is not None:
                elements.append(pl)
        for lane in range(1, cor.n_lanes):
            d = -cor.width / 2 + lane * cor.width / cor.n_lanes
            pl = _polyline(cor.offset_curve(d), MapClass.DIVIDER, frame, n_points)
            if pl is not None:
                elements.append(pl)
        for _ in range(int(rng.integers(0, prof.max_peds + 1)) if ci == 0 or rng.random() < 0.5 else 0):
            s = rng.uniform(-25.0, 25.0)
            if abs(s) < 5.0:
                continue
            c, nrm = cor.centerline(np.array([s]))
            seg = c + np.outer(np.linspace(-cor.width / 2, cor.width / 2, 8), nrm[0])
            pl = _polyline(seg, MapClass.PED_CROSSING, frame, n_points, min_length=2.0)
            if pl is not None:
                elements.append(pl)
    if not elements or len(elements) > MAX_ELEMENTS:
        return None
    if not any(e.class_id == MapClass.BOUNDARY for e in elements):
        return None

    drivable = _drivable_mask(corridors, frame)
    ego = frame.ego_cell
    if not drivable[ego]:
        return None
    occupancy = _place_occluders(rng, prof, frame, drivable, ego, n_occluders)
    if occupancy is None:
        return None
    order = sorted(range(len(elements)), key=lambda i: int(elements[i].class_id))
    gt = VectorMap([elements[i] for i in order])
    return Scene(gt, occupancy, drivable, ego, int(seed), difficulty, frame, n_points)


def _place_occluders(rng, prof, frame: MapFrame, drivable, ego, n_occluders):
    occ = np.zeros(frame.shape, dtype=np.uint8)
    count = int(rng.integers(prof.occluders[0], prof.occluders[1] + 1)) if n_occluders is None else n_occluders
    if count == 0:
        return occ
    cs = frame.cell_size
    near_road = convolve_smooth(drivable.astype(float), np.ones((9, 9))) > 0
    candidates = np.argwhere(near_road)
    placed = 0
    for _ in range(count * 20):
        if placed == count:
            break
        r, c = candidates[rng.integers(len(candidates))]
        # vehicles are longer along x
        length = int(round(rng.uniform(4.0, 10.0) / cs))
        breadth = int(round(rng.uniform(1.8, 3.0) / cs))
        if rng.random() < 0.3:
            length, breadth = breadth, length
        r0, c0 = int(r - length // 2), int(c - breadth // 2)
        r1, c1 = r0 + length, c0 + breadth
        r0, c0 = max(r0, 0), max(c0, 0)
        r1, c1 = min(r1, frame.grid_h), min(c1, frame.grid_w)
        # keep a clear margin around the ego vehicle
        if r0 - 4 <= ego[0] < r1 + 4 and c0 - 3 <= ego[1] < c1 + 3:
            continue
        occ[r0:r1, c0:c1] = 1
        placed += 1
    return occ if placed == count else None


@dataclass
class ObservationGrid:
    channels: np.ndarray  # (4, H, W): divider, boundary, ped evidence, occupancy
    noise_sigma: float


EVIDENCE_KERNEL = gaussian_kernel(3, 0.8)


def observe(scene: Scene, noise_seed: int, noise_sigma: float = 0.05, occluder_channel: bool = True,
            visible: np.ndarray | None = None) -> ObservationGrid:
    """Soft per-class evidence, masked by visibility, plus Gaussian noise."""
    frame = scene.frame
    if visible is None:
        visible = scene.visibility()
    ev = []
    for c in MapClass:
        pts, _ = scene.gt.of_class(c)
        ev.append(convolve_smooth(rasterize_class(pts, frame), EVIDENCE_KERNEL) * visible)
    ev = np.stack(ev)
    if noise_sigma > 0:
        ev = ev + np.random.default_rng([noise_seed, 7]).normal(0.0, noise_sigma, ev.shape)
    ev = np.clip(ev, -1.0, 2.0)
    occ = scene.occupancy.astype(float)[None] if occluder_channel else np.zeros((1,) + frame.shape)
    return ObservationGrid(np.concatenate([ev, occ]), noise_sigma)


def scene_noise_seed(seed: int) -> int:
    return int(seed) * 7919 + 17


# -- dataset on disk ------------------------------------------------------------------


def write_observation_csv(path: str | Path, obs: ObservationGrid) -> None:
    c, h, w = obs.channels.shape
    np.savetxt(path, obs.channels.reshape(c * h, w), delimiter=",", fmt="%.7g")


def read_observation_csv(path: str | Path, frame: MapFrame = DEFAULT_FRAME) -> np.ndarray:
    arr = np.loadtxt(path, delimiter=",")
    return arr.reshape(-1, frame.grid_h, frame.grid_w)


@dataclass
class DatasetEntry:
    seed: int
    split: str
    difficulty: str


def split_seeds(count: int, seed: int, val_fraction: float = 0.2) -> list[tuple[int, str]]:
    """Disjoint seed ranges: training seeds first, validation after."""
    n_val = int(round(count * val_fraction))
    base = seed * 1_000_000
    return [(base + i, "train" if i < count - n_val else "val") for i in range(count)]
