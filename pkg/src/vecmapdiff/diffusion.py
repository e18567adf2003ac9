"""Noise schedule, forward process, query padding and the DDIM sampler.

All diffusion arithmetic happens in signal space z = 2x - 1, where x is the
normalized map coordinate, so that the terminal distribution is N(0, I).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .geometry import MapClass, NUM_CLASSES, Polyline, VectorMap, resample_polyline

NO_OBJECT = NUM_CLASSES  # class index of the padding / no-object slot
PADDING_KINDS = ("repeat", "zero", "smooth", "gaussian", "uniform")


def to_signal(x: np.ndarray, scale: float = 1.0) -> np.ndarray:
    return scale * (2.0 * np.asarray(x, dtype=float) - 1.0)


def from_signal(z: np.ndarray, scale: float = 1.0) -> np.ndarray:
    return (np.asarray(z, dtype=float) / scale + 1.0) / 2.0


def as_rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


@dataclass(frozen=True)
class NoiseSchedule:
    alpha_bar: np.ndarray
    kind: str = "cosine"
    s: float = 0.008
    signal_scale: float = 1.0  # diffused state is signal_scale * (2x - 1)

    @property
    def T(self) -> int:
        return len(self.alpha_bar) - 1

    def fingerprint(self) -> str:
        tag = f"{self.kind}:{self.T}:{self.s}" + ("" if self.signal_scale == 1.0 else f":{self.signal_scale}")
        h = hashlib.sha256(tag.encode())
        h.update(np.ascontiguousarray(self.alpha_bar, dtype=np.float64).tobytes())
        return h.hexdigest()[:16]


def build_cosine_schedule(T: int = 1000, s: float = 0.008, signal_scale: float = 1.0) -> NoiseSchedule:
    """Cumulative signal retention a_t = f(t) / f(0), f(t) = cos^2((t/T + s)/(1 + s) * pi/2)."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not signal_scale > 0:
        raise ValueError("signal_scale must be positive")
    t = np.arange(T + 1, dtype=float)
    f = np.cos(((t / T + s) / (1.0 + s)) * np.pi / 2.0) ** 2
    ab = f / f[0]
    ab.setflags(write=False)
    return NoiseSchedule(ab, "cosine", s, float(signal_scale))


def forward_q(x0: np.ndarray, t: int, schedule: NoiseSchedule, rng=None) -> np.ndarray:
    """Sample x_t ~ q(x_t | x_0) in signal space."""
    if not 0 <= t <= schedule.T:
        raise ValueError(f"timestep {t} outside [0, {schedule.T}]")
    x0 = np.asarray(x0, dtype=float)
    ab = schedule.alpha_bar[t]
    if t == 0:
        return x0.copy()
    eps = as_rng(rng).standard_normal(x0.shape)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


@dataclass(frozen=True)
class PaddingStrategy:
    kind: str = "gaussian"
    mu: float = 0.5
    sigma: float = 0.25

    def __post_init__(self):
        if self.kind not in PADDING_KINDS:
            raise ValueError(f"unknown padding strategy {self.kind!r}")

    def draw(self, count: int, n_points: int, rng, gt_coords: np.ndarray | None = None) -> np.ndarray:
        """Padded queries in normalized space, shape (count, n_points, 2), inside [0, 1]."""
        rng = as_rng(rng)
        shape = (count, n_points, 2)
        if count == 0:
            return np.zeros(shape)
        if self.kind == "gaussian":
            return np.clip(rng.normal(self.mu, self.sigma, shape), 0.0, 1.0)
        if self.kind == "uniform":
            return rng.uniform(0.0, 1.0, shape)
        if self.kind == "zero":
            return np.full(shape, 0.5)
        if self.kind == "repeat" and gt_coords is not None and len(gt_coords) > 0:
            return np.array([gt_coords[i % len(gt_coords)] for i in range(count)])
        if self.kind == "repeat":
            # nothing to repeat
            return np.clip(rng.normal(self.mu, self.sigma, shape), 0.0, 1.0)
        return np.array([_random_smooth_chain(n_points, rng) for _ in range(count)])


def _random_smooth_chain(n_points: int, rng: np.random.Generator) -> np.ndarray:
    """Random straight, arc or elliptical chain inside the unit square."""
    kind = rng.integers(3)
    if kind == 2:
        center = rng.uniform(0.25, 0.75, 2)
        radii = rng.uniform(0.05, 0.25, 2)
        phase = rng.uniform(0, 2 * np.pi)
        a = phase + np.linspace(0, 2 * np.pi, 64)
        raw = center + np.stack([radii[0] * np.cos(a), radii[1] * np.sin(a)], axis=1)
    else:
        start = rng.uniform(0.0, 1.0, 2)
        heading = rng.uniform(0, 2 * np.pi)
        length = rng.uniform(0.2, 1.0)
        curvature = 0.0 if kind == 0 else rng.uniform(-4.0, 4.0)
        s = np.linspace(0.0, length, 64)
        ang = heading + curvature * s
        step = np.stack([np.cos(ang), np.sin(ang)], axis=1) * (length / 63)
        raw = start + np.concatenate([[0.0, 0.0], np.cumsum(step[:-1], axis=0).ravel()]).reshape(-1, 2)
    return np.clip(resample_polyline(raw, n_points), 0.0, 1.0)


@dataclass
class QuerySet:
    coords: np.ndarray  # (l, N_P, 2) in signal space
    from_gt: np.ndarray  # (l,) bool
    class_targets: np.ndarray  # (l,) int, NO_OBJECT for padding

    @property
    def num_gt(self) -> int:
        return int(self.from_gt.sum())


def pad_queries(gt: VectorMap, l: int, strategy: PaddingStrategy, rng=None, n_points: int = 10) -> QuerySet:
    """GT polylines first, then `l - |gt|` padded queries."""
    if len(gt) > l:
        raise ValueError("query overflow")
    rng = as_rng(rng)
    gt_norm = np.array([e.points for e in gt.elements]).reshape(len(gt), -1, 2) if len(gt) else np.zeros((0, n_points, 2))
    if len(gt):
        n_points = gt_norm.shape[1]
    pad = strategy.draw(l - len(gt), n_points, rng, gt_norm)
    coords = to_signal(np.concatenate([gt_norm, pad], axis=0))
    from_gt = np.arange(l) < len(gt)
    targets = np.full(l, NO_OBJECT, dtype=np.int64)
    targets[: len(gt)] = [int(e.class_id) for e in gt.elements]
    return QuerySet(coords, from_gt, targets)


def ddim_step(x_t: np.ndarray, x0_hat: np.ndarray, t: int, t_prev: int, eta: float,
              schedule: NoiseSchedule, rng=None) -> np.ndarray:
    """One DDIM update from step t to t_prev given an x0 prediction."""
    if t <= 0 or t_prev >= t or t_prev < 0:
        raise ValueError("invalid step pair")
    ab, ab_prev = schedule.alpha_bar[t], schedule.alpha_bar[t_prev]
    eps_hat = (x_t - np.sqrt(ab) * x0_hat) / np.sqrt(1.0 - ab)
    sigma = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab)) * np.sqrt(1.0 - ab / ab_prev)
    out = np.sqrt(ab_prev) * x0_hat + np.sqrt(max(1.0 - ab_prev - sigma**2, 0.0)) * eps_hat
    if sigma > 0:
        out = out + sigma * as_rng(rng).standard_normal(x_t.shape)
    return out


@dataclass(frozen=True)
class SamplerConfig:
    k: int = 5
    eta: float = 0.5
    tau: float = 0.5
    n: int = 10
    score_filter: float = 0.4
    n_queries: int = 20
    n_points: int = 10

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must be in [0, 1]")
        if not 0.0 <= self.tau < 1.0:
            raise ValueError("tau must be in [0, 1)")  # 0 disables re-drawing
        if self.n < 1:
            raise ValueError("n must be >= 1")


class Denoiser(Protocol):
    def __call__(self, x_t: np.ndarray, t: int, cond) -> tuple[np.ndarray, np.ndarray]:
        """Return (x0_hat (l, N_P, 2) in signal space, class logits (l, C+1))."""


def timestep_grid(T: int, k: int) -> list[int]:
    if not 1 <= k <= T:
        raise ValueError("k must be in [1, T]")
    return [int(round(T * (k - j) / k)) for j in range(k)]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class SampleTrace:
    """Per-step bookkeeping; useful for tests and diagnostics."""

    timesteps: list[int] = field(default_factory=list)
    reinitialized: list[int] = field(default_factory=list)


def sample_map(denoiser: Callable, condition, cfg: SamplerConfig, schedule: NoiseSchedule, rng=None,
               padding: PaddingStrategy = PaddingStrategy(), x_T: np.ndarray | None = None,
               trace: SampleTrace | None = None) -> VectorMap:
    """Draw one vector map by DDIM sampling with score filtering.

    Queries scoring below `cfg.tau` after a step are replaced by fresh padded
    queries noised to the next timestep's marginal. After the last step the
    class head labels each query; no-object queries are dropped.
    """
    rng = as_rng(rng)
    l, n_p = cfg.n_queries, cfg.n_points
    T, sc = schedule.T, schedule.signal_scale
    if x_T is None:
        x = forward_q(to_signal(padding.draw(l, n_p, rng), sc), T, schedule, rng)
    else:
        x = np.array(x_T, dtype=float)
    steps = timestep_grid(T, cfg.k)
    logits = None
    x0_hat = x
    for j, t in enumerate(steps):
        t_prev = steps[j + 1] if j + 1 < len(steps) else 0
        x0_hat, logits = denoiser(x, t, condition)
        x0_hat = np.asarray(x0_hat, dtype=float)
        if not np.all(np.isfinite(x0_hat)):
            raise FloatingPointError("numeric overflow")
        x0_hat = np.clip(x0_hat, -sc, sc)
        x = ddim_step(x, x0_hat, t, t_prev, cfg.eta, schedule, rng)
        n_reinit = 0
        if t_prev > 0:
            scores = softmax(np.asarray(logits))[:, :NO_OBJECT].max(axis=1)
            drop = np.nonzero(scores < cfg.tau)[0]
            n_reinit = len(drop)
            if n_reinit:
                fresh = to_signal(padding.draw(n_reinit, n_p, rng), sc)
                x[drop] = forward_q(fresh, t_prev, schedule, rng)
        if trace is not None:
            trace.timesteps.append(t)
            trace.reinitialized.append(n_reinit)
    probs = softmax(np.asarray(logits))
    labels = probs.argmax(axis=1)
    elements, scores = [], []
    out = np.clip(from_signal(x, sc), 0.0, 1.0)
    for q in np.nonzero(labels != NO_OBJECT)[0]:
        elements.append(Polyline(out[q], MapClass(int(labels[q]))))
        scores.append(float(probs[q, labels[q]]))
    return VectorMap(elements, np.array(scores))
