"""Raster-space aggregation of sampled maps into probabilities and uncertainty."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import (DEFAULT_FRAME, MapClass, MapFrame, VectorMap, convolve_smooth,
                       gaussian_kernel, rasterize_polyline)

VARIANCE_CONVENTION = "population"  # divide by n


@dataclass
class AggregationConfig:
    kernel_size: int = 5
    kernel_sigma: float = 1.0
    score_filter: float = 0.4

    def kernel(self) -> np.ndarray:
        return gaussian_kernel(self.kernel_size, self.kernel_sigma)

    def metadata(self, n: int) -> dict:
        return {"n_samples": n, "kernel_size": self.kernel_size, "kernel_sigma": self.kernel_sigma,
                "score_filter": self.score_filter, "variance": VARIANCE_CONVENTION}


def weighted_raster(sample: VectorMap, c: MapClass, frame: MapFrame = DEFAULT_FRAME) -> np.ndarray:
    """Sum of score-weighted binary rasters of every class-c polyline."""
    r = np.zeros(frame.shape)
    pts, scores = sample.of_class(c)
    for p, s in zip(pts, scores):
        r += s * rasterize_polyline(p, frame)
    return r


def class_probability(r: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    return np.minimum(1.0, convolve_smooth(r, kernel))


def sample_probabilities(sample: VectorMap, frame: MapFrame = DEFAULT_FRAME,
                         cfg: AggregationConfig = AggregationConfig()) -> np.ndarray:
    """Per-class probability maps (C, H, W) of one sampled map."""
    kept = sample.filtered(cfg.score_filter)
    k = cfg.kernel()
    return np.stack([class_probability(weighted_raster(kept, c, frame), k) for c in MapClass])


def _stack(samples: Sequence[np.ndarray]) -> np.ndarray:
    if len(samples) == 0:
        raise ValueError("need at least one sample")
    shapes = {np.shape(s) for s in samples}
    if len(shapes) != 1:
        raise ValueError(f"shape mismatch between samples: {sorted(shapes)}")
    return np.stack([np.asarray(s, dtype=float) for s in samples])


def aggregate(samples: Sequence[np.ndarray]) -> np.ndarray:
    """Mean class probability over samples."""
    return _stack(samples).mean(axis=0)


def refine(d: np.ndarray, b: float) -> np.ndarray:
    if not 0.0 <= b <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    return (np.asarray(d) >= b).astype(np.uint8)


def uncertainty(samples: Sequence[np.ndarray]) -> np.ndarray:
    """Per-cell sum over classes of the across-sample variance.

    Each sample is a (C, H, W) probability stack. One sample gives the zero map.
    """
    s = _stack(samples)
    if len(s) == 1:
        return np.zeros(s.shape[2:])
    # shift by the first sample so identical samples give exactly zero
    y = s - s[0]
    return ((y - y.mean(axis=0)) ** 2).mean(axis=0).sum(axis=0)


@dataclass
class AggregateResult:
    probs: np.ndarray  # (C, H, W)
    uncertainty: np.ndarray  # (H, W)
    n: int


def aggregate_samples(samples: Sequence[VectorMap], frame: MapFrame = DEFAULT_FRAME,
                      cfg: AggregationConfig = AggregationConfig()) -> AggregateResult:
    per = [sample_probabilities(s, frame, cfg) for s in samples]
    return AggregateResult(aggregate(per), uncertainty(per), len(per))

