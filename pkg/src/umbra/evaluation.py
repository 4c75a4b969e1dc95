"""Volumetric IoU, the Random / Nearest-Neighbour baselines and best-of-N curves."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import EmptyTrainingSet
from .occfield import MESH_BOUND, ShapeSpec, occupancy
from .shadow import ShadowImage

IOU_SAMPLES = 100_000
OCCUPIED = 0.5


@dataclass(frozen=True)
class IoUEstimate:
    value: float
    samples: int
    stderr: float
    both_empty: bool = False


def sample_points(rng: np.random.Generator, n: int, bound: float = MESH_BOUND) -> np.ndarray:
    return rng.uniform(-bound, bound, size=(n, 3))


def iou_from_points(a: ShapeSpec, b: ShapeSpec, points: np.ndarray) -> IoUEstimate:
    ia = occupancy(a, points) > OCCUPIED
    ib = occupancy(b, points) > OCCUPIED
    union = int(np.count_nonzero(ia | ib))
    inter = int(np.count_nonzero(ia & ib))
    n = points.shape[0]
    if union == 0:
        return IoUEstimate(1.0, n, 0.0, both_empty=True)
    p = inter / union
    return IoUEstimate(p, n, math.sqrt(p * (1 - p) / union))


def volumetric_iou(a: ShapeSpec, b: ShapeSpec, samples: int = IOU_SAMPLES,
                   rng: np.random.Generator | None = None) -> IoUEstimate:
    """Monte-Carlo IoU of the ``occupancy > 0.5`` volumes inside ``[-1.2, 1.2]^3``."""
    if samples < 1000:
        raise ValueError("use at least 1000 samples")
    rng = np.random.default_rng(0) if rng is None else rng
    return iou_from_points(a, b, sample_points(rng, samples))


def best_iou(candidates: Sequence[ShapeSpec], truth: ShapeSpec, samples: int = IOU_SAMPLES,
             rng: np.random.Generator | None = None) -> float:
    """Highest IoU against ``truth`` among ``candidates``, on one shared point sample."""
    if len(candidates) == 0:
        raise ValueError("no candidate shapes")
    if samples < 1000:
        raise ValueError("use at least 1000 samples")
    points = sample_points(np.random.default_rng(0) if rng is None else rng, samples)
    return max(iou_from_points(c, truth, points).value for c in candidates)


def _masked_sq_distance(a: ShadowImage, b: ShadowImage) -> float:
    both = a.valid & b.valid
    d = a.values[both] - b.values[both]
    return float(d @ d)


def nearest_neighbor_baseline(observed: ShadowImage, train: Sequence[tuple[ShadowImage, ShapeSpec]]) -> ShapeSpec:
    """Training shape whose shadow is closest in L2 over mutually valid pixels."""
    if len(train) == 0:
        raise EmptyTrainingSet("nearest-neighbour search needs a training set")
    best, best_d = None, math.inf
    for image, shape in train:
        if image.values.shape != observed.values.shape:
            raise ValueError("training shadow resolution differs from the observation")
        d = _masked_sq_distance(observed, image)
        if d < best_d:
            best, best_d = shape, d
    return best


def random_baseline(train: Sequence, rng: np.random.Generator) -> ShapeSpec:
    """Uniformly drawn training shape (entries may be shapes or (image, shape) pairs)."""
    if len(train) == 0:
        raise EmptyTrainingSet("random baseline needs a training set")
    item = train[int(rng.integers(len(train)))]
    return item[1] if isinstance(item, tuple) else item


def best_of_n_curve(result, truth: ShapeSpec, samples: int = IOU_SAMPLES, rng: np.random.Generator | None = None,
                    points: np.ndarray | None = None, canonical: bool = True) -> list[tuple[int, float]]:
    """``(n, best IoU among the first n restarts)`` in restart-index order.

    Failed restarts count towards ``n`` but never raise the maximum.
    """
    ordered = result.by_index()
    if not any(not r.failed for r in ordered):
        raise ValueError("no completed restart")
    if points is None:
        points = sample_points(np.random.default_rng(0) if rng is None else rng, samples)
    ref = truth.canonical() if canonical else truth
    ious = []
    for r in ordered:
        if r.failed:
            ious.append(-math.inf)
            continue
        shape = r.shape.canonical() if canonical else r.shape
        ious.append(iou_from_points(shape, ref, points).value)
    best = np.maximum.accumulate(np.array(ious))
    return [(i + 1, max(float(v), 0.0)) for i, v in enumerate(best)]
