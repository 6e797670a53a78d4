"""Sampling, neighbour search, grouping, normalisation and augmentation."""

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import kernels
from .autodiff import gather_rows
from .errors import ConfigError
from .rng import Xoshiro256


@dataclass
class PointCloud:
    coords: np.ndarray
    features: Optional[np.ndarray] = None
    label: Optional[int] = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float32)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3 or self.coords.shape[0] < 1:
            raise ValueError(f"coords must be (N>=1, 3), got {self.coords.shape}")
        if not np.isfinite(self.coords).all():
            raise ValueError("coords must be finite")
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=np.float32)
            if self.features.shape[0] != self.coords.shape[0]:
                raise ValueError("features must have one row per point")

    def __len__(self):
        return self.coords.shape[0]


@dataclass
class Grouping:
    centroid_idx: np.ndarray
    neighbor_idx: np.ndarray

    @property
    def k(self):
        return self.neighbor_idx.shape[1]


def farthest_point_sample(coords, m, seed_idx=0, backend=None):
    """Greedy max-min sampling starting from ``seed_idx``.

    Each pick maximises the squared distance to the nearest point already
    picked; ties go to the lowest index.
    """
    coords = np.asarray(coords)
    n = coords.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"cannot sample {m} of {n} points")
    if not 0 <= seed_idx < n:
        raise IndexError(f"seed index {seed_idx} out of range [0, {n})")
    return kernels.fps_indices(coords, m, seed_idx, backend=backend)


def knn(coords, query_idx, k, backend=None):
    """Indices of the ``k`` nearest points to each query, nearest first.

    The query point itself is included (distance 0). Ties go to the lowest index.
    """
    coords = np.asarray(coords)
    n = coords.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must be in [1, {n}]")
    query_idx = np.asarray(query_idx, dtype=np.int64)
    return kernels.knn_indices(coords, coords[query_idx], k, backend=backend)


def centroid_seed(coords):
    """Index of the point nearest the centroid; a permutation-equivariant FPS seed."""
    coords = np.asarray(coords, dtype=np.float64)
    c = coords.mean(axis=0)
    d = coords - c
    dist = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]
    return int(np.argmin(dist))


def sample_and_group(coords, n_samples, k, seed_idx=0, backend=None):
    centroids = farthest_point_sample(coords, n_samples, seed_idx, backend=backend)
    return Grouping(centroids, knn(coords, centroids, k, backend=backend))


def group_features(features, grouping):
    """Gather neighbour features into an (N_s, K, d) tensor (gradient-capable)."""
    return gather_rows(features, grouping.neighbor_idx)


def unit_normalize(cloud):
    """Centre on the centroid and scale so the farthest point has norm 1."""
    c = cloud.coords.astype(np.float64)
    c = c - c.mean(axis=0)
    radius = np.sqrt((c * c).sum(axis=1)).max()
    if radius > 0:
        c = c / radius
    return replace(cloud, coords=c.astype(np.float32))


@dataclass
class AugmentConfig:
    scale_lo: float = 0.8
    scale_hi: float = 1.25
    shift: float = 0.1

    def __post_init__(self):
        if self.scale_lo <= 0 or self.scale_hi < self.scale_lo:
            raise ConfigError(f"need 0 < scale_lo <= scale_hi, got [{self.scale_lo}, {self.scale_hi}]")
        if self.shift < 0:
            raise ConfigError("shift must be non-negative")

    @property
    def is_identity(self):
        return self.scale_lo == 1.0 and self.scale_hi == 1.0 and self.shift == 0.0


def draw_augmentation(cfg, rng):
    """Six draws from ``rng``: per-axis scale then per-axis shift."""
    scale = np.array([rng.uniform(cfg.scale_lo, cfg.scale_hi) for _ in range(3)])
    shift = np.array([rng.uniform(-cfg.shift, cfg.shift) for _ in range(3)])
    return scale, shift


def augment(cloud, cfg, rng):
    """Anisotropic random scale followed by a random translation.

    ``rng`` is a :class:`~pointmlp.rng.Xoshiro256` (or an int seed).
    """
    if not isinstance(rng, Xoshiro256):
        rng = Xoshiro256(int(rng))
    scale, shift = draw_augmentation(cfg, rng)
    coords = (cloud.coords.astype(np.float64) * scale + shift).astype(np.float32)
    return replace(cloud, coords=coords)
