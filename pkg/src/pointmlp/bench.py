"""Inference throughput and kernel-backend benchmarks."""

import time
from dataclasses import asdict, dataclass

import numpy as np

from . import kernels
from ._accel import HAVE_NUMBA
from .autodiff import no_grad
from .model import count_layers, count_params


@dataclass
class BenchReport:
    variant: str
    batch_size: int
    warmup_iters: int
    timed_iters: int
    samples_per_second: float
    params: int
    layers: int

    def to_dict(self):
        return asdict(self)


def bench_throughput(model, batch_size=16, warmup=2, iters=10, points=None, seed=0):
    """Eval-mode forward passes per second on a fixed random batch.

    ``warmup`` untimed passes precede ``iters`` timed ones; throughput is
    ``batch_size * iters / elapsed``. ``points`` defaults to the largest
    cloud the configuration was built for.
    """
    if iters < 10:
        raise ValueError("timed_iters must be >= 10")
    if batch_size < 1 or warmup < 0:
        raise ValueError("batch_size >= 1 and warmup >= 0 required")
    cfg = model.config
    n = points or 2 * cfg.stages[0].n_points_out
    coords = np.random.default_rng(seed).uniform(-1, 1, (batch_size, n, 3)).astype(np.float32)
    with no_grad():
        for _ in range(warmup):
            model.forward(coords, training=False)
        start = time.perf_counter()
        for _ in range(iters):
            model.forward(coords, training=False)
        elapsed = time.perf_counter() - start
    return BenchReport(cfg.variant, batch_size, warmup, iters,
                       batch_size * iters / elapsed, count_params(model), count_layers(cfg))


def _best_of(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def bench_kernels(n=1024, m=512, k=24, repeats=5, seed=0):
    """Best-of-``repeats`` seconds for FPS and kNN under each available backend.

    Returns ``{backend: {"fps": s, "knn": s}}``; the numba path is compiled
    (or loaded from cache) before timing.
    """
    coords = np.random.default_rng(seed).random((n, 3)).astype(np.float32)
    backends = ["numpy"] + (["numba"] if HAVE_NUMBA else [])
    out = {}
    for b in backends:
        idx = kernels.fps_indices(coords, m, 0, backend=b)
        kernels.knn_indices(coords, coords[idx], k, backend=b)
        out[b] = {
            "fps": _best_of(lambda: kernels.fps_indices(coords, m, 0, backend=b), repeats),
            "knn": _best_of(lambda: kernels.knn_indices(coords, coords[idx], k, backend=b), repeats),
        }
    return out
