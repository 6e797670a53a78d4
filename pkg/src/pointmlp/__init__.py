"""Residual point-MLP classification of 3-D point clouds in numpy."""

from .autodiff import Tensor, backward, grad_check, no_grad
from .bench import BenchReport, bench_kernels, bench_throughput
from .checkpoint import load_tensors, save_tensors
from .data import Dataset, SynthSpec, generate_synthetic, read_dataset, write_dataset
from .errors import (
    BadMagicError,
    ConfigError,
    FormatError,
    NonFiniteError,
    ShapeError,
    TruncatedError,
    VersionError,
)
from .geometry import AugmentConfig, Grouping, PointCloud, augment, farthest_point_sample, knn
from .model import (
    Model,
    ModelConfig,
    StageSpec,
    build_model,
    classify,
    count_layers,
    count_params,
    default_config,
    geometric_affine,
    stage_forward,
)
from .rng import Xoshiro256
from .train import Metrics, TrainConfig, compute_metrics, cosine_lr, evaluate, fit, sgd_step

__version__ = "0.1.0"
