"""Procedural shape dataset, the ``PCDS`` file format, and batching."""

import struct
from dataclasses import dataclass, field
from typing import List, NamedTuple

import numpy as np

from ._binary import Reader
from .errors import BadMagicError, ConfigError, FormatError, VersionError
from .geometry import PointCloud, unit_normalize
from .rng import Xoshiro256

MAGIC = b"PCDS"
VERSION = 1
SHAPES = ("sphere", "cube", "cylinder", "torus", "cone", "plane")


@dataclass
class SynthSpec:
    classes: List[str] = field(default_factory=lambda: ["sphere", "cube", "cylinder", "torus"])
    points_per_cloud: int = 1024
    samples_per_class: int = 50
    noise_sigma: float = 0.01
    seed: int = 0
    rotate: bool = True

    def validate(self):
        if self.points_per_cloud < 8:
            raise ConfigError("points_per_cloud must be at least 8")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")
        if self.samples_per_class < 0:
            raise ConfigError("samples_per_class must be non-negative")
        unknown = [c for c in self.classes if c not in SHAPES]
        if unknown:
            raise ConfigError(f"unknown shape class(es) {unknown}; choose from {SHAPES}")
        if len(set(self.classes)) != len(self.classes):
            raise ConfigError("duplicate class names")
        return self


@dataclass
class Dataset:
    samples: List[PointCloud]
    class_names: List[str]

    def __len__(self):
        return len(self.samples)

    @property
    def labels(self):
        return np.array([s.label for s in self.samples], dtype=np.int64)

    @property
    def num_classes(self):
        return len(self.class_names)

    def coords(self, idx=None):
        """Stack coordinates of ``idx`` (default: all) into ``[B, N, 3]``."""
        chosen = self.samples if idx is None else [self.samples[i] for i in idx]
        return np.stack([s.coords for s in chosen])

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        if self.class_names != other.class_names or len(self) != len(other):
            return False
        return all(a.label == b.label and a.coords.tobytes() == b.coords.tobytes()
                   and a.coords.shape == b.coords.shape
                   for a, b in zip(self.samples, other.samples))


# --------------------------------------------------------------------------
# surface samplers; each returns (n, 3) points uniform by area


def _sphere(rng, n):
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _cube(rng, n):
    face = rng.integers(0, 6, n)
    uv = rng.uniform(-1.0, 1.0, (n, 2))
    pts = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, -1.0, 1.0)
    for a in range(3):
        sel = axis == a
        others = [b for b in range(3) if b != a]
        pts[sel, a] = sign[sel]
        pts[sel, others[0]] = uv[sel, 0]
        pts[sel, others[1]] = uv[sel, 1]
    return pts


def _cylinder(rng, n):
    h = rng.uniform(1.5, 2.5)
    side, cap = 2 * np.pi * h, 2 * np.pi
    on_side = rng.random(n) < side / (side + cap)
    theta = rng.uniform(0, 2 * np.pi, n)
    r = np.where(on_side, 1.0, np.sqrt(rng.random(n)))
    z = np.where(on_side, rng.uniform(-h / 2, h / 2, n), np.where(rng.random(n) < 0.5, -h / 2, h / 2))
    return np.column_stack([r * np.cos(theta), r * np.sin(theta), z])


def _torus(rng, n):
    minor = rng.uniform(0.25, 0.45)
    out = np.empty((0, 3))
    while out.shape[0] < n:
        u = rng.uniform(0, 2 * np.pi, 2 * n)
        v = rng.uniform(0, 2 * np.pi, 2 * n)
        # accept by the area element (1 + r cos v)
        keep = rng.random(2 * n) < (1 + minor * np.cos(v)) / (1 + minor)
        u, v = u[keep], v[keep]
        ring = 1 + minor * np.cos(v)
        out = np.vstack([out, np.column_stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)])])
    return out[:n]


def _cone(rng, n):
    h = rng.uniform(1.0, 2.0)
    slant = np.hypot(1.0, h)
    side, base = np.pi * slant, np.pi
    on_side = rng.random(n) < side / (side + base)
    theta = rng.uniform(0, 2 * np.pi, n)
    t = np.sqrt(rng.random(n))  # radius fraction, area-uniform on both parts
    z = np.where(on_side, h * (1 - t), 0.0) - h / 3
    return np.column_stack([t * np.cos(theta), t * np.sin(theta), z])


def _plane(rng, n):
    aspect = rng.uniform(0.5, 1.0)
    return np.column_stack([rng.uniform(-1, 1, n), rng.uniform(-aspect, aspect, n), np.zeros(n)])


_SAMPLERS = {"sphere": _sphere, "cube": _cube, "cylinder": _cylinder,
             "torus": _torus, "cone": _cone, "plane": _plane}


def random_rotation(rng):
    """Uniformly distributed rotation matrix (QR of a Gaussian matrix)."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def sample_shape(name, n, rng, noise_sigma=0.0, rotate=True):
    pts = _SAMPLERS[name](rng, n)
    if rotate:
        pts = pts @ random_rotation(rng).T
    if noise_sigma > 0:
        pts = pts + rng.normal(0.0, noise_sigma, pts.shape)
    return pts


def generate_synthetic(spec):
    """Deterministic dataset of unit-normalised parametric surfaces, class by class."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    samples = []
    for label, name in enumerate(spec.classes):
        for _ in range(spec.samples_per_class):
            pts = sample_shape(name, spec.points_per_cloud, rng, spec.noise_sigma, spec.rotate)
            samples.append(unit_normalize(PointCloud(pts, label=label)))
    return Dataset(samples, list(spec.classes))


# --------------------------------------------------------------------------
# PCDS files


def encode_dataset(ds):
    parts = [MAGIC, struct.pack("<II", VERSION, len(ds.class_names))]
    for name in ds.class_names:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
    parts.append(struct.pack("<I", len(ds.samples)))
    for s in ds.samples:
        if not np.isfinite(s.coords).all():
            raise ValueError("refusing to write non-finite coordinates")
        if s.label is None or not 0 <= s.label < len(ds.class_names):
            raise ValueError(f"sample label {s.label!r} out of range")
        parts.append(struct.pack("<II", s.label, s.coords.shape[0]))
        parts.append(np.ascontiguousarray(s.coords, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_dataset(buf):
    if len(buf) < 4 or bytes(buf[:4]) != MAGIC:
        raise BadMagicError("not a PCDS dataset (bad magic)")
    r = Reader(buf)
    r.take(4)
    version = r.u32()
    if version != VERSION:
        raise VersionError(f"unsupported PCDS version {version}")
    names = []
    for _ in range(r.u32()):
        try:
            names.append(bytes(r.take(r.u32())).decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise FormatError("class name is not valid UTF-8") from exc
    samples = []
    for _ in range(r.u32()):
        label, n = struct.unpack("<II", r.take(8))
        if label >= len(names):
            raise FormatError(f"label {label} out of range for {len(names)} classes")
        coords = np.frombuffer(r.take(12 * n), dtype="<f4").astype(np.float32).reshape(n, 3)
        samples.append(PointCloud(coords, label=int(label)))
    if r.pos != len(r.buf):
        raise FormatError(f"{len(r.buf) - r.pos} trailing bytes after last sample")
    return Dataset(samples, names)


def write_dataset(ds, path):
    data = encode_dataset(ds)
    with open(path, "wb") as fh:
        fh.write(data)


def read_dataset(path):
    with open(path, "rb") as fh:
        return decode_dataset(fh.read())


# --------------------------------------------------------------------------
# batching


class Batch(NamedTuple):
    indices: np.ndarray
    coords: np.ndarray
    labels: np.ndarray


def batch_iter(ds, batch_size, shuffle=False, rng=None):
    """Yield ``ceil(len(ds) / batch_size)`` batches covering each sample once.

    The shuffle order comes from a :class:`Xoshiro256` (or int seed) so it is
    reproducible; without shuffling, insertion order is kept.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(ds)
    if shuffle:
        if not isinstance(rng, Xoshiro256):
            rng = Xoshiro256(0 if rng is None else int(rng))
        order = np.array(rng.permutation(n), dtype=np.int64)
    else:
        order = np.arange(n, dtype=np.int64)
    labels = ds.labels
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield Batch(idx, ds.coords(idx), labels[idx])
