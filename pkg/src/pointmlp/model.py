"""Residual point-MLP classifier: geometric affine module, residual blocks,
sample/group/aggregate stages and the classification head."""

import json
from dataclasses import asdict, dataclass, field
from typing import List

import numpy as np

from .autodiff import (
    BatchNormState,
    Tensor,
    add,
    batch_norm,
    custom_op,
    dropout,
    fc,
    gather_rows,
    max_over_neighbors,
    no_grad,
    relu,
)
from .errors import ConfigError, ShapeError
from .geometry import centroid_seed, farthest_point_sample, knn

AFFINE_EPS = 1e-5
DEPTH_REPEATS = {24: 1, 40: 2, 56: 3}


# --------------------------------------------------------------------------
# configuration


@dataclass
class StageSpec:
    n_points_out: int
    k: int
    d_in: int
    d_out: int
    pre_repeats: int = 2
    pos_repeats: int = 2
    affine_enabled: bool = True

    def validate(self):
        if self.pre_repeats < 0 or self.pos_repeats < 0:
            raise ConfigError("block repeats must be non-negative")
        if self.k < 1 or self.n_points_out < 1:
            raise ConfigError("k and n_points_out must be positive")
        if self.d_in < 1 or self.d_out < 1:
            raise ConfigError("channel widths must be positive")


@dataclass
class ModelConfig:
    embed_dim: int
    stages: List[StageSpec]
    num_classes: int
    variant: str = "full"
    bottleneck_r: int = 1
    classifier_widths: List[int] = field(default_factory=lambda: [512, 256])
    dropout: float = 0.5
    fps_seed: str = "first"

    def validate(self):
        if self.variant not in ("full", "elite"):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.fps_seed not in ("first", "centroid"):
            raise ConfigError(f"fps_seed must be 'first' or 'centroid', got {self.fps_seed!r}")
        if self.num_classes < 1 or self.embed_dim < 1 or self.bottleneck_r < 1:
            raise ConfigError("num_classes, embed_dim and bottleneck_r must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if not self.stages:
            raise ConfigError("at least one stage is required")
        prev_d = self.embed_dim
        prev_n = None
        for i, st in enumerate(self.stages):
            st.validate()
            if st.d_in != prev_d:
                raise ConfigError(f"stage {i}: d_in={st.d_in} but previous width is {prev_d}")
            if prev_n is not None and st.n_points_out > prev_n:
                raise ConfigError(f"stage {i}: samples {st.n_points_out} points from {prev_n}")
            if prev_n is not None and st.k > prev_n:
                raise ConfigError(f"stage {i}: k={st.k} exceeds the {prev_n} available points")
            if (st.pre_repeats or st.pos_repeats) and st.d_out % self.bottleneck_r:
                raise ConfigError(f"stage {i}: width {st.d_out} not divisible by r={self.bottleneck_r}")
            prev_d, prev_n = st.d_out, st.n_points_out
        return self

    @property
    def min_points(self):
        """Smallest input cloud this architecture accepts."""
        first = self.stages[0]
        return max(first.n_points_out, first.k)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["stages"] = [StageSpec(**s) for s in d["stages"]]
        return cls(**d).validate()

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def default_config(variant="full", num_classes=40, depth=None, points=1024, k=24,
                   dims_divisor=1, affine=True, pre_repeats=None, pos_repeats=None,
                   fps_seed="first", dropout=0.5):
    """Build a four-stage configuration.

    ``depth`` in {24, 40, 56} sets uniform block repeats; explicit
    ``pre_repeats``/``pos_repeats`` (int or 4-list) override it. Channel
    widths (embedding, stages, classifier hidden layers) are divided by
    ``dims_divisor``; point budgets halve each stage starting from ``points``
    and each stage's ``k`` is capped at the number of points it receives.
    """
    if variant == "full":
        embed, r = 64, 1
        default_pre = default_pos = [2, 2, 2, 2]
    elif variant == "elite":
        embed, r = 32, 4
        default_pre = default_pos = [1, 1, 1, 0]
    else:
        raise ConfigError(f"unknown variant {variant!r}")
    if depth is not None:
        if depth not in DEPTH_REPEATS:
            raise ConfigError(f"depth must be one of {sorted(DEPTH_REPEATS)}, got {depth}")
        default_pre = default_pos = [DEPTH_REPEATS[depth]] * 4

    def as_list(v, default):
        if v is None:
            return list(default)
        if isinstance(v, int):
            return [v] * 4
        if len(v) != 4:
            raise ConfigError("repeat lists need four entries")
        return list(v)

    pre = as_list(pre_repeats, default_pre)
    pos = as_list(pos_repeats, default_pos)
    if embed % dims_divisor:
        raise ConfigError(f"embedding width {embed} not divisible by {dims_divisor}")
    embed //= dims_divisor
    widths = [embed * 2 ** i for i in range(5)]
    stages = []
    n = points
    for i in range(4):
        n_in, n = n, n // 2
        stages.append(StageSpec(n_points_out=n, k=min(k, n_in), d_in=widths[i], d_out=widths[i + 1],
                                pre_repeats=pre[i], pos_repeats=pos[i], affine_enabled=affine))
    head = [max(1, 512 // dims_divisor), max(1, 256 // dims_divisor)]
    return ModelConfig(embed_dim=embed, stages=stages, num_classes=num_classes, variant=variant,
                       bottleneck_r=r, classifier_widths=head, dropout=dropout,
                       fps_seed=fps_seed).validate()


def count_layers(config):
    """Learnable-layer count: ``1 + sum_i (1 + 2 Pre_i + 2 Pos_i) + 3``."""
    return 1 + sum(1 + 2 * s.pre_repeats + 2 * s.pos_repeats for s in config.stages) + 3


# --------------------------------------------------------------------------
# layers


class Linear:
    def __init__(self, d_in, d_out, rng, dtype=np.float32):
        bound = np.sqrt(1.0 / d_in)
        self.weight = Tensor(rng.uniform(-bound, bound, (d_in, d_out)), requires_grad=True, dtype=dtype)
        self.bias = Tensor(rng.uniform(-bound, bound, d_out), requires_grad=True, dtype=dtype)

    def __call__(self, x):
        return fc(x, self.weight, self.bias)

    def param_slots(self, prefix):
        yield f"{prefix}.weight", self, "weight"
        yield f"{prefix}.bias", self, "bias"


class BatchNorm:
    def __init__(self, channels, dtype=np.float32):
        self.state = BatchNormState(channels, dtype=dtype)

    def __call__(self, x, training):
        return batch_norm(x, self.state, training)

    def param_slots(self, prefix):
        yield f"{prefix}.gamma", self.state, "gamma"
        yield f"{prefix}.beta", self.state, "beta"

    def named_buffers(self, prefix):
        yield f"{prefix}.running_mean", self.state.running_mean
        yield f"{prefix}.running_var", self.state.running_var


class AffineParams:
    """Channelwise scale (alpha) and shift (beta) of the geometric affine module."""

    def __init__(self, d, eps=AFFINE_EPS, dtype=np.float32):
        self.alpha = Tensor(np.ones(d), requires_grad=True, dtype=dtype)
        self.beta = Tensor(np.zeros(d), requires_grad=True, dtype=dtype)
        self.eps = eps

    def param_slots(self, prefix):
        yield f"{prefix}.alpha", self, "alpha"
        yield f"{prefix}.beta", self, "beta"


def geometric_affine(grouped, centroid_feats, params):
    """Normalise neighbour features around their centroid.

    ``grouped`` is ``[..., N_s, K, d]`` and ``centroid_feats`` ``[..., N_s, d]``.
    The deviation scale sigma is a single scalar per cloud: the RMS of all
    centroid-relative offsets over groups, neighbours and channels. The
    result is ``alpha * (f_ij - f_i) / (sigma + eps) + beta``.
    """
    g = grouped if isinstance(grouped, Tensor) else Tensor(grouped)
    c = centroid_feats if isinstance(centroid_feats, Tensor) else Tensor(centroid_feats)
    if g.data.ndim < 3 or c.shape != g.shape[:-2] + g.shape[-1:]:
        raise ShapeError(f"geometric_affine: grouped {g.shape} vs centroids {c.shape}")
    d = g.shape[-1]
    alpha, beta = params.alpha, params.beta
    if alpha.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"geometric_affine: alpha/beta must have length {d}")
    dev = g.data - c.data[..., None, :]
    m = int(np.prod(dev.shape[-3:]))
    axes = (-3, -2, -1)
    sigma = np.sqrt((dev * dev).sum(axis=axes, keepdims=True) / m)
    s = sigma + params.eps
    u = dev / s
    y = alpha.data * u + beta.data

    def grad_fn(gy):
        lead = tuple(range(gy.ndim - 1))
        galpha = (gy * u).sum(axis=lead) if alpha.requires_grad else None
        gbeta = gy.sum(axis=lead) if beta.requires_grad else None
        gu = gy * alpha.data
        proj = (gu * dev).sum(axis=axes, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            coef = np.where(sigma > 0, proj / (s * s * m * sigma), 0.0)
        gdev = (gu / s - coef * dev).astype(gy.dtype)
        gg = gdev if g.requires_grad else None
        gc = -gdev.sum(axis=-2) if c.requires_grad else None
        return gg, gc, galpha, gbeta

    return custom_op("geometric_affine", (g, c, alpha, beta), y.astype(g.dtype), grad_fn)


class ResidualBlock:
    """``x + relu(bn(fc(relu(bn(fc(x))))))`` with an optional d -> d/r bottleneck."""

    def __init__(self, d, r, rng, dtype=np.float32):
        if d % r:
            raise ConfigError(f"width {d} not divisible by bottleneck factor {r}")
        mid = d // r
        self.d = d
        self.fc1 = Linear(d, mid, rng, dtype)
        self.bn1 = BatchNorm(mid, dtype)
        self.fc2 = Linear(mid, d, rng, dtype)
        self.bn2 = BatchNorm(d, dtype)

    def __call__(self, x, training):
        h = relu(self.bn1(self.fc1(x), training))
        h = relu(self.bn2(self.fc2(h), training))
        return add(h, x)

    def layers(self):
        return [self.fc1, self.fc2]

    def param_slots(self, prefix):
        yield from self.fc1.param_slots(f"{prefix}.fc1")
        yield from self.bn1.param_slots(f"{prefix}.bn1")
        yield from self.fc2.param_slots(f"{prefix}.fc2")
        yield from self.bn2.param_slots(f"{prefix}.bn2")

    def named_buffers(self, prefix):
        yield from self.bn1.named_buffers(f"{prefix}.bn1")
        yield from self.bn2.named_buffers(f"{prefix}.bn2")


def residual_block(x, block, training=True):
    if x.shape[-1] != block.d:
        raise ShapeError(f"residual block expects width {block.d}, got {x.shape[-1]}")
    return block(x, training)


class Stage:
    def __init__(self, spec, r, rng, dtype=np.float32):
        self.spec = spec
        self.affine = AffineParams(spec.d_in, dtype=dtype) if spec.affine_enabled else None
        self.lift = Linear(spec.d_in, spec.d_out, rng, dtype)
        self.pre = [ResidualBlock(spec.d_out, r, rng, dtype) for _ in range(spec.pre_repeats)]
        self.pos = [ResidualBlock(spec.d_out, r, rng, dtype) for _ in range(spec.pos_repeats)]

    def layers(self):
        out = [self.lift]
        for blk in self.pre + self.pos:
            out.extend(blk.layers())
        return out

    def param_slots(self, prefix):
        if self.affine is not None:
            yield from self.affine.param_slots(f"{prefix}.affine")
        yield from self.lift.param_slots(f"{prefix}.lift")
        for i, blk in enumerate(self.pre):
            yield from blk.param_slots(f"{prefix}.pre.{i}")
        for i, blk in enumerate(self.pos):
            yield from blk.param_slots(f"{prefix}.pos.{i}")

    def named_buffers(self, prefix):
        for i, blk in enumerate(self.pre):
            yield from blk.named_buffers(f"{prefix}.pre.{i}")
        for i, blk in enumerate(self.pos):
            yield from blk.named_buffers(f"{prefix}.pos.{i}")


def stage_groupings(coords, spec, fps_seed="first", backend=None):
    """FPS + kNN for a batch of clouds ``[B, N, 3]``: returns (centroid_idx, neighbor_idx)."""
    b = coords.shape[0]
    cidx = np.empty((b, spec.n_points_out), dtype=np.int64)
    nidx = np.empty((b, spec.n_points_out, spec.k), dtype=np.int64)
    for i in range(b):
        seed = centroid_seed(coords[i]) if fps_seed == "centroid" else 0
        cidx[i] = farthest_point_sample(coords[i], spec.n_points_out, seed, backend=backend)
        nidx[i] = knn(coords[i], cidx[i], spec.k, backend=backend)
    return cidx, nidx


def stage_forward(feats, coords, stage, training=False, fps_seed="first", grouping=None):
    """One sample -> group -> affine -> lift -> pre-blocks -> max -> pos-blocks round.

    ``feats`` is ``[N, d_in]`` or batched ``[B, N, d_in]`` with matching
    ``coords``. ``grouping`` optionally supplies precomputed
    ``(centroid_idx, neighbor_idx)``. Returns ``(coords_out, feats_out)``.
    """
    feats = feats if isinstance(feats, Tensor) else Tensor(feats)
    coords = np.asarray(coords)
    batched = coords.ndim == 3
    if not batched:
        coords = coords[None]
        feats = _unsqueeze(feats)
    spec = stage.spec
    if spec.n_points_out > coords.shape[1]:
        raise ShapeError(f"stage samples {spec.n_points_out} from only {coords.shape[1]} points")
    if grouping is None:
        cidx, nidx = stage_groupings(coords, spec, fps_seed)
    else:
        cidx, nidx = (np.asarray(a) for a in grouping)
        if not batched:
            cidx, nidx = cidx[None], nidx[None]
    x = gather_rows(feats, nidx)
    if stage.affine is not None:
        cf = gather_rows(feats, cidx)
        x = geometric_affine(x, cf, stage.affine)
    x = stage.lift(x)
    for blk in stage.pre:
        x = blk(x, training)
    x = max_over_neighbors(x)
    for blk in stage.pos:
        x = blk(x, training)
    coords_out = np.take_along_axis(coords, cidx[..., None], axis=1)
    if not batched:
        return coords_out[0], _squeeze(x)
    return coords_out, x


def _unsqueeze(t):
    return custom_op("unsqueeze", (t,), t.data[None], lambda g: (g[0],))


def _squeeze(t):
    return custom_op("squeeze", (t,), t.data[0], lambda g: (g[None],))


# --------------------------------------------------------------------------
# full network


class Model:
    def __init__(self, config, rng=0, dtype=np.float32):
        config.validate()
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        self.config = config
        self.dtype = dtype
        self.embed = Linear(3, config.embed_dim, rng, dtype)
        self.embed_bn = BatchNorm(config.embed_dim, dtype)
        self.stages = [Stage(s, config.bottleneck_r, rng, dtype) for s in config.stages]
        widths = [config.stages[-1].d_out] + list(config.classifier_widths)
        self.head = [Linear(a, b, rng, dtype) for a, b in zip(widths[:-1], widths[1:])]
        self.head_bn = [BatchNorm(w, dtype) for w in config.classifier_widths]
        self.out = Linear(widths[-1], config.num_classes, rng, dtype)
        self.dropout_rng = np.random.default_rng(rng.integers(2 ** 63))

    # -- structure ---------------------------------------------------------

    def layers(self):
        """Learnable (FC) layers in forward order; BN/activations are not counted."""
        out = [self.embed]
        for st in self.stages:
            out.extend(st.layers())
        return out + self.head + [self.out]

    def param_slots(self):
        """``(name, owner, attribute)`` for every learnable tensor, in a fixed order."""
        yield from self.embed.param_slots("embed.fc")
        yield from self.embed_bn.param_slots("embed.bn")
        for i, st in enumerate(self.stages):
            yield from st.param_slots(f"stages.{i}")
        for i, (lin, bn) in enumerate(zip(self.head, self.head_bn)):
            yield from lin.param_slots(f"head.{i}.fc")
            yield from bn.param_slots(f"head.{i}.bn")
        yield from self.out.param_slots("head.out")

    def named_parameters(self):
        for name, owner, attr in self.param_slots():
            yield name, getattr(owner, attr)

    def set_parameter(self, name, tensor):
        """Rebind parameter ``name`` to another Tensor object (used by gradient checks)."""
        for n, owner, attr in self.param_slots():
            if n == name:
                if tensor.shape != getattr(owner, attr).shape:
                    raise ShapeError(f"{name}: shape {tensor.shape} vs {getattr(owner, attr).shape}")
                setattr(owner, attr, tensor)
                return
        raise KeyError(name)

    def named_buffers(self):
        yield from self.embed_bn.named_buffers("embed.bn")
        for i, st in enumerate(self.stages):
            yield from st.named_buffers(f"stages.{i}")
        for i, bn in enumerate(self.head_bn):
            yield from bn.named_buffers(f"head.{i}.bn")

    def batch_norms(self):
        out = [self.embed_bn]
        for st in self.stages:
            for blk in st.pre + st.pos:
                out.extend([blk.bn1, blk.bn2])
        return out + self.head_bn

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def no_decay_names(self):
        """Parameters exempt from weight decay: BN gamma/beta and affine alpha/beta."""
        return {n for n, _ in self.named_parameters()
                if n.endswith((".gamma", ".beta", ".alpha"))}

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    # -- state -------------------------------------------------------------

    def state_dict(self):
        out = {n: p.data for n, p in self.named_parameters()}
        for n, b in self.named_buffers():
            out[n] = b
        return out

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        expected = set(params) | {n for n, _ in self.named_buffers()}
        if set(state) != expected:
            missing = sorted(expected - set(state))[:3]
            extra = sorted(set(state) - expected)[:3]
            raise ShapeError(f"checkpoint does not match model (missing {missing}, unexpected {extra})")
        for n, p in params.items():
            if state[n].shape != p.shape:
                raise ShapeError(f"{n}: checkpoint shape {state[n].shape} vs model {p.shape}")
            p.data = np.array(state[n], dtype=self.dtype)
        for bn, prefix in self._bn_prefixes():
            bn.state.running_mean = np.array(state[f"{prefix}.running_mean"], dtype=self.dtype)
            bn.state.running_var = np.array(state[f"{prefix}.running_var"], dtype=self.dtype)

    def _bn_prefixes(self):
        yield self.embed_bn, "embed.bn"
        for i, st in enumerate(self.stages):
            for j, blk in enumerate(st.pre):
                yield blk.bn1, f"stages.{i}.pre.{j}.bn1"
                yield blk.bn2, f"stages.{i}.pre.{j}.bn2"
            for j, blk in enumerate(st.pos):
                yield blk.bn1, f"stages.{i}.pos.{j}.bn1"
                yield blk.bn2, f"stages.{i}.pos.{j}.bn2"
        for i, bn in enumerate(self.head_bn):
            yield bn, f"head.{i}.bn"

    def astype(self, dtype):
        """Copy of this model with parameters and running stats cast to ``dtype``."""
        twin = Model.__new__(Model)
        twin.__dict__.update(_deep_cast(self.__dict__, dtype))
        twin.dtype = dtype
        return twin

    # -- forward -----------------------------------------------------------

    def forward(self, coords, training=False, fps_seed=None, dropout_rng=None):
        """Logits ``[B, num_classes]`` for a batch of clouds ``[B, N, 3]``."""
        coords = np.asarray(coords, dtype=self.dtype)
        if coords.ndim != 3 or coords.shape[-1] != 3:
            raise ShapeError(f"expected [B, N, 3] coordinates, got {coords.shape}")
        if coords.shape[1] < self.config.min_points:
            raise ShapeError(f"cloud has {coords.shape[1]} points, model needs {self.config.min_points}")
        seed_mode = fps_seed or self.config.fps_seed
        x = relu(self.embed_bn(self.embed(Tensor(coords, dtype=self.dtype)), training))
        for st in self.stages:
            coords, x = stage_forward(x, coords, st, training, seed_mode)
        x = max_over_neighbors(x)
        rng = dropout_rng if dropout_rng is not None else self.dropout_rng
        for lin, bn in zip(self.head, self.head_bn):
            x = relu(bn(lin(x), training))
            x = dropout(x, self.config.dropout, rng, training)
        return self.out(x)

    __call__ = forward


def _deep_cast(obj, dtype):
    if isinstance(obj, Tensor):
        t = Tensor(obj.data, requires_grad=obj.requires_grad, dtype=dtype, name=obj.name)
        return t
    if isinstance(obj, np.ndarray) and np.issubdtype(obj.dtype, np.floating):
        return obj.astype(dtype)
    if isinstance(obj, list):
        return [_deep_cast(o, dtype) for o in obj]
    if isinstance(obj, dict):
        return {k: _deep_cast(v, dtype) for k, v in obj.items()}
    if isinstance(obj, (Linear, BatchNorm, AffineParams, ResidualBlock, Stage, BatchNormState)):
        twin = type(obj).__new__(type(obj))
        twin.__dict__.update(_deep_cast(obj.__dict__, dtype))
        return twin
    return obj


def build_model(config, rng=0, dtype=np.float32):
    return Model(config, rng, dtype)


def count_params(model):
    """Total learnable scalars (running statistics excluded)."""
    return int(sum(p.size for p in model.parameters()))


def walk_layers(model):
    return len(model.layers())


def classify(model, cloud, training=False, fps_seed=None):
    """Logits ``[num_classes]`` for a single :class:`PointCloud` (or ``[N, 3]`` array)."""
    coords = getattr(cloud, "coords", cloud)
    coords = np.asarray(coords)
    if coords.shape[0] < model.config.min_points:
        raise ShapeError(f"cloud has {coords.shape[0]} points, model needs {model.config.min_points}")
    if training:
        logits = model.forward(coords[None], training=True, fps_seed=fps_seed)
    else:
        with no_grad():
            logits = model.forward(coords[None], training=False, fps_seed=fps_seed)
    return Tensor(logits.data[0], dtype=logits.dtype) if not logits.requires_grad else _squeeze(logits)
