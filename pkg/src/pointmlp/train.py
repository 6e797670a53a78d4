"""Nesterov SGD, cosine schedule, the training loop, metrics and voting evaluation."""

import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import backward, no_grad, softmax, softmax_cross_entropy
from .data import batch_iter
from .errors import ConfigError, NonFiniteError
from .geometry import AugmentConfig, draw_augmentation
from .rng import Xoshiro256

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 32
    lr_max: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 2e-4
    seed: int = 0
    voting_repeats: int = 1
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def validate(self):
        if self.lr_max < 0:
            raise ConfigError("lr_max must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.epochs < 0 or self.batch_size < 1 or self.voting_repeats < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1 and voting_repeats >= 1 required")
        return self


@dataclass
class Metrics:
    overall_acc: float
    class_mean_acc: float
    confusion: np.ndarray

    @property
    def per_class_recall(self):
        counts = self.confusion.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(counts > 0, np.diag(self.confusion) / counts, np.nan)


def compute_metrics(y_true, y_pred, num_classes):
    """OA, mAcc (mean recall over classes that have samples) and the confusion matrix."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.size == 0:
        raise ValueError("cannot score an empty prediction set")
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(conf, (y_true, y_pred), 1)
    counts = conf.sum(axis=1)
    present = counts > 0
    recalls = np.diag(conf)[present] / counts[present]
    return Metrics(float(np.trace(conf) / conf.sum()), float(recalls.mean()), conf)


def cosine_lr(t, total, lr_max):
    """``0.5 * lr_max * (1 + cos(pi * t / total))``; annealed to 0 at ``t == total``."""
    if total <= 0:
        return lr_max
    if not 0 <= t <= total:
        raise ValueError(f"epoch {t} outside [0, {total}]")
    return 0.5 * lr_max * (1.0 + math.cos(math.pi * t / total))


def sgd_step(params, grads, velocity, lr, momentum, weight_decay, decay_mask=None):
    """In-place Nesterov SGD update.

    For each parameter: ``g' = g + wd * p`` (only where ``decay_mask`` is true),
    ``v = momentum * v + g'``, ``p -= lr * (g' + momentum * v)``. Missing
    gradients count as zero.
    """
    if decay_mask is None:
        decay_mask = [True] * len(params)
    for p, g, v, decay in zip(params, grads, velocity, decay_mask):
        if v.shape != p.shape or (g is not None and g.shape != p.shape):
            raise ValueError(f"shape mismatch: param {p.shape}, grad {None if g is None else g.shape}, velocity {v.shape}")
        step = np.zeros_like(p) if g is None else g.astype(p.dtype, copy=True)
        if decay and weight_decay:
            step += weight_decay * p
        v *= momentum
        v += step
        p -= lr * (step + momentum * v)


class SGD:
    """Nesterov SGD over a model's parameters; BN and affine params skip weight decay."""

    def __init__(self, model, momentum=0.9, weight_decay=2e-4):
        named = list(model.named_parameters())
        skip = model.no_decay_names()
        self.names = [n for n, _ in named]
        self.params = [p for _, p in named]
        self.decay = [n not in skip for n in self.names]
        self.velocity = [np.zeros_like(p.data) for p in self.params]
        self.momentum = momentum
        self.weight_decay = weight_decay

    def step(self, lr):
        sgd_step([p.data for p in self.params], [p.grad for p in self.params], self.velocity,
                 lr, self.momentum, self.weight_decay, self.decay)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def augment_batch(coords, cfg, rng):
    """Apply an independent scale+shift draw to each cloud in ``[B, N, 3]``."""
    out = np.empty_like(coords)
    for i in range(coords.shape[0]):
        scale, shift = draw_augmentation(cfg, rng)
        out[i] = (coords[i].astype(np.float64) * scale + shift).astype(coords.dtype)
    return out


def epoch_rng(seed, epoch):
    return Xoshiro256((seed * 0x9E3779B1 + epoch) & ((1 << 64) - 1))


def train_epoch(model, ds, cfg, epoch_idx, rng=None, optimizer=None):
    """One pass over ``ds``; returns the mean per-sample training loss."""
    if rng is None:
        rng = epoch_rng(cfg.seed, epoch_idx)
    if optimizer is None:
        optimizer = SGD(model, cfg.momentum, cfg.weight_decay)
    lr = cosine_lr(epoch_idx, cfg.epochs, cfg.lr_max)
    dropout_rng = np.random.default_rng([cfg.seed, epoch_idx])
    total, count = 0.0, 0
    for batch in batch_iter(ds, cfg.batch_size, shuffle=True, rng=rng):
        coords = augment_batch(batch.coords, cfg.augment, rng)
        optimizer.zero_grad()
        try:
            logits = model.forward(coords, training=True, dropout_rng=dropout_rng)
            loss = softmax_cross_entropy(logits, batch.labels)
        except NonFiniteError as exc:
            raise NonFiniteError(f"epoch {epoch_idx}, samples {batch.indices[:8].tolist()}...: {exc}") from exc
        backward(loss, retain_intermediate=False)
        if lr:
            optimizer.step(lr)
        total += float(loss.data) * len(batch.labels)
        count += len(batch.labels)
    return total / max(count, 1)


def predict_proba(model, ds, voting_repeats=1, rng=None, aug=None, batch_size=32):
    """Class probabilities per sample, averaged over ``voting_repeats`` copies.

    The first copy is the raw cloud; the rest are drawn from ``aug`` using ``rng``.
    """
    if voting_repeats < 1:
        raise ValueError("voting_repeats must be >= 1")
    aug = aug or AugmentConfig()
    if voting_repeats > 1 and not isinstance(rng, Xoshiro256):
        rng = Xoshiro256(0 if rng is None else int(rng))
    out = []
    with no_grad():
        for batch in batch_iter(ds, batch_size):
            acc = softmax(model.forward(batch.coords, training=False).data.astype(np.float64))
            for _ in range(voting_repeats - 1):
                coords = augment_batch(batch.coords, aug, rng)
                acc = acc + softmax(model.forward(coords, training=False).data.astype(np.float64))
            out.append(acc / voting_repeats)
    return np.concatenate(out) if out else np.zeros((0, ds.num_classes))


def evaluate(model, ds, voting_repeats=1, rng=None, aug=None, batch_size=32):
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    probs = predict_proba(model, ds, voting_repeats, rng, aug, batch_size)
    return compute_metrics(ds.labels, np.argmax(probs, axis=1), ds.num_classes)


def nearest_centroid_baseline(train, test):
    """Classify flattened raw coordinates by the nearest class-mean vector."""
    xtr = train.coords().reshape(len(train), -1).astype(np.float64)
    xte = test.coords().reshape(len(test), -1).astype(np.float64)
    ytr = train.labels
    classes = np.unique(ytr)
    centroids = np.stack([xtr[ytr == c].mean(axis=0) for c in classes])
    d = ((xte[:, None, :] - centroids[None]) ** 2).sum(axis=-1)
    pred = classes[np.argmin(d, axis=1)]
    return compute_metrics(test.labels, pred, test.num_classes)


def fit(model, train_ds, test_ds, cfg, log_path=None, on_epoch=None):
    """Train for ``cfg.epochs`` epochs; returns the list of per-epoch records.

    Each record holds epoch, lr, train_loss, test_OA, test_mAcc and
    wall_seconds; with ``log_path`` they are appended as JSON lines.
    """
    cfg.validate()
    if train_ds.num_classes != model.config.num_classes:
        raise ConfigError(f"dataset has {train_ds.num_classes} classes, model {model.config.num_classes}")
    optimizer = SGD(model, cfg.momentum, cfg.weight_decay)
    history = []
    sink = open(log_path, "a") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            start = time.perf_counter()
            lr = cosine_lr(epoch, cfg.epochs, cfg.lr_max)
            loss = train_epoch(model, train_ds, cfg, epoch, optimizer=optimizer)
            rec = {"epoch": epoch, "lr": lr, "train_loss": loss}
            if test_ds is not None and len(test_ds):
                m = evaluate(model, test_ds, cfg.voting_repeats, rng=cfg.seed, aug=cfg.augment)
                rec["test_OA"] = m.overall_acc
                rec["test_mAcc"] = m.class_mean_acc
            rec["wall_seconds"] = time.perf_counter() - start
            history.append(rec)
            log.info("epoch %d lr %.4f loss %.4f OA %s", epoch, lr, loss, rec.get("test_OA"))
            if sink:
                sink.write(json.dumps(rec) + "\n")
                sink.flush()
            if on_epoch:
                on_epoch(rec)
    finally:
        if sink:
            sink.close()
    return history
