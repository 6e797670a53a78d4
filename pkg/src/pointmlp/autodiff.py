"""A small define-by-run reverse-mode autodiff engine.

Only the operators the point-MLP network needs are provided: affine maps,
batch normalisation, ReLU, max over the neighbour axis, row gathering,
residual addition, dropout and softmax cross-entropy. Tensors wrap numpy
arrays (float32 by default; float64 is used for gradient checking).
"""

import contextlib
import itertools
import threading
import weakref

import numpy as np

from .errors import NonFiniteError, ShapeError
from .kernels import scatter_add_rows

_seq = itertools.count()
_state = threading.local()


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, optimizer updates)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _trace_kink(arr):
    """Record a piecewise-linear selection (ReLU mask, argmax) when tracing is on."""
    trace = getattr(_state, "kinks", None)
    if trace is not None:
        trace.append(arr.copy())


@contextlib.contextmanager
def _kink_trace():
    prev = getattr(_state, "kinks", None)
    _state.kinks = trace = []
    try:
        yield trace
    finally:
        _state.kinks = prev


def _same_kinks(a, b):
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


class Node:
    __slots__ = ("op", "inputs", "_output", "out_id", "backward_fn", "seq")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        # weak: a strong back-reference would make every graph a GC cycle
        self._output = weakref.ref(output)
        self.out_id = id(output)
        self.backward_fn = backward_fn
        self.seq = next(_seq)

    @property
    def output(self):
        return self._output()

    def __repr__(self):
        return f"Node({self.op}, seq={self.seq})"


class Tensor:
    """Dense array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=np.float32, name=None):
        arr = np.asarray(data, dtype=dtype)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _colsum(a):
    """Column sums of a 2-D array via GEMV (much faster than ``sum(axis=0)``)."""
    return np.ones(a.shape[0], dtype=a.dtype) @ a


def _check_finite(arr, op):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {op}")


def _record(data, op, inputs, backward_fn):
    out = Tensor(data, dtype=data.dtype)
    if grad_enabled() and any(t is not None and t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, out, backward_fn)
    return out


class Graph:
    """Nodes reachable from an output, kept in insertion (creation) order."""

    def __init__(self, nodes=()):
        self.nodes = sorted(nodes, key=lambda n: n.seq)

    @classmethod
    def trace(cls, output):
        seen = set()
        nodes = []
        stack = [output.node] if output.node is not None else []
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            for t in node.inputs:
                if t is not None and t.node is not None:
                    stack.append(t.node)
        return cls(nodes)

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss, graph=None, retain_intermediate=True):
    """Populate ``.grad`` on every requires-grad tensor that ``loss`` depends on.

    Leaf gradients accumulate across calls; intermediate gradients are
    overwritten (or skipped when ``retain_intermediate`` is false, which the
    training loop uses to save memory). Nodes are visited in exact reverse
    insertion order.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if graph is None:
        graph = Graph.trace(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(node.out_id, None)
        if g is None:
            continue
        if retain_intermediate and node.output is not None:
            node.output.grad = g
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if t is None or gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    # whatever remains belongs to leaves
    leaves = {}
    for node in graph.nodes:
        for t in node.inputs:
            if t is not None and t.node is None and t.requires_grad:
                leaves[id(t)] = t
    if loss.node is None and loss.requires_grad:
        leaves[id(loss)] = loss
    for key, t in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        t.grad = g.astype(t.dtype, copy=True) if t.grad is None else t.grad + g


# --------------------------------------------------------------------------
# operators


def fc(x, weight, bias=None):
    """Affine map over the last axis: ``x @ weight + bias``."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if weight.data.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"fc: input {x.shape} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"fc: bias {bias.shape} does not match weight {weight.shape}")
    d_in, d_out = weight.shape
    # 2-D GEMM: numpy treats leading axes of an N-D matmul as a batch of small products
    x2 = x.data.reshape(-1, d_in)
    with np.errstate(invalid="ignore", over="ignore"):  # reported by _check_finite below
        y2 = x2 @ weight.data
        if bias is not None:
            y2 += bias.data
    y = y2.reshape(x.shape[:-1] + (d_out,))
    _check_finite(y, "fc")

    def grad_fn(g):
        g2 = g.reshape(-1, d_out)
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        gb = _colsum(g2) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    return _record(y, "fc", (x, weight, bias), grad_fn)


class BatchNormState:
    """Learnable scale/shift plus running statistics for one channel axis."""

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        if not 0.0 < momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        self.gamma = Tensor(np.ones(channels), requires_grad=True, dtype=dtype)
        self.beta = Tensor(np.zeros(channels), requires_grad=True, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    @property
    def channels(self):
        return self.gamma.shape[0]


def batch_norm(x, state, training):
    """Normalise over every axis but the last (channel) axis."""
    x = _as_tensor(x)
    c = state.channels
    if x.shape[-1] != c:
        raise ShapeError(f"batch_norm: {x.shape[-1]} channels, state has {c}")
    n = x.size // c if c else 0
    if n == 0:
        raise ShapeError("batch_norm: empty batch")
    gamma, beta = state.gamma, state.beta
    x2 = x.data.reshape(-1, c)

    if training:
        mean = _colsum(x2) / n
        xhat = x2 - mean
        var = _colsum(xhat * xhat) / n
        inv_std = 1.0 / np.sqrt(var + state.eps)
        xhat *= inv_std
        m = state.momentum
        unbiased = var * (n / (n - 1)) if n > 1 else var
        state.running_mean = ((1 - m) * state.running_mean + m * mean).astype(state.running_mean.dtype)
        state.running_var = ((1 - m) * state.running_var + m * unbiased).astype(state.running_var.dtype)
    else:
        inv_std = (1.0 / np.sqrt(state.running_var + state.eps)).astype(x.dtype)
        xhat = (x2 - state.running_mean) * inv_std
    y = (xhat * gamma.data + beta.data).reshape(x.shape)
    _check_finite(y, "batch_norm")

    def grad_fn(g):
        g2 = g.reshape(-1, c)
        gxh = _colsum(g2 * xhat)
        gsum = _colsum(g2)
        ggamma = gxh if gamma.requires_grad else None
        gbeta = gsum if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            scale = gamma.data * inv_std
            if training:
                gx = (scale / n) * (n * g2 - gsum - xhat * gxh)
            else:
                gx = g2 * scale
            gx = gx.reshape(x.shape)
        return gx, ggamma, gbeta

    return _record(y, "batch_norm", (x, gamma, beta), grad_fn)


def relu(x):
    x = _as_tensor(x)
    y = np.maximum(x.data, 0)
    _trace_kink(y > 0)

    def grad_fn(g):
        # y > 0 exactly where x > 0; the subgradient at 0 is 0
        return (g * (y > 0),)

    return _record(y, "relu", (x,), grad_fn)


def max_over_neighbors(x):
    """Max over the second-to-last axis: ``[..., K, d] -> [..., d]``.

    Backward routes each output gradient to the first argmax.
    """
    x = _as_tensor(x)
    if x.data.ndim < 2:
        raise ShapeError("max_over_neighbors needs at least 2 dimensions")
    if x.shape[-2] == 0:
        raise ShapeError("max_over_neighbors: empty neighbour axis")
    arg = np.argmax(x.data, axis=-2)[..., None, :]
    _trace_kink(arg)
    y = np.take_along_axis(x.data, arg, axis=-2)[..., 0, :]

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, arg, g[..., None, :], axis=-2)
        return (gx,)

    return _record(y, "max_over_neighbors", (x,), grad_fn)


def gather_rows(x, idx):
    """Row gather ``out[m, ...] = x[idx[m, ...]]``.

    ``x`` is (N, d) with any-shaped ``idx``, or batched (B, N, d) with ``idx``
    of shape (B, ...). Backward scatter-adds, so duplicate indices accumulate.
    """
    x = _as_tensor(x)
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("gather_rows: indices must be integers")
    if x.data.ndim == 2:
        n = x.shape[0]
        flat = idx.reshape(-1)
    elif x.data.ndim == 3:
        b, n = x.shape[:2]
        if idx.shape[0] != b:
            raise ShapeError(f"gather_rows: batch {b} vs index batch {idx.shape[0]}")
        flat = (idx.reshape(b, -1) + (np.arange(b) * n)[:, None]).reshape(-1)
    else:
        raise ShapeError("gather_rows expects (N, d) or (B, N, d) input")
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather_rows: index out of range [0, {n})")
    d = x.shape[-1]
    rows = x.data.reshape(-1, d)
    y = rows[flat].reshape(idx.shape + (d,))

    def grad_fn(g):
        gx = scatter_add_rows(rows.shape[0], flat, g.reshape(-1, d))
        return (gx.reshape(x.shape),)

    return _record(y, "gather_rows", (x,), grad_fn)


def add(a, b):
    """Residual addition of two same-shaped tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    y = a.data + b.data

    def grad_fn(g):
        return g, g

    return _record(y, "add", (a, b), grad_fn)


def tsum(x):
    x = _as_tensor(x)
    y = np.asarray(x.data.sum(), dtype=x.dtype)

    def grad_fn(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _record(y, "sum", (x,), grad_fn)


def weighted_sum(x, w):
    """``sum(x * w)`` for a constant array ``w``; used to scalarise outputs."""
    x = _as_tensor(x)
    w = np.asarray(w, dtype=x.dtype)
    y = np.asarray((x.data * w).sum(), dtype=x.dtype)

    def grad_fn(g):
        return (g * w,)

    return _record(y, "weighted_sum", (x,), grad_fn)


def dropout(x, p, rng, training):
    """Inverted dropout; identity when not training or ``p == 0``."""
    x = _as_tensor(x)
    if not training or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    y = x.data * keep

    def grad_fn(g):
        return (g * keep,)

    return _record(y, "dropout", (x,), grad_fn)


def log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits):
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape}, labels {labels.shape}")
    b, c = logits.shape
    if b == 0:
        raise ShapeError("softmax_cross_entropy: empty batch")
    if labels.min() < 0 or labels.max() >= c:
        raise IndexError("softmax_cross_entropy: label out of range")
    logp = log_softmax(logits.data)
    rows = np.arange(b)
    loss = np.asarray(-logp[rows, labels].mean(), dtype=logits.dtype)
    _check_finite(loss, "softmax_cross_entropy")

    def grad_fn(g):
        probs = np.exp(logp)
        probs[rows, labels] -= 1.0
        return (probs * (g / b),)

    return _record(loss, "softmax_cross_entropy", (logits,), grad_fn)


def custom_op(name, inputs, value, grad_fn):
    """Record an op defined elsewhere (e.g. a fused model layer)."""
    return _record(value, name, tuple(inputs), grad_fn)


# --------------------------------------------------------------------------
# gradient checking


def grad_check(f, x, h=1e-3, seed=0, n_coords=None, skip_kinks=False, stats=None):
    """Max relative error between analytic and central-difference gradients.

    ``x`` is a Tensor or a list of Tensors; ``f`` is called as ``f(*xs)`` on
    float64 copies and may return a tensor of any shape (non-scalar outputs
    are reduced with a fixed random projection). The error per coordinate is
    ``|analytic - numeric| / max(1, |numeric|)``. ``n_coords`` limits the
    check to that many randomly chosen coordinates per input.

    With ``skip_kinks`` a coordinate is only compared when both the ``+h``
    and ``-h`` evaluations keep every ReLU sign and every max argmax of the
    base evaluation, i.e. the difference quotient never straddles a kink.
    ``stats`` (a dict) receives the ``checked`` and ``skipped`` counts.
    """
    single = isinstance(x, Tensor)
    xs = [x] if single else list(x)
    xs = [Tensor(t.data, requires_grad=True, dtype=np.float64) for t in xs]
    rng = np.random.default_rng(seed)

    with _kink_trace() as base_kinks:
        out = f(*xs)
    proj = None
    if out.size != 1:
        proj = rng.standard_normal(out.shape)

    def scalar(o):
        return weighted_sum(o, proj) if proj is not None else o

    def evaluate():
        with _kink_trace() as kinks:
            val = float(scalar(f(*xs)).data)
        return val, kinks

    backward(scalar(out))
    worst = 0.0
    checked = skipped = 0
    for t in xs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if n_coords is not None and n_coords < flat.size:
            coords = rng.choice(flat.size, size=n_coords, replace=False)
        with no_grad():
            for i in coords:
                orig = flat[i]
                flat[i] = orig + h
                up, k_up = evaluate()
                flat[i] = orig - h
                down, k_down = evaluate()
                flat[i] = orig
                if skip_kinks and not (_same_kinks(k_up, base_kinks) and _same_kinks(k_down, base_kinks)):
                    skipped += 1
                    continue
                checked += 1
                num = (up - down) / (2 * h)
                err = abs(analytic.reshape(-1)[i] - num) / max(1.0, abs(num))
                worst = max(worst, err)
    if stats is not None:
        stats.update(checked=checked, skipped=skipped)
    return worst
