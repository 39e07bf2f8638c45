"""Dense float64 tensors with reverse-mode autodiff, Adam, and LR schedule.

The graph is built eagerly by the op functions below. Ops record a backward
closure only while gradients are enabled and some input requires them, so
inference under `no_grad()` carries no graph. No op mutates its inputs.
"""

from __future__ import annotations

import contextlib
import io
import zipfile

import numpy as np

from .errors import ShapeError, UsageError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, values, requires_grad=False):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.values.shape

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.values)

    def zero_grad(self):
        self.grad = None

    # operator sugar; scalars multiply via scale()
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        """Reverse-accumulate gradients from this scalar into all leaves."""
        if self.values.size != 1:
            raise UsageError("backward: loss must be a scalar tensor")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.values)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def constant(values) -> Tensor:
    return Tensor(values, requires_grad=False)


def parameter(values) -> Tensor:
    return Tensor(values, requires_grad=True)


def _result(values, parents, backward_fn) -> Tensor:
    out = Tensor(values)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        vals = a.values + b.values
    except ValueError as e:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from e

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _result(vals, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        vals = a.values * b.values
    except ValueError as e:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from e

    def bw(g):
        _accum(a, _unbroadcast(g * b.values, a.shape))
        _accum(b, _unbroadcast(g * a.values, b.shape))

    return _result(vals, (a, b), bw)


def divide(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a / b with numpy broadcasting."""
    try:
        vals = a.values / b.values
    except ValueError as e:
        raise ShapeError(f"divide: incompatible shapes {a.shape} and {b.shape}") from e

    def bw(g):
        _accum(a, _unbroadcast(g / b.values, a.shape))
        _accum(b, _unbroadcast(-g * a.values / (b.values * b.values), b.shape))

    return _result(vals, (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def bw(g):
        _accum(x, g * c)

    return _result(x.values * c, (x,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim < 2 or b.values.ndim < 2:
        raise ShapeError("matmul: operands must have at least 2 dimensions")
    try:
        vals = a.values @ b.values
    except ValueError as e:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from e

    def bw(g):
        _accum(a, _unbroadcast(g @ np.swapaxes(b.values, -1, -2), a.shape))
        _accum(b, _unbroadcast(np.swapaxes(a.values, -1, -2) @ g, b.shape))

    return _result(vals, (a, b), bw)


def concat(xs, axis: int) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ShapeError("concat: need at least one input")
    try:
        vals = np.concatenate([x.values for x in xs], axis=axis)
    except ValueError as e:
        raise ShapeError("concat: inputs disagree off the concat axis") from e
    sizes = [x.values.shape[axis] for x in xs]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for x, lo, hi in zip(xs, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(x, g[tuple(idx)])

    return _result(vals, xs, bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.values - x.values.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        _accum(x, y * (g - inner))

    return _result(y, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = x.values.max(axis=axis, keepdims=True)
    z = x.values - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    sm = np.exp(y)

    def bw(g):
        _accum(x, g - sm * g.sum(axis=axis, keepdims=True))

    return _result(y, (x,), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0

    def bw(g):
        _accum(x, g * mask)

    return _result(np.where(mask, x.values, 0.0), (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    v = x.values
    y = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))),
                 np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))

    def bw(g):
        _accum(x, g * y * (1.0 - y))

    return _result(y, (x,), bw)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.values)

    def bw(g):
        _accum(x, g * y)

    return _result(y, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor = None, bias: Tensor = None,
               eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis; optional learned gain/bias of shape (d,)."""
    v = x.values
    mu = v.mean(axis=-1, keepdims=True)
    var = ((v - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (v - mu) * inv
    y = xhat
    if gain is not None:
        y = y * gain.values
    if bias is not None:
        y = y + bias.values
    d = v.shape[-1]
    parents = [x] + [t for t in (gain, bias) if t is not None]

    def bw(g):
        gy = g * gain.values if gain is not None else g
        m1 = gy.mean(axis=-1, keepdims=True)
        m2 = (gy * xhat).mean(axis=-1, keepdims=True)
        _accum(x, (gy - m1 - xhat * m2) * inv)
        if gain is not None:
            _accum(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias is not None:
            _accum(bias, g.reshape(-1, d).sum(axis=0))

    return _result(y, parents, bw)


def dropout(x: Tensor, p: float, training: bool, rng=None) -> Tensor:
    """Inverted dropout: kept units scaled by 1/(1-p); identity when not training."""
    if not (0.0 <= p < 1.0):
        raise UsageError(f"dropout: p must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise UsageError("dropout: rng (or seed) required when training with p > 0")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    mask = (rng.random(x.values.shape) >= p) / (1.0 - p)

    def bw(g):
        _accum(x, g * mask)

    return _result(x.values * mask, (x,), bw)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.values.ndim != 2:
        raise ShapeError("embedding_lookup: table must be 2-d")
    if ids.size and (ids.min() < 0 or ids.max() >= table.values.shape[0]):
        raise ShapeError("embedding_lookup: id out of range")

    def bw(g):
        if table.requires_grad:
            gt = np.zeros_like(table.values)
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.values.shape[1]))
            _accum(table, gt)

    return _result(table.values[ids], (table,), bw)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        _accum(x, np.transpose(g, inv))

    return _result(np.transpose(x.values, axes), (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def bw(g):
        _accum(x, g.reshape(x.values.shape))

    try:
        vals = x.values.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from e
    return _result(vals, (x,), bw)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    vals = x.values.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            _accum(x, np.broadcast_to(g, x.values.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.values.shape).copy())

    return _result(vals, (x,), bw)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.values.size if axis is None else x.values.shape[axis]
    return scale(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def sum_sorted(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Sum along one axis with the addends taken in ascending value order.

    The result depends only on the multiset of values, so any permutation
    along the reduced axis produces a bitwise identical sum. The input is
    made contiguous first because numpy's reduction tree, and therefore its
    rounding, follows memory layout. The gradient is the same as
    reduce_sum's.
    """
    ordered = np.sort(np.ascontiguousarray(x.values), axis=axis)
    vals = np.ascontiguousarray(ordered).sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.values.shape).copy())

    return _result(vals, (x,), bw)


def masked_fill(x: Tensor, mask, value: float) -> Tensor:
    """Replace entries where mask is True by a constant; gradient flows elsewhere."""
    mask = np.asarray(mask, dtype=bool)
    try:
        vals = np.where(mask, value, x.values)
    except ValueError as e:
        raise ShapeError(f"masked_fill: mask shape {mask.shape} vs {x.shape}") from e
    keep = ~np.broadcast_to(mask, x.values.shape)

    def bw(g):
        _accum(x, g * keep)

    return _result(vals, (x,), bw)


def repeat_interleave(x: Tensor, repeats: int, axis: int = 0) -> Tensor:
    """Repeat each slice along axis `repeats` times, copies adjacent."""
    if repeats < 1:
        raise UsageError(f"repeat_interleave: repeats must be >= 1, got {repeats}")
    vals = np.repeat(x.values, repeats, axis=axis)
    shape = x.values.shape

    def bw(g):
        g2 = g.reshape(shape[:axis] + (shape[axis], repeats) + shape[axis + 1:])
        _accum(x, g2.sum(axis=axis + 1))

    return _result(vals, (x,), bw)


def gather_last(x: Tensor, idx) -> Tensor:
    """Pick one entry along the last axis: out[...] = x[..., idx[...]]."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != x.shape[:-1]:
        raise ShapeError(f"gather_last: index shape {idx.shape} vs {x.shape}")
    vals = np.take_along_axis(x.values, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros_like(x.values)
        flat = gx.reshape(-1, gx.shape[-1])
        np.add.at(flat, (np.arange(flat.shape[0]), idx.reshape(-1)), g.reshape(-1))
        _accum(x, gx)

    return _result(vals, (x,), bw)


# ---------------------------------------------------------------------------
# parameter initialization

def xavier_uniform(shape, rng) -> np.ndarray:
    fan_in, fan_out = shape[0], shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------------------
# optimization

class AdamState:
    """First/second moment buffers plus a shared step counter."""

    def __init__(self, params: dict, beta1: float = 0.9, beta2: float = 0.98,
                 eps: float = 1e-9):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = {k: np.zeros_like(p.values) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.values) for k, p in params.items()}


def adam_step(params: dict, state: AdamState, lr: float):
    """One bias-corrected Adam update; clears gradients afterwards."""
    for name, p in params.items():
        if p.grad is None:
            raise UsageError(f"adam_step: parameter '{name}' has no gradient")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = p.grad
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * (g * g)
        mhat = state.m[name] / (1 - b1 ** t)
        vhat = state.v[name] / (1 - b2 ** t)
        p.values -= lr * mhat / (np.sqrt(vhat) + state.eps)
        p.grad = None


def clip_grad_norm(params: dict, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = np.sqrt(total)
    if norm > max_norm and norm > 0:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= factor
    return norm


def lr_schedule(step: int, d_model: int, warmup: int) -> float:
    """Inverse-sqrt schedule with linear warmup."""
    if step < 1:
        raise UsageError(f"lr_schedule: step must be >= 1, got {step}")
    return d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, params: dict):
    """Write parameter arrays to an .npz archive; round-trips bit-exactly.

    Entries are stored with a fixed timestamp and sorted names, so identical
    parameters always produce identical files.
    """
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(params):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(params[name].values))
            zf.writestr(zipfile.ZipInfo(name + ".npy"), buf.getvalue())


def load_checkpoint(path) -> dict:
    with np.load(path) as data:
        return {name: np.array(data[name]) for name in data.files}
