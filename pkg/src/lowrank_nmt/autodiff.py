"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable operation appends one entry to the active :class:`Tape`.
``backward`` walks the tape in reverse, so each recorded node is visited once,
and accumulates gradients into the ``grad`` buffers of leaf tensors.
"""
from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_node_ids = itertools.count()

DEFAULT_DTYPE = np.float32


class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


def set_default_dtype(dtype) -> None:
    global DEFAULT_DTYPE
    DEFAULT_DTYPE = np.dtype(dtype).type


@contextlib.contextmanager
def default_dtype(dtype):
    prev = DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor division is not supported")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)


@dataclass
class TapeEntry:
    output: Tensor
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    entries: list = field(default_factory=list)

    def record(self, output: Tensor, inputs: tuple, backward) -> None:
        self.entries.append(TapeEntry(output, inputs, backward))

    def __len__(self) -> int:
        return len(self.entries)

    def clear(self) -> None:
        self.entries.clear()


_tape = Tape()
_recording = True


def current_tape() -> Tape:
    return _tape


def new_tape() -> Tape:
    """Discard the active tape and start a fresh one."""
    global _tape
    _tape = Tape()
    return _tape


@contextlib.contextmanager
def no_grad():
    global _recording
    prev = _recording
    _recording = False
    try:
        yield
    finally:
        _recording = prev


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _make(data: np.ndarray, inputs: tuple, backward) -> Tensor:
    needs = _recording and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs, dtype=data.dtype)
    if needs:
        _tape.record(out, inputs, backward)
    return out


def backward(loss: Tensor, tape: Tape | None = None) -> dict[int, np.ndarray]:
    """Propagate d(loss) back through the tape.

    Leaf gradients are accumulated into ``.grad``; the returned map holds the
    gradient of every leaf reached, keyed by node id. The tape is cleared.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = _tape if tape is None else tape
    produced = {e.output.node_id for e in tape.entries}
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad and loss.node_id not in produced:
        leaves[loss.node_id] = loss
    for entry in reversed(tape.entries):
        g = grads.pop(entry.output.node_id, None)
        if g is None:
            continue
        for inp, gi in zip(entry.inputs, entry.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node_id in grads:
                grads[inp.node_id] = grads[inp.node_id] + gi
            else:
                grads[inp.node_id] = gi
            if inp.node_id not in produced:
                leaves[inp.node_id] = inp
    result = {}
    for nid, leaf in leaves.items():
        g = grads[nid].astype(leaf.dtype, copy=False).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        result[nid] = g
    tape.clear()
    return result


# ----------------------------------------------------------------------------
# operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), bw)


def _bias_compatible(a: Tensor, b: Tensor) -> bool:
    return b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias vector added to every row."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        return _make(a.data + b.data, (a, b), lambda g: (g, g))
    if _bias_compatible(a, b):
        axes = tuple(range(a.ndim - 1))
        return _make(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=axes)))
    if _bias_compatible(b, a):
        return add(b, a)
    raise DimensionError(f"add needs equal shapes or a row bias, got {a.shape} and {b.shape}")


def add_constant(a: Tensor, c: np.ndarray) -> Tensor:
    """Add a non-differentiable array (masks, position codes) with numpy broadcasting."""
    c = np.asarray(c)
    out = a.data + c
    if out.shape != a.shape:
        raise DimensionError(f"constant of shape {c.shape} changes shape of {a.shape}")
    return _make(out.astype(a.dtype, copy=False), (a,), lambda g: (g,))


def sub(a, b) -> Tensor:
    return add(a, scale(_as_tensor(b), -1.0))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        return scale(a, b)
    if not isinstance(a, Tensor) and np.isscalar(a):
        return scale(b, a)
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        ad, bd = a.data, b.data
        return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))
    if _bias_compatible(a, b):
        ad, bd = a.data, b.data
        axes = tuple(range(a.ndim - 1))
        return _make(ad * bd, (a, b), lambda g: (g * bd, (g * ad).sum(axis=axes)))
    raise DimensionError(f"mul needs equal shapes or a row vector, got {a.shape} and {b.shape}")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * a.dtype.type(c), (a,), lambda g: (g * c,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    y = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return _make(y.astype(a.dtype, copy=False), (a,), lambda g: (g * y * (1.0 - y),))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make(a.data * pos, (a,), lambda g: (g * pos,))


def identity(a: Tensor) -> Tensor:
    return a


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "identity": identity,
    "tanh": tanh,
    "relu": relu,
    "sigmoid": sigmoid,
}


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(np.transpose(a.data, axes)), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a: Tensor, key) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[key] = g
        return (full,)

    return _make(np.ascontiguousarray(a.data[key]), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, bw)


def take_rows(table: Tensor, ids) -> Tensor:
    """Gather rows of a 2-D table; output shape is ``ids.shape + (cols,)``."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"row index out of range for table with {table.shape[0]} rows")
    shape, dtype = table.shape, table.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _make(table.data[ids], (table,), bw)


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.asarray(a.data.sum(), dtype=a.dtype), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def tmean(a: Tensor) -> Tensor:
    return scale(tsum(a), 1.0 / a.size)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (a,), bw)


def log_softmax_array(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Summed negative log-likelihood of ``targets`` under softmax(logits).

    ``logits`` is (N, V); positions where ``mask`` is false contribute zero.
    """
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects (N, V) logits, got {logits.shape}")
    targets = np.asarray(targets).reshape(-1)
    n = logits.shape[0]
    if targets.shape[0] != n:
        raise DimensionError(f"{n} logit rows but {targets.shape[0]} targets")
    w = np.ones(n, dtype=logits.dtype) if mask is None else np.asarray(mask, dtype=logits.dtype).reshape(-1)
    logp = log_softmax_array(logits.data)
    rows = np.arange(n)
    nll = -(logp[rows, targets] * w).sum()

    def bw(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        return (p * (w[:, None] * g),)

    return _make(np.asarray(nll, dtype=logits.dtype), (logits,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis then apply ``gain`` and ``bias``."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    d = x.shape[-1]
    gd = gain.data
    axes = tuple(range(x.ndim - 1))

    def bw(g):
        gx_hat = g * gd
        gx = inv / d * (d * gx_hat - gx_hat.sum(axis=-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _make((xhat * gd + bias.data).astype(x.dtype, copy=False), (x, gain, bias), bw)


# ----------------------------------------------------------------------------
# verification


def finite_difference_check(f: Callable[[], Tensor], params: Iterable[Tensor], step: float = 1e-4) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    ``f`` rebuilds the scalar loss from the current parameter values each call.
    Returns ``nan`` if the loss ever evaluates to a non-finite value.
    """
    params = list(params)
    for p in params:
        p.grad = None
    new_tape()
    loss = f()
    backward(loss)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + step
                up = f().item()
                flat[i] = orig - step
                down = f().item()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                return float("nan")
            numeric = (up - down) / (2 * step)
            a = analytic.reshape(-1)[i]
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    return worst
