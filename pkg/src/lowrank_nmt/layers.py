"""Dense and factorized layers.

A factorized linear layer replaces an (n, m) weight with the product of an
(n, p) and a (p, m) factor, followed by one bias and one activation. Every
weight position in the models can host either kind.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor

GROUPS = ("embed_projection", "feed_forward", "attention")


class FactorizationError(ValueError):
    pass


class FactorizationWarning(UserWarning):
    pass


def Parameter(data: np.ndarray) -> Tensor:
    return Tensor(np.asarray(data, dtype=ad.DEFAULT_DTYPE), requires_grad=True)


@dataclass(frozen=True)
class FactorizedLinearSpec:
    """Left size ``n``, inner size ``p``, right size ``m`` of an (n,p)x(p,m) factor pair."""

    left: int
    inner: int
    right: int

    @property
    def dense_count(self) -> int:
        return self.left * self.right

    @property
    def weight_param_count(self) -> int:
        return self.inner * (self.left + self.right)

    @property
    def compresses(self) -> bool:
        # p < nm/(n+m) in exact integer arithmetic
        return self.inner * (self.left + self.right) < self.left * self.right

    def validate(self, where: str = "") -> None:
        n, p, m = self.left, self.inner, self.right
        label = f" for {where}" if where else ""
        if p < 1 or p > min(n, m):
            raise FactorizationError(f"inner size {p} outside [1, {min(n, m)}]{label} ({n}x{m} matrix)")
        if not self.compresses:
            warnings.warn(
                f"inner size {p}{label} does not compress a {n}x{m} matrix "
                f"({self.weight_param_count} >= {self.dense_count} weights)",
                FactorizationWarning, stacklevel=3)
        elif 2 * p > min(n, m):
            warnings.warn(f"inner size {p}{label} exceeds half of min({n}, {m})",
                          FactorizationWarning, stacklevel=3)


def _as_parameter(arr) -> Tensor:
    """Wrap given factor values, keeping their float precision."""
    arr = np.asarray(arr)
    if arr.dtype.kind != "f":
        arr = arr.astype(ad.DEFAULT_DTYPE)
    return Tensor(arr.copy(), requires_grad=True)


def _uniform(rng: np.random.Generator, shape, var: float) -> np.ndarray:
    a = math.sqrt(3.0 * var)
    return rng.uniform(-a, a, size=shape)


def glorot_variance(n: int, m: int) -> float:
    return 2.0 / (n + m)


def factor_variance(dense_var: float, p: int) -> float:
    """Per-factor variance so that x @ W1 @ W2 has the variance of x @ W.

    With zero-mean independent entries Var(x W1 W2) = n p v1 v2 Var(x), and a
    dense weight gives n v Var(x); equal balanced factors need v1 = v2 = sqrt(v / p).
    """
    return math.sqrt(dense_var / p)


class Module:
    group: str | None = None

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(val, Module):
                yield from val.named_modules(f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_modules(f"{prefix}{key}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def weight_param_count(self) -> int:
        return sum(p.size for p in self.parameters() if p.ndim == 2)

    def bias_param_count(self) -> int:
        return sum(p.size for p in self.parameters() if p.ndim != 2)

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())


def _apply_rows(x: Tensor, fn) -> Tensor:
    """Run a 2-D map over the last axis of an arbitrary-rank input."""
    if x.ndim == 2:
        return fn(x)
    lead = x.shape[:-1]
    y = fn(x.reshape(-1, x.shape[-1]))
    return y.reshape(*lead, y.shape[-1])


class DenseLinear(Module):
    def __init__(self, n: int, m: int, bias: bool = True, activation: str = "identity",
                 rng: np.random.Generator | None = None, group: str | None = None):
        rng = rng or np.random.default_rng()
        self.left, self.right = n, m
        self.weight = Parameter(_uniform(rng, (n, m), glorot_variance(n, m)))
        self.bias = Parameter(np.zeros(m)) if bias else None
        self.activation = activation
        self.group = group

    def dense_weight(self) -> np.ndarray:
        return self.weight.data

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.left:
            raise DimensionError(f"input width {x.shape[-1]} does not match left size {self.left}")

        def fn(x2):
            y = ad.matmul(x2, self.weight)
            return ad.add(y, self.bias) if self.bias is not None else y

        return ad.ACTIVATIONS[self.activation](_apply_rows(x, fn))


class FactorizedLinear(Module):
    def __init__(self, n: int, p: int, m: int, bias: bool = True, activation: str = "identity",
                 rng: np.random.Generator | None = None, group: str | None = None, name: str = ""):
        self.spec = FactorizedLinearSpec(n, p, m)
        self.spec.validate(name)
        rng = rng or np.random.default_rng()
        self.left, self.inner, self.right = n, p, m
        v = factor_variance(glorot_variance(n, m), p)
        self.W1 = Parameter(_uniform(rng, (n, p), v))
        self.W2 = Parameter(_uniform(rng, (p, m), v))
        self.bias = Parameter(np.zeros(m)) if bias else None
        self.activation = activation
        self.group = group

    @classmethod
    def from_factors(cls, W1: np.ndarray, W2: np.ndarray, bias: np.ndarray | None = None,
                     activation: str = "identity", group: str | None = None, name: str = ""):
        n, p = W1.shape
        layer = cls.__new__(cls)
        layer.spec = FactorizedLinearSpec(n, p, W2.shape[1])
        layer.spec.validate(name)
        layer.left, layer.inner, layer.right = n, p, W2.shape[1]
        layer.W1, layer.W2 = _as_parameter(W1), _as_parameter(W2)
        layer.bias = _as_parameter(bias) if bias is not None else None
        layer.activation = activation
        layer.group = group
        return layer

    def dense_weight(self) -> np.ndarray:
        return self.W1.data @ self.W2.data

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.left:
            raise DimensionError(f"input width {x.shape[-1]} does not match left size {self.left}")

        def fn(x2):
            y = ad.matmul(ad.matmul(x2, self.W1), self.W2)
            return ad.add(y, self.bias) if self.bias is not None else y

        return ad.ACTIVATIONS[self.activation](_apply_rows(x, fn))


def make_linear(n: int, m: int, inner: int | None = None, *, bias: bool = True,
                activation: str = "identity", rng=None, group: str | None = None, name: str = ""):
    if inner is None:
        return DenseLinear(n, m, bias=bias, activation=activation, rng=rng, group=group)
    return FactorizedLinear(n, inner, m, bias=bias, activation=activation, rng=rng, group=group, name=name)


class Embedding(Module):
    def __init__(self, vocab_size: int, dim: int, rng=None, group: str = "embed_projection"):
        rng = rng or np.random.default_rng()
        self.vocab_size, self.dim = vocab_size, dim
        self.table = Parameter(_uniform(rng, (vocab_size, dim), 1.0 / dim))
        self.group = group

    def dense_weight(self) -> np.ndarray:
        return self.table.data

    def __call__(self, ids) -> Tensor:
        return ad.take_rows(self.table, ids)

    def tied_logits(self, h: Tensor) -> Tensor:
        return _apply_rows(h, lambda h2: ad.matmul(h2, ad.transpose(self.table)))


class FactorizedEmbedding(Module):
    """Lookup table ``E1 (V,p)`` followed by a bias-free projection ``E2 (p,d)``."""

    def __init__(self, vocab_size: int, inner: int, dim: int, rng=None,
                 group: str = "embed_projection", name: str = ""):
        FactorizedLinearSpec(vocab_size, inner, dim).validate(name)
        rng = rng or np.random.default_rng()
        self.vocab_size, self.inner, self.dim = vocab_size, inner, dim
        v = factor_variance(1.0 / dim, inner)
        self.E1 = Parameter(_uniform(rng, (vocab_size, inner), v))
        self.E2 = Parameter(_uniform(rng, (inner, dim), v))
        self.group = group

    @classmethod
    def from_factors(cls, E1: np.ndarray, E2: np.ndarray, group: str = "embed_projection", name: str = ""):
        emb = cls.__new__(cls)
        FactorizedLinearSpec(E1.shape[0], E1.shape[1], E2.shape[1]).validate(name)
        emb.vocab_size, emb.inner = E1.shape
        emb.dim = E2.shape[1]
        emb.E1, emb.E2 = _as_parameter(E1), _as_parameter(E2)
        emb.group = group
        return emb

    def dense_weight(self) -> np.ndarray:
        return self.E1.data @ self.E2.data

    def __call__(self, ids) -> Tensor:
        ids = np.asarray(ids)
        rows = ad.take_rows(self.E1, ids.reshape(-1))
        out = ad.matmul(rows, self.E2)
        return out.reshape(*ids.shape, self.dim)

    def tied_logits(self, h: Tensor) -> Tensor:
        def fn(h2):
            return ad.matmul(ad.matmul(h2, ad.transpose(self.E2)), ad.transpose(self.E1))

        return _apply_rows(h, fn)


class TiedProjection(Module):
    """Output logits against the rows of a (possibly factorized) embedding; no weights of its own."""

    def __init__(self, embedding: Embedding | FactorizedEmbedding):
        self._embedding = embedding

    @property
    def embedding(self):
        return self._embedding

    def retie(self, embedding) -> None:
        self._embedding = embedding

    def __call__(self, h: Tensor) -> Tensor:
        if h.shape[-1] != self._embedding.dim:
            raise DimensionError(f"hidden width {h.shape[-1]} does not match embedding dim {self._embedding.dim}")
        return self._embedding.tied_logits(h)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias)


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, inner: int | None = None, rng=None, name: str = "ff"):
        self.up = make_linear(dim, hidden, inner, activation="relu", rng=rng,
                              group="feed_forward", name=f"{name}.up")
        self.down = make_linear(hidden, dim, inner, rng=rng, group="feed_forward", name=f"{name}.down")

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(self.up(x))


class MultiHeadAttention(Module):
    """Scaled dot-product attention over ``heads`` heads.

    Factorization applies to the full (d, d) projections, before heads are split.
    """

    def __init__(self, dim: int, heads: int, inner: int | None = None, rng=None, name: str = "attn"):
        if dim % heads:
            raise DimensionError(f"model dim {dim} not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.q = make_linear(dim, dim, inner, rng=rng, group="attention", name=f"{name}.q")
        # a key bias adds q.b to every score of a query, which softmax cancels, so k has none
        self.k = make_linear(dim, dim, inner, bias=False, rng=rng, group="attention", name=f"{name}.k")
        self.v = make_linear(dim, dim, inner, rng=rng, group="attention", name=f"{name}.v")
        self.o = make_linear(dim, dim, inner, rng=rng, group="attention", name=f"{name}.o")

    def _split(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        return ad.transpose(x.reshape(b, t, self.heads, self.dim // self.heads), (0, 2, 1, 3))

    def __call__(self, query: Tensor, memory: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """``mask`` is an additive array broadcastable to (B, heads, Tq, Tk)."""
        b, tq, _ = query.shape
        q = self._split(self.q(query))
        k = self._split(self.k(memory))
        v = self._split(self.v(memory))
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(self.dim // self.heads))
        if mask is not None:
            scores = ad.add_constant(scores, np.broadcast_to(mask, scores.shape))
        ctx = ad.matmul(ad.softmax(scores), v)
        ctx = ad.transpose(ctx, (0, 2, 1, 3)).reshape(b, tq, self.dim)
        return self.o(ctx)


class LstmCell(Module):
    """Standard LSTM cell, gates ordered (input, forget, cell, output)."""

    def __init__(self, input_size: int, hidden: int, rng=None):
        rng = rng or np.random.default_rng()
        self.input_size, self.hidden = input_size, hidden
        self.W_x = Parameter(_uniform(rng, (input_size, 4 * hidden), glorot_variance(input_size, 4 * hidden)))
        self.W_h = Parameter(_uniform(rng, (hidden, 4 * hidden), glorot_variance(hidden, 4 * hidden)))
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0
        self.bias = Parameter(b)
        self.group = "recurrent"

    def project_inputs(self, x: Tensor) -> Tensor:
        """Input contribution to the gates for a whole sequence at once."""
        if x.shape[-1] != self.input_size:
            raise DimensionError(f"input width {x.shape[-1]} does not match LSTM input {self.input_size}")
        return _apply_rows(x, lambda x2: ad.add(ad.matmul(x2, self.W_x), self.bias))

    def step(self, gates_x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        H = self.hidden
        z = ad.add(gates_x, ad.matmul(h, self.W_h))
        i = ad.sigmoid(z[:, :H])
        f = ad.sigmoid(z[:, H:2 * H])
        g = ad.tanh(z[:, 2 * H:3 * H])
        o = ad.sigmoid(z[:, 3 * H:])
        c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
        h_new = ad.mul(o, ad.tanh(c_new))
        return h_new, c_new

    def __call__(self, x: Tensor, state: tuple[Tensor, Tensor]) -> tuple[Tensor, Tensor]:
        return self.step(self.project_inputs(x), *state)


def weight_param_count(layer) -> int:
    """Weight entries of a layer (biases excluded): n*m dense, p*(n+m) factorized."""
    if isinstance(layer, FactorizedLinearSpec):
        return layer.weight_param_count
    if isinstance(layer, (FactorizedLinear,)):
        return layer.spec.weight_param_count
    if isinstance(layer, FactorizedEmbedding):
        return layer.inner * (layer.vocab_size + layer.dim)
    if isinstance(layer, TiedProjection):
        return 0
    if isinstance(layer, Module):
        return layer.weight_param_count()
    raise TypeError(f"no parameter count for {type(layer).__name__}")


def bias_param_count(layer) -> int:
    if isinstance(layer, (FactorizedLinearSpec, TiedProjection)):
        return 0
    return layer.bias_param_count()
