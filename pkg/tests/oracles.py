"""Shared reference implementations and fixtures-as-functions for the test suite."""
import itertools
import warnings

import numpy as np

from lowrank_nmt import autodiff as ad
from lowrank_nmt.autodiff import Tensor, finite_difference_check
from lowrank_nmt.layers import (DenseLinear, Embedding, FactorizationWarning, FactorizedEmbedding,
                                FactorizedLinear, FeedForward, LstmCell, MultiHeadAttention, TiedProjection)


def weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return ad.tsum(ad.mul(out, Tensor(weights)))


def _input(r, shape):
    return Tensor(r.standard_normal(shape), requires_grad=True)


def layer_cases(seed: int = 0):
    """(name, params, loss_fn) triples covering every layer type, built in the current default dtype."""
    r = np.random.default_rng(seed)
    cases = []

    def add(name, module, forward, out_shape, extra=()):
        w = r.standard_normal(out_shape)
        cases.append((name, list(module.parameters()) + list(extra), lambda: weighted_sum(forward(), w)))

    x = _input(r, (3, 5))
    dense = DenseLinear(5, 4, activation="tanh", rng=r)
    dense.bias.data[:] = r.standard_normal(4)
    add("dense_linear", dense, lambda: dense(x), (3, 4), [x])

    x2 = _input(r, (3, 6))
    fact = FactorizedLinear(6, 2, 5, activation="tanh", rng=r)
    fact.bias.data[:] = r.standard_normal(5)
    add("factorized_linear", fact, lambda: fact(x2), (3, 5), [x2])

    ids = np.array([[1, 4, 0], [3, 3, 2]])
    femb = FactorizedEmbedding(7, 2, 6, rng=r)
    add("factorized_embedding", femb, lambda: femb(ids), (2, 3, 6))

    h = _input(r, (4, 6))
    tied = TiedProjection(FactorizedEmbedding(7, 2, 6, rng=r))
    add("tied_projection", tied.embedding, lambda: tied(h), (4, 7), [h])

    h2 = _input(r, (4, 5))
    tied_dense = TiedProjection(Embedding(6, 5, rng=r))
    add("tied_projection_dense", tied_dense.embedding, lambda: tied_dense(h2), (4, 6), [h2])

    q, mem = _input(r, (2, 3, 8)), _input(r, (2, 4, 8))
    mask = np.zeros((2, 1, 1, 4))
    mask[1, ..., 3] = -1e9
    attn = MultiHeadAttention(8, 2, inner=3, rng=r)
    add("attention", attn, lambda: attn(q, mem, mask), (2, 3, 8), [q, mem])

    xf = _input(r, (2, 3, 6))
    ff = FeedForward(6, 10, rng=r)
    for lin in (ff.up, ff.down):
        lin.bias.data[:] = r.standard_normal(lin.bias.shape) * 0.5
    add("feed_forward", ff, lambda: ff(xf), (2, 3, 6), [xf])

    xl, h0, c0 = _input(r, (3, 4)), _input(r, (3, 5)), _input(r, (3, 5))
    cell = LstmCell(4, 5, rng=r)

    def lstm():
        h1, c1 = cell(xl, (h0, c0))
        return ad.concat([h1, c1], axis=1)

    add("lstm_cell", cell, lstm, (3, 10), [xl, h0, c0])
    return cases


def gradient_errors(seed: int = 0, step: float = 1e-5) -> dict:
    out = {}
    with ad.default_dtype(np.float64):
        for name, params, loss in layer_cases(seed):
            ad.new_tape()
            out[name] = finite_difference_check(loss, params, step=step)
    return out


def densified_pair(r, n=None, p=None, m=None, activation=None):
    """A random FactorizedLinear and the DenseLinear holding its product weight."""
    n = n or int(r.integers(2, 12))
    m = m or int(r.integers(2, 12))
    p = p or int(r.integers(1, min(n, m) + 1))
    activation = activation or str(r.choice(["identity", "tanh", "relu"]))
    W1, W2, b = (r.standard_normal(shape).astype(ad.DEFAULT_DTYPE) for shape in ((n, p), (p, m), (m,)))
    fact = FactorizedLinear.from_factors(W1, W2, b, activation=activation)
    dense = DenseLinear(n, m, activation=activation, rng=r)
    dense.weight.data[:] = W1 @ W2
    dense.bias.data[:] = b
    return fact, dense


def forward_and_input_grad(layer, x: np.ndarray, w: np.ndarray):
    ad.new_tape()
    xt = Tensor(x, requires_grad=True)
    out = layer(xt)
    ad.backward(weighted_sum(out, w))
    return out.data.copy(), xt.grad.copy()


def rel_err(a, b) -> float:
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def densified_errors(count: int = 100, seed: int = 0):
    """Max relative forward, input-gradient and parameter-gradient gaps over ``count`` random layers (32-bit).

    Parameter gradients of the factors are compared with the chain rule applied
    to the dense weight gradient: dW1 = dW W2^T and dW2 = W1^T dW.
    """
    r = np.random.default_rng(seed)
    fwd = grad = param = 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", FactorizationWarning)
        for _ in range(count):
            fact, dense = densified_pair(r)
            x = r.standard_normal((int(r.integers(1, 6)), fact.left))
            w = r.standard_normal((x.shape[0], fact.right))
            yf, gf = forward_and_input_grad(fact, x, w)
            yd, gd = forward_and_input_grad(dense, x, w)
            fwd, grad = max(fwd, rel_err(yf, yd)), max(grad, rel_err(gf, gd))
            dW = dense.weight.grad.astype(np.float64)
            W1, W2 = fact.W1.data.astype(np.float64), fact.W2.data.astype(np.float64)
            param = max(param, rel_err(fact.W1.grad, dW @ W2.T), rel_err(fact.W2.grad, W1.T @ dW),
                        rel_err(fact.bias.grad, dense.bias.grad))
    return fwd, grad, param


def exhaustive_best(model, source, max_len, alpha=1.0):
    """Best length-normalized hypothesis by scoring every sequence a decoder can emit."""
    from lowrank_nmt.decoding import BANNED
    from lowrank_nmt.models import BOS, EOS

    V = model.config.tgt_vocab
    words = [t for t in range(V) if t not in BANNED and t != EOS]
    prefixes = np.array(list(itertools.product(words, repeat=max_len - 1)), dtype=np.int64).reshape(-1, max_len - 1)
    tgt_in = np.concatenate([np.full((len(prefixes), 1), BOS), prefixes], axis=1)
    src = np.repeat(np.asarray(source, dtype=np.int64)[None], len(prefixes), 0)
    with ad.no_grad():
        logp = ad.log_softmax_array(model.forward_logits(src, tgt_in).data.astype(np.float64))
    best = None
    seen = set()
    for row, prefix in enumerate(prefixes):
        running = 0.0
        for t in range(max_len):
            ends = [EOS] + (words if t == max_len - 1 else [])
            for tok in ends:
                seq = tuple(prefix[:t]) + (tok,)
                if seq in seen:
                    continue
                seen.add(seq)
                lp = running + logp[row, t, tok]
                cand = (-lp / len(seq) ** alpha, seq)
                if best is None or cand < best:
                    best = cand
            if t < max_len - 1:
                running += logp[row, t, prefix[t]]
    return list(best[1]), -best[0], len(seen)
