"""Greedy and beam-search decoding, corpus BLEU."""
from __future__ import annotations

import collections
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError
from .models import BOS, EOS, PAD

LENGTH_ALPHA = 1.0
BANNED = (PAD, BOS)


@dataclass
class Hypothesis:
    tokens: list  # generated ids, including the final eos when present
    logprob: float
    alpha: float = LENGTH_ALPHA

    @property
    def score(self) -> float:
        return self.logprob / max(len(self.tokens), 1) ** self.alpha

    @property
    def finished(self) -> bool:
        return bool(self.tokens) and self.tokens[-1] == EOS

    def words(self) -> list:
        return self.tokens[:-1] if self.finished else list(self.tokens)


def _masked(logp: np.ndarray) -> np.ndarray:
    logp = logp.copy()
    logp[:, list(BANNED)] = -np.inf
    return logp


def greedy_decode(model, src: np.ndarray, max_len: int) -> list[Hypothesis]:
    """Argmax decoding for a whole padded source batch at once."""
    src = np.atleast_2d(np.asarray(src))
    B = src.shape[0]
    with ad.no_grad():
        state = model.init_decoder(src)
        tokens = np.full(B, BOS, dtype=np.int64)
        out = [[] for _ in range(B)]
        logp_sum = np.zeros(B)
        alive = np.ones(B, dtype=bool)
        for _ in range(max_len):
            logp, state = model.decode_step(state, tokens)
            logp = _masked(logp)
            tokens = logp.argmax(axis=1)
            for i in np.flatnonzero(alive):
                out[i].append(int(tokens[i]))
                logp_sum[i] += logp[i, tokens[i]]
            alive &= tokens != EOS
            if not alive.any():
                break
    return [Hypothesis(out[i], float(logp_sum[i])) for i in range(B)]


def beam_search(model, source: Sequence[int], beam_width: int = 5, max_len: int = 50,
                return_all: bool = False):
    """Beam search over one source sentence (ids, eos appended by the caller or not).

    Partial hypotheses are ranked by cumulative log-probability; completed ones
    (eos or ``max_len`` tokens) are ranked by length-normalized score.
    """
    if beam_width < 1:
        raise ContractError("beam width must be at least 1")
    src = np.asarray(list(source) if len(source) else [EOS], dtype=np.int64)[None, :]
    finished: list[Hypothesis] = []
    with ad.no_grad():
        state = model.init_decoder(src)
        beams = [Hypothesis([], 0.0)]
        last = np.array([BOS], dtype=np.int64)
        for t in range(max_len):
            logp, state = model.decode_step(state, last)
            logp = _masked(logp)
            base = np.array([h.logprob for h in beams])
            total = (base[:, None] + logp).reshape(-1)
            V = logp.shape[1]
            k = min(beam_width, int(np.isfinite(total).sum()))
            top = np.argpartition(-total, k - 1)[:k] if k < total.size else np.arange(total.size)
            top = top[np.lexsort((top, -total[top]))]
            keep_rows, keep_hyps = [], []
            for flat in top:
                if not np.isfinite(total[flat]):
                    continue
                row, tok = divmod(int(flat), V)
                hyp = Hypothesis(beams[row].tokens + [tok], float(total[flat]))
                if tok == EOS or t == max_len - 1:
                    finished.append(hyp)
                else:
                    keep_rows.append(row)
                    keep_hyps.append(hyp)
            if not keep_hyps:
                break
            beams = keep_hyps
            idx = np.array(keep_rows, dtype=np.int64)
            state = model.reorder_state(state, idx)
            last = np.array([h.tokens[-1] for h in beams], dtype=np.int64)
    finished.sort(key=lambda h: (-h.score, h.tokens))
    return finished if return_all else finished[0]


def translate(model, sources: Sequence[Sequence[int]], beam_width: int = 1, max_len: int = 50,
              batch_size: int = 64) -> list[list[int]]:
    """Decode many sources; width 1 uses batched greedy search."""
    from .data import _pad

    results = []
    if beam_width == 1:
        for start in range(0, len(sources), batch_size):
            chunk = [list(s) + [EOS] for s in sources[start:start + batch_size]]
            results.extend(h.words() for h in greedy_decode(model, _pad(chunk), max_len))
        return results
    for s in sources:
        results.append(beam_search(model, list(s) + [EOS], beam_width, max_len).words())
    return results


# ----------------------------------------------------------------------------
# BLEU


def _tokens(x) -> list:
    return x.split() if isinstance(x, str) else list(x)


def _ngrams(tokens: Sequence, n: int) -> collections.Counter:
    return collections.Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def ngram_stats(hypotheses, references, max_n: int = 4):
    """Clipped matches and totals per order, plus hypothesis and reference lengths."""
    if len(hypotheses) != len(references):
        raise ContractError(f"{len(hypotheses)} hypotheses but {len(references)} references")
    matches, totals = [0] * max_n, [0] * max_n
    hyp_len = ref_len = 0
    for h, r in zip(hypotheses, references):
        h, r = _tokens(h), _tokens(r)
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += max(len(h) - n + 1, 0)
    return matches, totals, hyp_len, ref_len


def modified_precision(hypotheses, references, n: int) -> Fraction:
    m, t, _, _ = ngram_stats(hypotheses, references, n)
    return Fraction(m[n - 1], t[n - 1]) if t[n - 1] else Fraction(0)


def brevity_penalty(hyp_len: int, ref_len: int) -> float:
    if hyp_len == 0:
        return 0.0
    return 1.0 if hyp_len > ref_len else math.exp(1 - ref_len / hyp_len)


def bleu(hypotheses, references, max_n: int = 4, smooth: bool = False) -> float:
    """Corpus BLEU in [0, 100] against one reference per hypothesis.

    Unsmoothed by default; ``smooth`` adds one to numerator and denominator
    for orders above 1.
    """
    matches, totals, c, r = ngram_stats(hypotheses, references, max_n)
    log_p = 0.0
    for n in range(max_n):
        num, den = matches[n], totals[n]
        if smooth and n > 0:
            num, den = num + 1, den + 1
        if num == 0 or den == 0:
            return 0.0
        log_p += math.log(num / den) / max_n
    return 100.0 * brevity_penalty(c, r) * math.exp(log_p)
