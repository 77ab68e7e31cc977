"""Parallel corpora, vocabularies, BPE subwords and batching."""
from __future__ import annotations

import collections
import queue
import re
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .autodiff import ContractError
from .models import BOS, EOS, PAD, UNK

RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")
END_OF_WORD = "</w>"


def read_parallel(src_path, tgt_path) -> list[tuple[str, str]]:
    src = Path(src_path).read_text(encoding="utf-8").splitlines()
    tgt = Path(tgt_path).read_text(encoding="utf-8").splitlines()
    if len(src) != len(tgt):
        raise ValueError(f"{src_path} has {len(src)} lines but {tgt_path} has {len(tgt)}")
    return list(zip(src, tgt))


def write_parallel(pairs: Sequence[tuple[str, str]], src_path, tgt_path) -> None:
    Path(src_path).write_text("".join(s + "\n" for s, _ in pairs), encoding="utf-8")
    Path(tgt_path).write_text("".join(t + "\n" for _, t in pairs), encoding="utf-8")


class Vocab:
    """Token <-> id map with ids 0..3 reserved for pad, bos, eos, unk."""

    def __init__(self, tokens: Iterable[str]):
        self.itos = list(RESERVED)
        for tok in tokens:
            if tok in RESERVED:
                continue
            self.itos.append(tok)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, tok: str) -> bool:
        return tok in self.stoi

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            out.append(self.itos[i])
        return out

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.itos[len(RESERVED):]), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


def build_vocab(corpus: Iterable[str], max_size: int | None = None) -> Vocab:
    """Keep the most frequent whitespace tokens; ties go to lexicographic order.

    ``max_size`` counts regular tokens only; the four reserved ids are extra.
    """
    counts = collections.Counter()
    nlines = 0
    for line in corpus:
        nlines += 1
        counts.update(line.split())
    if nlines == 0:
        raise ContractError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    if max_size is not None:
        ranked = ranked[:max_size]
    return Vocab(t for t, _ in ranked)


# ----------------------------------------------------------------------------
# byte-pair encoding


def _word_symbols(word: str) -> tuple[str, ...]:
    return tuple(word[:-1]) + (word[-1] + END_OF_WORD,)


def _pair_counts(words: dict[tuple, int]) -> collections.Counter:
    pairs = collections.Counter()
    for syms, freq in words.items():
        for a, b in zip(syms, syms[1:]):
            pairs[a, b] += freq
    return pairs


def _merge_word(syms: tuple, pair: tuple) -> tuple:
    a, b = pair
    out, i = [], 0
    while i < len(syms):
        if i < len(syms) - 1 and syms[i] == a and syms[i + 1] == b:
            out.append(a + b)
            i += 2
        else:
            out.append(syms[i])
            i += 1
    return tuple(out)


@dataclass
class BpeModel:
    merges: list[tuple[str, str]]

    def encode_word(self, word: str) -> list[str]:
        syms = _word_symbols(word)
        rank = self._ranks
        while len(syms) > 1:
            candidates = [(rank[p], p) for p in zip(syms, syms[1:]) if p in rank]
            if not candidates:
                break
            syms = _merge_word(syms, min(candidates)[1])
        return list(syms)

    @property
    def _ranks(self) -> dict:
        cache = self.__dict__.get("_rank_cache")
        if cache is None or len(cache) != len(self.merges):
            cache = {tuple(p): i for i, p in enumerate(self.merges)}
            self.__dict__["_rank_cache"] = cache
        return cache

    def encode(self, text: str) -> list[str]:
        return [s for w in text.split() for s in self.encode_word(w)]

    @staticmethod
    def decode(symbols: Sequence[str]) -> str:
        return "".join(symbols).replace(END_OF_WORD, " ").strip()

    def save(self, path) -> None:
        Path(path).write_text("".join(f"{a} {b}\n" for a, b in self.merges), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "BpeModel":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([tuple(line.split(" ")) for line in lines if line])


def learn_bpe(corpus: Iterable[str], merge_count: int) -> BpeModel:
    """Greedy pair merging: repeatedly fuse the most frequent adjacent symbol pair."""
    if merge_count < 0:
        raise ContractError("merge_count must be nonnegative")
    freq = collections.Counter(w for line in corpus for w in line.split())
    words = {_word_symbols(w): c for w, c in freq.items()}
    merges = []
    for _ in range(merge_count):
        pairs = _pair_counts(words)
        if not pairs:
            break
        top = max(pairs.values())
        best = min(p for p, c in pairs.items() if c == top)  # ties: lexicographic
        merges.append(best)
        words = {_merge_word(s, best): c for s, c in words.items()}
    return BpeModel(merges)


def apply_bpe(model: BpeModel, text: str) -> list[str]:
    return model.encode(text)


def normalize_whitespace(text: str) -> str:
    return re.sub(r"\s+", " ", text).strip()


# ----------------------------------------------------------------------------
# synthetic tasks


def synthetic_task(kind: str, vocab_size: int, length_range: tuple[int, int], count: int,
                   seed: int = 0) -> list[tuple[str, str]]:
    """Random token sequences paired with their copy or reversal."""
    if vocab_size < 2:
        raise ContractError("synthetic tasks need at least 2 symbols")
    if kind not in ("copy", "reverse"):
        raise ContractError(f"unknown synthetic task {kind!r}")
    lo, hi = length_range
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(count):
        toks = [str(t) for t in rng.integers(0, vocab_size, size=int(rng.integers(lo, hi + 1)))]
        tgt = toks if kind == "copy" else toks[::-1]
        pairs.append((" ".join(toks), " ".join(tgt)))
    return pairs


# ----------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    src: np.ndarray  # (B, S)
    tgt_in: np.ndarray  # (B, T), starts with bos
    tgt_out: np.ndarray  # (B, T), ends with eos
    indices: np.ndarray  # corpus positions of the rows

    @property
    def src_mask(self) -> np.ndarray:
        return self.src != PAD

    @property
    def tgt_mask(self) -> np.ndarray:
        return self.tgt_out != PAD

    @property
    def size(self) -> int:
        return self.src.shape[0]

    @property
    def num_tokens(self) -> int:
        return int(self.tgt_mask.sum())


def encode_pairs(pairs: Sequence[tuple[str, str]], src_vocab: Vocab, tgt_vocab: Vocab):
    return [(src_vocab.encode(s.split()), tgt_vocab.encode(t.split())) for s, t in pairs]


def _pad(rows: list[list[int]]) -> np.ndarray:
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), PAD, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
    return out


def collate(examples: Sequence[tuple[list[int], list[int]]], indices=None) -> Batch:
    src = _pad([list(s) + [EOS] for s, _ in examples])
    tgt_in = _pad([[BOS] + list(t) for _, t in examples])
    tgt_out = _pad([list(t) + [EOS] for _, t in examples])
    idx = np.arange(len(examples)) if indices is None else np.asarray(indices)
    return Batch(src, tgt_in, tgt_out, idx)


@dataclass(frozen=True)
class BatchPlan:
    batch_size: int = 16  # sentences per mini-batch
    accumulation: int = 1  # mini-batches per optimizer update
    seed: int = 0
    bucket_factor: int = 50  # mini-batches per length-sorted bucket

    @property
    def effective_batch_size(self) -> int:
        return self.batch_size * self.accumulation


def make_batches(corpus: Sequence[tuple[list[int], list[int]]], plan: BatchPlan,
                 epoch: int = 0) -> Iterator[list[Batch]]:
    """One epoch of accumulation groups, each a list of padded mini-batches.

    Sentences are shuffled, sorted by length inside buckets to limit padding,
    then cut into mini-batches whose order is shuffled again.
    """
    rng = np.random.default_rng([plan.seed, epoch])
    order = rng.permutation(len(corpus))
    bucket = plan.batch_size * plan.bucket_factor
    minis = []
    for start in range(0, len(order), bucket):
        chunk = order[start:start + bucket]
        lengths = np.array([max(len(corpus[i][0]), len(corpus[i][1])) for i in chunk])
        chunk = chunk[np.argsort(lengths, kind="stable")]
        minis.extend(chunk[j:j + plan.batch_size] for j in range(0, len(chunk), plan.batch_size))
    minis = [minis[k] for k in rng.permutation(len(minis))]
    for g in range(0, len(minis), plan.accumulation):
        yield [collate([corpus[i] for i in idx], idx) for idx in minis[g:g + plan.accumulation]]


def sequential_batches(corpus: Sequence[tuple[list[int], list[int]]], batch_size: int) -> Iterator[Batch]:
    """Batches in corpus order, for evaluation."""
    for start in range(0, len(corpus), batch_size):
        idx = np.arange(start, min(start + batch_size, len(corpus)))
        yield collate([corpus[i] for i in idx], idx)


def prefetch(stream: Iterable, depth: int = 4) -> Iterator:
    """Produce ``stream`` on a worker thread through a bounded queue."""
    q: queue.Queue = queue.Queue(maxsize=depth)
    done = object()

    failure: list[BaseException] = []

    def worker():
        try:
            for item in stream:
                q.put(item)
        except BaseException as e:  # handed to the consumer
            failure.append(e)
        finally:
            q.put(done)

    threading.Thread(target=worker, daemon=True).start()
    while True:
        item = q.get()
        if item is done:
            if failure:
                raise failure[0]
            return
        yield item
