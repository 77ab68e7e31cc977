"""Encoder-decoder models assembled under a factorization scheme.

Two families are provided: a Luong-style attentional LSTM with input feeding
and a tied decoder embedding/projection, and a pre-norm transformer. Which
weight positions are factorized is decided by a :class:`FactorizationScheme`.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .layers import (
    GROUPS,
    DenseLinear,
    Embedding,
    FactorizationError,
    FactorizedEmbedding,
    FactorizedLinear,
    FeedForward,
    LayerNorm,
    LstmCell,
    Module,
    MultiHeadAttention,
    TiedProjection,
    make_linear,
)

PAD, BOS, EOS, UNK = 0, 1, 2, 3
NEG_INF = -1e9


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    family: str  # "lstm" | "transformer"
    layers: int
    embedding_dim: int
    hidden_dim: int  # lstm decoder size, transformer feed-forward size
    src_vocab: int
    tgt_vocab: int
    encoder_hidden: int = 0  # lstm, per direction
    attention_dim: int = 0  # transformer
    heads: int = 1
    tie_embeddings: bool = False
    total_batch: int = 0
    name: str = ""

    def with_vocab(self, src_vocab: int, tgt_vocab: int) -> "ModelConfig":
        return replace(self, src_vocab=src_vocab, tgt_vocab=tgt_vocab)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def validate(self) -> None:
        if self.family not in ("lstm", "transformer"):
            raise ConfigurationError(f"unknown model family {self.family!r}")
        if self.layers < 1 or self.embedding_dim < 1 or self.hidden_dim < 1:
            raise ConfigurationError("layers and dimensions must be positive")
        if self.src_vocab < 5 or self.tgt_vocab < 5:
            raise ConfigurationError("vocabularies need the 4 reserved ids plus at least one token")
        if self.family == "lstm" and 2 * self.encoder_hidden != self.hidden_dim:
            raise ConfigurationError(
                f"bidirectional encoder states (2x{self.encoder_hidden}) must match decoder size {self.hidden_dim}")
        if self.family == "transformer":
            if self.attention_dim != self.embedding_dim:
                raise ConfigurationError("attention dim must equal embedding dim")
            if self.embedding_dim % self.heads:
                raise ConfigurationError(f"{self.heads} heads do not divide dim {self.embedding_dim}")


PRESETS: dict[str, ModelConfig] = {
    "lstm-iwslt": ModelConfig("lstm", layers=3, embedding_dim=256, hidden_dim=512, encoder_hidden=256,
                              src_vocab=30000, tgt_vocab=46000, tie_embeddings=True, name="lstm-iwslt"),
    "transformer-de": ModelConfig("transformer", layers=3, embedding_dim=512, hidden_dim=1024, attention_dim=512,
                                  heads=8, src_vocab=15000, tgt_vocab=15000, total_batch=128, name="transformer-de"),
    "transformer-pt": ModelConfig("transformer", layers=4, embedding_dim=512, hidden_dim=512, attention_dim=512,
                                  heads=8, src_vocab=15000, tgt_vocab=15000, total_batch=96, name="transformer-pt"),
    "transformer-tr": ModelConfig("transformer", layers=5, embedding_dim=512, hidden_dim=512, attention_dim=512,
                                  heads=8, src_vocab=15000, tgt_vocab=15000, total_batch=96, name="transformer-tr"),
    "toy-lstm": ModelConfig("lstm", layers=2, embedding_dim=64, hidden_dim=128, encoder_hidden=64,
                            src_vocab=200, tgt_vocab=200, tie_embeddings=True, name="toy-lstm"),
    "toy-transformer": ModelConfig("transformer", layers=2, embedding_dim=64, hidden_dim=128, attention_dim=64,
                                   heads=4, src_vocab=200, tgt_vocab=200, name="toy-transformer"),
}


def preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


GROUP_ALIASES = {
    "embed": 1, "embed_projection": 1,
    "ff": 2, "+ff": 2, "feed_forward": 2, "+feed-forward": 2,
    "attention": 3, "+attention": 3, "all": 3,
}


@dataclass(frozen=True)
class FactorizationScheme:
    """Which layer groups are factorized, and how small.

    Groups nest as embed_projection < +feed_forward < +attention.
    ``inner_size`` drives in-training factorization; ``ranks`` (group -> p)
    drives post-training factorization.
    """

    mode: str = "none"
    groups: tuple = ()
    inner_size: int | None = None
    ranks: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("none", "in_training", "post_training"):
            raise ConfigurationError(f"unknown factorization mode {self.mode!r}")
        groups = tuple(self.groups)
        object.__setattr__(self, "groups", groups)
        if self.mode == "none" and groups:
            raise ConfigurationError("scheme 'none' cannot name layer groups")
        if groups != GROUPS[:len(groups)]:
            raise ConfigurationError(f"layer groups must nest as {GROUPS}, got {groups}")
        if self.mode == "in_training" and (self.inner_size is None or not groups):
            raise ConfigurationError("in-training factorization needs groups and an inner size")
        if self.mode == "post_training":
            ranks = dict(self.ranks) or {g: self.inner_size for g in groups}
            if set(ranks) != set(groups) or any(r is None for r in ranks.values()):
                raise ConfigurationError("post-training factorization needs one rank per group")
            object.__setattr__(self, "ranks", ranks)

    @classmethod
    def none(cls) -> "FactorizationScheme":
        return cls()

    @classmethod
    def in_training(cls, groups: str = "embed", inner_size: int = 64) -> "FactorizationScheme":
        return cls("in_training", GROUPS[:_depth(groups)], inner_size)

    @classmethod
    def post_training(cls, ranks: dict | int, groups: str = "attention") -> "FactorizationScheme":
        if isinstance(ranks, int):
            ranks = {g: ranks for g in GROUPS[:_depth(groups)]}
        gs = tuple(g for g in GROUPS if g in ranks)
        return cls("post_training", gs, None, dict(ranks))

    def inner_for(self, group: str) -> int | None:
        if group not in self.groups:
            return None
        return self.inner_size if self.mode == "in_training" else self.ranks[group]

    def to_dict(self) -> dict:
        return {"mode": self.mode, "groups": list(self.groups), "inner_size": self.inner_size,
                "ranks": dict(self.ranks)}

    @classmethod
    def from_dict(cls, d: dict) -> "FactorizationScheme":
        return cls(d["mode"], tuple(d.get("groups", ())), d.get("inner_size"), dict(d.get("ranks") or {}))

    def label(self) -> str:
        if self.mode == "none":
            return "none"
        tag = {1: "embed", 2: "+feed-forward", 3: "+attention"}[len(self.groups)]
        if self.mode == "in_training":
            return f"in-training ({tag}), inner size={self.inner_size}"
        return f"post-training ({tag}), ranks={sorted(set(self.ranks.values()))}"


def _depth(groups: str) -> int:
    try:
        return GROUP_ALIASES[groups]
    except KeyError:
        raise ConfigurationError(f"unknown layer group selector {groups!r}") from None


def sinusoid_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(0, dim, 2)[None, :]
    angle = pos / np.power(10000.0, i / dim)
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : dim // 2])
    return pe


def _make_embedding(vocab: int, dim: int, inner: int | None, rng, name: str):
    if inner is None:
        return Embedding(vocab, dim, rng=rng)
    return FactorizedEmbedding(vocab, inner, dim, rng=rng, name=name)


class Seq2Seq(Module):
    config: ModelConfig
    scheme: FactorizationScheme

    def forward_logits(self, src: np.ndarray, tgt_in: np.ndarray) -> Tensor:
        raise NotImplementedError

    def loss_sum(self, batch) -> tuple[Tensor, int]:
        """Summed masked token cross-entropy and the number of target tokens."""
        logits = self.forward_logits(batch.src, batch.tgt_in)
        V = logits.shape[-1]
        mask = batch.tgt_out != PAD
        nll = ad.cross_entropy(logits.reshape(-1, V), batch.tgt_out.reshape(-1), mask.reshape(-1))
        return nll, int(mask.sum())

    def named_weights(self):
        return [(n, p) for n, p in self.named_parameters() if p.ndim == 2]


# ----------------------------------------------------------------------------
# LSTM encoder-decoder


class LstmSeq2Seq(Seq2Seq):
    """Bidirectional LSTM encoder, LSTM decoder with general-score global attention and input feeding."""

    def __init__(self, config: ModelConfig, scheme: FactorizationScheme, rng: np.random.Generator):
        extra = [g for g in scheme.groups if g != "embed_projection"]
        if extra:
            raise ConfigurationError(f"LSTM models only factorize embedding/projection layers, not {extra}")
        self.config, self.scheme = config, scheme
        E, H, He = config.embedding_dim, config.hidden_dim, config.encoder_hidden
        p = scheme.inner_for("embed_projection")
        self.src_embed = _make_embedding(config.src_vocab, E, p, rng, "src_embed")
        self.tgt_embed = _make_embedding(config.tgt_vocab, E, p, rng, "tgt_embed")
        self.enc_fwd = [LstmCell(E if i == 0 else 2 * He, He, rng) for i in range(config.layers)]
        self.enc_bwd = [LstmCell(E if i == 0 else 2 * He, He, rng) for i in range(config.layers)]
        self.dec = [LstmCell(2 * E if i == 0 else H, H, rng) for i in range(config.layers)]
        self.attn_score = DenseLinear(H, 2 * He, bias=False, rng=rng, group="attention")
        self.attn_combine = DenseLinear(2 * He + H, E, bias=False, activation="tanh", rng=rng, group="attention")
        if config.tie_embeddings:
            self.projection = TiedProjection(self.tgt_embed)
        else:
            self.projection = make_linear(E, config.tgt_vocab, p, rng=rng, group="embed_projection",
                                          name="projection")

    def retie(self) -> None:
        if isinstance(self.projection, TiedProjection):
            self.projection.retie(self.tgt_embed)

    def _run_direction(self, cell: LstmCell, x: Tensor, mask: np.ndarray, reverse: bool):
        B, S, _ = x.shape
        gates = cell.project_inputs(x)
        H = cell.hidden
        dtype = x.dtype
        h = Tensor(np.zeros((B, H), dtype))
        c = Tensor(np.zeros((B, H), dtype))
        outs = [None] * S
        steps = range(S - 1, -1, -1) if reverse else range(S)
        for t in steps:
            h_new, c_new = cell.step(gates[:, t, :], h, c)
            m = mask[:, t]
            if m.all():
                h, c = h_new, c_new
            else:
                keep = Tensor(np.broadcast_to(m[:, None], (B, H)).astype(dtype))
                drop = Tensor(np.broadcast_to(~m[:, None], (B, H)).astype(dtype))
                h = ad.add(ad.mul(h_new, keep), ad.mul(h, drop))
                c = ad.add(ad.mul(c_new, keep), ad.mul(c, drop))
            outs[t] = h
        return ad.stack(outs, axis=1), h, c

    def encode(self, src: np.ndarray):
        src = np.asarray(src)
        mask = src != PAD
        x = self.src_embed(src)
        states = []
        for fwd, bwd in zip(self.enc_fwd, self.enc_bwd):
            of, hf, cf = self._run_direction(fwd, x, mask, False)
            ob, hb, cb = self._run_direction(bwd, x, mask, True)
            x = ad.concat([of, ob], axis=-1)
            states.append((ad.concat([hf, hb], axis=-1), ad.concat([cf, cb], axis=-1)))
        return x, mask, states

    def _attend(self, h: Tensor, memory: Tensor, mask_add: np.ndarray) -> Tensor:
        B = h.shape[0]
        q = self.attn_score(h).reshape(B, 1, -1)
        scores = ad.matmul(q, ad.transpose(memory, (0, 2, 1)))
        weights = ad.softmax(ad.add_constant(scores, mask_add))
        ctx = ad.matmul(weights, memory).reshape(B, -1)
        return self.attn_combine(ad.concat([ctx, h], axis=-1))

    def _decoder_step(self, emb_t: Tensor, feed: Tensor, states, memory, mask_add):
        x = ad.concat([emb_t, feed], axis=-1)
        new_states = []
        for cell, (h, c) in zip(self.dec, states):
            h, c = cell(x, (h, c))
            new_states.append((h, c))
            x = h
        return self._attend(x, memory, mask_add), new_states

    def forward_logits(self, src, tgt_in) -> Tensor:
        memory, mask, states = self.encode(src)
        tgt_in = np.asarray(tgt_in)
        B, T = tgt_in.shape
        mask_add = np.where(mask, 0.0, NEG_INF)[:, None, :].astype(memory.dtype)
        emb = self.tgt_embed(tgt_in)
        feed = Tensor(np.zeros((B, self.config.embedding_dim), memory.dtype))
        outs = []
        for t in range(T):
            feed, states = self._decoder_step(emb[:, t, :], feed, states, memory, mask_add)
            outs.append(feed)
        return self.projection(ad.stack(outs, axis=1))

    # incremental decoding: state = (layer states, input feed, memory, mask_add)
    def init_decoder(self, src):
        memory, mask, states = self.encode(src)
        mask_add = np.where(mask, 0.0, NEG_INF)[:, None, :].astype(memory.dtype)
        feed = Tensor(np.zeros((memory.shape[0], self.config.embedding_dim), memory.dtype))
        return states, feed, memory, mask_add

    def decode_step(self, state, tokens):
        states, feed, memory, mask_add = state
        emb = self.tgt_embed(np.asarray(tokens))
        feed, states = self._decoder_step(emb, feed, states, memory, mask_add)
        logits = self.projection(feed)
        return ad.log_softmax_array(logits.data.astype(np.float64)), (states, feed, memory, mask_add)

    @staticmethod
    def reorder_state(state, index):
        states, feed, memory, mask_add = state
        pick = lambda t: Tensor(t.data[index])
        return ([(pick(h), pick(c)) for h, c in states], pick(feed), pick(memory), mask_add[index])


# ----------------------------------------------------------------------------
# Transformer


class EncoderLayer(Module):
    def __init__(self, cfg: ModelConfig, scheme: FactorizationScheme, rng, name: str):
        d = cfg.embedding_dim
        self.norm1 = LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, cfg.heads, scheme.inner_for("attention"), rng, f"{name}.self_attn")
        self.norm2 = LayerNorm(d)
        self.ff = FeedForward(d, cfg.hidden_dim, scheme.inner_for("feed_forward"), rng, f"{name}.ff")

    def __call__(self, x, mask):
        h = self.norm1(x)
        x = ad.add(x, self.self_attn(h, h, mask))
        return ad.add(x, self.ff(self.norm2(x)))


class DecoderLayer(Module):
    def __init__(self, cfg: ModelConfig, scheme: FactorizationScheme, rng, name: str):
        d = cfg.embedding_dim
        p = scheme.inner_for("attention")
        self.norm1 = LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, cfg.heads, p, rng, f"{name}.self_attn")
        self.norm2 = LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, cfg.heads, p, rng, f"{name}.cross_attn")
        self.norm3 = LayerNorm(d)
        self.ff = FeedForward(d, cfg.hidden_dim, scheme.inner_for("feed_forward"), rng, f"{name}.ff")

    def __call__(self, x, memory, self_mask, cross_mask):
        h = self.norm1(x)
        x = ad.add(x, self.self_attn(h, h, self_mask))
        x = ad.add(x, self.cross_attn(self.norm2(x), memory, cross_mask))
        return ad.add(x, self.ff(self.norm3(x)))


class TransformerSeq2Seq(Seq2Seq):
    def __init__(self, config: ModelConfig, scheme: FactorizationScheme, rng: np.random.Generator):
        self.config, self.scheme = config, scheme
        d = config.embedding_dim
        p = scheme.inner_for("embed_projection")
        self.src_embed = _make_embedding(config.src_vocab, d, p, rng, "src_embed")
        self.tgt_embed = _make_embedding(config.tgt_vocab, d, p, rng, "tgt_embed")
        self.encoder = [EncoderLayer(config, scheme, rng, f"encoder.{i}") for i in range(config.layers)]
        self.enc_norm = LayerNorm(d)
        self.decoder = [DecoderLayer(config, scheme, rng, f"decoder.{i}") for i in range(config.layers)]
        self.dec_norm = LayerNorm(d)
        if config.tie_embeddings:
            self.projection = TiedProjection(self.tgt_embed)
        else:
            self.projection = make_linear(d, config.tgt_vocab, p, rng=rng, group="embed_projection",
                                          name="projection")

    def retie(self) -> None:
        if isinstance(self.projection, TiedProjection):
            self.projection.retie(self.tgt_embed)

    def _embed(self, emb, ids):
        x = ad.scale(emb(ids), math.sqrt(self.config.embedding_dim))
        pe = sinusoid_positions(ids.shape[1], self.config.embedding_dim).astype(x.dtype)
        return ad.add_constant(x, pe[None])

    def encode(self, src):
        src = np.asarray(src)
        mask = np.where(src != PAD, 0.0, NEG_INF)[:, None, None, :]
        x = self._embed(self.src_embed, src)
        for layer in self.encoder:
            x = layer(x, mask.astype(x.dtype))
        return self.enc_norm(x), mask

    def decode(self, memory, src_mask, tgt_in):
        T = tgt_in.shape[1]
        causal = np.triu(np.full((T, T), NEG_INF), k=1)[None, None]
        x = self._embed(self.tgt_embed, tgt_in)
        for layer in self.decoder:
            x = layer(x, memory, causal.astype(x.dtype), src_mask.astype(x.dtype))
        return self.dec_norm(x)

    def forward_logits(self, src, tgt_in) -> Tensor:
        memory, src_mask = self.encode(src)
        return self.projection(self.decode(memory, src_mask, np.asarray(tgt_in)))

    # incremental decoding: the whole prefix is re-run each step
    def init_decoder(self, src):
        memory, src_mask = self.encode(src)
        return memory, src_mask, np.zeros((memory.shape[0], 0), dtype=np.int64)

    def decode_step(self, state, tokens):
        memory, src_mask, prefix = state
        seq = np.concatenate([prefix, np.asarray(tokens).reshape(-1, 1)], axis=1)
        h = self.decode(memory, src_mask, seq)
        logits = self.projection(h[:, -1, :])
        return ad.log_softmax_array(logits.data.astype(np.float64)), (memory, src_mask, seq)

    @staticmethod
    def reorder_state(state, index):
        memory, src_mask, prefix = state
        return Tensor(memory.data[index]), src_mask[index], prefix[index]


# ----------------------------------------------------------------------------
# construction and accounting


def build_model(config: ModelConfig, scheme: FactorizationScheme | None = None, seed: int = 0,
                rng: np.random.Generator | None = None) -> Seq2Seq:
    scheme = scheme or FactorizationScheme.none()
    config.validate()
    rng = rng if rng is not None else np.random.default_rng(seed)
    try:
        if config.family == "lstm":
            return LstmSeq2Seq(config, scheme, rng)
        return TransformerSeq2Seq(config, scheme, rng)
    except FactorizationError as e:
        raise ConfigurationError(str(e)) from e


def forward_loss(model: Seq2Seq, batch) -> Tensor:
    """Mean per-token cross-entropy over non-padding target positions."""
    if batch.tgt_out.size == 0:
        raise ContractError("empty batch")
    nll, ntok = model.loss_sum(batch)
    if ntok == 0:
        raise ContractError("batch has no target tokens")
    return ad.scale(nll, 1.0 / ntok)


def _matrix_count(n: int, m: int, p: int | None) -> int:
    return n * m if p is None else p * (n + m)


def param_count(config: ModelConfig, scheme: FactorizationScheme | None = None) -> dict:
    """Weight and bias totals computed from dimensions alone, without building the model."""
    scheme = scheme or FactorizationScheme.none()
    pe = scheme.inner_for("embed_projection")
    weights = biases = 0
    E, V_s, V_t = config.embedding_dim, config.src_vocab, config.tgt_vocab
    weights += _matrix_count(V_s, E, pe) + _matrix_count(V_t, E, pe)
    if not config.tie_embeddings:
        weights += _matrix_count(E, V_t, pe)
        biases += V_t
    if config.family == "lstm":
        H, He, L = config.hidden_dim, config.encoder_hidden, config.layers
        for i in range(L):
            inp = E if i == 0 else 2 * He
            weights += 2 * 4 * He * (inp + He)
            biases += 2 * 4 * He
            inp = 2 * E if i == 0 else H
            weights += 4 * H * (inp + H)
            biases += 4 * H
        weights += H * 2 * He + (2 * He + H) * E
    else:
        d, F, L = config.embedding_dim, config.hidden_dim, config.layers
        pa, pf = scheme.inner_for("attention"), scheme.inner_for("feed_forward")
        attn_w, attn_b = 4 * _matrix_count(d, d, pa), 3 * d  # no key bias
        ff_w, ff_b = _matrix_count(d, F, pf) + _matrix_count(F, d, pf), F + d
        weights += L * (attn_w + ff_w) + L * (2 * attn_w + ff_w)
        biases += L * (attn_b + ff_b + 2 * 2 * d) + L * (2 * attn_b + ff_b + 3 * 2 * d) + 2 * 2 * d
    return {"weights": weights, "biases": biases, "total": weights + biases}


def size_reduction(config: ModelConfig, scheme: FactorizationScheme | None = None) -> float:
    """Percent of parameters removed relative to the unfactorized model."""
    base = param_count(config)["total"]
    new = param_count(config, scheme)["total"]
    return float(100 * (1 - Fraction(new, base)))


def stored_param_count(model: Module) -> int:
    return sum(p.size for p in model.parameters())


def nonzero_param_count(model: Module) -> int:
    return int(sum(np.count_nonzero(p.data) for p in model.parameters()))
