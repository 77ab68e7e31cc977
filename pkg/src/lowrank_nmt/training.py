"""Adam with warmup schedules, gradient accumulation, and checkpoint files."""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import math
import os
import tempfile
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError
from .data import make_batches, sequential_batches
from .layers import FactorizationWarning, Module
from .models import FactorizationScheme, ModelConfig, Seq2Seq, build_model

MAGIC = b"LRNMT-CHECKPOINT v1\n"


class TrainingError(RuntimeError):
    pass


def lr_schedule(step: int, model_dim: int, warmup: int, factor: float = 1.0) -> float:
    """Inverse-square-root decay after a linear warmup."""
    if step < 1:
        raise ContractError("learning-rate schedule steps start at 1")
    return factor * model_dim ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


@dataclass
class WarmupSchedule:
    model_dim: int
    warmup: int = 400
    factor: float = 1.0

    def __call__(self, step: int) -> float:
        return lr_schedule(step, self.model_dim, self.warmup, self.factor)

    def report(self, metric: float) -> None:
        pass


@dataclass
class PlateauSchedule:
    """Constant rate, multiplied by ``decay`` when the validation metric stops improving."""

    rate: float = 1e-3
    decay: float = 0.5
    patience: int = 1
    best: float = math.inf
    bad: int = 0

    def __call__(self, step: int) -> float:
        return self.rate

    def report(self, metric: float) -> None:
        if metric < self.best - 1e-9:
            self.best, self.bad = metric, 0
            return
        self.bad += 1
        if self.bad > self.patience:
            self.rate *= self.decay
            self.bad = 0


@dataclass
class Adam:
    params: dict  # name -> Tensor
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            self.m.setdefault(name, np.zeros_like(p.data))
            self.v.setdefault(name, np.zeros_like(p.data))

    def step(self, lr: float) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1 - self.beta1 ** t
        c2 = 1 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= (lr * update).astype(p.dtype, copy=False)

    def state_arrays(self) -> dict:
        out = {}
        for name in self.params:
            out[f"optimizer.m.{name}"] = self.m[name]
            out[f"optimizer.v.{name}"] = self.v[name]
        return out


def make_optimizer(model: Seq2Seq) -> Adam:
    beta2 = 0.999 if model.config.family == "lstm" else 0.98
    return Adam(dict(model.named_parameters()), beta2=beta2)


def make_schedule(model: Seq2Seq, warmup: int = 400, factor: float = 1.0, rate: float = 1e-3):
    if model.config.family == "lstm":
        return PlateauSchedule(rate=rate)
    return WarmupSchedule(model.config.embedding_dim, warmup, factor)


def clip_grad_norm(params: Iterable, max_norm: float) -> float:
    params = [p for p in params if p.grad is not None]
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params))
    if total > max_norm:
        s = max_norm / (total + 1e-12)
        for p in params:
            p.grad *= p.grad.dtype.type(s)
    return total


def accumulate_gradients(model: Seq2Seq, group: Sequence) -> float:
    """Backpropagate the token-weighted mean loss of a group of mini-batches.

    Gradients end up in ``param.grad``; returns the group's mean token loss.
    """
    if not group:
        raise ContractError("empty accumulation group")
    total_tokens = sum(b.num_tokens for b in group)
    if total_tokens == 0:
        raise ContractError("accumulation group has no target tokens")
    model.zero_grad()
    loss_total = 0.0
    for batch in group:
        ad.new_tape()
        nll, _ = model.loss_sum(batch)
        loss_total += nll.item()
        ad.backward(ad.scale(nll, 1.0 / total_tokens))
    return loss_total / total_tokens


def train_step(model: Seq2Seq, group: Sequence, optimizer: Adam, schedule: Callable[[int], float],
               clip: float | None = None) -> float:
    """One optimizer update from one accumulation group; returns the mean token loss."""
    loss = accumulate_gradients(model, group)
    step = optimizer.step_count + 1
    if not math.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss} at step {step}")
    if clip is not None:
        clip_grad_norm(model.parameters(), clip)
    optimizer.step(schedule(step))
    return loss


def evaluate_perplexity(model: Seq2Seq, batches: Iterable) -> float:
    nll = tokens = 0.0
    with ad.no_grad():
        for batch in batches:
            s, n = model.loss_sum(batch)
            nll += s.item()
            tokens += n
    return math.exp(nll / tokens)


def token_accuracy(model: Seq2Seq, batches: Iterable) -> float:
    """Teacher-forced fraction of target tokens whose argmax prediction is correct."""
    hits = total = 0
    with ad.no_grad():
        for batch in batches:
            pred = model.forward_logits(batch.src, batch.tgt_in).data.argmax(-1)
            mask = batch.tgt_mask
            hits += int(((pred == batch.tgt_out) & mask).sum())
            total += int(mask.sum())
    return hits / total


class MetricsWriter:
    COLUMNS = ("step", "wall_time", "train_loss", "valid_ppl", "learning_rate")

    def __init__(self, path):
        self.path = Path(path)
        with self.path.open("w", newline="") as f:
            csv.writer(f).writerow(self.COLUMNS)

    def write(self, step: int, wall_time: float, train_loss: float, valid_ppl: float, lr: float) -> None:
        with self.path.open("a", newline="") as f:
            csv.writer(f).writerow([step, f"{wall_time:.6f}", repr(float(train_loss)),
                                    repr(float(valid_ppl)), repr(float(lr))])


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as f:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(f)]


# ----------------------------------------------------------------------------
# checkpoints


class CheckpointError(Exception):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointIntegrityError(CheckpointError):
    pass


class MissingTensorError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


def _le_dtype(arr: np.ndarray) -> np.dtype:
    return arr.dtype.newbyteorder("<")


def save_checkpoint(model: Seq2Seq, path, optimizer: Adam | None = None, step: int = 0,
                    extra: dict | None = None) -> None:
    """Write parameters and state atomically: magic line, JSON header, little-endian payload."""
    tensors = dict(model.named_parameters())
    named = {name: t.data for name, t in tensors.items()}
    if optimizer is not None:
        named.update(optimizer.state_arrays())
    entries, chunks, offset = [], [], 0
    for name, arr in named.items():
        buf = np.ascontiguousarray(arr, dtype=_le_dtype(arr)).tobytes()
        entries.append({"name": name, "dtype": np.dtype(arr.dtype).str.lstrip("<>=|"),
                        "shape": list(arr.shape), "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    payload = b"".join(chunks)
    header = {
        "config": model.config.to_dict(),
        "scheme": model.scheme.to_dict(),
        "step": step,
        "pruned": int(getattr(model, "_pruned", 0)),
        "optimizer": None if optimizer is None else {
            "step_count": optimizer.step_count, "beta1": optimizer.beta1,
            "beta2": optimizer.beta2, "eps": optimizer.eps},
        "extra": extra or {},
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "tensors": entries,
    }
    head = json.dumps(header, indent=1).encode()
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(f"{len(head)}\n".encode())
            f.write(head)
            f.write(b"\n")
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_checkpoint(path) -> tuple[dict, dict]:
    """Return (header, name -> array) after validating the file."""
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CorruptCheckpointError(f"{path}: bad magic string")
    pos = len(MAGIC)
    nl = raw.find(b"\n", pos)
    try:
        hlen = int(raw[pos:nl])
        header = json.loads(raw[nl + 1:nl + 1 + hlen])
    except (ValueError, json.JSONDecodeError) as e:
        raise CorruptCheckpointError(f"{path}: unreadable header ({e})") from None
    start = nl + 1 + hlen + 1
    payload = raw[start:]
    if len(payload) != header.get("payload_bytes"):
        raise CheckpointIntegrityError(
            f"{path}: payload has {len(payload)} bytes, header promises {header.get('payload_bytes')}")
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointIntegrityError(f"{path}: payload checksum mismatch")
    arrays = {}
    for e in header["tensors"]:
        dt = np.dtype(e["dtype"]).newbyteorder("<")
        buf = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype=dt).reshape(e["shape"]).astype(dt.newbyteorder("="))
    return header, arrays


def load_checkpoint(path, with_optimizer: bool = False):
    """Rebuild the model (and optionally its optimizer) stored at ``path``."""
    header, arrays = read_checkpoint(path)
    config = ModelConfig.from_dict(header["config"])
    scheme = FactorizationScheme.from_dict(header["scheme"])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", FactorizationWarning)
        model = build_model(config, scheme, seed=0)
    for name, t in model.named_parameters():
        if name not in arrays:
            raise MissingTensorError(f"{path}: tensor {name!r} missing")
        arr = arrays[name]
        if tuple(arr.shape) != t.shape:
            raise ShapeMismatchError(f"{path}: tensor {name!r} has shape {tuple(arr.shape)}, model expects {t.shape}")
        t.data = np.array(arr, dtype=arr.dtype)
    model._pruned = int(header.get("pruned", 0))
    if not with_optimizer:
        return model
    opt = None
    if header.get("optimizer"):
        o = header["optimizer"]
        names = dict(model.named_parameters())
        opt = Adam(names, beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"], step_count=o["step_count"],
                   m={n: arrays[f"optimizer.m.{n}"].copy() for n in names},
                   v={n: arrays[f"optimizer.v.{n}"].copy() for n in names})
    return model, opt, header


def clone_model(model: Seq2Seq) -> Seq2Seq:
    return copy.deepcopy(model)


def cast_model(model: Module, dtype) -> None:
    for p in model.parameters():
        p.data = p.data.astype(dtype)


@dataclass
class FitResult:
    steps: int
    final_loss: float
    valid_ppl: float
    wall_time: float
    history: list = field(default_factory=list)


def fit(model: Seq2Seq, train_corpus, plan, steps: int, valid_corpus=None, *, warmup: int = 400,
        lr_factor: float = 1.0, lr: float = 1e-3, eval_every: int = 100, metrics_path=None,
        clip: float | None = None, eval_batch: int = 64, log: Callable[[str], None] | None = None) -> FitResult:
    """Train for ``steps`` optimizer updates, cycling through epochs of ``train_corpus``."""
    optimizer = make_optimizer(model)
    schedule = make_schedule(model, warmup, lr_factor, lr)
    if clip is None and model.config.family == "lstm":
        clip = 5.0
    writer = MetricsWriter(metrics_path) if metrics_path else None
    t0 = time.perf_counter()
    step, epoch, loss, ppl = 0, 0, math.nan, math.nan
    recent: list[float] = []
    history = []
    while step < steps:
        for group in make_batches(train_corpus, plan, epoch):
            loss = train_step(model, group, optimizer, schedule, clip=clip)
            step += 1
            recent.append(loss)
            if step % eval_every == 0 or step == steps:
                if valid_corpus is not None:
                    ppl = evaluate_perplexity(model, sequential_batches(valid_corpus, eval_batch))
                    schedule.report(math.log(ppl))
                wall = time.perf_counter() - t0
                mean_loss = float(np.mean(recent))
                recent.clear()
                history.append((step, wall, mean_loss, ppl))
                if writer:
                    writer.write(step, wall, mean_loss, ppl, schedule(step))
                if log:
                    log(f"step {step} loss {mean_loss:.4f} valid ppl {ppl:.4f} ({wall:.1f}s)")
            if step >= steps:
                break
        epoch += 1
    ad.new_tape()
    return FitResult(step, loss, ppl, time.perf_counter() - t0, history)
