"""Post-training compression: magnitude pruning, SVD factorization, spectrum reports."""
from __future__ import annotations

import copy
import csv
import io
import warnings
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ContractError, Tensor
from .layers import (
    DenseLinear,
    Embedding,
    FactorizationWarning,
    FactorizedEmbedding,
    FactorizedLinear,
    Module,
)
from .linalg import SingularSpectrum, relevant_rank, svd, truncate_to_rank
from .models import ConfigurationError, FactorizationScheme, Seq2Seq

RELEVANCE_RATIO = 0.1


def weight_tensors(model: Module) -> list[tuple[str, Tensor]]:
    """All 2-D parameters, sorted by name (the pruning tie-break order)."""
    return sorted(((n, p) for n, p in model.named_parameters() if p.ndim == 2), key=lambda kv: kv[0])


def pruned_count(model: Module) -> int:
    return getattr(model, "_pruned", 0)


def effective_param_count(model: Module) -> int:
    """Stored parameters minus entries removed by pruning."""
    return sum(p.size for p in model.parameters()) - pruned_count(model)


def prune(model: Seq2Seq, fraction: float) -> Seq2Seq:
    """Zero the ``round(fraction * N)`` smallest-magnitude weights across all matrices.

    Biases and norm gains are exempt. Ties are broken by tensor name, then flat index.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ContractError(f"pruning fraction {fraction} outside [0, 1]")
    out = copy.deepcopy(model)
    tensors = weight_tensors(out)
    sizes = [p.size for _, p in tensors]
    total = sum(sizes)
    k = int(round(fraction * total))
    if k:
        mags = np.concatenate([np.abs(p.data.reshape(-1)).astype(np.float64) for _, p in tensors])
        order = np.argsort(mags, kind="stable")
        mask = np.ones(total, dtype=bool)
        mask[order[:k]] = False
        offset = 0
        for (_, p), n in zip(tensors, sizes):
            keep = mask[offset:offset + n].reshape(p.shape)
            p.data = np.where(keep, p.data, p.data.dtype.type(0))
            offset += n
    out._pruned = max(k, pruned_count(model))
    return out


def _replace(module: Module, fn) -> None:
    """Replace child layers in place wherever ``fn(child)`` returns a new layer."""
    for key, val in list(vars(module).items()):
        if key.startswith("_"):
            continue
        if isinstance(val, Module):
            new = fn(val)
            if new is not None:
                setattr(module, key, new)
            else:
                _replace(val, fn)
        elif isinstance(val, list):
            for i, item in enumerate(val):
                if isinstance(item, Module):
                    new = fn(item)
                    if new is not None:
                        val[i] = new
                    else:
                        _replace(item, fn)


def _check_rank(name: str, n: int, m: int, p: int) -> None:
    if not 1 <= p <= min(n, m):
        raise ConfigurationError(f"rank {p} invalid for {name} ({n}x{m}); must lie in [1, {min(n, m)}]")


def post_training_factorize(model: Seq2Seq, ranks: dict | int | FactorizationScheme) -> Seq2Seq:
    """Replace dense matrices in the mapped groups by balanced truncated-SVD factors.

    The result has the same structure as an in-training factorized model of the
    same ranks and can be trained further.
    """
    if isinstance(ranks, FactorizationScheme):
        scheme = ranks
    else:
        scheme = FactorizationScheme.post_training(ranks)
    if model.config.family == "lstm" and set(scheme.groups) - {"embed_projection"}:
        raise ConfigurationError("LSTM models only factorize embedding/projection layers")
    out = copy.deepcopy(model)
    names = {id(layer): name for name, layer in out.named_modules()}
    dtype = next(iter(out.parameters())).dtype

    def convert(layer):
        p = scheme.inner_for(layer.group) if layer.group else None
        if p is None:
            return None
        name = names.get(id(layer), "?")
        if isinstance(layer, DenseLinear):
            W = layer.weight.data.astype(np.float64)
            _check_rank(name, *W.shape, p)
            A, B = truncate_to_rank(W, p)
            bias = None if layer.bias is None else layer.bias.data.copy()
            return FactorizedLinear.from_factors(A.astype(dtype), B.astype(dtype), bias,
                                                 layer.activation, layer.group, name)
        if isinstance(layer, Embedding):
            E = layer.table.data.astype(np.float64)
            _check_rank(name, *E.shape, p)
            A, B = truncate_to_rank(E, p)
            return FactorizedEmbedding.from_factors(A.astype(dtype), B.astype(dtype), layer.group, name)
        return None

    _replace(out, convert)
    out.scheme = scheme
    out.retie()
    out._pruned = 0
    return out


def prune_after_factorize(model: Seq2Seq, ranks, fraction: float) -> Seq2Seq:
    return prune(post_training_factorize(model, ranks), fraction)


def equal_size_prune_fraction(model: Seq2Seq, target_params: int) -> float:
    """Weight fraction whose pruning leaves ``target_params`` effective parameters."""
    removed = effective_param_count(model) - target_params
    total = sum(p.size for _, p in weight_tensors(model))
    if not 0 <= removed <= total:
        raise ContractError(f"cannot reach {target_params} parameters by pruning weights")
    return removed / total


# ----------------------------------------------------------------------------
# spectrum analysis


@dataclass
class SpectrumEntry:
    name: str
    group: str
    spectrum: SingularSpectrum
    relevant_rank: int
    shape: tuple

    @property
    def relevant_fraction(self) -> float:
        return self.relevant_rank / len(self.spectrum)


@dataclass
class SpectrumReport:
    entries: list = field(default_factory=list)
    ratio: float = RELEVANCE_RATIO

    def by_group(self) -> dict:
        out: dict = {}
        for e in self.entries:
            out.setdefault(e.group, []).append(e)
        return out

    def to_csv(self, top_k: int = 5) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["matrix", "group", "rows", "cols", "top_values", "relevant_rank", "relevant_fraction"])
        for e in self.entries:
            top = ";".join(f"{v:.6g}" for v in e.spectrum.values[:top_k])
            w.writerow([e.name, e.group, e.shape[0], e.shape[1], top, e.relevant_rank,
                        f"{e.relevant_fraction:.6f}"])
        return buf.getvalue()


def _weight_groups(model: Module) -> list[tuple[str, str, Tensor]]:
    out = []
    for mname, module in model.named_modules():
        for key, val in vars(module).items():
            if key.startswith("_") or not isinstance(val, Tensor) or not val.requires_grad or val.ndim != 2:
                continue
            name = f"{mname}.{key}" if mname else key
            out.append((name, module.group or "other", val))
    return out


def spectrum_report(model: Module, ratio: float = RELEVANCE_RATIO) -> SpectrumReport:
    """Singular spectrum and relevant rank of every weight matrix."""
    entries = []
    for name, group, t in _weight_groups(model):
        S = svd(t.data.astype(np.float64)).S
        spec = SingularSpectrum(S, name)
        entries.append(SpectrumEntry(name, group, spec, relevant_rank(spec, ratio), t.shape))
    return SpectrumReport(entries, ratio)


def matrix_spectrum_entry(M: np.ndarray, name: str = "matrix", group: str = "other",
                          ratio: float = RELEVANCE_RATIO) -> SpectrumEntry:
    spec = SingularSpectrum(svd(M).S, name)
    return SpectrumEntry(name, group, spec, relevant_rank(spec, ratio), np.shape(M))


# ----------------------------------------------------------------------------
# reporting


@dataclass
class CompressionReport:
    method: str
    params_before: int
    params_after: int
    weights_before: int
    weights_zeroed: int

    @property
    def size_reduction(self) -> float:
        return 100.0 * (1 - self.params_after / self.params_before)

    @property
    def weight_zero_fraction(self) -> float:
        return self.weights_zeroed / self.weights_before if self.weights_before else 0.0

    def row(self) -> str:
        return f"{self.method} | -{self.size_reduction:.1f}% | {self.params_before} -> {self.params_after}"


def compression_report(method: str, before: Seq2Seq, after: Seq2Seq, baseline_params: int | None = None):
    base = baseline_params if baseline_params is not None else effective_param_count(before)
    weights = sum(p.size for _, p in weight_tensors(after))
    return CompressionReport(method, base, effective_param_count(after), weights, pruned_count(after))


def quiet_factorize(model: Seq2Seq, ranks) -> Seq2Seq:
    """``post_training_factorize`` without break-even warnings (full-rank checks)."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", FactorizationWarning)
        return post_training_factorize(model, ranks)
