"""Experiment driver behind the command-line interface.

A run directory holds ``config.yaml`` (every setting, defaults included),
``metrics.csv``, ``model.ckpt``, the two vocabularies and ``summary.json``.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .compression import (
    compression_report,
    effective_param_count,
    equal_size_prune_fraction,
    post_training_factorize,
    prune,
    prune_after_factorize,
    spectrum_report,
)
from .data import (
    BatchPlan,
    Vocab,
    build_vocab,
    encode_pairs,
    read_parallel,
    sequential_batches,
    synthetic_task,
    write_parallel,
)
from .decoding import bleu, translate
from .layers import FactorizationWarning
from .models import (
    ConfigurationError,
    FactorizationScheme,
    ModelConfig,
    Seq2Seq,
    build_model,
    param_count,
    preset,
)
from .training import evaluate_perplexity, fit, load_checkpoint, read_metrics, save_checkpoint

log = logging.getLogger("lowrank_nmt")


@dataclass
class TaskConfig:
    kind: str = "reverse"
    vocab_size: int = 50
    min_len: int = 1
    max_len: int = 10
    train_count: int = 5000
    valid_count: int = 200
    seed: int = 1234


@dataclass
class ExperimentConfig:
    preset: str = "toy-transformer"
    scheme: str = "none"  # none | embed | ff | attention
    inner_size: int | None = None
    task: TaskConfig = field(default_factory=TaskConfig)
    train_src: str | None = None
    train_tgt: str | None = None
    valid_src: str | None = None
    valid_tgt: str | None = None
    batch_size: int = 64
    accumulation: int = 1
    steps: int = 300
    eval_every: int = 50
    warmup: int = 400
    lr_factor: float = 1.0
    lr: float = 1e-3
    beam_width: int = 1
    max_decode_len: int = 20
    seed: int = 0
    label: str = ""
    out: str = "runs/run"

    def factorization(self) -> FactorizationScheme:
        if self.scheme == "none":
            return FactorizationScheme.none()
        if self.inner_size is None:
            raise ConfigurationError(f"scheme {self.scheme!r} needs an inner size")
        return FactorizationScheme.in_training(self.scheme, self.inner_size)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        task = TaskConfig(**d.pop("task", {}) or {})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(task=task, **d)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()) or {})

    def validate(self) -> None:
        preset(self.preset)
        self.factorization()
        if self.steps < 1 or self.batch_size < 1 or self.accumulation < 1:
            raise ConfigurationError("steps, batch size and accumulation must be positive")


def load_corpora(cfg: ExperimentConfig):
    if cfg.train_src:
        train = read_parallel(cfg.train_src, cfg.train_tgt)
        valid = read_parallel(cfg.valid_src, cfg.valid_tgt) if cfg.valid_src else train[:200]
        return train, valid
    t = cfg.task
    train = synthetic_task(t.kind, t.vocab_size, (t.min_len, t.max_len), t.train_count, t.seed)
    valid = synthetic_task(t.kind, t.vocab_size, (t.min_len, t.max_len), t.valid_count, t.seed + 1)
    return train, valid


def model_config_for(cfg: ExperimentConfig, src_vocab: Vocab, tgt_vocab: Vocab) -> ModelConfig:
    base = preset(cfg.preset)
    if base.name.startswith("toy"):
        return base.with_vocab(len(src_vocab), len(tgt_vocab))
    return base


def corpus_bleu(model: Seq2Seq, pairs, src_vocab: Vocab, tgt_vocab: Vocab, beam_width: int = 1,
                max_len: int = 20) -> tuple[float, list[str]]:
    sources = [src_vocab.encode(s.split()) for s, _ in pairs]
    hyps = [" ".join(tgt_vocab.decode(h)) for h in translate(model, sources, beam_width, max_len)]
    return bleu(hyps, [t for _, t in pairs]), hyps


@dataclass
class RunResult:
    out: Path
    model: Seq2Seq
    summary: dict


def run_train(cfg: ExperimentConfig, baseline_params: int | None = None) -> RunResult:
    """Train one model to budget and write the run directory."""
    cfg.validate()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.dump())
    train, valid = load_corpora(cfg)
    src_vocab = build_vocab(s for s, _ in train)
    tgt_vocab = build_vocab(t for _, t in train)
    src_vocab.save(out / "src.vocab")
    tgt_vocab.save(out / "tgt.vocab")
    mcfg = model_config_for(cfg, src_vocab, tgt_vocab)
    scheme = cfg.factorization()
    model = build_model(mcfg, scheme, seed=cfg.seed)
    tr = encode_pairs(train, src_vocab, tgt_vocab)
    va = encode_pairs(valid, src_vocab, tgt_vocab)
    plan = BatchPlan(cfg.batch_size, cfg.accumulation, seed=cfg.seed)
    result = fit(model, tr, plan, cfg.steps, va, warmup=cfg.warmup, lr_factor=cfg.lr_factor, lr=cfg.lr,
                 eval_every=cfg.eval_every, metrics_path=out / "metrics.csv", log=log.info)
    save_checkpoint(model, out / "model.ckpt", step=result.steps)
    score, hyps = corpus_bleu(model, valid, src_vocab, tgt_vocab, cfg.beam_width, cfg.max_decode_len)
    (out / "valid.hyp").write_text("".join(h + "\n" for h in hyps))
    base = baseline_params or param_count(mcfg)["total"]
    params = effective_param_count(model)
    summary = {
        "label": cfg.label or ("None (baseline)" if scheme.mode == "none" else scheme.label()),
        "method": scheme.label(),
        "params": params,
        "baseline_params": base,
        "size_reduction": 100.0 * (1 - params / base),
        "bleu": score,
        "valid_ppl": result.valid_ppl,
        "steps": result.steps,
        "batch_size": cfg.batch_size,
        "accumulation": cfg.accumulation,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return RunResult(out, model, summary)


def _run_assets(ckpt: Path):
    run = ckpt.parent
    try:
        cfg = ExperimentConfig.load(run / "config.yaml")
        return cfg, Vocab.load(run / "src.vocab"), Vocab.load(run / "tgt.vocab")
    except FileNotFoundError:
        return None, None, None


def run_compress(ckpt, method: str, out, rank: int | None = None, groups: str = "attention",
                 fraction: float | None = None) -> dict:
    """Apply one compression method to a checkpoint and write the new checkpoint plus a report."""
    ckpt, out = Path(ckpt), Path(out)
    if method == "prune":
        if fraction is None or rank is not None:
            raise ConfigurationError("prune takes --prune-fraction and no --rank")
    elif method == "svd":
        if rank is None or fraction is not None:
            raise ConfigurationError("svd takes --rank and no --prune-fraction")
    elif method == "svd_then_prune":
        if rank is None or fraction is None:
            raise ConfigurationError("svd_then_prune takes both --rank and --prune-fraction")
    else:
        raise ConfigurationError(f"unknown compression method {method!r}")
    model = load_checkpoint(ckpt)
    ranks = FactorizationScheme.post_training(rank, groups) if rank is not None else None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", FactorizationWarning)
        if method == "prune":
            new = prune(model, fraction)
        elif method == "svd":
            new = post_training_factorize(model, ranks)
        else:
            new = prune_after_factorize(model, ranks, fraction)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(new, out / "model.ckpt")
    base = param_count(model.config)["total"]
    rep = compression_report(method, model, new, baseline_params=base)
    report = {
        "method": method, "rank": rank, "groups": groups, "prune_fraction": fraction,
        "params_before": effective_param_count(model), "params_after": rep.params_after,
        "baseline_params": base, "size_reduction": rep.size_reduction,
        "weights_zeroed_fraction": rep.weight_zero_fraction,
    }
    cfg, sv, tv = _run_assets(ckpt)
    if cfg is not None:
        _, valid = load_corpora(cfg)
        va = encode_pairs(valid, sv, tv)
        for tag, m in (("before", model), ("after", new)):
            report[f"valid_ppl_{tag}"] = evaluate_perplexity(m, sequential_batches(va, 64))
            report[f"bleu_{tag}"] = corpus_bleu(m, valid, sv, tv, cfg.beam_width, cfg.max_decode_len)[0]
        for name in ("config.yaml", "src.vocab", "tgt.vocab"):
            (out / name).write_bytes((ckpt.parent / name).read_bytes())
    (out / "report.json").write_text(json.dumps(report, indent=2))
    lines = [f"{k}: {v}" for k, v in report.items()]
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    (out / "summary.json").write_text(json.dumps({
        "label": f"{method}" + (f", rank={rank}" if rank else "") + (f", pruned {fraction:.0%}" if fraction else ""),
        "method": method, "params": rep.params_after, "baseline_params": base,
        "size_reduction": rep.size_reduction, "bleu": report.get("bleu_after", math.nan),
        "valid_ppl": report.get("valid_ppl_after", math.nan)}, indent=2))
    return report


def run_spectrum(ckpt, out_csv) -> str:
    model = load_checkpoint(ckpt)
    text = spectrum_report(model).to_csv()
    Path(out_csv).write_text(text)
    return text


def run_evaluate(ckpt, src_path, out_path, ref_path=None, beam_width: int = 1, max_len: int = 50) -> float | None:
    ckpt = Path(ckpt)
    model = load_checkpoint(ckpt)
    _, sv, tv = _run_assets(ckpt)
    if sv is None:
        raise ConfigurationError(f"{ckpt.parent} lacks the vocabularies needed for decoding")
    sources = [sv.encode(line.split()) for line in Path(src_path).read_text(encoding="utf-8").splitlines()]
    hyps = [" ".join(tv.decode(h)) for h in translate(model, sources, beam_width, max_len)]
    Path(out_path).write_text("".join(h + "\n" for h in hyps), encoding="utf-8")
    if ref_path:
        refs = Path(ref_path).read_text(encoding="utf-8").splitlines()
        return bleu(hyps, refs)
    return None


# ----------------------------------------------------------------------------
# reports

REPORT_COLUMNS = ("compression_method", "size_reduction", "bleu")


def report_rows(run_dirs) -> list[dict]:
    rows = []
    for d in map(Path, run_dirs):
        summary = d / "summary.json"
        if not summary.exists():
            warnings.warn(f"{d}: no summary.json, skipped")
            continue
        s = json.loads(summary.read_text())
        rows.append({"compression_method": s["label"], "size_reduction": round(s["size_reduction"], 2),
                     "bleu": round(float(s["bleu"]), 2)})
    return rows


def emit_report_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def parse_report_csv(text: str) -> list[dict]:
    rows = []
    for r in csv.DictReader(io.StringIO(text)):
        rows.append({"compression_method": r["compression_method"], "size_reduction": float(r["size_reduction"]),
                     "bleu": float(r["bleu"])})
    return rows


def format_table(rows: list[dict]) -> str:
    width = max([len("Compression method")] + [len(r["compression_method"]) for r in rows])
    lines = [f"{'Compression method':<{width}} | Size reduction | BLEU",
             f"{'-' * width}-+----------------+------"]
    for r in rows:
        red = "0%" if r["size_reduction"] == 0 else f"-{r['size_reduction']:.1f}%"
        lines.append(f"{r['compression_method']:<{width}} | {red:>14} | {r['bleu']:.2f}")
    return "\n".join(lines) + "\n"


def plot_curves(run_dirs, path) -> int:
    """Wall-clock time vs validation perplexity, one series per run; returns the series count."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.fonttype"] = "none"  # keep labels as searchable text
    fig, ax = plt.subplots(figsize=(6, 4))
    n = 0
    for d in map(Path, run_dirs):
        mpath = d / "metrics.csv"
        if not mpath.exists():
            warnings.warn(f"{d}: no metrics.csv, skipped")
            continue
        rows = read_metrics(mpath)
        label = d.name
        if (d / "summary.json").exists():
            label = json.loads((d / "summary.json").read_text())["label"]
        ax.plot([r["wall_time"] for r in rows], [r["valid_ppl"] for r in rows], marker="o", ms=3, label=label)
        n += 1
    ax.set_xlabel("wall-clock time (s)")
    ax.set_ylabel("validation perplexity")
    ax.set_yscale("log")
    if n:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return n


def run_report(run_dirs, out) -> list[dict]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rows = report_rows(run_dirs)
    (out / "report.csv").write_text(emit_report_csv(rows))
    (out / "report.txt").write_text(format_table(rows))
    plot_curves(run_dirs, out / "curves.svg")
    return rows


# ----------------------------------------------------------------------------
# composite experiments


def run_comparison(cfg: ExperimentConfig, inner_size: int | None = None) -> list[dict]:
    """Baseline, in-training factorized at ``inner_size`` (default d/4) and a baseline pruned to equal size."""
    root = Path(cfg.out)
    d = preset(cfg.preset).embedding_dim
    p = inner_size or d // 4
    base = run_train(dataclasses.replace(cfg, scheme="none", inner_size=None, label="None (baseline)",
                                         out=str(root / "baseline")))
    fact = run_train(dataclasses.replace(cfg, scheme=cfg.scheme if cfg.scheme != "none" else "embed",
                                         inner_size=p, out=str(root / "factorized")),
                     baseline_params=base.summary["params"])
    fraction = equal_size_prune_fraction(base.model, fact.summary["params"])
    run_compress(base.out / "model.ckpt", "prune", root / "pruned", fraction=fraction)
    dirs = [root / "baseline", root / "factorized", root / "pruned"]
    s = json.loads((root / "pruned" / "summary.json").read_text())
    s["label"] = f"Pruned to equal size ({fraction:.1%} of weights)"
    (root / "pruned" / "summary.json").write_text(json.dumps(s, indent=2))
    return run_report(dirs, root / "report")


def memory_matched_batch_size(base_batch: int, base_params: int, params: int) -> int:
    """Mini-batch size that keeps (parameters x sentences) equal to the baseline budget."""
    return max(1, int(base_batch * base_params // params))


def run_memory_matched(cfg: ExperimentConfig, inner_size: int, scheme: str = "attention") -> list[dict]:
    """Baseline and a factorized model whose freed parameter memory doubles (or more) its batch."""
    root = Path(cfg.out)
    base_cfg = dataclasses.replace(cfg, scheme="none", inner_size=None, label="baseline",
                                   out=str(root / "baseline"))
    base = run_train(base_cfg)
    fscheme = FactorizationScheme.in_training(scheme, inner_size)
    fparams = param_count(base.model.config, fscheme)["total"]
    batch = memory_matched_batch_size(cfg.batch_size, base.summary["params"], fparams)
    fact_cfg = dataclasses.replace(cfg, scheme=scheme, inner_size=inner_size, batch_size=batch,
                                   label=f"factorized (inner {inner_size}), batch {batch}",
                                   out=str(root / "factorized"))
    run_train(fact_cfg, baseline_params=base.summary["params"])
    return run_report([root / "baseline", root / "factorized"], root / "report")
