"""Adamax, linear warmup, the training loop and the eight-variant grid runner."""
from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .datasets import VQADataset, VQAExample
from .fusion import FusionKind
from .metrics import render_table, score
from .model import VARIANTS, AggregationKind, ModelConfig, RamenModel, tiny_config, variant_name

log = logging.getLogger(__name__)

WARMUP_EPOCHS = 4


def warmup_lr(base_lr: float, epoch: int) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return base_lr * min(1.0, (epoch + 1) / WARMUP_EPOCHS)


class DivergenceError(FloatingPointError):
    def __init__(self, msg: str, epoch: int | None = None):
        self.epoch = epoch
        super().__init__(msg)


class Adamax:
    """m <- b1 m + (1-b1) g;  u <- max(b2 u, |g|);  p <- p - lr m / ((1 - b1^t)(u + eps))."""

    def __init__(self, named_params, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(named_params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.u = [np.zeros_like(p.data) for _, p in self.params]

    def step(self, lr: float) -> None:
        grads = []
        for name, p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient in parameter {name!r}")
            grads.append(g)
        self.step_count += 1
        corr = 1.0 - self.beta1 ** self.step_count
        for (_, p), g, m, u in zip(self.params, grads, self.m, self.u):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            np.maximum(self.beta2 * u, np.abs(g), out=u)
            p.data = p.data - lr * m / (corr * (u + self.eps))

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


def soft_targets(examples: Sequence[VQAExample], num_answers: int) -> np.ndarray:
    """One-hot gold answers, or min(count/3, 1) annotator mass renormalized."""
    t = np.zeros((len(examples), num_answers))
    for i, ex in enumerate(examples):
        if ex.annotator_answers is None:
            t[i, ex.answer] = 1.0
            continue
        counts = np.bincount(ex.annotator_answers, minlength=num_answers)[:num_answers]
        t[i] = np.minimum(counts / 3.0, 1.0)
        t[i] /= t[i].sum()
    return t


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over the batch of -sum_k target_k log softmax(logits)_k."""
    ls = ad.log_softmax(logits)
    return ad.scale(ad.sum_(ad.mul(ls, Tensor(targets))), -1.0 / targets.shape[0])


def stack_regions(examples: Sequence[VQAExample]) -> np.ndarray:
    return np.stack([ex.regions for ex in examples]) if examples else np.zeros((0, 0, 0))


def predict_examples(model: RamenModel, examples: Sequence[VQAExample], batch_size: int = 256) -> dict[str, int]:
    if not examples:
        return {}
    ids = model.predict(stack_regions(examples), [ex.tokens for ex in examples], batch_size)
    return {ex.id: int(a) for ex, a in zip(examples, ids)}


def evaluate(model: RamenModel, examples: Sequence[VQAExample], metric: str):
    return score(metric, predict_examples(model, examples), examples)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_score: float
    test_score: float | None
    wall_time: float


@dataclass
class TrainRunRecord:
    dataset: str
    variant: str
    epochs: list[EpochRecord] = field(default_factory=list)

    @property
    def best_epoch(self) -> int | None:
        scored = [e for e in self.epochs if e.test_score is not None]
        if not scored:
            return None
        return max(scored, key=lambda e: (e.test_score, -e.epoch)).epoch

    @property
    def best_test_score(self) -> float | None:
        b = self.best_epoch
        return None if b is None else self.epochs[b].test_score

    @property
    def losses(self) -> list[float]:
        return [e.train_loss for e in self.epochs]

    def summary(self) -> dict:
        b = self.best_epoch
        return {
            "dataset": self.dataset,
            "variant": self.variant,
            "epochs": len(self.epochs),
            "best_epoch": b,
            "train_score": None if b is None else self.epochs[b].train_score,
            "test_score": self.best_test_score,
        }


def epoch_log_line(dataset: str, variant: str, e: EpochRecord) -> str:
    return json.dumps({
        "dataset": dataset, "variant": variant, "epoch": e.epoch, "lr": e.lr,
        "train_loss": e.train_loss, "train_score": e.train_score, "test_score": e.test_score,
    })


def fit(
    model: RamenModel,
    dataset: VQADataset,
    epochs: int,
    batch_size: int = 32,
    base_lr: float = 2e-3,
    seed: int = 0,
    log_file: IO | None = None,
    eval_split: str = "test",
) -> TrainRunRecord:
    train = dataset.train
    if not train:
        raise ValueError("fit: empty training split")
    if batch_size < 2:
        raise ValueError("fit: batch_size must be >= 2 (batch normalization)")
    cfg = model.config
    test = dataset.split(eval_split)
    record = TrainRunRecord(dataset.name, cfg.variant)
    opt = Adamax(model.named_parameters())
    regions = stack_regions(train)
    targets = soft_targets(train, cfg.answer_vocab_size)
    n = len(train)

    for epoch in range(epochs):
        t0 = time.perf_counter()
        lr = warmup_lr(base_lr, epoch)
        order = np.random.default_rng([seed, epoch]).permutation(n)
        # a trailing single example cannot be batch-normalized; fold it into the previous batch
        starts = list(range(0, n, batch_size))
        if len(starts) > 1 and n - starts[-1] == 1:
            starts.pop()
        total = 0.0
        for k, s in enumerate(starts):
            e = starts[k + 1] if k + 1 < len(starts) else n
            idx = order[s:e]
            with Tape():
                logits = model.forward_batch(regions[idx], [train[i].tokens for i in idx], "train")
                loss = cross_entropy(logits, targets[idx])
                if not math.isfinite(loss.item()):
                    raise DivergenceError(f"loss is {loss.item()} at epoch {epoch}", epoch)
                opt.zero_grad()
                ad.backward(loss)
            try:
                opt.step(lr)
            except DivergenceError as exc:
                raise DivergenceError(f"{exc} at epoch {epoch}", epoch) from None
            total += loss.item() * len(idx)
        train_score = evaluate(model, train, dataset.metric).overall
        test_score = evaluate(model, test, dataset.metric).overall if test else None
        rec = EpochRecord(epoch, lr, total / n, train_score, test_score, time.perf_counter() - t0)
        record.epochs.append(rec)
        if log_file is not None:
            log_file.write(epoch_log_line(dataset.name, record.variant, rec) + "\n")
            log_file.flush()
        log.info("%s %s epoch %d loss %.4f train %.4f test %s", dataset.name, record.variant,
                 epoch, rec.train_loss, train_score, test_score)
    model.eval()
    return record


# ---------------------------------------------------------------- grid

@dataclass
class GridConfig:
    epochs: int = 25
    transformer_epochs: int | None = 50
    batch_size: int = 32
    lr: float = 2e-3
    seed: int = 0
    dq: int | None = None
    model: dict = field(default_factory=dict)
    workers: int = 1


def make_model_config(dataset: VQADataset, aggregation, fusion, late_fusion=None, dq: int | None = None,
                      seed: int = 0, **overrides) -> ModelConfig:
    """Model sized for ``dataset``; elementwise fusion lifts the question dim to dv."""
    fusion = FusionKind.parse(fusion)
    late = FusionKind.parse(late_fusion) if late_fusion is not None else fusion
    if dq is None:
        dq = dataset.dv if (fusion.elementwise or late.elementwise) else max(1, dataset.dv // 2)
    return ModelConfig(
        vocab_size=len(dataset.vocab.tokens),
        answer_vocab_size=len(dataset.vocab.answers),
        dq=dq, dv=dataset.dv, regions=dataset.regions,
        early_fusion=fusion, late_fusion=late, aggregation=aggregation, seed=seed, **overrides,
    )


@dataclass
class EvalReport:
    datasets: list[str]
    variants: list[str]
    metrics: dict[str, str]
    scores: dict = field(default_factory=dict)      # (dataset, variant) -> best test score
    per_type: dict = field(default_factory=dict)    # (dataset, variant) -> {type: score}
    records: dict = field(default_factory=dict)     # (dataset, variant) -> TrainRunRecord
    failures: dict = field(default_factory=dict)    # (dataset, variant) -> message

    def to_tsv(self) -> str:
        return render_table(self.scores, self.datasets, self.variants)

    def column_mean(self, variant: str) -> float | None:
        vals = [self.scores[(d, variant)] for d in self.datasets if self.scores.get((d, variant)) is not None]
        return sum(vals) / len(vals) if vals else None


def _run_seed(seed: int, di: int, vi: int) -> int:
    return int(np.random.SeedSequence([seed, di, vi]).generate_state(1)[0])


def _train_one(args):
    dataset, agg, fus, cfg, seed = args
    mcfg = make_model_config(dataset, agg, fus, dq=cfg.dq, seed=seed, **cfg.model)
    model = RamenModel(mcfg)
    epochs = cfg.epochs
    if mcfg.aggregation is AggregationKind.TRANSFORMER and cfg.transformer_epochs is not None:
        epochs = cfg.transformer_epochs
    rec = fit(model, dataset, epochs, cfg.batch_size, cfg.lr, seed)
    per_type = {}
    if dataset.test:
        per_type = evaluate(model, dataset.test, dataset.metric).per_type
    return rec, per_type


def run_grid(
    datasets: Sequence[VQADataset],
    variants: Sequence[tuple] = VARIANTS,
    cfg: GridConfig | None = None,
    out_dir=None,
) -> EvalReport:
    """Train every (dataset, variant) pair; failures are recorded and the grid continues."""
    cfg = cfg or GridConfig()
    names = [variant_name(a, f) for a, f in variants]
    report = EvalReport([d.name for d in datasets], names, {d.name: d.metric for d in datasets})
    jobs = [
        (di, vi, (d, AggregationKind.parse(a), FusionKind.parse(f), cfg, _run_seed(cfg.seed, di, vi)))
        for di, d in enumerate(datasets) for vi, (a, f) in enumerate(variants)
    ]

    def collect(di, vi, outcome):
        key = (datasets[di].name, names[vi])
        if isinstance(outcome, Exception):
            log.warning("run %s failed: %s", key, outcome)
            report.failures[key] = f"{type(outcome).__name__}: {outcome}"
            report.scores[key] = None
            return
        rec, per_type = outcome
        report.records[key] = rec
        report.scores[key] = rec.best_test_score
        report.per_type[key] = per_type

    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            futures = [(di, vi, pool.submit(_train_one, job)) for di, vi, job in jobs]
            for di, vi, fut in futures:
                try:
                    collect(di, vi, fut.result())
                except Exception as exc:  # noqa: BLE001 - a failed run must not stop the grid
                    collect(di, vi, exc)
    else:
        for di, vi, job in jobs:
            try:
                collect(di, vi, _train_one(job))
            except Exception as exc:  # noqa: BLE001
                collect(di, vi, exc)

    if out_dir is not None:
        write_grid_outputs(report, out_dir)
    return report


def write_grid_outputs(report: EvalReport, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.tsv").write_text(report.to_tsv(), encoding="utf-8")
    with open(out / "runs.jsonl", "w", encoding="utf-8") as fh:
        for d in report.datasets:
            for v in report.variants:
                key = (d, v)
                if key in report.records:
                    row = report.records[key].summary()
                    row["metric"] = report.metrics[d]
                    row["per_type"] = report.per_type.get(key, {})
                else:
                    row = {"dataset": d, "variant": v, "error": report.failures.get(key)}
                fh.write(json.dumps(row) + "\n")
    logs = out / "logs"
    logs.mkdir(exist_ok=True)
    for (d, v), rec in report.records.items():
        with open(logs / f"{d}__{v}.jsonl", "w", encoding="utf-8") as fh:
            for e in rec.epochs:
                fh.write(epoch_log_line(d, v, e) + "\n")


def report_from_logs(paths: Sequence) -> str:
    """Results table from per-epoch run logs: each cell is the run's best test score."""
    best: dict[tuple[str, str], float | None] = {}
    datasets: list[str] = []
    for p in paths:
        with open(p, encoding="utf-8") as fh:
            for n, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                row = json.loads(line)
                try:
                    key = (row["dataset"], row["variant"])
                    ts = row["test_score"]
                except KeyError as exc:
                    raise ValueError(f"{p}: line {n}: missing field {exc}") from None
                if key[0] not in datasets:
                    datasets.append(key[0])
                if ts is not None and (best.get(key) is None or ts > best[key]):
                    best[key] = ts
                else:
                    best.setdefault(key, None)
    variants = [variant_name(a, f) for a, f in VARIANTS]
    return render_table(best, datasets, variants)


# ---------------------------------------------------------------- gradient check

def pipeline_grad_check(cfg: ModelConfig, batch: int = 2, seed: int = 0, eps: float = 1e-5,
                        tol: float = 1e-4) -> ad.GradCheckReport:
    """Central-difference check of every parameter through forward + cross-entropy."""
    model = RamenModel(cfg)
    rng = np.random.default_rng(seed)
    regions = rng.uniform(-1.0, 1.0, size=(batch, cfg.regions, cfg.dv))
    lengths = rng.integers(1, 5, size=batch)
    tokens = [rng.integers(1, cfg.vocab_size, size=int(n)).tolist() for n in lengths]
    answers = rng.integers(0, cfg.answer_vocab_size, size=batch)
    targets = np.zeros((batch, cfg.answer_vocab_size))
    targets[np.arange(batch), answers] = 1.0

    def f():
        return cross_entropy(model.forward_batch(regions, tokens, "train"), targets)

    return ad.grad_check(f, dict(model.named_parameters()), eps=eps, tol=tol)


def grad_check_variants(variants=VARIANTS, seed: int = 0, eps: float = 1e-5, tol: float = 1e-4,
                        **overrides) -> dict[str, ad.GradCheckReport]:
    return {
        variant_name(a, f): pipeline_grad_check(tiny_config(a, f, seed=seed, **overrides), seed=seed,
                                                eps=eps, tol=tol)
        for a, f in variants
    }
