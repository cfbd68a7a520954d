"""10-choose-3 accuracy, simple accuracy and mean-per-type, plus prediction/report files."""
from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .datasets import VQAExample


@dataclass
class MetricReport:
    metric: str
    overall: float
    per_type: dict[str, float] = field(default_factory=dict)


def acc_10choose3(predicted: int, annotator_answers: Sequence[int]) -> float:
    if len(annotator_answers) != 10:
        raise ValueError(f"need exactly 10 annotator answers, got {len(annotator_answers)}")
    matches = sum(1 for a in annotator_answers if a == predicted)
    return min(matches / 3.0, 1.0)


def _check_coverage(preds: Mapping[str, int], gold_ids) -> None:
    missing = [i for i in gold_ids if i not in preds]
    if missing:
        shown = ", ".join(missing[:10]) + (" ..." if len(missing) > 10 else "")
        raise KeyError(f"{len(missing)} questions have no prediction: {shown}")


def simple_accuracy(preds: Mapping[str, int], gold: Mapping[str, int]) -> float:
    _check_coverage(preds, gold)
    if not gold:
        raise ValueError("simple_accuracy over an empty question set")
    return sum(preds[i] == a for i, a in gold.items()) / len(gold)


def mean_per_type(preds: Mapping[str, int], gold: Mapping[str, tuple[int, str]]) -> MetricReport:
    """Unweighted mean over question types of per-type accuracy."""
    _check_coverage(preds, gold)
    correct: dict[str, int] = defaultdict(int)
    total: dict[str, int] = defaultdict(int)
    for i, (ans, qtype) in gold.items():
        total[qtype] += 1
        correct[qtype] += preds[i] == ans
    if not total:
        raise ValueError("mean_per_type over an empty type set")
    per_type = {t: correct[t] / total[t] for t in sorted(total)}
    return MetricReport("mean_per_type", sum(per_type.values()) / len(per_type), per_type)


def vqa_accuracy(preds: Mapping[str, int], annotators: Mapping[str, Sequence[int]]) -> float:
    _check_coverage(preds, annotators)
    if not annotators:
        raise ValueError("vqa accuracy over an empty question set")
    return sum(acc_10choose3(preds[i], a) for i, a in annotators.items()) / len(annotators)


METRICS = ("vqa10", "simple", "mean_per_type")


def score(metric: str, preds: Mapping[str, int], examples: Sequence[VQAExample]) -> MetricReport:
    """Evaluate ``preds`` on ``examples`` with the dataset's declared metric."""
    if metric == "vqa10":
        overall = vqa_accuracy(preds, {e.id: e.annotator_answers for e in examples})
        per = {}
        by_type: dict[str, list] = defaultdict(list)
        for e in examples:
            by_type[e.question_type].append(acc_10choose3(preds[e.id], e.annotator_answers))
        per = {t: sum(v) / len(v) for t, v in sorted(by_type.items())}
        return MetricReport(metric, overall, per)
    if metric == "simple":
        overall = simple_accuracy(preds, {e.id: e.answer for e in examples})
        per = mean_per_type(preds, {e.id: (e.answer, e.question_type) for e in examples}).per_type
        return MetricReport(metric, overall, per)
    if metric == "mean_per_type":
        return mean_per_type(preds, {e.id: (e.answer, e.question_type) for e in examples})
    raise ValueError(f"unknown metric {metric!r}; expected one of {', '.join(METRICS)}")


# ---------------------------------------------------------------- files

def write_predictions(preds: Mapping[str, int], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "answer"])
        for i, a in preds.items():
            w.writerow([i, int(a)])


def read_predictions(path) -> dict[str, int]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["id", "answer"]:
        raise ValueError(f"{path}: expected header 'id,answer'")
    out: dict[str, int] = {}
    for n, row in enumerate(rows[1:], 2):
        if len(row) != 2:
            raise ValueError(f"{path}: line {n}: expected 2 columns")
        if row[0] in out:
            raise ValueError(f"{path}: line {n}: duplicate id {row[0]!r}")
        out[row[0]] = int(row[1])
    return out


def format_cell(score_: float | None) -> str:
    if score_ is None or (isinstance(score_, float) and math.isnan(score_)):
        return "-"
    return f"{100.0 * score_:.2f}"


def render_table(scores: Mapping[tuple[str, str], float | None], datasets: Sequence[str],
                 variants: Sequence[str]) -> str:
    """Rows = datasets plus a Mean row, columns = variants, cells = score x 100 (2 decimals).

    The Mean row is the mean of each column's unrounded scores, rounded once.
    """
    lines = ["\t".join(["Dataset", *variants])]
    present = {v: [] for v in variants}
    for d in datasets:
        row = [d]
        for v in variants:
            s = scores.get((d, v))
            c = format_cell(s)
            row.append(c)
            if c != "-":
                present[v].append(s)
        lines.append("\t".join(row))
    mean_row = ["Mean"]
    for v in variants:
        vals = present[v]
        mean_row.append(format_cell(sum(vals) / len(vals)) if vals else "-")
    lines.append("\t".join(mean_row))
    return "\n".join(lines) + "\n"


def read_table(path) -> tuple[list[str], dict[str, list[str]]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = lines[0].split("\t")
    rows = {}
    for line in lines[1:]:
        parts = line.split("\t")
        rows[parts[0]] = parts[1:]
    return header, rows
