"""Micro-F1 metrics, split evaluation, and baseline-vs-treated comparison
reports.

This module knows nothing about specific model kinds: evaluation takes a
``predict(subgraph) -> logit row`` callable, so teachers and students share
one code path.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DataError, NumericError
from .graphs import Subgraph


def _global_counts(predictions: Sequence[int], labels: Sequence[int]) -> tuple[int, int, int]:
    """Pooled true-positive / false-positive / false-negative counts."""
    classes = set(predictions) | set(labels)
    tp = fp = fn = 0
    preds = np.asarray(predictions)
    labs = np.asarray(labels)
    for c in classes:
        tp += int(((preds == c) & (labs == c)).sum())
        fp += int(((preds == c) & (labs != c)).sum())
        fn += int(((preds != c) & (labs == c)).sum())
    return tp, fp, fn


def micro_f1(predictions: Sequence[int], labels: Sequence[int]) -> float:
    """Micro-averaged F1 from globally pooled counts. For single-label
    multiclass predictions this equals accuracy."""
    if len(predictions) != len(labels):
        raise DataError(
            f"{len(predictions)} predictions but {len(labels)} labels")
    if len(labels) == 0:
        raise DataError("micro_f1 of an empty prediction list is undefined")
    tp, fp, fn = _global_counts(predictions, labels)
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def accuracy(predictions: Sequence[int], labels: Sequence[int]) -> float:
    if len(predictions) != len(labels) or len(labels) == 0:
        raise DataError("accuracy needs equal-length, non-empty inputs")
    correct = int((np.asarray(predictions) == np.asarray(labels)).sum())
    return correct / len(labels)


@dataclass
class EvalReport:
    split: str
    num_samples: int
    accuracy: float
    micro_f1: float
    per_class: dict = field(default_factory=dict)
    per_group: dict = field(default_factory=dict)
    confusion: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    seed: int | None = None

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "num_samples": self.num_samples,
            "accuracy": self.accuracy,
            "micro_f1": self.micro_f1,
            "per_class": self.per_class,
            "per_group": self.per_group,
            "confusion": self.confusion,
            "config": self.config,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EvalReport":
        return cls(**{k: doc.get(k) for k in (
            "split", "num_samples", "accuracy", "micro_f1", "per_class",
            "per_group", "confusion", "config", "seed")})


def build_report(predictions: Sequence[int], labels: Sequence[int],
                 groups: Sequence[str], label_vocab: Sequence[str], split: str,
                 config: dict | None = None, seed: int | None = None) -> EvalReport:
    """Assemble an evaluation report from predictions. Verifies the
    single-label identity micro-F1 == accuracy at report time."""
    score = micro_f1(predictions, labels)
    acc = accuracy(predictions, labels)
    if score != acc:
        raise NumericError(
            f"micro-F1 {score!r} != accuracy {acc!r} for single-label predictions")

    num_classes = len(label_vocab)
    confusion = [[0] * num_classes for _ in range(num_classes)]
    for p, l in zip(predictions, labels):
        confusion[l][p] += 1

    per_class = {}
    preds = np.asarray(predictions)
    labs = np.asarray(labels)
    for c, name in enumerate(label_vocab):
        tp = int(((preds == c) & (labs == c)).sum())
        fp = int(((preds == c) & (labs != c)).sum())
        fn = int(((preds != c) & (labs == c)).sum())
        per_class[name] = {
            "precision": tp / (tp + fp) if tp + fp else 0.0,
            "recall": tp / (tp + fn) if tp + fn else 0.0,
            "f1": 2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else 0.0,
            "support": int((labs == c).sum()),
        }

    per_group = {}
    for g in sorted(set(groups)):
        mask = [i for i, gi in enumerate(groups) if gi == g]
        per_group[g] = {
            "micro_f1": micro_f1([predictions[i] for i in mask],
                                 [labels[i] for i in mask]),
            "num_samples": len(mask),
        }

    return EvalReport(split=split, num_samples=len(labels), accuracy=acc,
                      micro_f1=score, per_class=per_class, per_group=per_group,
                      confusion=confusion, config=dict(config or {}), seed=seed)


def evaluate_model(predict: Callable[[Subgraph], np.ndarray], subgraphs: list[Subgraph],
                   split: str, label_vocab: Sequence[str], config: dict | None = None,
                   seed: int | None = None, threads: int = 1) -> EvalReport:
    """Run a model over one split and report. Predictions are argmax of the
    logit row (ties resolve to the lowest class index). Forward passes may
    run on a thread pool; results merge in sample order either way."""
    chosen = [sg for sg in subgraphs if split == "all" or sg.split == split]
    if not chosen:
        raise DataError(f"no samples in split '{split}'")
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            logit_rows = list(pool.map(predict, chosen))
    else:
        logit_rows = [predict(sg) for sg in chosen]
    predictions = [int(np.argmax(row)) for row in logit_rows]
    labels = [sg.label for sg in chosen]
    groups = [sg.group for sg in chosen]
    return build_report(predictions, labels, groups, label_vocab, split,
                        config=config, seed=seed)


def write_report(path, report: EvalReport) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(report.to_dict(), sort_keys=True, indent=2,
                            ensure_ascii=False) + "\n")


def read_report(path) -> EvalReport:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path} is not a report file: {exc}") from exc
    if not isinstance(doc, dict) or "micro_f1" not in doc:
        raise DataError(f"{path} is not a report file")
    return EvalReport.from_dict(doc)


# ---------------------------------------------------------------------------
# Baseline-vs-treated comparison
# ---------------------------------------------------------------------------

@dataclass
class ComparisonReport:
    groups: list[str]
    rows: list[dict]

    def to_dict(self) -> dict:
        return {"groups": self.groups, "rows": self.rows}


def comparison_report(runs: list[tuple[str, EvalReport]],
                      pairs: list[tuple[str, str]]) -> ComparisonReport:
    """Pair up named runs; each pair is (baseline name, treated name).
    Deltas are exactly treated - baseline on every column."""
    by_name = dict(runs)
    if len(by_name) != len(runs):
        raise DataError("duplicate run names in comparison input")
    groups: list[str] = sorted({g for _, rep in runs for g in (rep.per_group or {})})

    rows = []
    for baseline_name, treated_name in pairs:
        for name in (baseline_name, treated_name):
            if name not in by_name:
                raise DataError(f"comparison references unknown run '{name}'")
        base = by_name[baseline_name]
        treat = by_name[treated_name]

        def group_scores(rep: EvalReport) -> dict:
            return {g: (rep.per_group or {}).get(g, {}).get("micro_f1")
                    for g in groups}

        base_scores = group_scores(base)
        treat_scores = group_scores(treat)
        deltas = {
            g: (treat_scores[g] - base_scores[g]
                if base_scores[g] is not None and treat_scores[g] is not None
                else None)
            for g in groups
        }
        rows.append({
            "baseline": baseline_name,
            "treated": treated_name,
            "baseline_groups": base_scores,
            "treated_groups": treat_scores,
            "baseline_avg": base.micro_f1,
            "treated_avg": treat.micro_f1,
            "delta_groups": deltas,
            "delta_avg": treat.micro_f1 - base.micro_f1,
        })
    return ComparisonReport(groups=groups, rows=rows)


def render_comparison_text(report: ComparisonReport) -> str:
    """Aligned plain-text table, one baseline / treated / delta block per pair.
    Scores print as percentage points."""
    columns = report.groups + ["AVG"]
    name_width = max([len("model")] + [
        len(r[key]) for r in report.rows for key in ("baseline", "treated")])
    header = "model".ljust(name_width) + "".join(c.rjust(10) for c in columns)
    lines = [header, "-" * len(header)]

    def fmt(value, signed=False) -> str:
        if value is None:
            return "-".rjust(10)
        text = f"{value * 100:+.2f}" if signed else f"{value * 100:.2f}"
        return text.rjust(10)

    for row in report.rows:
        for which, scores, avg in (
            ("baseline", row["baseline_groups"], row["baseline_avg"]),
            ("treated", row["treated_groups"], row["treated_avg"]),
        ):
            cells = "".join(fmt(scores[g]) for g in report.groups) + fmt(avg)
            lines.append(row[which].ljust(name_width) + cells)
        cells = "".join(fmt(row["delta_groups"][g], signed=True)
                        for g in report.groups) + fmt(row["delta_avg"], signed=True)
        lines.append("delta".ljust(name_width) + cells)
        lines.append("-" * len(header))
    return "\n".join(lines) + "\n"


def write_comparison(path, report: ComparisonReport) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(report.to_dict(), sort_keys=True, indent=2,
                            ensure_ascii=False) + "\n")
