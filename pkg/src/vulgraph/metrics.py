"""Binary detection metrics (class 1 = vulnerable) and the per-CWE accuracy table."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

from .errors import DataError

UNTAGGED = "<untagged>"


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int
    precision_undefined: bool = False
    recall_undefined: bool = False

    @classmethod
    def from_counts(cls, tp: int, fp: int, tn: int, fn: int) -> "MetricsReport":
        total = tp + fp + tn + fn
        p_undef = tp + fp == 0
        r_undef = tp + fn == 0
        precision = 0.0 if p_undef else tp / (tp + fp)
        recall = 0.0 if r_undef else tp / (tp + fn)
        f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
        return cls((tp + tn) / total if total else 0.0, precision, recall, f1, tp, fp, tn, fn, p_undef, r_undef)

    def as_dict(self) -> dict:
        return asdict(self)

    def percent_row(self) -> dict:
        """ACC/P/R/F1 as percentages with two decimals."""
        return {
            "acc": f"{100 * self.accuracy:.2f}",
            "precision": f"{100 * self.precision:.2f}",
            "recall": f"{100 * self.recall:.2f}",
            "f1": f"{100 * self.f1:.2f}",
            "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
            "precision_undefined": int(self.precision_undefined),
            "recall_undefined": int(self.recall_undefined),
        }


def compute_metrics(preds: Sequence[int], labels: Sequence[int]) -> MetricsReport:
    if len(preds) != len(labels):
        raise DataError(f"{len(preds)} predictions for {len(labels)} labels")
    if len(preds) == 0:
        raise DataError("no predictions to score")
    tp = fp = tn = fn = 0
    for p, y in zip(preds, labels):
        p, y = int(p), int(y)
        if p == 1 and y == 1:
            tp += 1
        elif p == 1:
            fp += 1
        elif y == 1:
            fn += 1
        else:
            tn += 1
    return MetricsReport.from_counts(tp, fp, tn, fn)


@dataclass(frozen=True)
class CweRow:
    cwe: str
    support: int
    accuracy: float


@dataclass
class CweTable:
    rows: list[CweRow]
    residual: CweRow | None

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["cwe", "support", "accuracy"])
            for row in self.rows + ([self.residual] if self.residual else []):
                w.writerow([row.cwe, row.support, f"{100 * row.accuracy:.2f}"])


def per_cwe_accuracy(preds: Sequence[int], labels: Sequence[int], cwe_tags: Sequence[Sequence[str]],
                     top: int = 30) -> CweTable:
    """Accuracy per CWE tag, most frequent first (ties by tag name), limited to ``top`` rows.

    A record with several tags counts towards each. Untagged records go to a
    residual row instead of the table.
    """
    if not (len(preds) == len(labels) == len(cwe_tags)):
        raise DataError("preds, labels and cwe_tags must be parallel")
    support: dict[str, int] = {}
    correct: dict[str, int] = {}
    untagged = [0, 0]
    for p, y, tags in zip(preds, labels, cwe_tags):
        hit = int(int(p) == int(y))
        if not tags:
            untagged[0] += 1
            untagged[1] += hit
            continue
        for tag in set(tags):
            support[tag] = support.get(tag, 0) + 1
            correct[tag] = correct.get(tag, 0) + hit
    ordered = sorted(support, key=lambda t: (-support[t], t))[:top]
    rows = [CweRow(t, support[t], correct[t] / support[t]) for t in ordered]
    residual = CweRow(UNTAGGED, untagged[0], untagged[1] / untagged[0]) if untagged[0] else None
    return CweTable(rows, residual)
