"""Experiment harnesses: lambda sweep, student-count ablation, run records."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import TrainConfig
from .cpg import CorpusRecord
from .errors import ConfigError, DataError
from .metrics import MetricsReport, compute_metrics
from .train import BranchProbabilities, branch_probabilities, decide, train

RUN_CONFIG_SUFFIX = ".run_config.json"


@dataclass
class SweepResult:
    parameter: str
    grid: list[float]
    reports: list[MetricsReport]
    labels: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.grid) != len(self.reports):
            raise ValueError("one report per grid point is required")
        if any(b <= a for a, b in zip(self.grid, self.grid[1:])):
            raise ConfigError(f"{self.parameter} grid must be strictly increasing: {self.grid}")
        if not self.labels:
            self.labels = [f"{v:g}" for v in self.grid]

    def rows(self) -> list[dict]:
        return [{self.parameter: f"{v:g}", "label": lab, **r.percent_row()}
                for v, lab, r in zip(self.grid, self.labels, self.reports)]

    def write_csv(self, path: str | Path) -> None:
        rows = self.rows()
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else [self.parameter])
            w.writeheader()
            w.writerows(rows)

    def best(self, metric: str = "accuracy") -> float:
        """Grid value with the highest ``metric``; the first one wins ties."""
        scores = [getattr(r, metric) for r in self.reports]
        return self.grid[int(np.argmax(scores))]


def parse_grid(text: str) -> list[float]:
    """``start:stop:step`` (stop inclusive) or a comma list."""
    if ":" in text:
        try:
            start, stop, step = (float(x) for x in text.split(":"))
        except ValueError as exc:
            raise ConfigError(f"bad grid {text!r}; expected start:stop:step") from exc
        if step <= 0:
            raise ConfigError("grid step must be > 0")
        count = int(np.floor((stop - start) / step + 1e-9)) + 1
        return [round(start + i * step, 10) for i in range(max(count, 0))]
    return [float(x) for x in text.split(",") if x.strip()]


def lambda_sweep(branches: BranchProbabilities, grid: Sequence[float]) -> SweepResult:
    """Metrics of the interpolated prediction at each lambda, reusing cached branch outputs."""
    grid = list(grid)
    if not grid:
        raise ConfigError("lambda grid is empty")
    bad = [v for v in grid if not 0.0 <= v <= 1.0]
    if bad:
        raise ConfigError(f"lambda values outside [0, 1]: {bad}")
    return SweepResult("lambda", grid, [branches.metrics(v) for v in grid])


def evaluation_split(corpus: Sequence[CorpusRecord], preferred: str = "test") -> list:
    graphs = [r.graph for r in corpus if r.split == preferred]
    if not graphs and preferred == "test":
        graphs = [r.graph for r in corpus if r.split == "valid"]
    if not graphs:
        raise DataError(f"corpus has no {preferred!r} records to evaluate on")
    return graphs


def student_ablation(counts: Sequence[int], config: TrainConfig, corpus: Sequence[CorpusRecord],
                     split: str = "test") -> SweepResult:
    """Train and evaluate once per student count with a shared seed.

    A count of 1 is the no-distillation baseline and is labeled ``self``.
    """
    if any(c < 1 for c in counts):
        raise ConfigError("student counts must be >= 1")
    unique = sorted(set(counts))
    if len(unique) != len(counts):
        warnings.warn(f"duplicate student counts dropped: {list(counts)} -> {unique}", stacklevel=2)
    graphs = evaluation_split(corpus, split)
    labels = [g.label for g in graphs]
    reports = []
    for count in unique:
        result = train(config.with_overrides(**{"kd.students": count}), corpus)
        branches = branch_probabilities(result.model, graphs)
        reports.append(compute_metrics(decide(branches.final(config.lam)).tolist(), labels))
    names = ["self" if c == 1 else f"{c} students" for c in unique]
    return SweepResult("students", [float(c) for c in unique], reports, names)


@dataclass
class RunConfig:
    command: str
    config: dict
    inputs: dict
    outputs: dict
    seed: int

    def as_dict(self) -> dict:
        return {"command": self.command, "config": self.config, "inputs": self.inputs,
                "outputs": self.outputs, "seed": self.seed}


def run_config_path(output: str | Path) -> Path:
    output = Path(output)
    return output.with_name(output.name + RUN_CONFIG_SUFFIX)


def write_run_config(output: str | Path, run: RunConfig) -> Path:
    """Write the resolved run record next to ``output``."""
    path = run_config_path(output)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(run.as_dict(), indent=2, sort_keys=True) + "\n")
    return path
