"""Concept accuracy and time/fraction-indexed metric records."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np


def concept_accuracy(predictions, truth, names: Optional[Sequence[str]] = None):
    """Per-concept exact-match rate and its unweighted mean.

    Returns ``(per_concept, average)`` where ``per_concept`` is a dict keyed by
    concept name (or column index when ``names`` is omitted).
    """
    pred = np.asarray(predictions)
    true = np.asarray(truth)
    if pred.shape != true.shape or pred.ndim != 2:
        raise ValueError(f"predictions {pred.shape} and truth {true.shape} must be equal (N, K) arrays")
    if names is not None and len(names) != pred.shape[1]:
        raise ValueError("names must match the number of concepts")
    if len(pred) == 0:
        raise ValueError("no samples")
    acc = (pred == true).mean(axis=0)
    keys = list(names) if names is not None else list(range(pred.shape[1]))
    per = {k: float(a) for k, a in zip(keys, acc)}
    return per, float(acc.mean())


@dataclass
class MetricSeries:
    """Accuracy records indexed by training step or labelled fraction."""

    method: str
    seed: int
    concepts: Sequence[str]
    index_name: str = "step"
    setup: str = ""
    dataset: str = ""
    index: list = field(default_factory=list)
    per_concept: dict = field(default_factory=dict)
    average: list = field(default_factory=list)
    task: list = field(default_factory=list)

    def __post_init__(self):
        self.concepts = list(self.concepts)
        for name in self.concepts:
            self.per_concept.setdefault(name, [])

    def append(self, idx, accuracies: dict, task: Optional[float] = None) -> None:
        if self.index and not idx > self.index[-1]:
            raise ValueError(f"index must increase strictly ({idx} after {self.index[-1]})")
        missing = set(self.concepts) - set(accuracies)
        if missing:
            raise ValueError(f"missing accuracies for {sorted(missing)}")
        values = [float(accuracies[c]) for c in self.concepts]
        if task is not None:
            values.append(float(task))
        if any(not 0.0 <= v <= 1.0 for v in values):
            raise ValueError("accuracies must lie in [0, 1]")
        self.index.append(idx)
        for c in self.concepts:
            self.per_concept[c].append(float(accuracies[c]))
        self.average.append(float(np.mean([accuracies[c] for c in self.concepts])))
        if task is not None:
            self.task.append(float(task))

    def __len__(self) -> int:
        return len(self.index)

    def last(self) -> dict:
        out = {c: v[-1] for c, v in self.per_concept.items()}
        out["average"] = self.average[-1]
        if self.task:
            out["task"] = self.task[-1]
        return out

    def rows(self) -> list[dict]:
        """Long-format rows (index, concept, metric, value)."""
        out = []
        for i, idx in enumerate(self.index):
            for c in self.concepts:
                out.append({"index": idx, "concept": c, "metric": "accuracy", "value": self.per_concept[c][i]})
            out.append({"index": idx, "concept": "average", "metric": "accuracy", "value": self.average[i]})
            if self.task:
                out.append({"index": idx, "concept": "task", "metric": "accuracy", "value": self.task[i]})
        return out

    def to_dict(self) -> dict:
        return asdict(self)
