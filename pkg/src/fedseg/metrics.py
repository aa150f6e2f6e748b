"""Dice and bounding-box overlap metrics, and the test-set evaluation runner."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .errors import UsageError

TASKS = ("segmentation", "localization")


def binarize(pred, threshold=0.5):
    return (np.asarray(pred) >= threshold).astype(np.uint8)


def _as_binary(m, name):
    m = np.asarray(m)
    if not np.all((m == 0) | (m == 1)):
        raise UsageError(f"{name} is not a binary mask")
    return m.astype(bool)


def dice(a, b) -> float:
    a, b = _as_binary(a, "a"), _as_binary(b, "b")
    if a.shape != b.shape:
        raise UsageError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def bbox(mask):
    """Tightest ``(y0, x0, y1, x1)`` box (inclusive) around the foreground, or None."""
    m = np.asarray(mask).astype(bool)
    m = m.reshape(m.shape[-2:]) if m.ndim > 2 else m
    rows = np.flatnonzero(m.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(m.any(axis=0))
    return int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1])


def overlap_similarity(organ, box) -> float:
    """Fraction of the organ's pixels that fall inside ``box``."""
    m = _as_binary(organ, "organ")
    m = m.reshape(m.shape[-2:]) if m.ndim > 2 else m
    total = int(m.sum())
    if total == 0:
        raise UsageError("overlap similarity is undefined for an empty organ mask")
    if box is None:
        return 0.0
    y0, x0, y1, x1 = box
    y0, x0 = max(y0, 0), max(x0, 0)
    inside = int(m[y0:y1 + 1, x0:x1 + 1].sum()) if y1 >= y0 and x1 >= x0 else 0
    return inside / total


@dataclass
class DomainResult:
    name: str
    values: list = field(default_factory=list)

    @property
    def n(self):
        return len(self.values)

    @property
    def mean(self):
        return float(np.mean(self.values))

    @property
    def failures(self):
        return sum(1 for v in self.values if v == 0.0)

    def summary(self):
        return {"name": self.name, "n": self.n, "mean": self.mean,
                "min": float(min(self.values)), "max": float(max(self.values)),
                "failures": self.failures}


@dataclass
class EvalReport:
    task: str
    domains: list

    @property
    def pooled_mean(self):
        return float(np.mean([v for d in self.domains for v in d.values]))

    @property
    def failures(self):
        return sum(d.failures for d in self.domains)

    def domain(self, name):
        for d in self.domains:
            if d.name == name:
                return d
        raise KeyError(name)

    def to_dict(self):
        return {"task": self.task, "domains": [d.summary() for d in self.domains],
                "pooled_mean": self.pooled_mean}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    def rows(self):
        for d in self.domains:
            for i, v in enumerate(d.values):
                yield {"domain": d.name, "index": i, "task": self.task, "value": v}

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["domain", "index", "task", "value"])
            w.writeheader()
            w.writerows(self.rows())


def sample_metric(pred_mask, truth, task):
    if task == "segmentation":
        return dice(pred_mask, truth)
    return overlap_similarity(truth, bbox(pred_mask))


def evaluate(model, datasets, task="segmentation", threshold=0.5, batch_size=8) -> EvalReport:
    """Score ``model.predict`` on each test dataset.

    ``datasets`` is a list of ``fedseg.data.Dataset`` (or a name -> dataset
    mapping). Any object with ``predict(images) -> probabilities`` works as
    the model.
    """
    if task not in TASKS:
        raise UsageError(f"unknown task {task!r}; expected one of {TASKS}")
    if isinstance(datasets, dict):
        datasets = [Dataset(name, ds.samples, ds.split, ds.spec) for name, ds in datasets.items()]
    if not datasets or any(len(ds) == 0 for ds in datasets):
        raise UsageError("evaluation needs at least one non-empty test set")
    results = []
    for ds in datasets:
        probs = model.predict(ds.images(), batch_size=batch_size)
        pred = binarize(probs, threshold)
        truth = ds.masks().astype(np.uint8)
        results.append(DomainResult(ds.domain, [sample_metric(p[0], t[0], task)
                                                for p, t in zip(pred, truth)]))
    return EvalReport(task, results)
