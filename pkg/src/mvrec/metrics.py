"""Hit rate and NDCG for single-target next-item evaluation.

Each user contributes one held-out target. HR@K counts users whose target
lands in the top K; NDCG@K credits ``1/log2(rank + 1)`` for a hit at
1-indexed ``rank`` (the ideal DCG is 1 with one relevant item). Both are
reported as percentages.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RankedPrediction:
    order: tuple
    target: int

    def __post_init__(self):
        if len(set(self.order)) != len(self.order):
            raise ValueError("ranked list contains duplicate product indices")

    @classmethod
    def from_logits(cls, logits, target, length=None):
        order = ranking(np.asarray(logits))
        if length is not None:
            order = order[:length]
        return cls(tuple(int(i) for i in order), int(target))

    def rank(self):
        """1-indexed position of the target, or None if it is not listed."""
        try:
            return self.order.index(self.target) + 1
        except ValueError:
            return None


@dataclass(frozen=True)
class MetricSummary:
    metric: str
    K: int
    mean: float
    std: float
    n_runs: int


def ranking(logits):
    """Indices by descending logit; equal logits keep ascending index order."""
    return np.argsort(-np.asarray(logits, dtype=np.float64), kind="stable")


def target_ranks(logits, targets):
    """1-indexed rank of each row's target under :func:`ranking` tie-breaking.

    Vectorised: rank = #strictly-greater + #equal-with-smaller-index + 1.
    """
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    tv = z[np.arange(z.shape[0]), t][:, None]
    idx = np.arange(z.shape[1])[None, :]
    ahead = (z > tv) | ((z == tv) & (idx < t[:, None]))
    return ahead.sum(axis=1) + 1


def _ranks(predictions):
    if len(predictions) == 0:
        raise ValueError("no predictions to evaluate")
    if isinstance(predictions, np.ndarray):
        return [int(r) for r in predictions]
    return [p.rank() for p in predictions]


def hr_at_k(predictions, K):
    """Percent of users whose target sits in the top ``K``.

    ``predictions`` is a list of :class:`RankedPrediction` or an array of
    precomputed 1-indexed target ranks.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    ranks = _ranks(predictions)
    hits = sum(1 for r in ranks if r is not None and r <= K)
    return 100.0 * hits / len(ranks)


def ndcg_at_k(predictions, K):
    if K < 1:
        raise ValueError("K must be >= 1")
    ranks = _ranks(predictions)
    gain = sum(1.0 / math.log2(r + 1) for r in ranks if r is not None and r <= K)
    return 100.0 * gain / len(ranks)


def choose_k(n_products):
    """Ranking cut-offs scaled to catalogue size.

    Ratios are fixed so 7726 products give (236, 12) and 3268 give (100, 5).
    Rounding is half-up; both cut-offs are at least 1.
    """
    if n_products < 10:
        raise ValueError("choose_k needs at least 10 products")
    k_large = max(1, int(math.floor(0.0306 * n_products + 0.5)))
    k_small = max(1, int(math.floor(0.00153 * n_products + 0.5)))
    return k_large, k_small


def aggregate_runs(values, metric, K):
    """Mean and population standard deviation over runs."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("need at least one run")
    return MetricSummary(metric, int(K), float(v.mean()), float(v.std()), int(v.size))


METRIC_FIELDS = ["model", "dataset", "metric", "K", "mean", "std", "n_runs"]


def write_metric_rows(path_or_file, rows):
    """Write ``(model, dataset, MetricSummary)`` triples as the metrics CSV."""
    def _write(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for model, dataset, s in rows:
            w.writerow([model, dataset, s.metric, s.K, repr(s.mean), repr(s.std), s.n_runs])
    if hasattr(path_or_file, "write"):
        _write(path_or_file)
    else:
        with open(path_or_file, "w", newline="", encoding="utf-8") as fh:
            _write(fh)


def read_metric_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = []
        for r in csv.DictReader(fh):
            rows.append((r["model"], r["dataset"], MetricSummary(
                r["metric"], int(r["K"]), float(r["mean"]), float(r["std"]), int(r["n_runs"]))))
    return rows
