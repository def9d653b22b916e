"""Metrics, cross-validated evaluation, and hyperparameter search.

All candidates share one fold assignment so their scores are comparable;
per-fold fits reseed the estimator as base_seed XOR fold so the whole
search is a pure function of (space, template, data, k, seed).
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .dataset import Dataset, FoldAssignment, stratified_kfold
from .errors import EmptyGrid, EmptySpace, LengthMismatch, OneClassAUC
from .pipeline import FittedPipeline, PipelineSpec, fit_pipeline, predict_labels, predict_scores

_SEED_MASK = (1 << 64) - 1


class Metric(str, Enum):
    ACCURACY = "accuracy"
    BALANCED_ACCURACY = "balanced_accuracy"
    F1 = "f1"
    ROC_AUC = "roc_auc"

    @property
    def needs_scores(self) -> bool:
        return self is Metric.ROC_AUC


def compute_metric(metric: Metric, y_true: np.ndarray, y_pred_or_scores: np.ndarray) -> float:
    y_true = np.asarray(y_true)
    values = np.asarray(y_pred_or_scores, dtype=np.float64)
    if len(y_true) != len(values):
        raise LengthMismatch(f"{len(y_true)} labels vs {len(values)} predictions")
    if len(y_true) == 0:
        raise LengthMismatch("empty inputs")
    metric = Metric(metric)

    if metric is Metric.ROC_AUC:
        return _roc_auc(y_true, values)

    y_pred = values.astype(np.int64)
    if metric is Metric.ACCURACY:
        return float((y_pred == y_true).mean())

    tp = int(((y_pred == 1) & (y_true == 1)).sum())
    tn = int(((y_pred == 0) & (y_true == 0)).sum())
    fp = int(((y_pred == 1) & (y_true == 0)).sum())
    fn = int(((y_pred == 0) & (y_true == 1)).sum())

    if metric is Metric.F1:
        denom = 2 * tp + fp + fn
        return 0.0 if denom == 0 else 2.0 * tp / denom

    # balanced accuracy: mean of the per-class rates that are defined
    rates = []
    if tp + fn > 0:
        rates.append(tp / (tp + fn))
    if tn + fp > 0:
        rates.append(tn / (tn + fp))
    return float(np.mean(rates))


def _roc_auc(y_true: np.ndarray, scores: np.ndarray) -> float:
    """Mann-Whitney rank statistic with midranks for tied scores."""
    n_pos = int((y_true == 1).sum())
    n_neg = int((y_true == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise OneClassAUC("roc_auc needs both classes present")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0  # midrank, 1-based
        i = j + 1
    rank_sum_pos = float(ranks[y_true == 1].sum())
    return (rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


@dataclass(frozen=True)
class ParamGrid:
    entries: dict[str, list]

    def __post_init__(self):
        object.__setattr__(self, "entries", dict(self.entries))


@dataclass(frozen=True)
class ParamDistribution:
    entries: dict[str, tuple]  # name -> ("choice", values) | ("uniform"|"log_uniform", lo, hi)
    n_samples: int

    def __post_init__(self):
        object.__setattr__(self, "entries", dict(self.entries))
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        for name, sampler in self.entries.items():
            kind = sampler[0]
            if kind == "choice":
                if not sampler[1]:
                    raise ValueError(f"{name}: choice list is empty")
            elif kind in ("uniform", "log_uniform"):
                lo, hi = sampler[1], sampler[2]
                if not lo < hi:
                    raise ValueError(f"{name}: need lo < hi, got [{lo}, {hi}]")
                if kind == "log_uniform" and lo <= 0:
                    raise ValueError(f"{name}: log_uniform needs lo > 0")
            else:
                raise ValueError(f"{name}: unknown sampler kind {kind!r}")


def expand_grid(grid: ParamGrid) -> list[dict]:
    """Full Cartesian product, odometer order: last-declared name varies fastest."""
    if not grid.entries:
        raise EmptyGrid("grid has no entries")
    names = list(grid.entries)
    for name in names:
        if not grid.entries[name]:
            raise EmptyGrid(f"grid entry {name!r} is an empty list")
    return [dict(zip(names, combo)) for combo in itertools.product(*grid.entries.values())]


def sample_params(dist: ParamDistribution, seed: int) -> list[dict]:
    """n_samples independent draws from one RNG stream, names in declared order."""
    rng = np.random.default_rng(seed & _SEED_MASK)
    out = []
    for _ in range(dist.n_samples):
        candidate = {}
        for name, sampler in dist.entries.items():
            kind = sampler[0]
            if kind == "choice":
                values = sampler[1]
                candidate[name] = values[int(rng.integers(0, len(values)))]
            elif kind == "uniform":
                candidate[name] = float(rng.uniform(sampler[1], sampler[2]))
            else:
                candidate[name] = float(math.exp(rng.uniform(math.log(sampler[1]), math.log(sampler[2]))))
        out.append(candidate)
    return out


def _eval_fold(spec_template: PipelineSpec, candidate: dict, train: Dataset,
               folds: FoldAssignment, fold: int, metrics: list[Metric]) -> dict[str, float]:
    spec = spec_template.with_candidate(candidate, seed=(spec_template.estimator.seed ^ fold))
    fit_part = train.subset(folds.train_indices(fold))
    eval_idx = folds.test_indices(fold)
    eval_rows = train.rows[eval_idx]
    eval_y = train.labels[eval_idx]
    model = fit_pipeline(spec, fit_part)
    labels = None
    scores = None
    result = {}
    for metric in metrics:
        if metric.needs_scores:
            if scores is None:
                scores = predict_scores(model, eval_rows)
            result[metric.value] = compute_metric(metric, eval_y, scores)
        else:
            if labels is None:
                labels = predict_labels(model, eval_rows)
            result[metric.value] = compute_metric(metric, eval_y, labels)
    return result


def cross_validate(spec_template: PipelineSpec, candidate: dict, train: Dataset,
                   folds: FoldAssignment, metrics: list[Metric],
                   workers: int = 1) -> dict[str, np.ndarray]:
    """Per-fold score table; transformers refit inside every fold (no leakage)."""
    metrics = [Metric(m) for m in metrics]

    def run(fold: int) -> dict[str, float]:
        try:
            return _eval_fold(spec_template, candidate, train, folds, fold, metrics)
        except Exception as exc:
            exc.args = (f"fold {fold}: {exc}",) + exc.args[1:]
            raise

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_fold = list(pool.map(run, range(folds.k)))
    else:
        per_fold = [run(fold) for fold in range(folds.k)]
    return {m.value: np.array([row[m.value] for row in per_fold]) for m in metrics}


@dataclass(frozen=True)
class SearchResult:
    candidates: list[dict]
    fold_scores: dict[str, np.ndarray]   # metric -> (n_candidates, k)
    mean_score: np.ndarray               # selection metric, per candidate
    std_score: np.ndarray
    best_index: int
    best_model: FittedPipeline
    selection_metric: Metric
    k: int


def run_search(strategy: str, space, spec_template: PipelineSpec, train: Dataset,
               k: int, selection_metric: Metric, seed: int,
               metrics: list[Metric] | None = None, workers: int = 1) -> SearchResult:
    """Enumerate or sample candidates, cross-validate each on one shared fold
    assignment, pick the best mean selection score (ties -> smallest index),
    then refit the winner on the full training set."""
    selection_metric = Metric(selection_metric)
    metrics = [Metric(m) for m in (metrics or [])]
    if selection_metric not in metrics:
        metrics = [selection_metric] + metrics

    if strategy == "grid":
        candidates = expand_grid(space)
    elif strategy == "random":
        candidates = sample_params(space, seed)
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    if not candidates:
        raise EmptySpace("search space produced no candidates")

    folds = stratified_kfold(train.labels, k, seed)

    tables = [None] * len(candidates)

    def evaluate(index: int):
        tables[index] = cross_validate(spec_template, candidates[index], train, folds, metrics)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(evaluate, range(len(candidates))))
    else:
        for index in range(len(candidates)):
            evaluate(index)

    fold_scores = {
        m.value: np.vstack([tables[i][m.value] for i in range(len(candidates))])
        for m in metrics
    }
    selection = fold_scores[selection_metric.value]
    mean_score = selection.mean(axis=1)
    std_score = selection.std(axis=1)
    best_index = int(np.argmax(mean_score))  # argmax takes the first maximum

    best_model = fit_pipeline(spec_template.with_candidate(candidates[best_index]), train)
    return SearchResult(
        candidates=candidates,
        fold_scores=fold_scores,
        mean_score=mean_score,
        std_score=std_score,
        best_index=best_index,
        best_model=best_model,
        selection_metric=selection_metric,
        k=k,
    )
