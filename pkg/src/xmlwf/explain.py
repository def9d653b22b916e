"""Shapley-value attribution for fitted pipelines.

The value function is interventional: v(S) averages the model score over
composite rows taking coalition features from the explained sample and the
rest from a background sample. Small feature counts get exact subset
enumeration; larger ones a kernel-weighted least-squares approximation whose
efficiency constraint is enforced by variable elimination, so attributions
plus base value always reproduce the model score.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .dataset import Dataset
from .errors import SingularSystem, TooManyFeatures
from .pipeline import FittedPipeline, ImputeState, predict_scores, transform_rows

EXACT_LIMIT = 12
KERNEL_BUDGET_CAP = 2048
EFFICIENCY_TOL = {"exact": 1e-9, "kernel": 5e-3}

_SEED_MASK = (1 << 64) - 1


@dataclass(frozen=True)
class Background:
    rows: np.ndarray        # (m, d) reference rows in raw feature space
    source_hash: str
    seed: int

    def __post_init__(self):
        rows = np.atleast_2d(np.asarray(self.rows, dtype=np.float64))
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)

    @property
    def m(self) -> int:
        return self.rows.shape[0]


@dataclass(frozen=True)
class ShapExplanation:
    values: np.ndarray          # (n, d) per-sample, per-feature attribution
    base_value: float           # mean model score over the background
    method: str                 # "exact" | "kernel"
    n_coalitions: int | None    # kernel only
    model_score: np.ndarray     # (n,)
    explained_split: str


def sample_background(train: Dataset, m: int, seed: int,
                      model: FittedPipeline | None = None) -> Background:
    """min(m, n) training rows without replacement, deterministic in seed.

    When the model carries a fitted imputer, stored rows are pre-imputed so
    the background is NaN-free regardless of the raw data.
    """
    if m < 1:
        raise ValueError("background size m must be >= 1")
    rng = np.random.default_rng(seed & _SEED_MASK)
    take = min(m, train.n)
    idx = rng.permutation(train.n)[:take]
    rows = train.rows[idx].copy()
    if model is not None:
        for state in model.transformer_states:
            if isinstance(state, ImputeState):
                rows = np.where(np.isnan(rows), state.means, rows)
    return Background(rows=rows, source_hash=train.content_hash, seed=seed)


def _coalition_values(f, x: np.ndarray, bg_rows: np.ndarray, masks: np.ndarray,
                      batch_rows: int = 262144) -> np.ndarray:
    """v per mask row: mean of f over composites (mask 1 -> x, 0 -> background)."""
    m, d = bg_rows.shape
    per = max(1, batch_rows // m)
    v = np.empty(len(masks))
    for start in range(0, len(masks), per):
        chunk = masks[start:start + per].astype(bool)
        composites = np.where(chunk[:, None, :], x, bg_rows)
        v[start:start + per] = f(composites.reshape(-1, d)).reshape(len(chunk), m).mean(axis=1)
    return v


def shapley_exact(f, x: np.ndarray, bg: Background,
                  exact_limit: int = EXACT_LIMIT) -> tuple[np.ndarray, float]:
    """Exact Shapley values by full subset enumeration; each of the 2^d
    coalition values is evaluated exactly once."""
    x = np.asarray(x, dtype=np.float64)
    d = len(x)
    if d > exact_limit:
        raise TooManyFeatures(f"d={d} exceeds the exact enumeration limit {exact_limit}")

    subsets = np.arange(1 << d, dtype=np.int64)
    masks = (subsets[:, None] >> np.arange(d)) & 1
    v = _coalition_values(f, x, bg.rows, masks)
    base = float(v[0])

    sizes = masks.sum(axis=1)
    fact = [math.factorial(i) for i in range(d + 1)]
    weight_by_size = np.array([fact[s] * fact[d - s - 1] / fact[d] for s in range(d)])

    phi = np.empty(d)
    for i in range(d):
        without = subsets[(subsets >> i) & 1 == 0]
        phi[i] = float(np.dot(weight_by_size[sizes[without]], v[without | (1 << i)] - v[without]))
    return phi, base


def _kernel_coalitions(d: int, budget: int, rng: np.random.Generator) -> np.ndarray:
    """Coalition masks: sizes enumerated outward from the extremes (1 and d-1
    first) while the whole size group fits the budget, the rest sampled."""
    masks: list[np.ndarray] = []
    used = 0
    remaining_sizes = list(range(1, d))
    for t in range(1, d // 2 + 1):
        group = [t] if t == d - t else [t, d - t]
        group_count = sum(math.comb(d, s) for s in group)
        if used + group_count > budget:
            break
        for s in group:
            for members in combinations(range(d), s):
                mask = np.zeros(d, dtype=np.int64)
                mask[list(members)] = 1
                masks.append(mask)
            remaining_sizes.remove(s)
        used += group_count

    if remaining_sizes and used < budget:
        # sample sizes proportionally to their total kernel weight
        size_arr = np.array(remaining_sizes)
        size_weight = (d - 1) / (size_arr * (d - size_arr))
        prob = size_weight / size_weight.sum()
        for _ in range(budget - used):
            s = int(rng.choice(size_arr, p=prob))
            members = rng.choice(d, size=s, replace=False)
            mask = np.zeros(d, dtype=np.int64)
            mask[members] = 1
            masks.append(mask)
    return np.array(masks, dtype=np.int64)


def kernel_weights(masks: np.ndarray) -> np.ndarray:
    """Shapley kernel weight per coalition: (d-1) / (C(d,|z|) * |z| * (d-|z|))."""
    d = masks.shape[1]
    sizes = masks.sum(axis=1)
    return np.array([(d - 1) / (math.comb(d, s) * s * (d - s)) for s in sizes])


def kernel_shap(f, x: np.ndarray, bg: Background, n_coalitions: int,
                seed: int) -> tuple[np.ndarray, float]:
    """Weighted least-squares Shapley approximation with the efficiency
    constraint eliminated into the last coefficient; equals the exact values
    when the budget covers all 2^d - 2 coalitions."""
    x = np.asarray(x, dtype=np.float64)
    d = len(x)
    if d < 2:
        raise ValueError("kernel explanation needs d >= 2")
    max_coalitions = (1 << d) - 2
    if n_coalitions < min(d + 2, max_coalitions):
        raise ValueError(
            f"n_coalitions={n_coalitions} too small; need >= {min(d + 2, max_coalitions)}"
        )
    budget = min(n_coalitions, max_coalitions)

    rng = np.random.default_rng(seed & _SEED_MASK)
    masks = _kernel_coalitions(d, budget, rng)
    v = _coalition_values(f, x, bg.rows, masks)
    base = float(np.mean(f(bg.rows)))
    fx = float(f(x[None, :])[0])
    delta = fx - base

    weights = kernel_weights(masks)
    sqrt_w = np.sqrt(weights)
    design = (masks[:, :-1] - masks[:, -1:]).astype(np.float64)
    rhs = v - base - masks[:, -1] * delta
    coef, _, rank, _ = np.linalg.lstsq(design * sqrt_w[:, None], rhs * sqrt_w, rcond=None)
    if rank < d - 1:
        raise SingularSystem(
            f"rank {rank} < {d - 1}: raise n_coalitions above {n_coalitions}"
        )
    phi = np.append(coef, delta - coef.sum())
    return phi, base


def select_explainer(model: FittedPipeline, d: int,
                     exact_limit: int = EXACT_LIMIT) -> tuple[str, int | None]:
    """Pure method-selection rule: exact up to the limit, else kernel with a
    capped coalition budget."""
    if d <= exact_limit:
        return "exact", None
    return "kernel", min((1 << d) - 2, KERNEL_BUDGET_CAP)


def explain_split(model: FittedPipeline, data: Dataset, bg: Background, split: str,
                  seed: int | None = None, workers: int = 1,
                  exact_limit: int = EXACT_LIMIT) -> ShapExplanation:
    """Explain the model's positive-class score (margin for linear_svm) for
    every row of a split, in raw feature space. Rows are independent; kernel
    RNG reseeds per row as seed XOR row index, so results do not depend on
    worker count."""
    d = model.n_features
    if data.d != d:
        transform_rows(model, data.rows[:1])  # raises DimensionMismatch
    method, budget = select_explainer(model, d, exact_limit)
    if seed is None:
        seed = bg.seed

    def f(rows: np.ndarray) -> np.ndarray:
        return predict_scores(model, rows)

    base = float(np.mean(f(bg.rows)))
    n = data.n

    def one_row(i: int) -> np.ndarray:
        if method == "exact":
            phi, _ = shapley_exact(f, data.rows[i], bg, exact_limit)
        else:
            phi, _ = kernel_shap(f, data.rows[i], bg, budget, seed ^ i)
        return phi

    if workers > 1 and n > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(one_row, range(n)))
    else:
        rows = [one_row(i) for i in range(n)]
    values = np.vstack(rows) if rows else np.empty((0, d))
    return ShapExplanation(
        values=values,
        base_value=base,
        method=method,
        n_coalitions=budget,
        model_score=predict_scores(model, data.rows) if n else np.empty(0),
        explained_split=split,
    )


def efficiency_gap(expl: ShapExplanation) -> np.ndarray:
    """Per-row |sum(phi) + base - model_score|, the local-accuracy residual."""
    if len(expl.model_score) == 0:
        return np.empty(0)
    return np.abs(expl.values.sum(axis=1) + expl.base_value - expl.model_score)


def explanation_tsv(expl: ShapExplanation, feature_names) -> str:
    """Canonical TSV: one phi row per sample, then base_value and model_score."""
    from .dataset import render_cell
    header = list(feature_names) + ["base_value", "model_score"]
    lines = ["\t".join(header)]
    for i in range(len(expl.values)):
        cells = [render_cell(v) for v in expl.values[i]]
        cells.append(render_cell(expl.base_value))
        cells.append(render_cell(float(expl.model_score[i])))
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"


def explanation_meta(expl: ShapExplanation, bg: Background) -> dict:
    return {
        "method": expl.method,
        "n_coalitions": expl.n_coalitions,
        "background_hash": bg.source_hash,
        "background_seed": bg.seed,
        "background_m": bg.m,
        "base_value": expl.base_value,
        "split": expl.explained_split,
    }
