"""Declarative preprocessing + estimator chains.

A PipelineSpec declares transformer kinds and one estimator with resolved
hyperparameters; fit_pipeline learns per-column statistics and model
parameters deterministically from (spec, dataset, seed). FittedPipeline is
immutable and serializes to the versioned "XMLWF" blob format, which
round-trips to bit-identical predictions.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import trees
from .dataset import Dataset
from .errors import (
    BadMagic,
    DimensionMismatch,
    HashMismatch,
    InvalidSpec,
    NaNWithoutImputer,
    NonFiniteLoss,
    SingleClassTrain,
    TruncatedBlob,
    UnsupportedVersion,
)

MAGIC = b"XMLWF"
FORMAT_VERSION = 1

TRANSFORMER_KINDS = ("mean_impute", "standardize")
ESTIMATOR_KINDS = ("logistic_regression", "linear_svm", "random_forest", "gradient_boosting")

_SEED_MASK = (1 << 64) - 1


def _pos(x):
    return x > 0


def _nonneg(x):
    return x >= 0


def _at_least_1(x):
    return x >= 1


def _any(x):
    return True


# name -> (default, type, range check); bool checked before int (bool is an int subtype)
HYPERPARAM_SCHEMA: dict[str, dict[str, tuple]] = {
    "logistic_regression": {
        "learning_rate": (0.1, float, _pos),
        "max_iter": (500, int, _nonneg),
        "tol": (1e-6, float, _nonneg),
        "l2": (1e-4, float, _nonneg),
    },
    "linear_svm": {
        "lambda": (1e-2, float, _pos),
        "epochs": (100, int, _at_least_1),
    },
    "random_forest": {
        "n_trees": (100, int, _at_least_1),
        "max_depth": (8, int, _at_least_1),
        "min_samples_leaf": (1, int, _at_least_1),
        "bootstrap": (True, bool, _any),
    },
    "gradient_boosting": {
        "n_rounds": (100, int, _nonneg),
        "learning_rate": (0.1, float, _pos),
        "max_depth": (3, int, _at_least_1),
    },
}

# probability kinds cut at 0.5, margins at 0
SCORE_THRESHOLD = {
    "logistic_regression": 0.5,
    "random_forest": 0.5,
    "gradient_boosting": 0.5,
    "linear_svm": 0.0,
}


def resolve_hyperparams(kind: str, overrides: dict | None) -> dict:
    """Fill defaults and validate names/types/ranges for the given kind."""
    if kind not in HYPERPARAM_SCHEMA:
        raise InvalidSpec(f"unknown estimator kind {kind!r}")
    schema = HYPERPARAM_SCHEMA[kind]
    resolved = {}
    overrides = dict(overrides or {})
    for name in overrides:
        if name not in schema:
            raise InvalidSpec(f"{kind}: unknown hyperparameter {name!r}")
    for name, (default, typ, check) in schema.items():
        value = overrides.get(name, default)
        if typ is bool:
            if not isinstance(value, bool):
                raise InvalidSpec(f"{kind}.{name}: expected bool, got {value!r}")
        elif typ is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise InvalidSpec(f"{kind}.{name}: expected integer, got {value!r}")
            value = int(value)
        else:
            value = float(value)
        if not check(value):
            raise InvalidSpec(f"{kind}.{name}: value {value!r} out of range")
        resolved[name] = value
    return resolved


@dataclass(frozen=True)
class TransformerSpec:
    kind: str

    def __post_init__(self):
        if self.kind not in TRANSFORMER_KINDS:
            raise InvalidSpec(f"unknown transformer kind {self.kind!r}")


@dataclass(frozen=True)
class EstimatorSpec:
    kind: str
    hyperparams: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hyperparams", resolve_hyperparams(self.kind, self.hyperparams))
        object.__setattr__(self, "seed", int(self.seed))

    def with_overrides(self, overrides: dict | None = None, seed: int | None = None) -> "EstimatorSpec":
        merged = dict(self.hyperparams)
        merged.update(overrides or {})
        return EstimatorSpec(self.kind, merged, self.seed if seed is None else seed)


@dataclass(frozen=True)
class PipelineSpec:
    transformers: tuple[TransformerSpec, ...]
    estimator: EstimatorSpec

    def __post_init__(self):
        object.__setattr__(self, "transformers", tuple(self.transformers))
        kinds = [t.kind for t in self.transformers]
        if len(set(kinds)) != len(kinds):
            raise InvalidSpec("each transformer kind may appear at most once")
        if "mean_impute" in kinds and "standardize" in kinds:
            if kinds.index("mean_impute") > kinds.index("standardize"):
                raise InvalidSpec("mean_impute must precede standardize")

    @property
    def has_imputer(self) -> bool:
        return any(t.kind == "mean_impute" for t in self.transformers)

    def with_candidate(self, overrides: dict | None = None, seed: int | None = None) -> "PipelineSpec":
        return PipelineSpec(self.transformers, self.estimator.with_overrides(overrides, seed))


# --- fitted state -----------------------------------------------------------

@dataclass(frozen=True)
class ImputeState:
    means: np.ndarray


@dataclass(frozen=True)
class StandardizeState:
    means: np.ndarray
    scale: np.ndarray  # std with zeros (constant columns) replaced by 1


@dataclass(frozen=True)
class LinearState:
    weights: np.ndarray
    bias: float


@dataclass(frozen=True)
class ForestState:
    trees: tuple[np.ndarray, ...]


@dataclass(frozen=True)
class BoostState:
    base_log_odds: float
    shrinkage: float
    trees: tuple[np.ndarray, ...]


@dataclass(frozen=True)
class FittedPipeline:
    spec: PipelineSpec
    n_features: int
    transformer_states: tuple
    model_state: object
    train_data_hash: str
    format_version: int = FORMAT_VERSION

    @property
    def kind(self) -> str:
        return self.spec.estimator.kind

    @property
    def score_threshold(self) -> float:
        return SCORE_THRESHOLD[self.kind]


# --- transformers -----------------------------------------------------------

def _fit_transformers(spec: PipelineSpec, X: np.ndarray):
    states = []
    X = X.copy()
    for t in spec.transformers:
        if t.kind == "mean_impute":
            # all-NaN columns fall back to 0.0
            with np.errstate(invalid="ignore"):
                means = np.nanmean(X, axis=0)
            means = np.nan_to_num(means, nan=0.0)
            state = ImputeState(means=means)
        else:
            means = X.mean(axis=0)
            std = X.std(axis=0)
            scale = np.where(std == 0.0, 1.0, std)
            state = StandardizeState(means=means, scale=scale)
        states.append(state)
        X = _apply_transformer(state, X)
    return tuple(states), X


def _apply_transformer(state, X: np.ndarray) -> np.ndarray:
    if isinstance(state, ImputeState):
        return np.where(np.isnan(X), state.means, X)
    return (X - state.means) / state.scale


def transform_rows(model: FittedPipeline, rows: np.ndarray) -> np.ndarray:
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    if rows.shape[1] != model.n_features:
        raise DimensionMismatch(
            f"expected {model.n_features} columns, got {rows.shape[1]}"
        )
    if not model.spec.has_imputer and np.isnan(rows).any():
        raise NaNWithoutImputer("input has NaN cells but the pipeline has no mean_impute")
    X = rows.copy()
    for state in model.transformer_states:
        X = _apply_transformer(state, X)
    return X


# --- estimators -------------------------------------------------------------

def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def logistic_loss(weights: np.ndarray, bias: float, X: np.ndarray, y: np.ndarray, l2: float) -> float:
    """Mean cross-entropy plus (l2/2)*||w||^2; the bias is unregularized."""
    z = X @ weights + bias
    per_sample = np.logaddexp(0.0, z) - y * z
    return float(per_sample.mean() + 0.5 * l2 * (weights @ weights))


def logistic_gradient(weights: np.ndarray, bias: float, X: np.ndarray, y: np.ndarray, l2: float):
    p = _sigmoid(X @ weights + bias)
    resid = p - y
    grad_w = X.T @ resid / len(y) + l2 * weights
    grad_b = float(resid.mean())
    return grad_w, grad_b


def _fit_logistic(X: np.ndarray, y: np.ndarray, hp: dict, seed: int) -> LinearState:
    n, d = X.shape
    w = np.zeros(d)
    b = 0.0
    lr, l2, tol = hp["learning_rate"], hp["l2"], hp["tol"]
    for _ in range(hp["max_iter"]):
        grad_w, grad_b = logistic_gradient(w, b, X, y, l2)
        if not (np.isfinite(grad_w).all() and math.isfinite(grad_b)):
            raise NonFiniteLoss("logistic gradient diverged; lower the learning rate")
        if max(np.abs(grad_w).max(initial=0.0), abs(grad_b)) <= tol:
            break
        w -= lr * grad_w
        b -= lr * grad_b
    if not (np.isfinite(w).all() and math.isfinite(b)):
        raise NonFiniteLoss("logistic weights diverged; lower the learning rate")
    return LinearState(weights=w, bias=b)


def _fit_linear_svm(X: np.ndarray, y: np.ndarray, hp: dict, seed: int) -> LinearState:
    """Pegasos-style SGD on hinge loss + L2; bias follows the subgradient
    unregularized."""
    n, d = X.shape
    sy = 2.0 * y - 1.0
    lam = hp["lambda"]
    rng = np.random.default_rng(seed & _SEED_MASK)
    w = np.zeros(d)
    b = 0.0
    t = 0
    for _ in range(hp["epochs"]):
        for i in rng.permutation(n):
            t += 1
            eta = 1.0 / (lam * t)
            margin = sy[i] * (X[i] @ w + b)
            w *= 1.0 - eta * lam
            if margin < 1.0:
                w += eta * sy[i] * X[i]
                b += eta * sy[i]
    if not (np.isfinite(w).all() and math.isfinite(b)):
        raise NonFiniteLoss("svm weights diverged")
    return LinearState(weights=w, bias=b)


def _fit_random_forest(X: np.ndarray, y: np.ndarray, hp: dict, seed: int) -> ForestState:
    n, d = X.shape
    subset = trees.sqrt_feature_count(d)
    grown = []
    for index in range(hp["n_trees"]):
        rng = np.random.default_rng((seed ^ index) & _SEED_MASK)
        if hp["bootstrap"]:
            sample = rng.integers(0, n, size=n)
        else:
            sample = np.arange(n)
        grown.append(trees.grow_tree(
            X[sample], y[sample], task="gini",
            max_depth=hp["max_depth"], min_samples_leaf=hp["min_samples_leaf"],
            n_features_per_split=subset, rng=rng,
        ))
    return ForestState(trees=tuple(grown))


def _fit_gradient_boosting(X: np.ndarray, y: np.ndarray, hp: dict, seed: int) -> BoostState:
    p = float(y.mean())
    f0 = math.log(p / (1.0 - p))
    shrinkage = hp["learning_rate"]
    F = np.full(len(y), f0)
    grown = []
    for _ in range(hp["n_rounds"]):
        residual = y - _sigmoid(F)
        tree = trees.grow_tree(X, residual, task="sse", max_depth=hp["max_depth"])
        F = F + shrinkage * trees.predict_tree(tree, X)
        if not np.isfinite(F).all():
            raise NonFiniteLoss("boosting scores diverged")
        grown.append(tree)
    return BoostState(base_log_odds=f0, shrinkage=shrinkage, trees=tuple(grown))


_FITTERS = {
    "logistic_regression": _fit_logistic,
    "linear_svm": _fit_linear_svm,
    "random_forest": _fit_random_forest,
    "gradient_boosting": _fit_gradient_boosting,
}


def fit_pipeline(spec: PipelineSpec, train: Dataset) -> FittedPipeline:
    """Fit transformers in order, then the estimator, deterministically."""
    X = np.asarray(train.rows, dtype=np.float64)
    y = train.labels.astype(np.float64)
    if not spec.has_imputer and np.isnan(X).any():
        raise NaNWithoutImputer("training data has NaN cells but no mean_impute transformer")
    if (train.labels == train.labels[0]).all():
        raise SingleClassTrain("all training labels are equal")
    states, X = _fit_transformers(spec, X)
    model_state = _FITTERS[spec.estimator.kind](X, y, spec.estimator.hyperparams, spec.estimator.seed)
    return FittedPipeline(
        spec=spec,
        n_features=train.d,
        transformer_states=states,
        model_state=model_state,
        train_data_hash=train.content_hash,
    )


def _raw_scores(model: FittedPipeline, X: np.ndarray) -> np.ndarray:
    state = model.model_state
    kind = model.kind
    if kind == "logistic_regression":
        return _sigmoid(X @ state.weights + state.bias)
    if kind == "linear_svm":
        return X @ state.weights + state.bias
    if kind == "random_forest":
        acc = np.zeros(len(X))
        for tree in state.trees:
            acc += trees.predict_tree(tree, X)
        return acc / len(state.trees)
    # gradient boosting
    F = np.full(len(X), state.base_log_odds)
    for tree in state.trees:
        F = F + state.shrinkage * trees.predict_tree(tree, X)
    return _sigmoid(F)


def predict_scores(model: FittedPipeline, rows: np.ndarray) -> np.ndarray:
    """P(y=1) for probabilistic kinds; the raw margin for linear_svm."""
    return _raw_scores(model, transform_rows(model, rows))


def predict_labels(model: FittedPipeline, rows: np.ndarray) -> np.ndarray:
    """Score >= kind threshold maps to label 1 (ties included)."""
    return (predict_scores(model, rows) >= model.score_threshold).astype(np.int64)


# --- serialization ----------------------------------------------------------

def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _spec_to_dict(spec: PipelineSpec) -> dict:
    return {
        "transformers": [t.kind for t in spec.transformers],
        "estimator": {
            "kind": spec.estimator.kind,
            "hyperparams": spec.estimator.hyperparams,
            "seed": spec.estimator.seed,
        },
    }


def _spec_from_dict(data: dict) -> PipelineSpec:
    est = data["estimator"]
    return PipelineSpec(
        transformers=tuple(TransformerSpec(k) for k in data["transformers"]),
        estimator=EstimatorSpec(est["kind"], est["hyperparams"], est["seed"]),
    )


def _collect_arrays(model: FittedPipeline) -> list[tuple[str, np.ndarray]]:
    arrays: list[tuple[str, np.ndarray]] = []
    for state in model.transformer_states:
        if isinstance(state, ImputeState):
            arrays.append(("impute.means", state.means))
        else:
            arrays.append(("standardize.means", state.means))
            arrays.append(("standardize.scale", state.scale))
    state = model.model_state
    if isinstance(state, LinearState):
        arrays.append(("linear.coef", np.append(state.weights, state.bias)))
    elif isinstance(state, ForestState):
        for i, tree in enumerate(state.trees):
            arrays.append((f"tree.{i}", tree))
    else:
        arrays.append(("boost.base", np.array([state.base_log_odds])))
        for i, tree in enumerate(state.trees):
            arrays.append((f"tree.{i}", tree))
    return arrays


def serialize_model(model: FittedPipeline) -> bytes:
    """Self-describing versioned blob: magic, version, canonical spec text,
    little-endian float64 arrays, trailing payload digest."""
    arrays = _collect_arrays(model)
    header = _canonical_json({
        "spec": _spec_to_dict(model.spec),
        "train_data_hash": model.train_data_hash,
        "n_features": model.n_features,
        "arrays": [{"name": name, "shape": list(arr.shape)} for name, arr in arrays],
    }).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", model.format_version), struct.pack("<Q", len(header)), header]
    for _, arr in arrays:
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    payload = b"".join(parts)
    return payload + hashlib.sha256(payload).hexdigest().encode("ascii")


def deserialize_model(blob: bytes) -> FittedPipeline:
    if len(blob) < len(MAGIC) + 4:
        raise TruncatedBlob(f"blob is {len(blob)} bytes, smaller than the fixed header")
    if blob[:len(MAGIC)] != MAGIC:
        raise BadMagic(f"bad magic {blob[:len(MAGIC)]!r}")
    version = struct.unpack_from("<I", blob, len(MAGIC))[0]
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"format version {version} is not supported")
    offset = len(MAGIC) + 4
    if len(blob) < offset + 8:
        raise TruncatedBlob("blob ends inside the header length field")
    header_len = struct.unpack_from("<Q", blob, offset)[0]
    offset += 8
    if len(blob) < offset + header_len:
        raise TruncatedBlob("blob ends inside the spec header")
    try:
        header = json.loads(blob[offset:offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TruncatedBlob(f"unreadable spec header: {exc}") from None
    offset += header_len

    arrays = {}
    for entry in header["arrays"]:
        size = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        nbytes = size * 8
        if len(blob) < offset + nbytes:
            raise TruncatedBlob(f"blob ends inside array {entry['name']!r}")
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=offset).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(np.float64)
        offset += nbytes

    if len(blob) != offset + 64:
        raise TruncatedBlob("blob ends inside the trailing digest")
    recorded = blob[offset:].decode("ascii", errors="replace")
    actual = hashlib.sha256(blob[:offset]).hexdigest()
    if recorded != actual:
        raise HashMismatch("payload digest does not match the trailing digest")

    spec = _spec_from_dict(header["spec"])
    states = []
    for t in spec.transformers:
        if t.kind == "mean_impute":
            states.append(ImputeState(means=arrays["impute.means"]))
        else:
            states.append(StandardizeState(
                means=arrays["standardize.means"], scale=arrays["standardize.scale"],
            ))

    kind = spec.estimator.kind
    if kind in ("logistic_regression", "linear_svm"):
        coef = arrays["linear.coef"]
        model_state = LinearState(weights=coef[:-1], bias=float(coef[-1]))
    elif kind == "random_forest":
        tree_names = sorted((n for n in arrays if n.startswith("tree.")), key=lambda n: int(n.split(".")[1]))
        model_state = ForestState(trees=tuple(arrays[n] for n in tree_names))
    else:
        tree_names = sorted((n for n in arrays if n.startswith("tree.")), key=lambda n: int(n.split(".")[1]))
        model_state = BoostState(
            base_log_odds=float(arrays["boost.base"][0]),
            shrinkage=spec.estimator.hyperparams["learning_rate"],
            trees=tuple(arrays[n] for n in tree_names),
        )

    return FittedPipeline(
        spec=spec,
        n_features=header["n_features"],
        transformer_states=tuple(states),
        model_state=model_state,
        train_data_hash=header["train_data_hash"],
        format_version=version,
    )
