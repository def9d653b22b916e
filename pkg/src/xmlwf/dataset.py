"""Tabular dataset loading, canonical hashing, and stratified splitting.

A Dataset is immutable once built: rows/labels arrays are frozen and the
content hash is computed in the constructor from the canonical TSV form,
so every consumer downstream can treat the hash as the data's identity.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateSplit,
    EmptyData,
    MissingTarget,
    NonBinaryTarget,
    ParseError,
    TooFewPerClass,
)

_SEED_MASK = (1 << 64) - 1


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed & _SEED_MASK)


def render_cell(value: float) -> str:
    """Shortest round-trip decimal form; NaN renders as the empty string."""
    if math.isnan(value):
        return ""
    return repr(float(value))


def _parse_cell(text: str, line: int, column: str) -> float:
    if text == "":
        return math.nan
    try:
        value = float(text)
    except ValueError:
        raise ParseError(
            f"line {line}, column {column!r}: cannot parse {text!r} as a number",
            line=line, column=column,
        ) from None
    if math.isinf(value):
        raise ParseError(
            f"line {line}, column {column!r}: non-finite value {text!r}",
            line=line, column=column,
        )
    return value


@dataclass(frozen=True)
class Dataset:
    feature_names: tuple[str, ...]
    rows: np.ndarray              # (n, d) float64, NaN marks a missing cell
    labels: np.ndarray            # (n,) int64 in {0, 1}
    target_name: str
    source_path: str | None = None
    content_hash: str = field(init=False)

    def __post_init__(self):
        rows = np.ascontiguousarray(self.rows, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if rows.ndim != 2:
            raise ValueError("rows must be a 2-d matrix")
        n, d = rows.shape
        if d < 1 or len(self.feature_names) != d:
            raise ValueError(f"feature_names length {len(self.feature_names)} != d {d} or d < 1")
        if n < 2 or labels.shape != (n,):
            raise ValueError("need n >= 2 samples and one label per row")
        if not np.isin(labels, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")
        names = tuple(str(x) for x in self.feature_names) + (self.target_name,)
        if len(set(names)) != len(names):
            raise ValueError("column names must be unique")
        for name in names:
            if any(ch in name for ch in "\t\n\r"):
                raise ValueError(f"column name {name!r} contains a control character")
        rows.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "content_hash", _digest(canonical_tsv(self)))

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def d(self) -> int:
        return self.rows.shape[1]

    def class_counts(self) -> tuple[int, int]:
        ones = int(self.labels.sum())
        return self.n - ones, ones

    def subset(self, indices: np.ndarray) -> "Dataset":
        """New Dataset from the given row indices, in the given order."""
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            feature_names=self.feature_names,
            rows=self.rows[idx].copy(),
            labels=self.labels[idx].copy(),
            target_name=self.target_name,
            source_path=self.source_path,
        )


def canonical_tsv(dataset: Dataset) -> str:
    """Canonical serialization: header, then rows in stored order, cells in
    shortest round-trip decimal, NaN empty, tab-joined, label last."""
    lines = ["\t".join(dataset.feature_names + (dataset.target_name,))]
    for i in range(dataset.n):
        cells = [render_cell(v) for v in dataset.rows[i]]
        cells.append(str(int(dataset.labels[i])))
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"


def _digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def content_hash(dataset: Dataset) -> str:
    """SHA-256 hex digest of the canonical serialization."""
    return dataset.content_hash


def _build_dataset(header: list[str], records: list[list[str]], target_name: str,
                   source_path: str | None, first_data_line: int) -> Dataset:
    if target_name not in header:
        raise MissingTarget(f"header {header!r} lacks target column {target_name!r}")
    target_idx = header.index(target_name)
    feature_names = [h for i, h in enumerate(header) if i != target_idx]
    if not feature_names:
        raise EmptyData("no feature columns besides the target")

    n = len(records)
    if n < 2:
        raise EmptyData(f"need at least 2 data rows, got {n}")
    rows = np.empty((n, len(feature_names)), dtype=np.float64)
    labels = np.empty(n, dtype=np.int64)
    for r, record in enumerate(records):
        line = first_data_line + r
        if len(record) != len(header):
            raise ParseError(
                f"line {line}: expected {len(header)} fields, got {len(record)}",
                line=line,
            )
        c = 0
        for i, text in enumerate(record):
            if i == target_idx:
                value = _parse_cell(text, line, target_name)
                if not (value == 0.0 or value == 1.0):
                    raise NonBinaryTarget(
                        f"line {line}: target value {text!r} is not 0 or 1"
                    )
                labels[r] = int(value)
            else:
                rows[r, c] = _parse_cell(text, line, feature_names[c])
                c += 1
    return Dataset(
        feature_names=tuple(feature_names),
        rows=rows,
        labels=labels,
        target_name=target_name,
        source_path=source_path,
    )


def load_csv(path: str, target_name: str) -> Dataset:
    """Load an RFC-4180-style CSV (header mandatory) into a Dataset.

    Files ending in .tsv are read tab-delimited, so logged snapshots load
    through the same entry point.
    """
    delimiter = "\t" if str(path).endswith(".tsv") else ","
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyData(f"{path}: file is empty") from None
        records = list(reader)
    return _build_dataset(header, records, target_name, str(path), first_data_line=2)


def read_snapshot(path: str, target_name: str | None = None) -> Dataset:
    """Load a canonical TSV snapshot; target defaults to the last column."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter="\t")
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyData(f"{path}: file is empty") from None
        records = [rec for rec in reader if rec]
    if target_name is None:
        target_name = header[-1]
    return _build_dataset(header, records, target_name, str(path), first_data_line=2)


def write_snapshot(dataset: Dataset, path) -> str:
    """Write the canonical TSV; returns the content hash it certifies."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(canonical_tsv(dataset))
    return dataset.content_hash


def _class_indices(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    labels = np.asarray(labels)
    return np.flatnonzero(labels == 0), np.flatnonzero(labels == 1)


def split_holdout(dataset: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified holdout split, deterministic in seed.

    Test size targets round(test_fraction * n), allocated across classes by
    largest remainder and then clamped so both classes appear on both sides.
    """
    if not (0.0 < test_fraction < 1.0):
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    by_class = _class_indices(dataset.labels)
    counts = [len(ix) for ix in by_class]
    if min(counts) < 2:
        raise DegenerateSplit(
            f"both classes need >= 2 samples to appear in train and test, counts={counts}"
        )

    n = dataset.n
    target_total = int(round(test_fraction * n))
    quotas = [target_total * c / n for c in counts]
    take = [int(math.floor(q)) for q in quotas]
    remainders = [q - t for q, t in zip(quotas, take)]
    leftover = target_total - sum(take)
    for cls in sorted(range(2), key=lambda c: -remainders[c])[:leftover]:
        take[cls] += 1
    # each class must keep >= 1 sample on each side
    take = [min(max(t, 1), c - 1) for t, c in zip(take, counts)]

    rng = _rng(seed)
    test_idx, train_idx = [], []
    for cls in (0, 1):
        order = by_class[cls][rng.permutation(counts[cls])]
        test_idx.append(order[: take[cls]])
        train_idx.append(order[take[cls]:])
    train = dataset.subset(np.sort(np.concatenate(train_idx)))
    test = dataset.subset(np.sort(np.concatenate(test_idx)))
    return train, test


@dataclass(frozen=True)
class FoldAssignment:
    k: int
    fold_of: np.ndarray   # (n,) int64 in [0, k)
    seed: int

    def __post_init__(self):
        fold_of = np.ascontiguousarray(self.fold_of, dtype=np.int64)
        if self.k < 2:
            raise ValueError("k must be >= 2")
        if fold_of.min(initial=0) < 0 or fold_of.max(initial=0) >= self.k:
            raise ValueError("fold indices must lie in [0, k)")
        fold_of.setflags(write=False)
        object.__setattr__(self, "fold_of", fold_of)

    def test_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of != fold)


def stratified_kfold(labels: np.ndarray, k: int, seed: int) -> FoldAssignment:
    """Shuffle each class by seed, deal round-robin to k folds."""
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    labels = np.asarray(labels, dtype=np.int64)
    by_class = _class_indices(labels)
    counts = [len(ix) for ix in by_class]
    if min(counts) < k:
        raise TooFewPerClass(f"min class count {min(counts)} < k={k}")
    rng = _rng(seed)
    fold_of = np.empty(len(labels), dtype=np.int64)
    for cls in (0, 1):
        order = by_class[cls][rng.permutation(counts[cls])]
        for pos, sample in enumerate(order):
            fold_of[sample] = pos % k
    return FoldAssignment(k=k, fold_of=fold_of, seed=seed)
