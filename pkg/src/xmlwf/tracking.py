"""Filesystem experiment store.

Layout (a public contract, store_version 1):

    <root>/experiments/<name>/meta.json
    <root>/experiments/<name>/runs/<run_id>/
        meta.json      status, timestamps, io_description, data_hashes, artifacts
        params.json    flat name -> scalar map
        metrics.json   flat name -> value map (cv.*, test.*)
        model.xmlwf    serialized pipeline
        cv_table.json  full candidates x folds score table
        data/ shap/ figures/

Every metadata write goes through write-temp-then-rename, so a crash never
leaves a half-written JSON file. Finished runs are never rewritten except to
append new keys (test metrics, explain artifacts).
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .dataset import Dataset, read_snapshot, write_snapshot
from .errors import BadSlug, Conflict, HashMismatch, NotFound, StateError, StoreIO
from .pipeline import FittedPipeline, deserialize_model, serialize_model
from .search import SearchResult, compute_metric, predict_labels, predict_scores

STORE_VERSION = 1
_SLUG_RE = re.compile(r"^[a-z0-9-]+$")
_RUN_ID_RE = re.compile(r"^[0-9a-f]{32}$")
_SEED_MASK = (1 << 64) - 1


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="microseconds")


def _write_json_atomic(path: Path, payload: dict) -> None:
    try:
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        os.replace(tmp, path)
    except OSError as exc:
        raise StoreIO(f"cannot write {path}: {exc}") from exc


def _read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise NotFound(f"{path} does not exist") from None
    except (OSError, json.JSONDecodeError) as exc:
        raise StoreIO(f"cannot read {path}: {exc}") from exc


@dataclass
class ExperimentMeta:
    name: str
    root: Path
    created_at: str
    description: str

    @property
    def dir(self) -> Path:
        return Path(self.root) / "experiments" / self.name

    @property
    def runs_dir(self) -> Path:
        return self.dir / "runs"


@dataclass
class RunRecord:
    run_id: str
    experiment: str
    root: Path
    status: str
    started_at: str
    seed: int
    ended_at: str | None = None
    params: dict = field(default_factory=dict)
    io_description: dict | None = None
    data_hashes: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    error: str | None = None

    @property
    def run_dir(self) -> Path:
        return Path(self.root) / "experiments" / self.experiment / "runs" / self.run_id

    def meta_payload(self) -> dict:
        return {
            "store_version": STORE_VERSION,
            "run_id": self.run_id,
            "experiment": self.experiment,
            "status": self.status,
            "started_at": self.started_at,
            "ended_at": self.ended_at,
            "seed": self.seed,
            "io_description": self.io_description,
            "data_hashes": self.data_hashes,
            "artifacts": self.artifacts,
            "error": self.error,
        }

    def write_meta(self) -> None:
        _write_json_atomic(self.run_dir / "meta.json", self.meta_payload())


def create_experiment(root, name: str, description: str = "") -> ExperimentMeta:
    """Create (or re-open, idempotently) an experiment under root."""
    if not _SLUG_RE.match(name):
        raise BadSlug(f"experiment name {name!r} is not a [a-z0-9-]+ slug")
    root = Path(root)
    exp_dir = root / "experiments" / name
    meta_path = exp_dir / "meta.json"
    if meta_path.exists():
        meta = _read_json(meta_path)
        if meta.get("description", "") != description:
            raise Conflict(
                f"experiment {name!r} already exists with a different description"
            )
        return ExperimentMeta(name=name, root=root, created_at=meta["created_at"],
                              description=description)
    try:
        (exp_dir / "runs").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StoreIO(f"cannot create {exp_dir}: {exc}") from exc
    created_at = _now()
    _write_json_atomic(meta_path, {
        "store_version": STORE_VERSION,
        "name": name,
        "created_at": created_at,
        "description": description,
    })
    return ExperimentMeta(name=name, root=root, created_at=created_at, description=description)


def start_run(exp: ExperimentMeta, params: dict, seed: int) -> RunRecord:
    """Open a new run: fresh 128-bit run_id, directory skeleton, params.json,
    meta.json with status running.

    run_ids are drawn from an RNG seeded by `seed` (rerolling on collision),
    so identical store states with identical seeds produce identical ids.
    """
    if not exp.dir.is_dir():
        raise NotFound(f"experiment {exp.name!r} does not exist under {exp.root}")
    rng = np.random.default_rng(seed & _SEED_MASK)
    for _ in range(1024):
        run_id = rng.bytes(16).hex()
        run_dir = exp.runs_dir / run_id
        try:
            run_dir.mkdir(parents=True, exist_ok=False)
        except FileExistsError:
            continue
        except OSError as exc:
            raise StoreIO(f"cannot create run directory {run_dir}: {exc}") from exc
        break
    else:
        raise StoreIO("could not allocate a fresh run_id after 1024 draws")

    for sub in ("data", "shap", "figures"):
        (run_dir / sub).mkdir(exist_ok=True)
    run = RunRecord(
        run_id=run_id,
        experiment=exp.name,
        root=Path(exp.root),
        status="running",
        started_at=_now(),
        seed=int(seed),
        params=dict(params),
    )
    _write_json_atomic(run_dir / "params.json", run.params)
    run.write_meta()
    return run


def _io_entry(ds: Dataset) -> dict:
    return {
        "feature_names": list(ds.feature_names),
        "target_name": ds.target_name,
        "n": ds.n,
        "d": ds.d,
    }


def log_run_aspects(run: RunRecord, model: FittedPipeline, search: SearchResult,
                    train: Dataset, test: Dataset | None = None) -> RunRecord:
    """Record the five tracked aspects of a run: the model blob, resolved
    hyperparameters, io description, canonical data snapshots, and the
    CV (plus optional test) metrics."""
    if run.status != "running":
        raise StateError(f"run {run.run_id} is {run.status}, not running")
    run_dir = run.run_dir

    # 1) model blob
    try:
        (run_dir / "model.xmlwf").write_bytes(serialize_model(model))
    except OSError as exc:
        raise StoreIO(f"cannot write model blob: {exc}") from exc
    run.artifacts["model"] = "model.xmlwf"

    # 2) resolved hyperparameters of the winning candidate
    run.params.update(model.spec.estimator.hyperparams)
    _write_json_atomic(run_dir / "params.json", run.params)

    # 3) io description
    run.io_description = {"train": _io_entry(train)}
    if test is not None:
        run.io_description["test"] = _io_entry(test)

    # 4) canonical snapshots, hash-verified by construction
    try:
        run.data_hashes["train"] = write_snapshot(train, run_dir / "data" / "train.tsv")
        if test is not None:
            run.data_hashes["test"] = write_snapshot(test, run_dir / "data" / "test.tsv")
    except OSError as exc:
        raise StoreIO(f"cannot write data snapshot: {exc}") from exc
    run.artifacts["data.train"] = "data/train.tsv"
    if test is not None:
        run.artifacts["data.test"] = "data/test.tsv"

    # 5) per-fold and mean CV scores for the winner, full table as artifact
    best = search.best_index
    for name, table in search.fold_scores.items():
        for fold, value in enumerate(table[best]):
            run.metrics[f"cv.{name}.fold{fold}"] = float(value)
        run.metrics[f"cv.{name}.mean"] = float(table[best].mean())
    if test is not None:
        run.metrics.update(evaluate_test_metrics(model, test, list(search.fold_scores)))
    _write_json_atomic(run_dir / "metrics.json", run.metrics)

    _write_json_atomic(run_dir / "cv_table.json", {
        "candidates": search.candidates,
        "k": search.k,
        "selection_metric": search.selection_metric.value,
        "fold_scores": {name: table.tolist() for name, table in search.fold_scores.items()},
        "mean_score": search.mean_score.tolist(),
        "std_score": search.std_score.tolist(),
        "best_index": search.best_index,
    })
    run.artifacts["cv_table"] = "cv_table.json"

    run.write_meta()
    return run


def evaluate_test_metrics(model: FittedPipeline, test: Dataset, metric_names) -> dict:
    out = {}
    labels = predict_labels(model, test.rows)
    scores = predict_scores(model, test.rows)
    for name in metric_names:
        needs_scores = name == "roc_auc"
        out[f"test.{name}"] = compute_metric(name, test.labels, scores if needs_scores else labels)
    return out


def finalize_run(run: RunRecord, status: str) -> RunRecord:
    if status not in ("finished", "failed"):
        raise ValueError(f"final status must be finished or failed, got {status!r}")
    if run.status != "running":
        raise StateError(f"run {run.run_id} already finalized as {run.status}")
    run.status = status
    run.ended_at = _now()
    run.write_meta()
    return run


def record_error(run: RunRecord, message: str) -> RunRecord:
    run.error = message
    run.write_meta()
    return run


def _run_dir(root, experiment: str, run_id: str) -> Path:
    if not _RUN_ID_RE.match(run_id):
        raise NotFound(f"{run_id!r} is not a valid run id")
    path = Path(root) / "experiments" / experiment / "runs" / run_id
    if not path.is_dir():
        raise NotFound(f"run {run_id} not found in experiment {experiment!r}")
    return path


def load_run_record(root, experiment: str, run_id: str) -> RunRecord:
    run_dir = _run_dir(root, experiment, run_id)
    meta = _read_json(run_dir / "meta.json")
    params = _read_json(run_dir / "params.json") if (run_dir / "params.json").exists() else {}
    metrics_path = run_dir / "metrics.json"
    metrics = _read_json(metrics_path) if metrics_path.exists() else {}
    return RunRecord(
        run_id=meta["run_id"],
        experiment=experiment,
        root=Path(root),
        status=meta["status"],
        started_at=meta["started_at"],
        ended_at=meta.get("ended_at"),
        seed=meta.get("seed", 0),
        params=params,
        io_description=meta.get("io_description"),
        data_hashes=meta.get("data_hashes", {}),
        metrics=metrics,
        artifacts=meta.get("artifacts", {}),
        error=meta.get("error"),
    )


def load_run_model(root, experiment: str, run_id: str) -> FittedPipeline:
    """Deserialize the run's logged model; verifies the blob's training-data
    hash against the run metadata."""
    run = load_run_record(root, experiment, run_id)
    if run.status != "finished":
        raise StateError(f"run {run_id} is {run.status}, not finished")
    blob_path = run.run_dir / run.artifacts.get("model", "model.xmlwf")
    if not blob_path.exists():
        raise NotFound(f"run {run_id} has no model blob")
    model = deserialize_model(blob_path.read_bytes())
    recorded = run.data_hashes.get("train")
    if recorded != model.train_data_hash:
        raise HashMismatch(
            f"model blob was trained on {model.train_data_hash[:12]}..., "
            f"meta records {str(recorded)[:12]}..."
        )
    return model


def update_metrics(run: RunRecord, entries: dict) -> RunRecord:
    """Merge new metric keys into metrics.json (used by the test stage;
    deterministic re-runs overwrite identical values)."""
    run.metrics.update({k: float(v) for k, v in entries.items()})
    _write_json_atomic(run.run_dir / "metrics.json", run.metrics)
    return run


def add_artifacts(run: RunRecord, entries: dict) -> RunRecord:
    """Register additional artifact paths against the run (additive only)."""
    run.artifacts.update(entries)
    run.write_meta()
    return run


def list_runs(root, experiment: str, sort_key: str = "started_at") -> list[RunRecord]:
    """All runs, sorted descending by sort_key (a metric name or started_at);
    ties resolve by run_id ascending. Runs missing the key sort last."""
    exp_dir = Path(root) / "experiments" / experiment
    if not exp_dir.is_dir():
        raise NotFound(f"experiment {experiment!r} not found under {root}")
    runs = []
    runs_dir = exp_dir / "runs"
    if runs_dir.is_dir():
        for entry in sorted(os.listdir(runs_dir)):
            if _RUN_ID_RE.match(entry) and (runs_dir / entry / "meta.json").exists():
                runs.append(load_run_record(root, experiment, entry))
    runs.sort(key=lambda r: r.run_id)
    if sort_key == "started_at":
        runs.sort(key=lambda r: r.started_at, reverse=True)
    else:
        runs.sort(key=lambda r: (sort_key in r.metrics, r.metrics.get(sort_key, 0.0)), reverse=True)
    return runs


def is_stale(run: RunRecord) -> bool:
    """A run still marked running has no live owner we can verify."""
    return run.status == "running"


def audit_run(root, experiment: str, run_id: str) -> list[str]:
    """Five-aspect completeness check; returns problems (empty = pass).

    Finished runs must have a loadable model blob, non-empty params, an io
    description consistent with the snapshots, snapshots that re-hash to the
    recorded digests, and a full k x |metrics| table of CV entries.
    """
    problems: list[str] = []
    try:
        run = load_run_record(root, experiment, run_id)
    except (NotFound, StoreIO) as exc:
        return [str(exc)]
    if run.status == "running":
        return [f"run {run_id} is stale: status still running"]
    if run.status == "failed":
        return []

    # aspect 1: model blob
    try:
        model = load_run_model(root, experiment, run_id)
    except Exception as exc:
        problems.append(f"model blob: {exc}")
        model = None

    # aspect 2: params
    if not run.params:
        problems.append("params.json is empty")

    # aspects 3+4: io description and snapshots
    if not run.io_description:
        problems.append("io_description missing")
    if not run.data_hashes:
        problems.append("no data snapshot recorded")
    for split, recorded_hash in run.data_hashes.items():
        snap = run.run_dir / "data" / f"{split}.tsv"
        if not snap.exists():
            problems.append(f"snapshot {split}.tsv missing")
            continue
        try:
            ds = read_snapshot(str(snap))
        except Exception as exc:
            problems.append(f"snapshot {split}.tsv unreadable: {exc}")
            continue
        if ds.content_hash != recorded_hash:
            problems.append(f"snapshot {split}.tsv re-hash differs from recorded hash")
        described = (run.io_description or {}).get(split)
        if described is not None:
            if (described["n"] != ds.n or described["d"] != ds.d
                    or described["feature_names"] != list(ds.feature_names)
                    or described["target_name"] != ds.target_name):
                problems.append(f"io_description for {split} disagrees with its snapshot")
        else:
            problems.append(f"io_description lacks split {split}")
        if split == "train" and model is not None and model.train_data_hash != ds.content_hash:
            problems.append("model train_data_hash differs from the train snapshot")

    # aspect 5: metrics
    if not run.metrics:
        problems.append("metrics.json is empty")
    cv_table_path = run.run_dir / run.artifacts.get("cv_table", "cv_table.json")
    if cv_table_path.exists():
        table = _read_json(cv_table_path)
        k = table["k"]
        for name in table["fold_scores"]:
            missing = [f"cv.{name}.fold{i}" for i in range(k)
                       if f"cv.{name}.fold{i}" not in run.metrics]
            if missing:
                problems.append(f"metrics.json lacks CV entries: {', '.join(missing)}")
    else:
        problems.append("cv_table.json artifact missing")
    return problems


def audit_store(root, experiment: str) -> dict[str, list[str]]:
    return {run.run_id: audit_run(root, experiment, run.run_id)
            for run in list_runs(root, experiment)}
