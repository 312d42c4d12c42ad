"""Config-driven experiments: one full task stream per run.

A run config is a single JSON document; unknown keys are rejected so typos
fail fast. Every run writes a results document plus four CSV diagnostics
(importance scores, sealed-basis Gram matrices, effective-weight deltas,
composition-weight trajectories), all re-parseable by the readers in this
module. Runs are deterministic per (config, seed): the results document is
byte-identical across repeated executions.
"""

from __future__ import annotations

import copy
import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import protocol
from .data import Dataset, gen_synthetic_tasks, load_features_bin, load_features_csv
from .errors import ConfigError, UsageError
from .ipc import IpcConfig, location_key
from .metrics import AccuracyMatrix, avg_accuracy, compute_metrics
from .netcore import make_backbone, pretrain_backbone
from .protocol import RunState, TrainSettings, init_run_state
from .rng import RngStream

RESULTS_VERSION = 1

VARIANT_ORDER = ["lora-ft", "composition", "ortho", "ipc", "tii"]
# Cumulative flag chain: each variant enables one more mechanism.
VARIANT_FLAGS = {
    "lora-ft": dict(composition=False, ortho=False, ipc=False, tii=False),
    "composition": dict(composition=True, ortho=False, ipc=False, tii=False),
    "ortho": dict(composition=True, ortho=True, ipc=False, tii=False),
    "ipc": dict(composition=True, ortho=True, ipc=True, tii=False),
    "tii": dict(composition=True, ortho=True, ipc=True, tii=True),
}

__all__ = [
    "default_config",
    "resolve_config",
    "run_experiment",
    "RunArtifacts",
    "emit_reports",
    "read_results",
    "read_importance_csv",
    "read_gram_csv",
    "read_deltas_csv",
    "read_omega_csv",
    "recompute_metrics",
    "ablate",
    "VARIANT_ORDER",
    "VARIANT_FLAGS",
]


def default_config() -> dict:
    """The fully resolved default run configuration."""
    return {
        "seed": 0,
        "dataset": {
            "kind": "synthetic",
            "tasks": 6,
            "classes_per_task": 4,
            "n_train": 200,
            "n_test": 50,
            "input_dim": 32,
            "class_sep": 6.0,
        },
        "model": {
            "blocks": 3,
            "activation": "tanh",
            "pretrain": {
                "classes": 8,
                "n_per_class": 100,
                "epochs": 5,
                "lr": 0.01,
                "class_sep": 6.0,
            },
        },
        "train": {
            "lr": 0.01,
            "lr_hist_ratio": 0.01,
            "ortho_weight": 1.0,
            "epochs": 10,
            "batch_size": 128,
            "rank": 4,
            "omega_current_rate": "main",
        },
        "ipc": {
            "beta1": 0.85,
            "beta2": 0.85,
            "top_p": 0.10,
            "count_base": "unfrozen",
        },
        "tap": {
            "samples_per_class": 256,
            "epochs": 20,
        },
        "tii": {
            "mode": "per_sample",
            "shrinkage": 1e-3,
            "shrinkage_mode": "relative",
        },
        "variant": {
            "composition": True,
            "ortho": True,
            "ipc": True,
            "tii": True,
        },
    }


_FILE_DATASET_KEYS = {"kind", "format", "train", "test"}


def _merge_section(defaults: dict, user: dict, path: str) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {path}{key!r}")
        if isinstance(defaults[key], dict) and isinstance(value, dict):
            out[key] = _merge_section(defaults[key], value, f"{path}{key}.")
        else:
            out[key] = value
    return out


def resolve_config(user: dict) -> dict:
    """Merge a user config over the defaults, rejecting unknown keys."""
    if not isinstance(user, dict):
        raise ConfigError("config must be a JSON object")
    base = default_config()
    user = copy.deepcopy(user)

    dataset = user.pop("dataset", None)
    cfg = _merge_section({k: v for k, v in base.items() if k != "dataset"}, user, "")
    if dataset is None:
        cfg["dataset"] = base["dataset"]
    elif not isinstance(dataset, dict) or "kind" not in dataset:
        raise ConfigError("dataset must be an object with a 'kind' key")
    elif dataset["kind"] == "synthetic":
        cfg["dataset"] = _merge_section(base["dataset"], dataset, "dataset.")
    elif dataset["kind"] == "file":
        unknown = set(dataset) - _FILE_DATASET_KEYS
        if unknown:
            raise ConfigError(f"unknown config key dataset.{sorted(unknown)[0]!r}")
        if dataset.get("format") not in ("csv", "bin"):
            raise ConfigError("dataset.format must be 'csv' or 'bin'")
        if "train" not in dataset:
            raise ConfigError("file dataset needs a 'train' path")
        cfg["dataset"] = {
            "kind": "file",
            "format": dataset["format"],
            "train": dataset["train"],
            "test": dataset.get("test"),
        }
    else:
        raise ConfigError(f"unknown dataset kind {dataset['kind']!r}")

    _validate(cfg)
    return cfg


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def _validate(cfg: dict) -> None:
    _require(isinstance(cfg["seed"], int) and cfg["seed"] >= 0, "seed must be a nonnegative integer")
    ds = cfg["dataset"]
    if ds["kind"] == "synthetic":
        for key in ("tasks", "classes_per_task", "n_train", "n_test", "input_dim"):
            _require(isinstance(ds[key], int) and ds[key] >= 1, f"dataset.{key} must be a positive integer")
        _require(ds["class_sep"] >= 0, "dataset.class_sep must be nonnegative")
        _require(ds["n_train"] >= 2, "dataset.n_train must be >= 2 for class statistics")
    mdl = cfg["model"]
    _require(isinstance(mdl["blocks"], int) and mdl["blocks"] >= 1, "model.blocks must be a positive integer")
    tr = cfg["train"]
    for key in ("lr", "lr_hist_ratio", "ortho_weight"):
        _require(tr[key] >= 0, f"train.{key} must be nonnegative")
    for key in ("epochs", "batch_size", "rank"):
        _require(isinstance(tr[key], int) and tr[key] >= 1, f"train.{key} must be a positive integer")
    _require(tr["omega_current_rate"] in ("main", "hist"), "train.omega_current_rate must be 'main' or 'hist'")
    v = cfg["variant"]
    for key in ("composition", "ortho", "ipc", "tii"):
        _require(isinstance(v[key], bool), f"variant.{key} must be a boolean")
    # Mechanisms build on each other; reject incoherent combinations.
    _require(not (v["ortho"] and not v["composition"]), "variant.ortho requires variant.composition")
    _require(not (v["ipc"] and not v["ortho"]), "variant.ipc requires variant.ortho")
    _require(cfg["tap"]["samples_per_class"] >= 1, "tap.samples_per_class must be positive")
    _require(cfg["tap"]["epochs"] >= 0, "tap.epochs must be nonnegative")
    _require(cfg["tii"]["mode"] in ("per_sample", "batch"), "tii.mode must be 'per_sample' or 'batch'")
    _require(cfg["tii"]["shrinkage"] >= 0, "tii.shrinkage must be nonnegative")
    _require(cfg["tii"]["shrinkage_mode"] in ("relative", "absolute"), "tii.shrinkage_mode")
    IpcConfig(
        beta1=cfg["ipc"]["beta1"],
        beta2=cfg["ipc"]["beta2"],
        top_p=cfg["ipc"]["top_p"],
        count_base=cfg["ipc"]["count_base"],
    ).validate()


def _load_dataset(cfg: dict, rng: RngStream) -> Dataset:
    ds = cfg["dataset"]
    if ds["kind"] == "synthetic":
        return gen_synthetic_tasks(
            rng,
            n_tasks=ds["tasks"],
            classes_per_task=ds["classes_per_task"],
            n_train=ds["n_train"],
            n_test=ds["n_test"],
            input_dim=ds["input_dim"],
            class_sep=ds["class_sep"],
        )
    loader = load_features_csv if ds["format"] == "csv" else load_features_bin
    return loader(ds["train"], ds.get("test"))


def _settings_from(cfg: dict) -> TrainSettings:
    tr, tap, tii, v = cfg["train"], cfg["tap"], cfg["tii"], cfg["variant"]
    return TrainSettings(
        lr=tr["lr"],
        lr_hist_ratio=tr["lr_hist_ratio"],
        ortho_weight=tr["ortho_weight"],
        epochs=tr["epochs"],
        batch_size=tr["batch_size"],
        rank=tr["rank"],
        omega_current_rate=tr["omega_current_rate"],
        tap_samples=tap["samples_per_class"],
        tap_epochs=tap["epochs"],
        tii_mode=tii["mode"],
        shrinkage=tii["shrinkage"],
        shrinkage_mode=tii["shrinkage_mode"],
        composition=v["composition"],
        ortho=v["ortho"],
        ipc=v["ipc"],
        tii=v["tii"],
    )


@dataclass
class RunArtifacts:
    """Everything a run leaves behind, before serialization."""

    results: dict
    importance: list[tuple[int, str, float]]
    gram: list[tuple[str, int, int, float]]
    deltas: list[tuple[int, str, float, float]]
    omega: list[tuple[int, str, int, float]]
    state: RunState
    dataset: Dataset


def build_state(cfg: dict) -> tuple[RunState, Dataset]:
    """Construct the dataset, (optionally pretrained) backbone and run state."""
    cfg = resolve_config(cfg)
    root = RngStream(cfg["seed"])
    dataset = _load_dataset(cfg, root.spawn(protocol.S_DATA))
    mdl = cfg["model"]
    backbone = make_backbone(
        dataset.input_dim, mdl["blocks"], mdl["activation"], root.spawn(protocol.S_BACKBONE)
    )
    if mdl["pretrain"] is not None:
        pre = mdl["pretrain"]
        pretext = gen_synthetic_tasks(
            root.spawn(protocol.S_PRETEXT_DATA),
            n_tasks=1,
            classes_per_task=pre["classes"],
            n_train=pre["n_per_class"],
            n_test=1,
            input_dim=dataset.input_dim,
            class_sep=pre["class_sep"],
        ).tasks[0]
        pretrain_backbone(
            backbone,
            pretext.train_x,
            pretext.train_y,
            n_classes=pre["classes"],
            epochs=pre["epochs"],
            batch_size=cfg["train"]["batch_size"],
            lr=pre["lr"],
            rng=root.spawn(protocol.S_PRETEXT_TRAIN),
        )
    ipc_cfg = IpcConfig(
        beta1=cfg["ipc"]["beta1"],
        beta2=cfg["ipc"]["beta2"],
        top_p=cfg["ipc"]["top_p"],
        count_base=cfg["ipc"]["count_base"],
    )
    state = init_run_state(backbone, _settings_from(cfg), ipc_cfg, root)
    return state, dataset


def run_experiment(cfg: dict) -> RunArtifacts:
    """Execute the full task stream described by ``cfg``.

    Evaluates after every task (heads as trained), then adjusts the
    classifier on pseudo features and re-evaluates the final row, so the
    matrix's last row reflects the deployed model while earlier rows track
    raw extractor drift.
    """
    resolved = resolve_config(cfg)
    state, dataset = build_state(resolved)
    matrix: AccuracyMatrix | None = None
    for split in dataset.tasks:
        protocol.train_task(state, split)
        matrix = protocol.evaluate_matrix(state, dataset, matrix)
    final_row_no_tap = list(matrix.rows[-1])
    protocol.adjust_classifier(state)
    matrix.rows[-1] = [
        protocol.evaluate_split(state, split) for split in dataset.tasks
    ]

    n_tasks = len(dataset.tasks)
    results: dict = {
        "version": RESULTS_VERSION,
        "config": resolved,
        "accuracy_matrix": matrix.flat(),
        "avg_acc": avg_accuracy(matrix),
        "final_row_no_tap": final_row_no_tap,
        "per_task_timings": [
            {
                "task": t,
                "train_steps": state.steps_by_task[t],
                "train_samples": state.samples_by_task[t],
            }
            for t in state.completed
        ],
        "freeze_history": [
            {"task": fs.task_id, "locations": list(fs.locations), "scores": list(fs.scores)}
            for fs in state.freeze_history
        ],
    }
    if n_tasks >= 2:
        _, forgetting = compute_metrics(matrix)
        results["forgetting"] = forgetting

    locations = sorted(state.stacks, key=location_key)
    importance = [
        (t, loc, state.importance_history[t][loc])
        for t in state.completed
        for loc in locations
    ]
    gram = []
    for loc in locations:
        basis = state.bases[loc].matrix
        if basis is None:
            continue
        g = basis.T @ basis
        for i in range(g.shape[0]):
            for j in range(g.shape[1]):
                gram.append((loc, i, j, float(g[i, j])))
    deltas = []
    for t in range(1, n_tasks):
        wt = state.weights_by_task[t]
        wnext = state.weights_by_task[t + 1]
        wfinal = state.weights_by_task[n_tasks]
        for loc in locations:
            deltas.append(
                (
                    t,
                    loc,
                    float(np.linalg.norm(wnext[loc] - wt[loc])),
                    float(np.linalg.norm(wfinal[loc] - wt[loc])),
                )
            )
    omega = [
        (t, loc, tau + 1, float(val))
        for t in state.completed
        for loc in locations
        for tau, val in enumerate(state.snapshots[t].omega[loc])
    ]
    return RunArtifacts(
        results=results,
        importance=importance,
        gram=gram,
        deltas=deltas,
        omega=omega,
        state=state,
        dataset=dataset,
    )


def _write_csv(path: str, header: list[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def emit_reports(artifacts: RunArtifacts, out_dir: str) -> dict[str, str]:
    """Write results.json and the four CSV diagnostics; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    paths["results"] = os.path.join(out_dir, "results.json")
    with open(paths["results"], "w", encoding="utf-8", newline="") as fh:
        json.dump(artifacts.results, fh, indent=2, sort_keys=True)
        fh.write("\n")
    paths["importance"] = os.path.join(out_dir, "importance.csv")
    _write_csv(paths["importance"], ["task", "location", "score"], artifacts.importance)
    paths["gram"] = os.path.join(out_dir, "gram.csv")
    _write_csv(paths["gram"], ["location", "row", "col", "value"], artifacts.gram)
    paths["deltas"] = os.path.join(out_dir, "deltas.csv")
    _write_csv(paths["deltas"], ["task", "location", "delta_next", "delta_final"], artifacts.deltas)
    paths["omega"] = os.path.join(out_dir, "omega.csv")
    _write_csv(paths["omega"], ["task", "location", "tau", "omega"], artifacts.omega)
    return paths


def _read_csv(path: str, header: list[str], caster):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        got = next(reader, None)
        if got != header:
            raise UsageError(f"{path}: expected header {header}, got {got}")
        return [caster(row) for row in reader]


def read_results(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def read_importance_csv(path: str):
    return _read_csv(path, ["task", "location", "score"], lambda r: (int(r[0]), r[1], float(r[2])))


def read_gram_csv(path: str):
    return _read_csv(
        path, ["location", "row", "col", "value"], lambda r: (r[0], int(r[1]), int(r[2]), float(r[3]))
    )


def read_deltas_csv(path: str):
    return _read_csv(
        path,
        ["task", "location", "delta_next", "delta_final"],
        lambda r: (int(r[0]), r[1], float(r[2]), float(r[3])),
    )


def read_omega_csv(path: str):
    return _read_csv(
        path, ["task", "location", "tau", "omega"], lambda r: (int(r[0]), r[1], int(r[2]), float(r[3]))
    )


def recompute_metrics(results: dict) -> dict:
    """Metrics recomputed from a results document's accuracy matrix."""
    matrix = AccuracyMatrix.from_flat(results["accuracy_matrix"])
    out = {"avg_acc": avg_accuracy(matrix), "tasks": matrix.n_tasks}
    if matrix.n_tasks >= 2:
        out["forgetting"] = compute_metrics(matrix)[1]
    return out


def ablate(base_cfg: dict, variants: list[str], seeds: list[int], out_dir: str, jobs: int = 1) -> dict:
    """Run the cumulative variant chain over the given seeds.

    Emits one artifact directory per (variant, seed) plus ``summary.json``
    and ``summary.csv`` with per-run and per-variant-mean metrics.
    """
    for name in variants:
        if name not in VARIANT_FLAGS:
            raise ConfigError(f"unknown variant {name!r}; choose from {VARIANT_ORDER}")
    variants = sorted(set(variants), key=VARIANT_ORDER.index)
    resolved = resolve_config(base_cfg)
    jobs_list = []
    for name in variants:
        for seed in seeds:
            cfg = copy.deepcopy(resolved)
            cfg["variant"] = dict(VARIANT_FLAGS[name])
            cfg["seed"] = int(seed)
            cfg["_variant_name"] = name  # internal tag, stripped before resolve
            run_dir = os.path.join(out_dir, name, f"seed_{seed}")
            jobs_list.append((cfg, run_dir))

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_ablate_worker, jobs_list))
    else:
        results = [_ablate_worker(job) for job in jobs_list]

    per_variant: dict[str, dict] = {}
    for name, seed, avg, forget in results:
        per_variant.setdefault(name, {"runs": []})["runs"].append(
            {"seed": seed, "avg_acc": avg, "forgetting": forget}
        )
    for name, entry in per_variant.items():
        entry["mean_avg_acc"] = float(np.mean([r["avg_acc"] for r in entry["runs"]]))
        forgets = [r["forgetting"] for r in entry["runs"] if r["forgetting"] is not None]
        entry["mean_forgetting"] = float(np.mean(forgets)) if forgets else None

    summary = {"variants": [v for v in variants], "seeds": [int(s) for s in seeds], "results": per_variant}
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8", newline="") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    rows = [
        (name, r["seed"], float(r["avg_acc"]), math.nan if r["forgetting"] is None else float(r["forgetting"]))
        for name in variants
        for r in per_variant[name]["runs"]
    ]
    _write_csv(
        os.path.join(out_dir, "summary.csv"),
        ["variant", "seed", "avg_acc", "forgetting"],
        rows,
    )
    return summary


def _ablate_worker(job: tuple[dict, str]) -> tuple[str, int, float, float | None]:
    cfg, run_dir = job
    cfg = dict(cfg)
    name = cfg.pop("_variant_name")
    artifacts = run_experiment(cfg)
    emit_reports(artifacts, run_dir)
    return (name, cfg["seed"], artifacts.results["avg_acc"], artifacts.results.get("forgetting"))
