"""Batch front end: TOML experiment configs in, immutable JSON records out.

An experiment directory holds a manifest (the parsed config and its hash),
one subdirectory per axis point with numbered record files, and whatever
artifacts the run produced (traces, checkpoints, heatmaps). Records are
write-once; reruns with --resume skip the ones that already exist, and a
directory never accepts a config with a different hash.
"""

from __future__ import annotations

import csv
import json
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import click
import numpy as np

try:
    import tomllib as tomli  # 3.11+
except ModuleNotFoundError:
    import tomli

from . import rng as _rng
from .datasets import (
    BasSpec,
    BinaryDataset,
    bars_vs_stripes_task,
    coarse_grain_binarize,
    generate_bas,
    load_mnist_idx,
    prepare_supervised,
    read_vectors,
    write_vectors,
)
from .errors import ConfigError, NqacbmError
from .metrics import classification_accuracy
from .nqac import chimera
from .samplers import (
    DEFAULT_SWEEP_GRID,
    AnnealSchedule,
    QuenchSpec,
    select_sweeps_matching_beta,
)
from .trainer import (
    PENALTY_GRID,
    ExactGibbsBackend,
    NqacPipeline,
    PipelineConfig,
    SqaBackend,
    SvmcBackend,
    TrainConfig,
    config_hash,
    grid_search_penalties,
    load_checkpoint,
    predict_label,
    sample_metrics,
    save_checkpoint,
    train,
    write_trace,
)

KINDS = (
    "train",
    "grid-search",
    "alpha-scan",
    "sweep-scan",
    "quench-scan",
    "sweep-match",
    "predict",
)

_TOP_KEYS = {"kind", "seed", "output"}
_SECTIONS = {
    "dataset": {"source", "d", "s", "seed", "path", "images", "labels", "limit"},
    "train": {"eta", "epochs", "batch_size", "samples_per_update", "full_batch"},
    "pipeline": {"alpha", "c", "gamma1", "gamma2", "noise_sigma", "chimera"},
    "backend": {"kind", "beta", "bath_temp", "sweeps", "n_slices", "schedule", "units", "quench"},
    "scan": {
        "checkpoint",
        "s_ints",
        "realizations",
        "n_reads",
        "quench_sweeps",
        "alphas",
        "cs",
        "sweep_counts",
        "target_beta",
    },
    "grid": {"values", "probe_epochs"},
    "predict": {"checkpoint", "images", "n_labels", "k"},
}

METRIC_KEYS = (
    "emp_ll",
    "beta_eff",
    "beta_hat",
    "tvd_gibbs",
    "d_data",
    "chain_break_rate",
)


# -- config plumbing ----------------------------------------------------------------


def load_config(path) -> dict:
    try:
        with open(path, "rb") as fh:
            raw = tomli.load(fh)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    for key in raw:
        if key not in _TOP_KEYS and key not in _SECTIONS:
            raise ConfigError(f"unknown config key {key!r}")
    if "kind" not in raw:
        raise ConfigError("missing required key 'kind'")
    if raw["kind"] not in KINDS:
        raise ConfigError(f"unknown kind {raw['kind']!r}; expected one of {KINDS}")
    for name, allowed in _SECTIONS.items():
        _section(raw, name, allowed)
    quench_sec = raw.get("backend", {}).get("quench", {})
    if not isinstance(quench_sec, dict):
        raise ConfigError("[backend.quench] must be a table")
    for key in quench_sec:
        if key not in ("s_int", "quench_sweeps"):
            raise ConfigError(f"unknown key 'backend.quench.{key}'")
    return raw


def _section(raw: dict, name: str, allowed: set) -> dict:
    sec = raw.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"[{name}] must be a table")
    for key in sec:
        if key not in allowed:
            raise ConfigError(f"unknown key '{name}.{key}'")
    return sec


def _require(sec: dict, name: str, key: str):
    if key not in sec:
        raise ConfigError(f"missing required key '{name}.{key}'")
    return sec[key]


def build_dataset(raw: dict) -> BinaryDataset:
    sec = _section(raw, "dataset", _SECTIONS["dataset"])
    source = _require(sec, "dataset", "source")
    if source == "bas":
        return generate_bas(
            BasSpec(
                D=int(_require(sec, "dataset", "d")),
                S=int(_require(sec, "dataset", "s")),
                seed=int(sec.get("seed", 0)),
            )
        )
    if source == "bas-task":
        return bars_vs_stripes_task(int(sec.get("d", 4)))
    if source == "vectors":
        return read_vectors(_require(sec, "dataset", "path"))
    if source == "mnist":
        images, labels = load_mnist_idx(
            _require(sec, "dataset", "images"), _require(sec, "dataset", "labels")
        )
        ds = prepare_supervised(coarse_grain_binarize(images), labels)
        limit = sec.get("limit")
        if limit is not None:
            ds = ds.subset(np.arange(min(int(limit), len(ds))))
        return ds
    raise ConfigError(f"unknown dataset source {source!r}")


def _build_schedule(sec: dict) -> AnnealSchedule:
    path = sec.get("schedule")
    if path is not None:
        return AnnealSchedule.from_csv(path)
    units = sec.get("units", "dimensionless")
    if units == "dimensionless":
        return AnnealSchedule.default()
    return AnnealSchedule(table=((0.0, 1.0, 0.0), (1.0, 0.0, 1.0)), units=units)


def build_backend(raw: dict):
    sec = _section(raw, "backend", _SECTIONS["backend"])
    kind = sec.get("kind", "exact")
    if kind == "exact":
        return ExactGibbsBackend(beta=float(sec.get("beta", 1.0)))
    if kind not in ("svmc", "sqa"):
        raise ConfigError(f"unknown backend kind {kind!r}")
    quench_sec = sec.get("quench", {})
    if not isinstance(quench_sec, dict):
        raise ConfigError("[backend.quench] must be a table")
    for key in quench_sec:
        if key not in ("s_int", "quench_sweeps"):
            raise ConfigError(f"unknown key 'backend.quench.{key}'")
    quench = QuenchSpec(
        s_int=float(quench_sec.get("s_int", 1.0)),
        quench_sweeps=int(quench_sec.get("quench_sweeps", 0)),
    )
    common = dict(
        bath_temp=float(_require(sec, "backend", "bath_temp")),
        sweeps=int(_require(sec, "backend", "sweeps")),
        schedule=_build_schedule(sec),
        quench=quench,
    )
    if kind == "svmc":
        return SvmcBackend(**common)
    return SqaBackend(n_slices=int(sec.get("n_slices", 32)), **common)


def build_pipeline_config(raw: dict) -> PipelineConfig:
    sec = _section(raw, "pipeline", _SECTIONS["pipeline"])
    return PipelineConfig(
        alpha=float(sec.get("alpha", 1.0)),
        c=int(sec.get("c", 1)),
        gamma1=float(sec.get("gamma1", 1.0)),
        gamma2=float(sec.get("gamma2", 1.0)),
        noise_sigma=float(sec.get("noise_sigma", 0.0)),
    )


def build_hardware(raw: dict):
    """Optional [pipeline] chimera = [m, k]; None keeps the pipeline default."""
    sec = _section(raw, "pipeline", _SECTIONS["pipeline"])
    dims = sec.get("chimera")
    if dims is None:
        return None
    if not isinstance(dims, (list, tuple)) or len(dims) != 2:
        raise ConfigError("'pipeline.chimera' must be [m, k]")
    return chimera(int(dims[0]), int(dims[0]), int(dims[1]))


def build_train_config(raw: dict, seed: int) -> TrainConfig:
    sec = _section(raw, "train", _SECTIONS["train"])
    return TrainConfig(
        eta=float(sec.get("eta", 0.01)),
        epochs=int(sec.get("epochs", 10)),
        batch_size=int(sec.get("batch_size", 50)),
        samples_per_update=int(sec.get("samples_per_update", 10_000)),
        seed=seed,
        pipeline=build_pipeline_config(raw),
    )


def _backend_from_payload(desc: dict):
    """Rebuild a sampler backend from the dict a checkpoint stored."""
    try:
        kind = desc["kind"]
        if kind == "exact":
            return ExactGibbsBackend(beta=desc["beta"])
        schedule = AnnealSchedule(
            table=tuple(tuple(row) for row in desc["schedule"]),
            units=desc["units"],
        )
        quench = QuenchSpec(s_int=desc["quench"][0], quench_sweeps=int(desc["quench"][1]))
        if kind == "svmc":
            return SvmcBackend(
                bath_temp=desc["bath_temp"],
                sweeps=desc["sweeps"],
                schedule=schedule,
                quench=quench,
            )
        if kind == "sqa":
            return SqaBackend(
                bath_temp=desc["bath_temp"],
                sweeps=desc["sweeps"],
                n_slices=desc["n_slices"],
                schedule=schedule,
                quench=quench,
            )
    except (KeyError, TypeError, IndexError) as exc:
        raise ConfigError(f"malformed backend description: {exc}") from exc
    raise ConfigError(f"unknown backend kind {kind!r} in checkpoint")


# -- record plumbing ----------------------------------------------------------------


def _write_json(path: Path, payload: dict) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(payload, fh, indent=1)
    os.replace(tmp, path)


def _read_json(path: Path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _fmt(v) -> str:
    if isinstance(v, float):
        return format(v, "g")
    return str(v)


@dataclass
class _Task:
    label: str
    axis: dict
    realization: int
    seed: int
    body: Callable


def _hash_config(raw: dict) -> str:
    payload = {k: v for k, v in raw.items() if k != "output"}
    try:
        return config_hash(payload)
    except TypeError as exc:
        raise ConfigError(f"config is not JSON-serializable: {exc}") from exc


def _final_row(trace: list) -> dict:
    if not trace:
        return {}
    last = trace[-1]
    return {k: float(last[k]) for k in METRIC_KEYS}


def _scan_values(sec, name, key, default=None):
    vals = sec.get(key, default)
    if vals is None:
        raise ConfigError(f"missing required key '{name}.{key}'")
    if not isinstance(vals, (list, tuple)) or not vals:
        raise ConfigError(f"'{name}.{key}' must be a non-empty array")
    return list(vals)


# -- experiment kinds ---------------------------------------------------------------


def _grid_settings(raw: dict):
    sec = _section(raw, "grid", {"values", "probe_epochs"})
    values = tuple(float(v) for v in sec.get("values", PENALTY_GRID))
    probe = int(sec.get("probe_epochs", 5))
    if probe < 1:
        raise ConfigError("'grid.probe_epochs' must be >= 1")
    if not values:
        raise ConfigError("'grid.values' must be non-empty")
    return values, probe


def _run_grid(raw: dict, pdir: Path, seed: int, pipeline_cfg: PipelineConfig) -> dict:
    """One penalty-grid search; emits heatmap.csv and best.json at the point."""
    values, probe = _grid_settings(raw)
    config = replace(build_train_config(raw, seed), pipeline=pipeline_cfg)
    backend = build_backend(raw)
    dataset = build_dataset(raw)

    rows: dict[tuple, dict] = {}

    def scorer(st, pipe):
        key = (pipe.config.gamma1, pipe.config.gamma2)
        rows[key] = _final_row(st.trace)
        return rows[key]["emp_ll"]

    result = grid_search_penalties(
        config,
        dataset,
        backend,
        grid=values,
        probe_epochs=probe,
        scorer=scorer,
        hardware=build_hardware(raw),
    )
    tmp = pdir / "heatmap.csv.tmp"
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["gamma1", "gamma2", "score"])
        for g1, g2, score in result.heatmap:
            w.writerow([repr(float(g1)), repr(float(g2)), repr(float(score))])
    os.replace(tmp, pdir / "heatmap.csv")
    _write_json(
        pdir / "best.json",
        {"gamma1": result.gamma1, "gamma2": result.gamma2, "score": result.best_score},
    )
    metrics = {
        "best_gamma1": result.gamma1,
        "best_gamma2": result.gamma2,
        "score": result.best_score,
    }
    metrics.update(rows[(result.gamma1, result.gamma2)])
    return metrics


def _plan_train(raw: dict, master: int) -> list[_Task]:
    def body(pdir: Path, seed: int) -> dict:
        config = build_train_config(raw, seed)
        backend = build_backend(raw)
        dataset = build_dataset(raw)
        full = bool(raw.get("train", {}).get("full_batch", False))
        pipe = NqacPipeline(config.pipeline, backend, build_hardware(raw))
        state = train(config, dataset, backend, full_batch=full, pipeline=pipe)
        write_trace(state.trace, pdir / "trace.csv")
        save_checkpoint(state, config, backend, pdir / "checkpoint.json")
        return _final_row(state.trace)

    return [_Task(label="model", axis={}, realization=0, seed=master, body=body)]


def _plan_grid_search(raw: dict, master: int) -> list[_Task]:
    def body(pdir: Path, seed: int) -> dict:
        return _run_grid(raw, pdir, seed, build_pipeline_config(raw))

    return [_Task(label="grid", axis={}, realization=0, seed=master, body=body)]


def _plan_alpha_scan(raw: dict, master: int) -> list[_Task]:
    sec = _section(raw, "scan", {"alphas", "cs", "realizations"})
    alphas = [float(a) for a in _scan_values(sec, "scan", "alphas")]
    base = build_pipeline_config(raw)
    cs = [int(c) for c in sec.get("cs", [base.c])]
    reals = int(sec.get("realizations", 1))
    tasks = []
    for idx, (alpha, c) in enumerate([(a, c) for a in alphas for c in cs]):
        pipe_cfg = replace(base, alpha=alpha, c=c)
        for r in range(reals):
            seed = _rng.hash_words(master, "alpha-scan", idx, r)

            def body(pdir, s, _cfg=pipe_cfg):
                return _run_grid(raw, pdir, s, _cfg)

            tasks.append(
                _Task(
                    label=f"alpha_{_fmt(alpha)}_c_{c}",
                    axis={"alpha": alpha, "c": c},
                    realization=r,
                    seed=seed,
                    body=body,
                )
            )
    return tasks


def _plan_sweep_scan(raw: dict, master: int) -> list[_Task]:
    sec = _section(raw, "scan", {"sweep_counts", "realizations"})
    counts = [int(n) for n in _scan_values(sec, "scan", "sweep_counts")]
    reals = int(sec.get("realizations", 1))
    if build_backend(raw).describe()["kind"] == "exact":
        raise ConfigError("sweep-scan needs a sampled backend (svmc or sqa)")
    tasks = []
    for idx, sweeps in enumerate(counts):
        for r in range(reals):
            seed = _rng.hash_words(master, "sweep-scan", idx, r)

            def body(pdir, s, _sweeps=sweeps, _r=r):
                config = build_train_config(raw, s)
                backend = replace(build_backend(raw), sweeps=_sweeps)
                dataset = build_dataset(raw)
                full = bool(raw.get("train", {}).get("full_batch", False))
                pipe = NqacPipeline(config.pipeline, backend, build_hardware(raw))
                state = train(config, dataset, backend, full_batch=full, pipeline=pipe)
                write_trace(state.trace, pdir / f"trace_{_r:03d}.csv")
                return _final_row(state.trace)

            tasks.append(
                _Task(
                    label=f"sweeps_{sweeps}",
                    axis={"sweeps": sweeps},
                    realization=r,
                    seed=seed,
                    body=body,
                )
            )
    return tasks


def _plan_quench_scan(raw: dict, master: int) -> list[_Task]:
    sec = _section(
        raw, "scan", {"checkpoint", "s_ints", "realizations", "n_reads", "quench_sweeps"}
    )
    ckpt = _require(sec, "scan", "checkpoint")
    s_ints = [float(v) for v in sec.get("s_ints", [round(0.1 * k, 1) for k in range(1, 10)])]
    reals = int(sec.get("realizations", 1))
    n_reads = int(sec.get("n_reads", 10_000))
    base_backend = build_backend(raw)
    if base_backend.describe()["kind"] == "exact":
        raise ConfigError("quench-scan needs a sampled backend (svmc or sqa)")
    quench_sweeps = int(sec.get("quench_sweeps", base_backend.quench.quench_sweeps))
    data = build_dataset(raw).vectors if "dataset" in raw else None
    tasks = []
    for idx, s_int in enumerate(s_ints):
        for r in range(reals):
            seed = _rng.hash_words(master, "quench-scan", idx, r)

            def body(pdir, s, _s_int=s_int):
                model, _ = load_checkpoint(ckpt)
                backend = replace(
                    build_backend(raw),
                    quench=QuenchSpec(s_int=_s_int, quench_sweeps=quench_sweeps),
                )
                pipe = NqacPipeline(build_pipeline_config(raw), backend, build_hardware(raw))
                ps = pipe.sample(model, n_reads, s)
                return sample_metrics(ps, model, data)

            tasks.append(
                _Task(
                    label=f"s_int_{_fmt(s_int)}",
                    axis={"s_int": s_int},
                    realization=r,
                    seed=seed,
                    body=body,
                )
            )
    return tasks


def _plan_sweep_match(raw: dict, master: int) -> list[_Task]:
    sec = _section(
        raw, "scan", {"checkpoint", "target_beta", "sweep_counts", "n_reads"}
    )
    ckpt = _require(sec, "scan", "checkpoint")
    target = float(_require(sec, "scan", "target_beta"))
    grid = [int(n) for n in sec.get("sweep_counts", DEFAULT_SWEEP_GRID)]
    n_reads = int(sec.get("n_reads", 10_000))
    if build_backend(raw).describe()["kind"] == "exact":
        raise ConfigError("sweep-match needs a sampled backend (svmc or sqa)")

    def body(pdir: Path, seed: int) -> dict:
        model, _ = load_checkpoint(ckpt)
        pipe_cfg = build_pipeline_config(raw)

        def sample_at(sweeps: int):
            backend = replace(build_backend(raw), sweeps=sweeps)
            pipe = NqacPipeline(pipe_cfg, backend, build_hardware(raw))
            ps = pipe.sample(model, n_reads, _rng.hash_words(seed, "match", sweeps))
            return ps.decoded

        sel = select_sweeps_matching_beta(sample_at, model, target, sweep_grid=grid)
        tmp = pdir / "match_trace.csv.tmp"
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sweeps", "beta_eff"])
            for sweeps, beta in sel.trace:
                w.writerow([sweeps, repr(float(beta))])
        os.replace(tmp, pdir / "match_trace.csv")
        return {
            "sweeps": float(sel.sweeps),
            "beta_eff": sel.beta_eff,
            "target_beta": sel.target_beta,
        }

    return [_Task(label="match", axis={}, realization=0, seed=master, body=body)]


def _plan_predict(raw: dict, master: int) -> list[_Task]:
    sec = _section(raw, "predict", {"checkpoint", "images", "n_labels", "k"})
    ckpt = _require(sec, "predict", "checkpoint")
    images = _require(sec, "predict", "images")
    n_labels = int(_require(sec, "predict", "n_labels"))
    k = int(sec.get("k", 100))

    def body(pdir: Path, seed: int) -> dict:
        model, payload = load_checkpoint(ckpt)
        backend = _backend_from_payload(payload.get("backend", {}))
        try:
            pipe_cfg = PipelineConfig(**payload["config"]["pipeline"])
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed checkpoint {ckpt}: {exc}") from exc
        pipe = NqacPipeline(pipe_cfg, backend)
        ds = read_vectors(images)
        labels = _predict_all(model, pipe, ds, n_labels, k, seed)
        tmp = pdir / "predictions.csv.tmp"
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "label"])
            for i, lab in enumerate(labels):
                w.writerow([i, lab])
        os.replace(tmp, pdir / "predictions.csv")
        if ds.labels is not None:
            return {"accuracy": classification_accuracy(labels, ds.labels)}
        return {}

    return [_Task(label="predict", axis={}, realization=0, seed=master, body=body)]


def _predict_all(model, pipe, ds: BinaryDataset, n_labels: int, k: int, seed: int):
    n_pixels = model.n - n_labels
    if ds.vectors.shape[1] not in (n_pixels, model.n):
        raise ConfigError(
            f"image width {ds.vectors.shape[1]} fits neither {n_pixels} pixels "
            f"nor full vectors of {model.n}"
        )
    out = []
    for i, vec in enumerate(ds.vectors):
        pixels = vec[:n_pixels]
        out.append(
            predict_label(
                model, pipe, pixels, n_labels, k=k, seed=_rng.hash_words(seed, "predict", i)
            )
        )
    return np.array(out)


_PLANNERS = {
    "train": _plan_train,
    "grid-search": _plan_grid_search,
    "alpha-scan": _plan_alpha_scan,
    "sweep-scan": _plan_sweep_scan,
    "quench-scan": _plan_quench_scan,
    "sweep-match": _plan_sweep_match,
    "predict": _plan_predict,
}


# -- the runner ---------------------------------------------------------------------


def run_experiment(
    raw: dict, outdir: Path, workers: int = 1, resume: bool = False
) -> dict:
    """Execute every (point, realization) task of the configured experiment.

    Returns counters {"done": n, "skipped": n}. The output directory is
    bound to the config hash on first use; later runs must match it.
    """
    kind = raw["kind"]
    master = int(raw.get("seed", 0))
    chash = _hash_config(raw)
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    manifest_path = outdir / "manifest.json"
    if manifest_path.exists():
        manifest = _read_json(manifest_path)
        if manifest.get("config_hash") != chash:
            raise ConfigError(
                f"{outdir} belongs to config {manifest.get('config_hash')}, "
                f"not {chash}; use a fresh directory"
            )
    else:
        _write_json(
            manifest_path, {"kind": kind, "config_hash": chash, "config": raw}
        )

    tasks = _PLANNERS[kind](raw, master)
    pending = []
    skipped = 0
    for t in tasks:
        rpath = outdir / "points" / t.label / f"record_{t.realization:03d}.json"
        if rpath.exists():
            if not resume:
                raise ConfigError(
                    f"{rpath} already exists; pass --resume to skip completed records"
                )
            skipped += 1
        else:
            pending.append(t)

    def run_one(t: _Task) -> None:
        pdir = outdir / "points" / t.label
        pdir.mkdir(parents=True, exist_ok=True)
        t0 = time.monotonic()
        metrics = t.body(pdir, t.seed)
        record = {
            "config_hash": chash,
            "kind": kind,
            "axis": t.axis,
            "realization": t.realization,
            "seed": t.seed,
            "metrics": {k: float(v) for k, v in metrics.items()},
            "wall_time": time.monotonic() - t0,
        }
        _write_json(pdir / f"record_{t.realization:03d}.json", record)

    if workers > 1 and len(pending) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run_one, t) for t in pending]
            for f in futures:
                f.result()
    else:
        for t in pending:
            run_one(t)
    return {"done": len(pending), "skipped": skipped}


# -- aggregation --------------------------------------------------------------------


def _axis_sort_key(key: tuple):
    return tuple((v is None, isinstance(v, str), v) for v in key)


def summarize(outdir: Path) -> Path:
    """Aggregate records into summary.csv / summary.json: mean and 2 sigma.

    Byte-identical across reruns of identical records: floats via repr,
    wall times excluded, rows sorted by axis.
    """
    outdir = Path(outdir)
    manifest_path = outdir / "manifest.json"
    if not manifest_path.exists():
        raise ConfigError(f"{outdir} has no manifest.json")
    manifest = _read_json(manifest_path)
    records = [_read_json(p) for p in sorted((outdir / "points").glob("*/record_*.json"))]
    if not records:
        raise ConfigError(f"{outdir} has no records to summarize")
    hashes = {r.get("config_hash") for r in records} | {manifest.get("config_hash")}
    if len(hashes) != 1:
        raise ConfigError(f"mixed config hashes in {outdir}: {sorted(map(str, hashes))}")

    axis_keys = sorted({k for r in records for k in r["axis"]})
    metric_keys = sorted({k for r in records for k in r["metrics"]})
    groups: dict[tuple, list] = {}
    for r in records:
        groups.setdefault(tuple(r["axis"].get(k) for k in axis_keys), []).append(r)

    rows = []
    for key in sorted(groups, key=_axis_sort_key):
        group = groups[key]
        row: dict = dict(zip(axis_keys, key))
        row["n"] = len(group)
        for mk in metric_keys:
            vals = np.array(
                [float(r["metrics"].get(mk, math.nan)) for r in group], dtype=np.float64
            )
            row[f"{mk}_mean"] = float(np.mean(vals))
            row[f"{mk}_2sigma"] = (
                2.0 * float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
            )
        rows.append(row)

    header = axis_keys + ["n"]
    for mk in metric_keys:
        header += [f"{mk}_mean", f"{mk}_2sigma"]
    csv_path = outdir / "summary.csv"
    tmp = outdir / "summary.csv.tmp"
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(row[c]) for c in header])
    os.replace(tmp, csv_path)
    _write_json(
        outdir / "summary.json",
        {"kind": manifest.get("kind"), "config_hash": manifest.get("config_hash"), "rows": rows},
    )
    return csv_path


def _cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


# -- click wiring -------------------------------------------------------------------


def _guarded(fn: Callable) -> Callable:
    def wrapped(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(2)
        except (NqacbmError, OSError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(3)

    wrapped.__name__ = fn.__name__
    wrapped.__doc__ = fn.__doc__
    return wrapped


@click.group()
def main():
    """Boltzmann-machine training through a nested encode/sample/decode loop."""


@main.command("run")
@click.argument("config_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--workers", type=int, default=1, show_default=True)
@click.option("--resume", is_flag=True, help="skip records that already exist")
@click.option("--out", "out_override", type=click.Path(file_okay=False), default=None)
@_guarded
def run_cmd(config_file, workers, resume, out_override):
    """Run the experiment described by CONFIG_FILE into its output directory."""
    raw = load_config(config_file)
    out = out_override or raw.get("output")
    if not out:
        raise ConfigError("no output directory: set 'output' or pass --out")
    counts = run_experiment(raw, Path(out), workers=workers, resume=resume)
    click.echo(f"{raw['kind']}: {counts['done']} records written, {counts['skipped']} skipped -> {out}")


@main.command("report")
@click.argument("directory", type=click.Path(exists=True, file_okay=False))
@_guarded
def report_cmd(directory):
    """Aggregate an experiment directory into summary.csv (mean and 2 sigma)."""
    path = summarize(Path(directory))
    click.echo(str(path))


@main.group("dataset")
def dataset_group():
    """Generate or convert datasets to the one-vector-per-line text format."""


@dataset_group.command("bas")
@click.option("--d", type=int, default=4, show_default=True)
@click.option("--s", type=int, default=1000, show_default=True, help="sample count")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--task", is_flag=True, help="exhaustive two-class set with label pixels")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@_guarded
def dataset_bas(d, s, seed, task, out):
    """Bars-and-stripes images, sampled or the exhaustive labeled task set."""
    ds = bars_vs_stripes_task(d) if task else generate_bas(BasSpec(D=d, S=s, seed=seed))
    write_vectors(ds, out)
    click.echo(f"wrote {len(ds)} vectors of width {ds.vectors.shape[1]} -> {out}")


@dataset_group.command("mnist")
@click.option("--images", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--labels", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--limit", type=int, default=None)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@_guarded
def dataset_mnist(images, labels, limit, out):
    """Coarse-grained 4x4 digits with one-hot label pixels appended."""
    imgs, labs = load_mnist_idx(images, labels)
    ds = prepare_supervised(coarse_grain_binarize(imgs), labs)
    if limit is not None:
        ds = ds.subset(np.arange(min(limit, len(ds))))
    write_vectors(ds, out)
    click.echo(f"wrote {len(ds)} vectors of width {ds.vectors.shape[1]} -> {out}")


@main.command("predict")
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.argument("images", type=click.Path(exists=True, dir_okay=False))
@click.option("--n-labels", type=int, required=True, help="label pixels per vector")
@click.option("--k", type=int, default=100, show_default=True, help="reads per image")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None)
@_guarded
def predict_cmd(checkpoint, images, n_labels, k, seed, out):
    """Classify IMAGES with the model in CHECKPOINT via clamped sampling."""
    model, payload = load_checkpoint(checkpoint)
    backend = _backend_from_payload(payload.get("backend", {}))
    try:
        pipe_cfg = PipelineConfig(**payload["config"]["pipeline"])
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed checkpoint {checkpoint}: {exc}") from exc
    pipe = NqacPipeline(pipe_cfg, backend)
    ds = read_vectors(images)
    labels = _predict_all(model, pipe, ds, n_labels, k, seed)
    lines = [f"{i},{lab}" for i, lab in enumerate(labels)]
    if out:
        with open(out, "w") as fh:
            fh.write("index,label\n" + "\n".join(lines) + "\n")
        click.echo(f"wrote {len(labels)} predictions -> {out}")
    else:
        for line in lines:
            click.echo(line)
    if ds.labels is not None:
        acc = classification_accuracy(labels, ds.labels)
        click.echo(f"accuracy {acc:.4f}")


if __name__ == "__main__":
    main()
