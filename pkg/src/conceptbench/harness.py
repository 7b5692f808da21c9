"""Run directories, manifests and figure emission."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import platform
import time
import traceback
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .config import ExperimentConfig, dump_config, dumps_config
from .experiments import (
    RESULT_COLUMNS,
    RunResult,
    read_results,
    run_experiment,
    summarize,
    write_csv,
    write_summary,
)

log = logging.getLogger(__name__)

STATUSES = ("running", "done", "failed")
_TRANSITIONS = {"running": ("done", "failed")}


@dataclass
class RunManifest:
    run_id: str
    config_path: Optional[str]
    config_hash: str
    tool_version: str
    platform: str
    status: str = "running"
    started: str = ""
    finished: Optional[str] = None
    wall_clock: Optional[float] = None
    error: Optional[str] = None
    flags: tuple = ()

    def transition(self, status: str) -> None:
        if status not in _TRANSITIONS.get(self.status, ()):
            raise ValueError(f"cannot move run from {self.status!r} to {status!r}")
        self.status = status
        self.finished = _now()

    def save(self, run_dir) -> Path:
        path = Path(run_dir) / "manifest.json"
        data = asdict(self)
        data["flags"] = list(self.flags)
        path.write_text(json.dumps(data, indent=2), encoding="utf-8")
        return path

    @classmethod
    def load(cls, run_dir) -> "RunManifest":
        data = json.loads((Path(run_dir) / "manifest.json").read_text(encoding="utf-8"))
        data["flags"] = tuple(data.get("flags", ()))
        return cls(**data)


def _now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(dumps_config(cfg).encode("utf-8")).hexdigest()[:16]


def new_run_dir(out_root, cfg: ExperimentConfig) -> tuple[str, Path]:
    """Create a fresh ``<timestamp>-<hash>`` directory under ``out_root``."""
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S")
    base = f"{stamp}-{config_hash(cfg)[:8]}"
    for n in range(1000):
        run_id = base if n == 0 else f"{base}-{n}"
        try:
            (out_root / run_id).mkdir()
            return run_id, out_root / run_id
        except FileExistsError:
            continue
    raise RuntimeError(f"could not allocate a run directory under {out_root}")


def run(cfg: ExperimentConfig, out_root, config_path=None, workers: Optional[int] = None) -> RunManifest:
    """Execute ``cfg`` in a new run directory under ``out_root``.

    The directory receives ``config.yaml``, ``manifest.json``, ``results.csv``
    (appended as cells finish), ``summary.csv``, ``checkpoints/`` and
    ``plots/``.  On failure the manifest is marked failed, a ``FAILED`` file
    holds the traceback and no summary is written.
    """
    run_id, run_dir = new_run_dir(out_root, cfg)
    dump_config(cfg, run_dir / "config.yaml")
    manifest = RunManifest(run_id=run_id, config_path=None if config_path is None else str(config_path),
                           config_hash=config_hash(cfg), tool_version=__version__,
                           platform=platform.platform(), started=_now())
    manifest.save(run_dir)
    results_path = run_dir / "results.csv"
    with open(results_path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh).writerow(RESULT_COLUMNS)

    def on_series(series):
        rows = RunResult(cfg.to_dict(), [series]).rows()
        with open(results_path, "a", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(RESULT_COLUMNS))
            for row in rows:
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})

    start = time.perf_counter()
    try:
        result = run_experiment(cfg, workers, checkpoint_dir=run_dir / "checkpoints", on_series=on_series)
        write_summary(summarize([result]), run_dir / "summary.csv")
        (run_dir / "run_result.json").write_text(json.dumps(
            {"schema_hash": result.schema_hash, "flags": result.flags, "wall_clock": result.wall_clock,
             "artifacts": {k: str(v) for k, v in result.artifacts.items()}}, indent=2), encoding="utf-8")
        emit_plots(results_path, run_dir / "plots")
        manifest.flags = tuple(result.flags)
        manifest.transition("done")
    except BaseException as exc:
        manifest.transition("failed")
        manifest.error = f"{type(exc).__name__}: {exc}"
        (run_dir / "FAILED").write_text(traceback.format_exc(), encoding="utf-8")
        summary = run_dir / "summary.csv"
        if summary.exists():
            summary.unlink()
        raise
    finally:
        manifest.wall_clock = time.perf_counter() - start
        manifest.save(run_dir)
    return manifest


# --------------------------------------------------------------------------
# plots


def _median_table(rows, keys):
    cells: dict[tuple, list[float]] = {}
    for r in rows:
        cells.setdefault(tuple(r[k] for k in keys), []).append(float(r["value"]))
    return {k: (float(np.median(v)), *np.percentile(v, [25, 75])) for k, v in cells.items()}


def _write_slice(rows, path, columns):
    write_csv(rows, path, columns)


def emit_plots(results_csv, out_dir) -> list[Path]:
    """Render figures (PNG) and their tidy CSV slices from a results file."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = read_results(results_csv)
    if not rows:
        raise ValueError(f"{results_csv} holds no results")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    by_exp: dict[str, list] = {}
    for r in rows:
        by_exp.setdefault(r["experiment"], []).append(r)

    for dataset in sorted({r["dataset"] for r in by_exp.get("data_efficiency", [])}):
        sub = [r for r in by_exp["data_efficiency"] if r["dataset"] == dataset and r["concept"] == "average"]
        table = _median_table(sub, ("method", "index"))
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for method in sorted({m for m, _ in table}):
            xs = sorted(i for m, i in table if m == method)
            med = [table[(method, x)][0] for x in xs]
            lo = [table[(method, x)][1] for x in xs]
            hi = [table[(method, x)][2] for x in xs]
            ax.plot(xs, med, marker="o", label=method.upper())
            ax.fill_between(xs, lo, hi, alpha=0.2)
        ax.set_xscale("log")
        ax.set_xlabel("Fraction of labelled training points")
        ax.set_ylabel("Average concept accuracy")
        ax.set_title(dataset)
        ax.legend()
        fig.tight_layout()
        stem = out_dir / f"data_efficiency_{dataset}"
        fig.savefig(stem.with_suffix(".png"), dpi=120)
        plt.close(fig)
        _write_slice(sub, stem.with_suffix(".csv"), RESULT_COLUMNS)
        written += [stem.with_suffix(".png"), stem.with_suffix(".csv")]

    for dataset in sorted({r["dataset"] for r in by_exp.get("concept_task_dependence", [])}):
        sub = [r for r in by_exp["concept_task_dependence"] if r["dataset"] == dataset and r["concept"] != "average"]
        tasks = sorted({r["setup"] for r in sub})
        methods = sorted({r["method"] for r in sub})
        concepts = [c for c in dict.fromkeys(r["concept"] for r in sub) if c != "task"] + ["task"]
        table = _median_table(sub, ("setup", "method", "concept"))
        fig, axes = plt.subplots(1, len(tasks), figsize=(4.5 * len(tasks), 3.5), squeeze=False)
        width = 0.8 / max(1, len(methods))
        for ax, task in zip(axes[0], tasks):
            x = np.arange(len(concepts))
            for j, method in enumerate(methods):
                vals = [table.get((task, method, c), (np.nan,))[0] for c in concepts]
                ax.bar(x + j * width, vals, width, label=method.upper())
            ax.set_xticks(x + width * (len(methods) - 1) / 2)
            ax.set_xticklabels([c if c != "task" else "Task" for c in concepts], rotation=45, ha="right")
            ax.set_ylim(0, 1)
            ax.set_title(task)
        axes[0][0].set_ylabel("Accuracy")
        axes[0][-1].legend()
        fig.tight_layout()
        stem = out_dir / f"concept_task_dependence_{dataset}"
        fig.savefig(stem.with_suffix(".png"), dpi=120)
        plt.close(fig)
        _write_slice(sub, stem.with_suffix(".csv"), RESULT_COLUMNS)
        written += [stem.with_suffix(".png"), stem.with_suffix(".csv")]

    frag = by_exp.get("variance_fragility", [])
    for setup, method in sorted({(r["setup"], r["method"]) for r in frag}):
        sub = [r for r in frag if r["setup"] == setup and r["method"] == method]
        table = _median_table(sub, ("concept", "index"))
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for concept in dict.fromkeys(r["concept"] for r in sub):
            xs = sorted(i for c, i in table if c == concept)
            style = "--" if concept == "average" else "-"
            ax.plot(xs, [table[(concept, x)][0] for x in xs], style, label=concept)
        ax.set_xlabel("Training step")
        ax.set_ylabel("Concept accuracy")
        ax.set_ylim(0, 1.02)
        ax.set_title(f"{setup} ({method.upper()})")
        ax.legend(fontsize=7)
        fig.tight_layout()
        stem = out_dir / f"variance_fragility_{setup}_{method}"
        fig.savefig(stem.with_suffix(".png"), dpi=120)
        plt.close(fig)
        _write_slice(sub, stem.with_suffix(".csv"), RESULT_COLUMNS)
        written += [stem.with_suffix(".png"), stem.with_suffix(".csv")]

    if not written:
        raise ValueError("results contain no recognised experiment")
    return written


def summarize_file(results_csv, out_path) -> Path:
    return write_summary(summarize(read_results(results_csv)), out_path)
