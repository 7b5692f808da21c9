"""The three diagnostic protocols and result aggregation.

Each protocol expands an :class:`~conceptbench.config.ExperimentConfig` into
independent cells (method x seed x fraction/task/setup), runs them, and
collects :class:`~conceptbench.metrics.MetricSeries` records that flatten into
long-format result rows.
"""

from __future__ import annotations

import csv
import functools
import logging
import math
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np

from .config import ExperimentConfig, from_dict
from .datasets import (
    ConceptDataset,
    ConceptSchema,
    GridRenderer,
    PairStream,
    generate_dataset,
    index_to_concepts,
    stride_subsample,
    varying_concepts,
)
from .metrics import MetricSeries, concept_accuracy
from .models.cbm import ConceptBottleneckModel
from .models.bundle import save_model
from .models.cme import ConceptExtractor, TaskClassifier
from .models.probes import ConceptProbe
from .models.vae import BetaVAE, WeaklySupervisedVAE
from .tasks import all_setups, make_task, task_schema

log = logging.getLogger(__name__)

RESULT_COLUMNS = ("experiment", "method", "dataset", "setup", "seed", "index", "concept", "metric", "value")
SUMMARY_COLUMNS = ("experiment", "method", "dataset", "setup", "index", "concept", "metric", "median", "q25",
                   "q75", "iqr", "n_seeds")
WORKERS_ENV = "CONCEPTBENCH_WORKERS"
WEAK_SOURCE_ACCURACY = 0.9


@dataclass
class RunResult:
    """Outcome of one protocol run."""

    config: dict
    series: list = field(default_factory=list)
    wall_clock: float = 0.0
    schema_hash: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)

    @property
    def experiment(self) -> str:
        return self.config["experiment"]

    def rows(self) -> list[dict]:
        out = []
        for s in self.series:
            for r in s.rows():
                out.append({"experiment": self.experiment, "method": s.method, "dataset": s.dataset,
                            "setup": s.setup, "seed": s.seed, **r})
        return out


# --------------------------------------------------------------------------
# data


def holdout_split(concepts: np.ndarray, fraction: float = 0.1, seed: int = 0,
                  min_stratum: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Stratified ``(train_rows, test_rows)`` split.

    Strata are built from concepts in ascending cardinality, adding a concept
    only while every stratum keeps at least ``min_stratum`` members.  The
    ``round(fraction * n)`` test rows are shared out across strata in
    proportion to their size (largest remainders break ties).
    """
    concepts = np.asarray(concepts)
    n = len(concepts)
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    if n < 2:
        raise ValueError("need at least two samples to split")
    cards = [len(np.unique(concepts[:, j])) for j in range(concepts.shape[1])]
    key = np.zeros(n, dtype=np.int64)
    for j in sorted((j for j in range(len(cards)) if cards[j] > 1), key=lambda j: cards[j]):
        _, col = np.unique(concepts[:, j], return_inverse=True)
        trial = key * cards[j] + col
        if np.unique(trial, return_counts=True)[1].min() < min_stratum:
            break
        key = trial
    strata, sizes = np.unique(key, return_counts=True)
    quota = fraction * sizes
    take = np.floor(quota).astype(np.int64)
    short = int(np.clip(round(fraction * n), 1, n - 1)) - take.sum()
    if short > 0:
        take[np.argsort(-(quota - take), kind="stable")[:short]] += 1
    rng = np.random.default_rng(seed)
    test = []
    for stratum, k in zip(strata, take):
        rows = np.flatnonzero(key == stratum)
        test.extend(rng.choice(rows, size=min(k, len(rows)), replace=False).tolist())
    test = np.sort(np.asarray(test, dtype=np.int64))
    train = np.setdiff1d(np.arange(n), test)
    return train, test


@functools.lru_cache(maxsize=8)
def _cached_dataset(schema: ConceptSchema, resolution: int, cap: int) -> ConceptDataset:
    return generate_dataset(schema, resolution, indices=stride_subsample(schema, cap))


def experiment_data(schema: ConceptSchema, cfg: ExperimentConfig):
    """Desk-scale dataset with its held-out split: ``(data, train_rows, test_rows)``.

    The grid is stride-subsampled so that at most ``cfg.scale`` samples remain
    for training after the split.
    """
    cap = int(math.floor(cfg.scale / (1.0 - cfg.holdout)))
    data = _cached_dataset(schema, cfg.resolution, cap)
    train, test = holdout_split(data.concepts, cfg.holdout, cfg.split_seed)
    return data, train, test


def evaluated_concepts(schema: ConceptSchema) -> list[int]:
    """Concepts with at least two values; constant concepts are not scored."""
    return varying_concepts(schema)


# --------------------------------------------------------------------------
# model factories


def _train_kwargs(cfg: ExperimentConfig, seed: int, eval_every: Optional[int] = None) -> dict:
    t = cfg.train
    return dict(lr=t.lr, batch_size=t.batch_size, epochs=t.epochs, steps=t.steps, optimizer=t.optimizer,
                seed=seed, eval_every=eval_every)


def make_cbm(cfg: ExperimentConfig, seed: int, regime: Optional[str] = None, eval_every=None):
    m = cfg.model
    return ConceptBottleneckModel(regime=regime or m.regime, lam=m.lam, channels=tuple(m.channels),
                                  hidden=m.hidden, label_hidden=tuple(m.label_hidden),
                                  **_train_kwargs(cfg, seed, eval_every))


def make_vae(cfg: ExperimentConfig, seed: int, method: str, eval_every=None):
    m = cfg.model
    common = dict(latent_dim=m.latent_dim, beta=m.beta, channels=tuple(m.channels), hidden=m.hidden,
                  **_train_kwargs(cfg, seed, eval_every))
    if method == "wvae":
        return WeaklySupervisedVAE(averaging=m.averaging, symmetric_kl=m.symmetric_kl, **common)
    return BetaVAE(**common)


def make_probe(cfg: ExperimentConfig) -> ConceptProbe:
    p = cfg.probe
    return ConceptProbe(max_depth=p.max_depth, n_estimators=p.n_estimators, learning_rate=p.learning_rate)


def _probe_accuracy(cfg, model, data, fit_rows, test_rows, cols) -> tuple[dict, ConceptProbe]:
    schema = data.schema
    probe = make_probe(cfg).fit(model.transform(data.images[fit_rows]), data.concepts[fit_rows][:, cols],
                                [schema.cardinalities[j] for j in cols], [schema.names[j] for j in cols])
    pred = probe.predict(model.transform(data.images[test_rows]))
    return concept_accuracy(pred, data.concepts[test_rows][:, cols], probe.names_)[0], probe


def _save(ckpt_dir, name: str, model, schema: ConceptSchema, probe=None) -> None:
    if ckpt_dir is not None:
        save_model(model, Path(ckpt_dir) / name, schema_hash=schema.fingerprint(), probe=probe)


def _fit_vae(cfg, method, seed, data, anchor_rows, test_rows, callback=None, eval_every=None):
    model = make_vae(cfg, seed, method, eval_every)
    if method == "wvae":
        renderer = GridRenderer(data.schema, cfg.resolution)
        renderer.seed(data.index, data.images)
        stream = PairStream(data.schema, cfg.resolution, k=cfg.model.pair_k, anchors=data.index[anchor_rows],
                            renderer=renderer, exclude=data.index[test_rows])
        return model.fit(stream, callback=callback)
    return model.fit(data.images[anchor_rows], callback=callback)


# --------------------------------------------------------------------------
# cells


def _labelled_rows(train: np.ndarray, count: int, seed: int, salt: int) -> np.ndarray:
    rng = np.random.default_rng([seed, salt])
    return np.sort(rng.choice(train, size=min(count, len(train)), replace=False))


def _labelled_pairs(cfg, data, rows, test_rows, seed):
    """Fixed weak-supervision pairs built from a labelled budget of ``len(rows)`` images.

    The first half of the budget are anchors, each paired with one partner that
    differs in ``pair_k`` concepts; anchors and partners together make up the
    labelled images.  Returns ``(images, concepts, pairs)``.
    """
    rng = np.random.default_rng([seed, 11])
    anchors = data.index[rng.choice(rows, size=max(1, len(rows) // 2), replace=False)]
    renderer = GridRenderer(data.schema, cfg.resolution)
    renderer.seed(data.index, data.images)
    stream = PairStream(data.schema, cfg.resolution, k=cfg.model.pair_k, renderer=renderer,
                        exclude=data.index[test_rows])
    partners = stream.partners(rng, anchors)
    x1, x2 = renderer(anchors), renderer(partners)
    grid = np.concatenate([anchors, partners])
    return (np.concatenate([x1, x2]), index_to_concepts(data.schema, grid), np.stack([x1, x2], axis=1))


def _data_efficiency_cell(cfg_dict: dict, method: str, seed: int, ckpt_dir=None) -> MetricSeries:
    cfg = from_dict(cfg_dict)
    schema = task_schema(cfg.dataset)
    data, train, test = experiment_data(schema, cfg)
    cols = evaluated_concepts(schema)
    names = [schema.names[j] for j in cols]
    series = MetricSeries(method, seed, names, index_name="fraction", dataset=cfg.dataset)
    max_card = max(schema.cardinalities)
    for i, p in enumerate(cfg.fractions):
        n_lab = math.ceil(p * len(train))
        if n_lab < max_card:
            warnings.warn(f"fraction {p} gives {n_lab} labelled samples, fewer than the {max_card} values "
                          "of the largest concept; skipping", RuntimeWarning, stacklevel=2)
            continue
        rows = _labelled_rows(train, n_lab, seed, i)
        if method == "cbm":
            model = make_cbm(cfg, seed, regime="independent").fit(
                data.images[rows], data.concepts[rows], cardinalities=schema.cardinalities,
                concept_names=schema.names)
            pred = model.predict_concept_indices(data.images[test])[:, cols]
            per, _ = concept_accuracy(pred, data.concepts[test][:, cols], names)
            probe = None
        elif method == "wvae":
            images, concepts, pairs = _labelled_pairs(cfg, data, rows, test, seed)
            model = make_vae(cfg, seed, method).fit(pairs)
            probe = make_probe(cfg).fit(model.transform(images), concepts[:, cols],
                                        [schema.cardinalities[j] for j in cols], names)
            per, _ = concept_accuracy(probe.predict(model.transform(data.images[test])),
                                      data.concepts[test][:, cols], names)
        else:
            model = _fit_vae(cfg, method, seed, data, rows, test)
            per, probe = _probe_accuracy(cfg, model, data, rows, test, cols)
        _save(ckpt_dir, f"data_efficiency/{method}_seed{seed}_p{p:g}", model, schema, probe)
        log.info("data_efficiency %s seed=%d p=%s avg=%.3f", method, seed, p, np.mean(list(per.values())))
        series.append(p, per)
    return series


def _task_dependence_cell(cfg_dict: dict, method: str, seed: int, task_name: str,
                          ckpt_dir=None) -> tuple[MetricSeries, list]:
    cfg = from_dict(cfg_dict)
    schema = task_schema(cfg.dataset)
    data, train, test = experiment_data(schema, cfg)
    cols = evaluated_concepts(schema)
    names = [schema.names[j] for j in cols]
    task = make_task(cfg.dataset, task_name)
    y = task.labels(schema, data.concepts)
    flags = []
    series = MetricSeries(method, seed, names, index_name="step", setup=task_name, dataset=cfg.dataset)
    m = cfg.model
    if method == "cme":
        source = TaskClassifier(channels=tuple(m.channels), hidden=m.hidden,
                                **{k: v for k, v in _train_kwargs(cfg, seed).items() if k != "eval_every"})
        source.fit(data.images[train], y[train], n_classes=task.num_classes)
        source_acc = float((source.predict(data.images[test]) == y[test]).mean())
        if source_acc < WEAK_SOURCE_ACCURACY:
            flags.append(f"weak source: {task_name} seed {seed} held-out accuracy {source_acc:.3f}")
            log.warning(flags[-1])
        rows = _labelled_rows(train, cfg.labelled_count, seed, 0)
        p = cfg.probe
        model = ConceptExtractor(source, p.layer_id, p.max_depth, p.n_estimators, p.learning_rate)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", category=UserWarning)
            model.fit(data.images[rows], data.concepts[rows], data.images[train], y[train],
                      cardinalities=schema.cardinalities, concept_names=schema.names)
        steps = len(source.losses_)
    else:
        model = make_cbm(cfg, seed).fit(data.images[train], data.concepts[train], y[train],
                                        cardinalities=schema.cardinalities, n_classes=task.num_classes,
                                        concept_names=schema.names)
        steps = len(model.losses_)
    pred = model.predict_concept_indices(data.images[test])[:, cols]
    per, _ = concept_accuracy(pred, data.concepts[test][:, cols], names)
    task_acc = float((model.predict(data.images[test]) == y[test]).mean())
    series.append(steps, per, task_acc)
    _save(ckpt_dir, f"concept_task_dependence/{method}_{task_name}_seed{seed}", model, schema)
    log.info("concept_task_dependence %s %s seed=%d task=%.3f %s", method, task_name, seed, task_acc, per)
    return series, flags


def _fragility_cell(cfg_dict: dict, method: str, seed: int, setup_name: str, ckpt_dir=None) -> MetricSeries:
    cfg = from_dict(cfg_dict)
    setup = all_setups()[setup_name]
    schema = setup.schema
    data, train, test = experiment_data(schema, cfg)
    cols = evaluated_concepts(schema)
    names = [schema.names[j] for j in cols]
    series = MetricSeries(method, seed, names, index_name="step", setup=setup_name, dataset=cfg.dataset)
    eval_every = cfg.train.eval_every or max(1, math.ceil(len(train) / cfg.train.batch_size))
    if method == "cbm":
        model = make_cbm(cfg, seed, regime="independent", eval_every=eval_every)
        model.fit(data.images[train], data.concepts[train], cardinalities=schema.cardinalities,
                  concept_names=schema.names,
                  eval_set=(data.images[test], data.concepts[test]))
        for i, step in enumerate(model.history_.index):
            series.append(step, {c: model.history_.per_concept[c][i] for c in names})
        probe = None
    else:
        probe_rows = _labelled_rows(train, cfg.probe.n_labelled, seed, 7)
        probes = []

        def checkpoint(step, model):
            per, probe = _probe_accuracy(cfg, model, data, probe_rows, test, cols)
            probes.append(probe)
            series.append(step, per)

        model = _fit_vae(cfg, method, seed, data, train, test, callback=checkpoint, eval_every=eval_every)
        probe = probes[-1]
    _save(ckpt_dir, f"variance_fragility/{method}_{setup_name}_seed{seed}", model, schema, probe)
    log.info("variance_fragility %s %s seed=%d final=%s", method, setup_name, seed, series.last())
    return series


# --------------------------------------------------------------------------
# runners


def worker_count() -> int:
    """Parallel cell workers: ``CONCEPTBENCH_WORKERS`` capped at the CPU count."""
    cpus = os.cpu_count() or 1
    raw = os.environ.get(WORKERS_ENV)
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from exc
    return max(1, min(n, cpus))


def _map_cells(fn: Callable, cells: list[tuple], workers: Optional[int] = None,
               on_result: Optional[Callable] = None) -> list:
    """Run cells in order (or in a process pool); ``on_result`` sees each result as it lands."""
    workers = worker_count() if workers is None else workers
    on_result = on_result or (lambda r: None)
    if workers <= 1 or len(cells) <= 1:
        out = []
        for c in cells:
            out.append(fn(*c))
            on_result(out[-1])
        return out
    import multiprocessing

    ctx = multiprocessing.get_context("spawn")
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
        futures = {pool.submit(fn, *c): i for i, c in enumerate(cells)}
        out = [None] * len(cells)
        for f in as_completed(futures):
            out[futures[f]] = f.result()
            on_result(out[futures[f]])
        return out


def _schema_hashes(cfg: ExperimentConfig) -> dict:
    if cfg.experiment == "variance_fragility":
        setups = all_setups()
        return {s: setups[s].schema.fingerprint() for s in cfg.setups}
    return {"": task_schema(cfg.dataset).fingerprint()}


def _result(cfg: ExperimentConfig, series, start, checkpoint_dir=None, flags=()) -> RunResult:
    artifacts = {} if checkpoint_dir is None else {"checkpoints": str(checkpoint_dir)}
    return RunResult(config=cfg.to_dict(), series=list(series), wall_clock=time.perf_counter() - start,
                     schema_hash=_schema_hashes(cfg), artifacts=artifacts, flags=list(flags))


def _require(cfg: ExperimentConfig, experiment: str) -> None:
    if cfg.experiment != experiment:
        raise ValueError(f"config is for {cfg.experiment!r}, not {experiment!r}")


def _ckpt(checkpoint_dir):
    return None if checkpoint_dir is None else str(checkpoint_dir)


def run_data_efficiency(cfg: ExperimentConfig, workers: Optional[int] = None, checkpoint_dir=None,
                        on_series: Optional[Callable] = None) -> RunResult:
    """Accuracy against labelled fraction, one series per (method, seed)."""
    _require(cfg, "data_efficiency")
    start = time.perf_counter()
    cells = [(cfg.to_dict(), method, seed, _ckpt(checkpoint_dir)) for method in cfg.methods
             for seed in cfg.seeds]
    return _result(cfg, _map_cells(_data_efficiency_cell, cells, workers, on_series), start, checkpoint_dir)


def run_concept_task_dependence(cfg: ExperimentConfig, workers: Optional[int] = None, checkpoint_dir=None,
                                on_series: Optional[Callable] = None) -> RunResult:
    """Per-concept and task accuracy for each task, one series per (task, method, seed)."""
    _require(cfg, "concept_task_dependence")
    start = time.perf_counter()
    cells = [(cfg.to_dict(), method, seed, task, _ckpt(checkpoint_dir)) for task in cfg.tasks
             for method in cfg.methods for seed in cfg.seeds]
    out = _map_cells(_task_dependence_cell, cells, workers, on_series and (lambda r: on_series(r[0])))
    return _result(cfg, [s for s, _ in out], start, checkpoint_dir, [f for _, fl in out for f in fl])


def run_variance_fragility(cfg: ExperimentConfig, workers: Optional[int] = None, checkpoint_dir=None,
                           on_series: Optional[Callable] = None) -> RunResult:
    """Per-concept accuracy against training step, one series per (setup, method, seed)."""
    _require(cfg, "variance_fragility")
    start = time.perf_counter()
    cells = [(cfg.to_dict(), method, seed, setup, _ckpt(checkpoint_dir)) for setup in cfg.setups
             for method in cfg.methods for seed in cfg.seeds]
    return _result(cfg, _map_cells(_fragility_cell, cells, workers, on_series), start, checkpoint_dir)


RUNNERS = {
    "data_efficiency": run_data_efficiency,
    "concept_task_dependence": run_concept_task_dependence,
    "variance_fragility": run_variance_fragility,
}


def run_experiment(cfg: ExperimentConfig, workers: Optional[int] = None, checkpoint_dir=None,
                   on_series: Optional[Callable] = None) -> RunResult:
    return RUNNERS[cfg.experiment](cfg, workers, checkpoint_dir, on_series)


# --------------------------------------------------------------------------
# aggregation and files


def _sort_key(row: dict):
    return (row["experiment"], row["method"], row["dataset"], row["setup"], row["concept"], row["metric"],
            float(row["index"]))


def summarize(results: Iterable) -> list[dict]:
    """Median and interquartile range over seeds for every result cell.

    Accepts :class:`RunResult` objects or long-format row dicts.  Rows are
    sorted by (experiment, method, dataset, setup, concept, metric, index).
    """
    rows, hashes = [], {}
    for r in results:
        if isinstance(r, RunResult):
            for setup, h in r.schema_hash.items():
                key = (r.config["dataset"], setup)
                if hashes.setdefault(key, h) != h:
                    raise ValueError(f"mixed schemas for dataset/setup {key}")
            rows.extend(r.rows())
        else:
            rows.append(r)
    if not rows:
        raise ValueError("no results to summarize")
    cells: dict[tuple, list[float]] = {}
    for row in rows:
        missing = set(RESULT_COLUMNS) - set(row)
        if missing:
            raise ValueError(f"result row missing columns {sorted(missing)}")
        key = (row["experiment"], row["method"], row["dataset"], row["setup"], float(row["index"]),
               row["concept"], row["metric"])
        cells.setdefault(key, []).append(float(row["value"]))
    out = []
    for (exp, method, dataset, setup, index, concept, metric), values in cells.items():
        q25, med, q75 = np.percentile(values, [25, 50, 75])
        out.append({"experiment": exp, "method": method, "dataset": dataset, "setup": setup,
                    "index": _fmt_index(index), "concept": concept, "metric": metric, "median": float(med),
                    "q25": float(q25), "q75": float(q75), "iqr": float(q75 - q25), "n_seeds": len(values)})
    return sorted(out, key=_sort_key)


def _fmt_index(x: float):
    return int(x) if float(x).is_integer() and abs(x) >= 1 else float(x)


def write_csv(rows: list[dict], path, columns) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row[k]) for k in columns})
    return path


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def write_results(results: Iterable[RunResult], path) -> Path:
    rows = [row for r in results for row in r.rows()]
    return write_csv(rows, path, RESULT_COLUMNS)


def read_results(path) -> list[dict]:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(RESULT_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path} is missing columns {sorted(missing)}")
        rows = []
        for row in reader:
            row["seed"] = int(row["seed"])
            row["index"] = float(row["index"])
            row["value"] = float(row["value"])
            rows.append(row)
    return rows


def write_summary(rows: list[dict], path) -> Path:
    return write_csv(rows, path, SUMMARY_COLUMNS)
