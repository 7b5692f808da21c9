import csv
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conceptbench.config import from_dict
from conceptbench.datasets import concepts_to_index, reduced_schema, render_batch
from conceptbench.experiments import (
    RESULT_COLUMNS,
    RunResult,
    _labelled_pairs,
    evaluated_concepts,
    experiment_data,
    holdout_split,
    read_results,
    run_concept_task_dependence,
    run_data_efficiency,
    run_variance_fragility,
    summarize,
    worker_count,
    write_results,
)
from conceptbench.metrics import MetricSeries

TINY = dict(resolution=32, seeds=[0], train=dict(steps=8, batch_size=16),
            model=dict(channels=[4, 4], hidden=8, latent_dim=2),
            probe=dict(n_estimators=3, n_labelled=50))


def tiny(experiment, **kw):
    return from_dict({"experiment": experiment, **TINY, **kw})


class TestSplit:
    def test_disjoint_and_covering(self):
        s = reduced_schema("dsprites")
        cfg = tiny("data_efficiency", scale=2000)
        data, train, test = experiment_data(s, cfg)
        assert len(np.intersect1d(train, test)) == 0
        assert len(train) + len(test) == len(data)
        assert len(train) <= 2000
        assert abs(len(test) / len(data) - 0.1) < 0.02

    def test_stratified_on_every_value(self):
        s = reduced_schema("dsprites")
        data, train, test = experiment_data(s, tiny("data_efficiency", scale=3000))
        for j in evaluated_concepts(s)[:2]:  # shape and scale are in the strata
            assert set(np.unique(data.concepts[test][:, j])) == set(range(s.cardinalities[j]))

    def test_split_ignores_training_seed(self):
        s = reduced_schema("dsprites")
        a = experiment_data(s, tiny("data_efficiency", scale=500, seeds=[0]))
        b = experiment_data(s, tiny("data_efficiency", scale=500, seeds=[5]))
        assert np.array_equal(a[2], b[2])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(20, 400), st.floats(0.05, 0.5), st.integers(0, 100))
    def test_split_property(self, n, fraction, seed):
        c = np.random.default_rng(seed).integers(0, 3, size=(n, 2))
        train, test = holdout_split(c, fraction, seed)
        assert len(np.intersect1d(train, test)) == 0 and len(train) + len(test) == n
        assert len(test) >= 1

    def test_constant_concepts_not_scored(self):
        assert evaluated_concepts(reduced_schema("dsprites")) == [1, 2, 3, 4, 5]


class TestLabelledPairs:
    def test_budget_and_pair_structure(self):
        cfg = tiny("data_efficiency", scale=2000)
        data, train, test = experiment_data(reduced_schema("dsprites"), cfg)
        rows = train[:41]
        images, concepts, pairs = _labelled_pairs(cfg, data, rows, test, seed=0)
        # the budget is split into anchors and partners, never exceeded
        assert len(images) == len(concepts) == 2 * len(pairs) == 40
        first, second = concepts[:20], concepts[20:]
        assert np.all((first != second).sum(1) == cfg.model.pair_k)
        grid = concepts_to_index(data.schema, concepts)
        assert not np.isin(grid, data.index[test]).any()
        assert np.isin(grid[:20], data.index[rows]).all()
        assert np.array_equal(pairs[:, 0], images[:20]) and np.array_equal(pairs[:, 1], images[20:])
        assert np.allclose(images, render_batch(data.schema, concepts, cfg.resolution))


class TestSummarize:
    def _result(self, values, experiment="data_efficiency"):
        series = []
        for seed, v in enumerate(values):
            s = MetricSeries("cbm", seed, ["shape"], index_name="fraction", dataset="dsprites")
            s.append(0.5, {"shape": v})
            series.append(s)
        return RunResult({"experiment": experiment, "dataset": "dsprites"}, series, schema_hash={"": "h"})

    def test_median_and_spread(self):
        rows = summarize([self._result([0.5, 0.6, 0.7])])
        shape = [r for r in rows if r["concept"] == "shape"][0]
        assert shape["median"] == pytest.approx(0.6) and shape["n_seeds"] == 3
        assert shape["iqr"] == pytest.approx(np.percentile([0.5, 0.6, 0.7], 75) - np.percentile([0.5, 0.6, 0.7], 25))

    def test_single_seed_zero_spread(self):
        assert all(r["iqr"] == 0 for r in summarize([self._result([0.4])]))

    def test_sorted_deterministically(self):
        a = self._result([0.5], "variance_fragility")
        b = self._result([0.5])
        rows = summarize([a, b])
        keys = [(r["experiment"], r["method"], r["concept"]) for r in rows]
        assert keys == sorted(keys) and summarize([b, a]) == rows

    def test_rejects_mixed_schemas(self):
        a, b = self._result([0.5]), self._result([0.6])
        b.schema_hash = {"": "other"}
        with pytest.raises(ValueError):
            summarize([a, b])

    def test_empty(self):
        with pytest.raises(ValueError):
            summarize([])

    def test_csv_round_trip(self, tmp_path):
        path = write_results([self._result([0.5, 0.25])], tmp_path / "results.csv")
        with open(path, newline="") as fh:
            assert tuple(next(csv.reader(fh))) == RESULT_COLUMNS
        rows = read_results(path)
        assert [r["value"] for r in rows if r["concept"] == "shape"] == [0.5, 0.25]
        bad = tmp_path / "bad.csv"
        bad.write_text("method,value\ncbm,1\n")
        with pytest.raises(ValueError):
            read_results(bad)


class TestProtocols:
    def test_data_efficiency_shape_and_skip(self):
        cfg = tiny("data_efficiency", scale=400, methods=["cbm", "wvae"], fractions=[0.01, 0.5, 1.0])
        with pytest.warns(RuntimeWarning, match="skipping"):
            result = run_data_efficiency(cfg)
        assert len(result.series) == 2
        for s in result.series:
            assert s.index == [0.5, 1.0] and s.index_name == "fraction"
            assert set(s.per_concept) == {"shape", "scale", "rotation", "pos_x", "pos_y"}

    def test_task_dependence_records_task_accuracy(self, tmp_path):
        cfg = tiny("concept_task_dependence", scale=300, methods=["cme", "cbm"], tasks=["bin_shape"],
                   labelled_count=40)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            result = run_concept_task_dependence(cfg, checkpoint_dir=tmp_path)
        assert {s.method for s in result.series} == {"cme", "cbm"}
        for s in result.series:
            assert s.setup == "bin_shape" and len(s.task) == 1
        # the undertrained source is flagged, not dropped
        assert any("weak source" in f for f in result.flags)
        assert (tmp_path / "concept_task_dependence" / "cme_bin_shape_seed0" / "model.json").is_file()

    def test_fragility_checkpoints(self):
        cfg = tiny("variance_fragility", scale=200, methods=["cbm", "wvae"], setups=["low_spatial"],
                   train=dict(steps=6, batch_size=16, eval_every=3))
        result = run_variance_fragility(cfg)
        for s in result.series:
            assert s.index == [3, 6] and s.setup == "low_spatial"
        assert set(result.schema_hash) == {"low_spatial"}

    def test_rerun_is_deterministic(self):
        cfg = tiny("data_efficiency", scale=300, methods=["wvae"], fractions=[1.0])
        a, b = run_data_efficiency(cfg), run_data_efficiency(cfg)
        va = [r["value"] for r in a.rows()]
        vb = [r["value"] for r in b.rows()]
        assert np.allclose(va, vb, rtol=1e-3, atol=0)

    def test_wrong_experiment(self):
        with pytest.raises(ValueError):
            run_data_efficiency(tiny("variance_fragility"))


def test_worker_count_env(monkeypatch):
    monkeypatch.delenv("CONCEPTBENCH_WORKERS", raising=False)
    assert worker_count() == 1
    monkeypatch.setenv("CONCEPTBENCH_WORKERS", "1000")
    assert 1 <= worker_count() <= 1000
    monkeypatch.setenv("CONCEPTBENCH_WORKERS", "many")
    with pytest.raises(ValueError):
        worker_count()
