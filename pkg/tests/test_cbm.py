import numpy as np
import pytest
import torch

from conceptbench.datasets import apply_subset, build_schema, generate_dataset
from conceptbench.learners.networks import TrainConfig
from conceptbench.models.cbm import (
    ConceptBottleneckModel,
    cbm_predict_concepts,
    cbm_predict_label,
    train_cbm,
)
from conceptbench.tasks import make_task

SMALL = dict(channels=(8, 16), hidden=32, label_hidden=(16,), batch_size=32)


@pytest.fixture(scope="module")
def data():
    s = apply_subset(build_schema("dsprites"), {"scale": [0, 5], "rotation": [0],
                                                  "pos_x": range(0, 32, 8), "pos_y": range(0, 32, 8)})
    ds = generate_dataset(s, 32, seed=0)
    y = make_task("dsprites", "shape").labels(s, ds.concepts)
    return ds, y


@pytest.fixture(scope="module")
def joint(data):
    ds, y = data
    return ConceptBottleneckModel(steps=60, **SMALL).fit(ds.images, ds.concepts, y,
                                                         cardinalities=ds.schema.cardinalities)


class TestPredictions:
    def test_heads_are_distributions(self, data, joint):
        ds, _ = data
        heads = cbm_predict_concepts(joint, ds.images[:20])
        assert [h.shape[1] for h in heads] == list(ds.schema.cardinalities)
        for h in heads:
            assert np.allclose(h.sum(1), 1.0, atol=1e-6)
        idx = joint.predict_concept_indices(ds.images[:20])
        assert np.all(idx < np.asarray(ds.schema.cardinalities))
        assert np.allclose(cbm_predict_label(joint, ds.images[:20]).sum(1), 1.0, atol=1e-6)

    def test_label_predictor_reads_every_head(self, data, joint):
        ds, _ = data
        probs = np.concatenate(joint.predict_concepts(ds.images[:20]), axis=1)
        base = joint._label_from(probs)
        perm = np.random.default_rng(0).permutation(probs.shape[1])
        assert not np.allclose(base, joint._label_from(probs[:, perm]))

    def test_shape_mismatch(self, joint):
        with pytest.raises(ValueError):
            joint.predict(np.zeros((2, 64, 64, 1)))


class TestRegimes:
    def test_independent_ground_truth_concepts_solve_shape_task(self, data):
        ds, y = data
        model = ConceptBottleneckModel(regime="independent", steps=30, label_steps=300, lr=1e-2, **SMALL)
        model.fit(ds.images, ds.concepts, y, cardinalities=ds.schema.cardinalities)
        assert (model.predict_proba_from_concepts(ds.concepts).argmax(1) == y).mean() == 1.0

    def test_lambda_zero_ignores_concept_labels(self, data):
        ds, y = data
        shuffled = np.random.default_rng(0).permutation(ds.concepts)
        a = ConceptBottleneckModel(lam=0.0, steps=10, **SMALL).fit(ds.images, ds.concepts, y,
                                                                   cardinalities=ds.schema.cardinalities)
        b = ConceptBottleneckModel(lam=0.0, steps=10, **SMALL).fit(ds.images, shuffled, y,
                                                                   cardinalities=ds.schema.cardinalities)
        assert a.losses_ == b.losses_
        c = ConceptBottleneckModel(lam=1.0, steps=10, **SMALL).fit(ds.images, shuffled, y,
                                                                   cardinalities=ds.schema.cardinalities)
        assert c.losses_ != b.losses_

    def test_sequential_label_stage_sees_predictions(self, data):
        ds, y = data
        model = ConceptBottleneckModel(regime="sequential", steps=20, **SMALL)
        before = [p.detach().clone() for p in model.fit(ds.images, ds.concepts, y).net_.trunk.parameters()]
        assert len(model.label_losses_) == 20
        # the label stage leaves the concept predictor untouched
        probs = np.concatenate(model.predict_concepts(ds.images), axis=1)
        assert np.allclose(model.predict_proba(ds.images), model._label_from(probs))
        assert all(torch.equal(a, b) for a, b in zip(before, model.net_.trunk.parameters()))

    def test_concept_only_fit(self, data):
        ds, _ = data
        model = ConceptBottleneckModel(regime="independent", steps=5, **SMALL).fit(ds.images, ds.concepts)
        assert model.predict_concept_indices(ds.images[:3]).shape == (3, 6)
        with pytest.raises(ValueError):
            model.predict(ds.images[:3])

    def test_more_labels_help(self):
        s = apply_subset(build_schema("dsprites"), {"rotation": [0], "pos_x": range(0, 32, 4),
                                                      "pos_y": range(0, 32, 4)})
        ds = generate_dataset(s, 32, seed=0)
        rng = np.random.default_rng(1)
        perm = rng.permutation(len(ds))
        test, pool = perm[:200], perm[200:]
        scores = []
        for n in (len(pool) // 100 + 2, len(pool)):
            rows = pool[:n]
            m = ConceptBottleneckModel(regime="independent", steps=300, lr=2e-3, **SMALL)
            m.fit(ds.images[rows], ds.concepts[rows], cardinalities=ds.schema.cardinalities)
            scores.append(m.concept_score(ds.images[test], ds.concepts[test]))
        assert scores[1] > scores[0]


class TestValidation:
    @pytest.mark.parametrize("kwargs, fit", [
        (dict(regime="joint"), dict(y=None)),
        (dict(lam=-1.0), {}),
        (dict(regime="stacked"), {}),
    ])
    def test_bad_settings(self, data, kwargs, fit):
        ds, y = data
        args = dict(y=y)
        args.update(fit)
        with pytest.raises(ValueError):
            ConceptBottleneckModel(steps=1, **SMALL, **kwargs).fit(ds.images[:8], ds.concepts[:8], **args)

    def test_missing_or_invalid_concepts(self, data):
        ds, y = data
        C = ds.concepts[:8].astype(float)
        C[0, 1] = np.nan
        for bad in (C, None, ds.concepts[:8] + 3):
            with pytest.raises(ValueError):
                ConceptBottleneckModel(steps=1, **SMALL).fit(ds.images[:8], bad, y[:8],
                                                             cardinalities=ds.schema.cardinalities)


class TestTraining:
    def test_history_and_determinism(self, data):
        ds, y = data
        cfg = TrainConfig(steps=10, eval_every=5, batch_size=32)
        kwargs = dict(channels=(8, 16), hidden=32, label_hidden=(16,), cardinalities=ds.schema.cardinalities,
                      concept_names=ds.schema.names)
        a, hist = train_cbm(ds.images, ds.concepts, y, cfg=cfg, eval_set=(ds.images, ds.concepts, y), **kwargs)
        b, _ = train_cbm(ds.images, ds.concepts, y, cfg=cfg, **kwargs)
        assert hist.index == [5, 10] and set(hist.per_concept) == set(ds.schema.names)
        assert len(hist.task) == 2
        assert np.allclose(a.losses_, b.losses_, rtol=1e-6)
        assert np.array_equal(a.predict_proba(ds.images), b.predict_proba(ds.images))
