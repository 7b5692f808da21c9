"""Multi-task concept bottleneck models.

A convolutional trunk feeds one softmax head per concept (the concept
predictor); a small MLP maps the concatenated head outputs to the task label
(the label predictor).  Three training regimes are supported:

* ``independent``: heads on concepts, label MLP on one-hot true concepts;
* ``sequential``: heads first, then the label MLP on the frozen head outputs;
* ``joint``: both at once on ``L_y + lam * L_c``.
"""

from __future__ import annotations

import logging
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted
from torch import nn
from torch.nn import functional as F

from ..learners.networks import (
    DEFAULT_CHANNELS,
    DEFAULT_HIDDEN,
    NetworkSpec,
    TrainConfig,
    build_network,
    predict_batched,
    run_steps,
    to_tensor,
)
from ..metrics import MetricSeries, concept_accuracy

log = logging.getLogger(__name__)

REGIMES = ("independent", "sequential", "joint")


class CBMNet(nn.Module):
    def __init__(self, image_shape, cardinalities, n_classes, channels, hidden, label_hidden):
        super().__init__()
        self.cardinalities = tuple(int(c) for c in cardinalities)
        # conv layers plus the dense feature layer; the heads replace "out"
        self.trunk = build_network(NetworkSpec("conv_encoder", image_shape, (hidden,), channels, hidden))[:-1]
        self.heads = nn.ModuleList(nn.Linear(hidden, c) for c in self.cardinalities)
        self.label = None
        if n_classes:
            self.label = build_network(NetworkSpec("mlp", (sum(self.cardinalities),), (n_classes,),
                                                   tuple(label_hidden), max(label_hidden, default=1)))

    def concept_logits(self, x) -> list:
        h = self.trunk(x)
        return [head(h) for head in self.heads]

    def concept_probs(self, x) -> torch.Tensor:
        """Concatenated per-head softmax outputs."""
        return torch.cat([F.softmax(z, dim=1) for z in self.concept_logits(x)], dim=1)

    def one_hot(self, c) -> torch.Tensor:
        return torch.cat([F.one_hot(c[:, j], k).float() for j, k in enumerate(self.cardinalities)], dim=1)

    def concept_loss(self, logits, c):
        return sum(F.cross_entropy(z, c[:, j]) for j, z in enumerate(logits))


class ConceptBottleneckModel(ClassifierMixin, BaseEstimator):
    """Concept bottleneck model with per-concept softmax heads.

    ``fit(X, C, y)`` trains on images ``X`` (N, H, W, C), integer concepts
    ``C`` (N, K) and task labels ``y``.  Without ``y`` only the concept
    predictor is trained (any regime but ``joint``).
    """

    def __init__(self, regime="joint", lam=1.0, channels=DEFAULT_CHANNELS, hidden=DEFAULT_HIDDEN,
                 label_hidden=(64,), lr=1e-3, batch_size=64, epochs=10, steps=None, label_steps=None,
                 optimizer="adaptive_moment", seed=0, eval_every=None):
        self.regime = regime
        self.lam = lam
        self.channels = channels
        self.hidden = hidden
        self.label_hidden = label_hidden
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.steps = steps
        self.label_steps = label_steps
        self.optimizer = optimizer
        self.seed = seed
        self.eval_every = eval_every

    def _train_config(self, seed_offset=0) -> TrainConfig:
        return TrainConfig(lr=self.lr, batch_size=self.batch_size, epochs=self.epochs, steps=self.steps,
                           optimizer=self.optimizer, seed=self.seed + seed_offset, eval_every=self.eval_every)

    def _validate(self, X, C, y, cardinalities):
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}")
        if not (self.lam >= 0 and np.isfinite(self.lam)):
            raise ValueError("lam must be finite and >= 0")
        X = check_array(X, allow_nd=True, dtype=np.float32)
        if X.ndim != 4:
            raise ValueError("X must be an (N, H, W, C) image array")
        if C is None:
            raise ValueError("concept annotations are required")
        C = np.asarray(C)
        if C.ndim != 2 or len(C) != len(X):
            raise ValueError("C must be an (N, K) array aligned with X")
        if C.dtype.kind == "f":
            if not np.all(np.isfinite(C)):
                raise ValueError("missing concept annotations")
            if np.any(C != np.round(C)):
                raise ValueError("concept values must be integers")
        elif C.dtype.kind not in "iu":
            raise ValueError("missing or non-integer concept annotations")
        C = C.astype(np.int64)
        cards = (list(cardinalities) if cardinalities is not None
                 else [int(C[:, j].max()) + 1 for j in range(C.shape[1])])
        if len(cards) != C.shape[1] or np.any(C < 0) or np.any(C >= np.asarray(cards)):
            raise ValueError("concept values out of range for the cardinalities")
        if y is not None:
            y = np.asarray(y, dtype=np.int64)
            if y.shape != (len(X),) or y.min() < 0:
                raise ValueError("y must be a non-negative label per sample")
        elif self.regime == "joint":
            raise ValueError("joint regime needs task labels")
        return X, C, y, cards

    def fit(self, X, C=None, y=None, *, cardinalities: Optional[Sequence[int]] = None,
            n_classes: Optional[int] = None, concept_names: Optional[Sequence[str]] = None,
            eval_set=None, callback: Optional[Callable] = None):
        """Train; ``eval_set=(X, C[, y])`` records accuracies in ``history_``.

        ``callback(step, model)`` fires at each evaluation checkpoint.
        """
        X, C, y, cards = self._validate(X, C, y, cardinalities)
        n_classes = (n_classes or int(y.max()) + 1) if y is not None else 0
        h, w, c = X.shape[1:]
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.seed)
            self.net_ = CBMNet((c, h, w), cards, n_classes, tuple(self.channels), self.hidden,
                               tuple(self.label_hidden))
        self.image_shape_ = (h, w, c)
        self.cardinalities_ = list(cards)
        self.concept_names_ = list(concept_names) if concept_names is not None else [str(j) for j in range(len(cards))]
        self.n_classes_ = n_classes
        self.classes_ = np.arange(n_classes)
        self.history_ = MetricSeries("cbm", self.seed, self.concept_names_)
        net = self.net_
        C_t = torch.as_tensor(C)
        y_t = torch.as_tensor(y) if y is not None else None

        def checkpoint(step):
            net.eval()
            if eval_set is not None:
                self._record(step, *eval_set)
            if callback is not None:
                callback(step, self)
            net.train()

        cfg = self._train_config()
        net.train()
        if self.regime == "joint":
            def joint_loss(idx, step):
                xb, cb = to_tensor(X[idx]), C_t[idx]
                logits = net.concept_logits(xb)
                probs = torch.cat([F.softmax(z, dim=1) for z in logits], dim=1)
                task = F.cross_entropy(net.label(probs), y_t[idx])
                return task + self.lam * net.concept_loss(logits, cb)

            self.losses_ = run_steps(net.parameters(), len(X), joint_loss, cfg, checkpoint)
        else:
            def concept_loss(idx, step):
                return net.concept_loss(net.concept_logits(to_tensor(X[idx])), C_t[idx])

            defer = y is not None
            # with a label stage still to come, evaluate only once it is trained
            self.losses_ = run_steps(list(net.trunk.parameters()) + list(net.heads.parameters()), len(X),
                                     concept_loss, cfg, None if defer else checkpoint)
            if defer:
                net.eval()
                if self.regime == "independent":
                    inputs = net.one_hot(C_t)
                else:
                    inputs = torch.as_tensor(predict_batched(net.concept_probs, X))

                def label_loss(idx, step):
                    return F.cross_entropy(net.label(inputs[idx]), y_t[idx])

                label_cfg = TrainConfig(lr=self.lr, batch_size=self.batch_size, epochs=self.epochs,
                                        steps=self.label_steps or self.steps, optimizer=self.optimizer,
                                        seed=self.seed + 1)
                net.train()
                self.label_losses_ = run_steps(net.label.parameters(), len(X), label_loss, label_cfg)
                checkpoint(len(self.losses_))
        net.eval()
        return self

    def _record(self, step, X, C, y=None):
        per, _ = concept_accuracy(self.predict_concept_indices(X), C, self.concept_names_)
        task = None
        if y is not None and self.n_classes_:
            task = float((self.predict(X) == np.asarray(y)).mean())
        self.history_.append(step, per, task)

    # ---- inference

    def _check_images(self, X):
        check_is_fitted(self, "net_")
        X = check_array(X, allow_nd=True, dtype=np.float32)
        if X.shape[1:] != self.image_shape_:
            raise ValueError(f"expected images of shape {self.image_shape_}, got {X.shape[1:]}")
        return X

    def _concept_probs(self, X) -> np.ndarray:
        return predict_batched(self.net_.concept_probs, self._check_images(X))

    def predict_concepts(self, X) -> list[np.ndarray]:
        """Per-concept probability vectors, one (N, cardinality) array per head."""
        probs = self._concept_probs(X)
        return np.split(probs, np.cumsum(self.cardinalities_)[:-1], axis=1)

    def predict_concept_indices(self, X) -> np.ndarray:
        return np.stack([p.argmax(axis=1) for p in self.predict_concepts(X)], axis=1)

    def _label_from(self, inputs: np.ndarray) -> np.ndarray:
        if not self.n_classes_:
            raise ValueError("model was fit without task labels")
        return predict_batched(lambda t: F.softmax(self.net_.label(t), dim=1), inputs.astype(np.float32))

    def predict_proba(self, X) -> np.ndarray:
        return self._label_from(self._concept_probs(X))

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)

    def predict_proba_from_concepts(self, C) -> np.ndarray:
        """Label distribution with the true concepts fed as one-hot head outputs."""
        check_is_fitted(self, "net_")
        C = torch.as_tensor(np.asarray(C, dtype=np.int64))
        return self._label_from(self.net_.one_hot(C).numpy())

    def concept_score(self, X, C) -> float:
        return concept_accuracy(self.predict_concept_indices(X), C)[1]


def train_cbm(X, C, y=None, regime="joint", lam=1.0, cfg: Optional[TrainConfig] = None, eval_set=None,
              **kwargs):
    """Fit a :class:`ConceptBottleneckModel`; returns ``(model, history)``."""
    cfg = cfg or TrainConfig()
    fit_keys = ("cardinalities", "n_classes", "concept_names")
    fit_kwargs = {k: kwargs.pop(k) for k in fit_keys if k in kwargs}
    model = ConceptBottleneckModel(regime=regime, lam=lam, lr=cfg.lr, batch_size=cfg.batch_size,
                                   epochs=cfg.epochs, steps=cfg.steps, optimizer=cfg.optimizer,
                                   seed=cfg.seed, eval_every=cfg.eval_every, **kwargs)
    model.fit(X, C, y, eval_set=eval_set, **fit_kwargs)
    return model, model.history_


def cbm_predict_concepts(model: ConceptBottleneckModel, X) -> list[np.ndarray]:
    return model.predict_concepts(X)


def cbm_predict_label(model: ConceptBottleneckModel, X) -> np.ndarray:
    return model.predict_proba(X)
