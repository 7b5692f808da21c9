"""Post-hoc concept extraction from a trained task network.

A :class:`TaskClassifier` is trained end-to-end on task labels.  Its hidden
activations at a chosen layer are then used as features for per-concept
boosted trees fit on a small labelled set, and a final tree ensemble maps the
predicted concepts to the task label.
"""

from __future__ import annotations

import logging
from typing import Optional, Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ..learners.networks import (
    DEFAULT_CHANNELS,
    DEFAULT_HIDDEN,
    NetworkSpec,
    TrainConfig,
    build_network,
    forward_until,
    layer_names,
    predict_batched,
    train_supervised,
)
from ..learners.trees import GradientBoostedTrees
from .probes import ConceptProbe

log = logging.getLogger(__name__)

DEFAULT_LAYER = "dense"


class TaskClassifier(ClassifierMixin, BaseEstimator):
    """Convolutional classifier trained directly on task labels."""

    def __init__(self, channels=DEFAULT_CHANNELS, hidden=DEFAULT_HIDDEN, lr=1e-3, batch_size=64, epochs=10,
                 steps=None, optimizer="adaptive_moment", seed=0):
        self.channels = channels
        self.hidden = hidden
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.steps = steps
        self.optimizer = optimizer
        self.seed = seed

    def fit(self, X, y, n_classes: Optional[int] = None):
        X = check_array(X, allow_nd=True, dtype=np.float32)
        y = np.asarray(y, dtype=np.int64)
        if X.ndim != 4 or y.shape != (len(X),):
            raise ValueError("expected (N, H, W, C) images and one label per image")
        n_classes = n_classes or int(y.max()) + 1
        h, w, c = X.shape[1:]
        self.spec_ = NetworkSpec("conv_encoder", (c, h, w), (n_classes,), tuple(self.channels), self.hidden)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.seed)
            self.net_ = build_network(self.spec_)
        cfg = TrainConfig(lr=self.lr, batch_size=self.batch_size, epochs=self.epochs, steps=self.steps,
                          optimizer=self.optimizer, seed=self.seed)
        _, self.losses_ = train_supervised(self.net_, X, y, "sparse_categorical_ce", cfg)
        self.image_shape_ = (h, w, c)
        self.classes_ = np.arange(n_classes)
        return self

    def _check_images(self, X):
        check_is_fitted(self, "net_")
        X = check_array(X, allow_nd=True, dtype=np.float32)
        if X.shape[1:] != self.image_shape_:
            raise ValueError(f"expected images of shape {self.image_shape_}, got {X.shape[1:]}")
        return X

    def predict_proba(self, X):
        return predict_batched(lambda t: torch.softmax(self.net_(t), dim=1), self._check_images(X))

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)

    @property
    def layers(self) -> list[str]:
        check_is_fitted(self, "net_")
        return layer_names(self.net_)

    def features(self, X, layer: str = DEFAULT_LAYER) -> np.ndarray:
        """Flattened activations after ``layer``."""
        if layer not in self.layers:
            raise ValueError(f"invalid layer {layer!r}; choose from {self.layers}")
        X = self._check_images(X)
        return predict_batched(lambda t: forward_until(self.net_, t, layer).flatten(1), X)


def extract_features(source: TaskClassifier, layer_id: str, X) -> np.ndarray:
    return source.features(X, layer_id)


class ConceptExtractor(ClassifierMixin, BaseEstimator):
    """Concept model read off a trained :class:`TaskClassifier`.

    ``fit(X_labelled, C_labelled, X_full, y_full)`` fits one tree ensemble per
    concept on the labelled set's features, then a tree ensemble from the
    predicted (argmax) concepts of ``X_full`` to ``y_full``.  When ``y_full``
    is omitted the source model's own predictions serve as labels.
    """

    def __init__(self, source: TaskClassifier = None, layer_id=DEFAULT_LAYER, max_depth=4, n_estimators=100,
                 learning_rate=0.1, label_max_depth=4, label_n_estimators=100):
        self.source = source
        self.layer_id = layer_id
        self.max_depth = max_depth
        self.n_estimators = n_estimators
        self.learning_rate = learning_rate
        self.label_max_depth = label_max_depth
        self.label_n_estimators = label_n_estimators

    def fit(self, X, C, X_full=None, y_full=None, *, cardinalities: Optional[Sequence[int]] = None,
            concept_names: Optional[Sequence[str]] = None):
        if self.source is None:
            raise ValueError("a trained source model is required")
        check_is_fitted(self.source, "net_")
        C = np.asarray(C)
        if len(C) == 0:
            raise ValueError("labelled set is empty")
        feats = self.source.features(X, self.layer_id)
        self.concept_probe_ = ConceptProbe(self.max_depth, self.n_estimators, self.learning_rate).fit(
            feats, C, cardinalities, concept_names)
        self.n_labelled_ = len(C)
        self.n_features_in_ = feats.shape[1]
        X_full = X if X_full is None else X_full
        if y_full is None:
            y_full = self.source.predict(X_full)
        self.label_model_ = GradientBoostedTrees(self.label_max_depth, self.label_n_estimators,
                                                 self.learning_rate, n_classes=len(self.source.classes_))
        self.label_model_.fit(self.predict_concept_indices(X_full), y_full)
        self.classes_ = self.label_model_.classes_
        return self

    def predict_concepts(self, X) -> list[np.ndarray]:
        check_is_fitted(self, "concept_probe_")
        return self.concept_probe_.predict_proba(self.source.features(X, self.layer_id))

    def predict_concept_indices(self, X) -> np.ndarray:
        return np.stack([p.argmax(axis=1) for p in self.predict_concepts(X)], axis=1)

    def predict_proba(self, X):
        check_is_fitted(self, "label_model_")
        return self.label_model_.predict_proba(self.predict_concept_indices(X))

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)


def train_cme(source: TaskClassifier, layer_id, X_labelled, C_labelled, X_full=None, y_full=None,
              cfg: Optional[dict] = None, **fit_kwargs) -> ConceptExtractor:
    return ConceptExtractor(source, layer_id, **(cfg or {})).fit(X_labelled, C_labelled, X_full, y_full,
                                                                 **fit_kwargs)
