"""Per-concept tree-ensemble classifiers on fixed feature vectors.

Used both as latent probes on VAE posterior means and as the concept
extractors of post-hoc concept models.
"""

from __future__ import annotations

import json
import warnings
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from ..learners.trees import TreeEnsemble, fit_tree_ensemble

PROBE_FORMAT = "conceptbench.concept_probe/1"


class ConstantConceptWarning(UserWarning):
    """A concept had a single observed value; its predictor is constant."""


class ConceptProbe(BaseEstimator):
    """One boosted-tree classifier per concept; ``predict`` returns an (N, K) index array."""

    def __init__(self, max_depth=4, n_estimators=100, learning_rate=0.1, max_bins=64):
        self.max_depth = max_depth
        self.n_estimators = n_estimators
        self.learning_rate = learning_rate
        self.max_bins = max_bins

    def fit(self, Z, C, cardinalities: Optional[Sequence[int]] = None, names: Optional[Sequence[str]] = None):
        Z = check_array(Z, dtype=np.float64)
        C = check_array(C, dtype=np.int64, ensure_min_samples=1)
        if len(Z) != len(C):
            raise ValueError(f"{len(Z)} feature rows but {len(C)} concept rows")
        if len(Z) < 2:
            raise ValueError("need at least two samples")
        k = C.shape[1]
        cards = list(cardinalities) if cardinalities is not None else [int(C[:, j].max()) + 1 for j in range(k)]
        if len(cards) != k:
            raise ValueError("cardinalities must match the number of concepts")
        if np.any(C < 0) or np.any(C >= np.asarray(cards)):
            raise ValueError("concept values out of range")
        self.names_ = list(names) if names is not None else [str(j) for j in range(k)]
        self.cardinalities_ = [int(c) for c in cards]
        self.ensembles_ = []
        for j in range(k):
            observed = np.unique(C[:, j])
            if len(observed) == 1 and cards[j] > 1:
                warnings.warn(f"concept {self.names_[j]!r} has a single observed value {observed[0]}; "
                              "using a constant predictor", ConstantConceptWarning, stacklevel=2)
            self.ensembles_.append(fit_tree_ensemble(
                Z, C[:, j], self.max_depth, self.n_estimators, self.learning_rate,
                n_classes=cards[j], max_bins=self.max_bins))
        self.n_features_in_ = Z.shape[1]
        return self

    def _check(self, Z):
        check_is_fitted(self, "ensembles_")
        Z = check_array(Z, dtype=np.float64)
        if Z.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {Z.shape[1]}")
        return Z

    def predict_proba(self, Z) -> list[np.ndarray]:
        Z = self._check(Z)
        return [e.predict_proba(Z) for e in self.ensembles_]

    def predict(self, Z) -> np.ndarray:
        return np.stack([p.argmax(axis=1) for p in self.predict_proba(Z)], axis=1)

    def score(self, Z, C) -> float:
        return float((self.predict(Z) == np.asarray(C)).mean())

    # ---- serialization

    def to_dict(self) -> dict:
        check_is_fitted(self, "ensembles_")
        return {"format": PROBE_FORMAT, "params": self.get_params(), "names": self.names_,
                "cardinalities": self.cardinalities_, "n_features": self.n_features_in_,
                "ensembles": [e.to_dict() for e in self.ensembles_]}

    @classmethod
    def from_dict(cls, d: dict) -> "ConceptProbe":
        if d.get("format") != PROBE_FORMAT:
            raise ValueError(f"unsupported probe format {d.get('format')!r}")
        probe = cls(**d["params"])
        probe.names_ = list(d["names"])
        probe.cardinalities_ = list(d["cardinalities"])
        probe.n_features_in_ = int(d["n_features"])
        probe.ensembles_ = [TreeEnsemble.from_dict(e) for e in d["ensembles"]]
        return probe

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict()), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "ConceptProbe":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


LatentProbe = ConceptProbe


def fit_latent_probe(latents, concepts, cardinalities=None, names=None, **params) -> ConceptProbe:
    """Fit per-concept probes on posterior means."""
    return ConceptProbe(**params).fit(latents, concepts, cardinalities, names)


def probe_predict(probe: ConceptProbe, latents) -> np.ndarray:
    return probe.predict(latents)
