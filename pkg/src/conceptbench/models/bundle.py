"""Saving and loading trained models.

A bundle directory holds ``model.json`` (kind, hyper-parameters, fitted
metadata, schema fingerprint), ``weights.bin`` (versioned checkpoint blob) and,
for models with tree components, one tree-ensemble JSON file per component.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np

from ..learners.networks import NetworkSpec, build_network, state_from_bytes, state_to_bytes
from ..learners.trees import GradientBoostedTrees, TreeEnsemble
from .cbm import CBMNet, ConceptBottleneckModel
from .cme import ConceptExtractor, TaskClassifier
from .probes import ConceptProbe
from .vae import BetaVAE, VAENet, WeaklySupervisedVAE

BUNDLE_FORMAT = "conceptbench.model/1"
KINDS = {"cbm": ConceptBottleneckModel, "vae": BetaVAE, "wvae": WeaklySupervisedVAE,
         "task_classifier": TaskClassifier, "cme": ConceptExtractor}


def _jsonable(v):
    if isinstance(v, tuple):
        return list(v)
    if isinstance(v, np.generic):
        return v.item()
    return v


def _kind(model) -> str:
    for name, cls in KINDS.items():
        if type(model) is cls:
            return name
    raise TypeError(f"cannot bundle {type(model).__name__}")


def _params(model) -> dict:
    return {k: _jsonable(v) for k, v in model.get_params(deep=False).items() if k != "source"}


def save_model(model, path, *, schema_hash: Optional[str] = None, probe: Optional[ConceptProbe] = None) -> Path:
    """Write ``model`` (and an optional latent probe) to directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    kind = _kind(model)
    params = _params(model)
    manifest = {"format": BUNDLE_FORMAT, "kind": kind, "regime": params.get("regime"), "lam": params.get("lam"),
                "beta": params.get("beta"), "averaging": params.get("averaging"),
                "layer_id": params.get("layer_id"), "schema_hash": schema_hash, "params": params}
    if kind == "cme":
        manifest["n_labelled"] = int(model.n_labelled_)
        save_model(model.source, path / "source")
        model.concept_probe_.save(path / "concept_trees.json")
        (path / "label_tree.json").write_text(model.label_model_.ensemble_.to_json(), encoding="utf-8")
    else:
        net = model.net_
        manifest["image_shape"] = list(model.image_shape_)
        if kind == "cbm":
            manifest.update(cardinalities=model.cardinalities_,
                            n_classes=model.n_classes_, concept_names=model.concept_names_)
        elif kind in ("vae", "wvae"):
            manifest.update(likelihood=model.likelihood_, mode=model.mode)
        else:
            manifest.update(spec=model.spec_.to_dict())
        (path / "weights.bin").write_bytes(state_to_bytes(net.state_dict()))
    if probe is not None:
        probe.save(path / "probe.json")
        manifest["probe"] = "probe.json"
    (path / "model.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return path


def load_model(path):
    """Inverse of :func:`save_model`; returns ``(model, probe or None)``."""
    path = Path(path)
    manifest = json.loads((path / "model.json").read_text(encoding="utf-8"))
    if manifest.get("format") != BUNDLE_FORMAT:
        raise ValueError(f"unsupported bundle format {manifest.get('format')!r}")
    kind = manifest["kind"]
    params = manifest["params"]
    for key in ("channels", "label_hidden"):
        if key in params:
            params[key] = tuple(params[key])
    if kind == "cme":
        source, _ = load_model(path / "source")
        model = ConceptExtractor(source, **{k: v for k, v in params.items() if k != "source"})
        model.concept_probe_ = ConceptProbe.load(path / "concept_trees.json")
        label = TreeEnsemble.from_json((path / "label_tree.json").read_text(encoding="utf-8"))
        model.label_model_ = GradientBoostedTrees(model.label_max_depth, model.label_n_estimators,
                                                  model.learning_rate, n_classes=label.n_classes)
        model.label_model_.ensemble_ = label
        model.label_model_.classes_ = np.arange(label.n_classes)
        model.label_model_.n_features_in_ = label.n_features
        model.classes_ = model.label_model_.classes_
        model.n_labelled_ = manifest["n_labelled"]
        model.n_features_in_ = model.concept_probe_.n_features_in_
    else:
        model = KINDS[kind](**params)
        h, w, c = manifest["image_shape"]
        model.image_shape_ = (h, w, c)
        if kind == "cbm":
            model.cardinalities_ = manifest["cardinalities"]
            model.n_classes_ = manifest["n_classes"]
            model.classes_ = np.arange(model.n_classes_)
            model.concept_names_ = manifest["concept_names"]
            net = CBMNet((c, h, w), model.cardinalities_, model.n_classes_, model.channels, model.hidden,
                         model.label_hidden)
        elif kind in ("vae", "wvae"):
            model.likelihood_ = manifest["likelihood"]
            net = VAENet((c, h, w), model.latent_dim, model.channels, model.hidden, model.likelihood_)
        else:
            model.spec_ = NetworkSpec.from_dict(manifest["spec"])
            model.classes_ = np.arange(model.spec_.output_shape[0])
            net = build_network(model.spec_)
        net.load_state_dict(state_from_bytes((path / "weights.bin").read_bytes()))
        net.eval()
        model.net_ = net
    probe = ConceptProbe.load(path / manifest["probe"]) if manifest.get("probe") else None
    return model, probe


def bundle_manifest(path) -> dict:
    return json.loads((Path(path) / "model.json").read_text(encoding="utf-8"))


__all__ = ["BUNDLE_FORMAT", "bundle_manifest", "load_model", "save_model"]
