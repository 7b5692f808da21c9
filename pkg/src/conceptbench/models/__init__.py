from .bundle import bundle_manifest, load_model, save_model
from .cbm import ConceptBottleneckModel, cbm_predict_concepts, cbm_predict_label, train_cbm
from .cme import ConceptExtractor, TaskClassifier, extract_features, train_cme
from .gaussian import (
    GaussianPosterior,
    SharedSet,
    adaptive_average,
    kl_gaussian,
    select_shared_set,
    shared_set_from_divergence,
)
from .probes import ConceptProbe, LatentProbe, fit_latent_probe, probe_predict
from .vae import BetaVAE, WeaklySupervisedVAE, decode, elbo, encode, train_vae, train_wvae

__all__ = [
    "BetaVAE",
    "ConceptBottleneckModel",
    "ConceptExtractor",
    "ConceptProbe",
    "GaussianPosterior",
    "LatentProbe",
    "SharedSet",
    "TaskClassifier",
    "WeaklySupervisedVAE",
    "adaptive_average",
    "bundle_manifest",
    "cbm_predict_concepts",
    "cbm_predict_label",
    "decode",
    "elbo",
    "encode",
    "extract_features",
    "fit_latent_probe",
    "kl_gaussian",
    "load_model",
    "probe_predict",
    "save_model",
    "select_shared_set",
    "shared_set_from_divergence",
    "train_cbm",
    "train_cme",
    "train_vae",
    "train_wvae",
]
