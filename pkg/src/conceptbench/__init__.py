"""Concept-learning benchmark: synthetic concept datasets, concept bottleneck
models, post-hoc concept extraction, weakly-supervised VAEs and the protocols
that compare them."""

__version__ = "0.1.0"

from .config import ExperimentConfig, load_config
from .datasets import ConceptSchema, build_schema, generate_dataset, reduced_schema
from .metrics import MetricSeries, concept_accuracy
from .tasks import make_task

__all__ = [
    "ConceptSchema",
    "ExperimentConfig",
    "MetricSeries",
    "__version__",
    "build_schema",
    "concept_accuracy",
    "generate_dataset",
    "load_config",
    "make_task",
    "reduced_schema",
]
