from .gradcheck import check_gradients, relative_error
from .networks import (
    NetworkSpec,
    TrainConfig,
    TrainingDiverged,
    build_network,
    count_parameters,
    init_network,
    load_checkpoint,
    save_checkpoint,
    train_supervised,
)
from .trees import GradientBoostedTrees, TreeEnsemble, ensemble_predict, fit_tree_ensemble

__all__ = [
    "GradientBoostedTrees",
    "NetworkSpec",
    "TrainConfig",
    "TrainingDiverged",
    "TreeEnsemble",
    "build_network",
    "check_gradients",
    "count_parameters",
    "ensemble_predict",
    "fit_tree_ensemble",
    "init_network",
    "load_checkpoint",
    "relative_error",
    "save_checkpoint",
    "train_supervised",
]
