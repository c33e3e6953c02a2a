"""Utility/privacy trade-off toolkit for mobility trajectories: preprocessing,
an adversarial recurrent autoencoder, evaluation metrics and Pareto sweeps."""

from .errors import ArtifactMismatchError, ConfigError, DataError, MobPrivacyError, NumericalError
from .model import RECOMMENDED_WEIGHTS, LagrangeWeights, ModelDims, PAEModel, build_standalone, loss_sum
from .pareto import ParetoPoint, SweepConfig, dominates, pareto_front, run_sweep
from .pipeline import PrepConfig, evaluate, prepare
from .training import TrainConfig, train_pae, train_standalone

__version__ = "0.1.0"

__all__ = [
    "ArtifactMismatchError", "ConfigError", "DataError", "MobPrivacyError", "NumericalError",
    "RECOMMENDED_WEIGHTS", "LagrangeWeights", "ModelDims", "PAEModel", "build_standalone", "loss_sum",
    "ParetoPoint", "SweepConfig", "dominates", "pareto_front", "run_sweep",
    "PrepConfig", "evaluate", "prepare", "TrainConfig", "train_pae", "train_standalone",
]
