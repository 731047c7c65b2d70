"""Neural extended Kalman filter: learnable dynamics trained through EKF/RTS inference."""

from .autodiff import ContractError, DecompositionError, DimensionError, Tape, Tensor
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (
    DuffingConfig,
    Normalization,
    TimeSeriesDataset,
    Trajectory,
    simulate_duffing,
    standardize,
)
from .ekf import ekf_filter, rollout, rts_smooth
from .elbo import batch_objective, total_loss
from .evaluation import anomaly_report, kmeans, nrmse, pca_project, rmse
from .gaussian import CovarianceParam, Gaussian, kl_divergence, log_prob
from .models import ModelConfig, NeuralEKF
from .predict import predict_arrays, predict_dataset
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ContractError",
    "CovarianceParam",
    "DecompositionError",
    "DimensionError",
    "DuffingConfig",
    "Gaussian",
    "ModelConfig",
    "NeuralEKF",
    "Normalization",
    "Tape",
    "Tensor",
    "TimeSeriesDataset",
    "TrainConfig",
    "Trajectory",
    "anomaly_report",
    "batch_objective",
    "ekf_filter",
    "kl_divergence",
    "kmeans",
    "load_checkpoint",
    "log_prob",
    "nrmse",
    "pca_project",
    "predict_arrays",
    "predict_dataset",
    "rmse",
    "rollout",
    "rts_smooth",
    "save_checkpoint",
    "simulate_duffing",
    "standardize",
    "total_loss",
    "train",
]
