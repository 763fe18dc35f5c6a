from .base import BackendError, CapabilityError, Denoiser, DenoiserCapabilities, DenoiserQuery, predict
from .external import BackendUnavailableError, external_adapter, external_available
from .toy import ToyArchitecture, ToyDenoiser
from .training import (MixtureDataset, TrainConfig, TrainingDivergedError, TrainingThresholdError, VoxelViewDataset,
                       train_toy_denoiser)

__all__ = [
    "BackendError", "BackendUnavailableError", "CapabilityError", "Denoiser", "DenoiserCapabilities",
    "DenoiserQuery", "MixtureDataset", "ToyArchitecture", "ToyDenoiser", "TrainConfig", "TrainingDivergedError",
    "TrainingThresholdError", "VoxelViewDataset", "external_adapter", "external_available", "predict",
    "train_toy_denoiser",
]
