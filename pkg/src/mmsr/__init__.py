"""Self-supervised cross-modal super-resolution by mutual modulation."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ArgumentError,
    ConfigError,
    FormatError,
    MMSRError,
    NumericError,
    StateError,
    TrainingError,
)
from .images import Image, add_gaussian_noise, degrade_pool, load, save, synth_pair  # noqa: E402
from .network import ModelConfig, build, forward  # noqa: E402
from .trainer import TrainConfig, TrainReport, cycle_loss, lr_at, rmse, run_ablation, train_pair  # noqa: E402

__all__ = [
    "ArgumentError", "ConfigError", "FormatError", "MMSRError", "NumericError", "StateError", "TrainingError",
    "Image", "add_gaussian_noise", "degrade_pool", "load", "save", "synth_pair",
    "ModelConfig", "build", "forward",
    "TrainConfig", "TrainReport", "cycle_loss", "lr_at", "rmse", "run_ablation", "train_pair",
]
