"""Two-stream hybrid CNN/transformer image classifier on a numpy autodiff core."""
__version__ = "0.1.0"

from .backbone import PRESETS, ModelConfig, desk_config, micro_config, paper_config
from .checkpoint import import_weights, load_checkpoint, save_checkpoint
from .data import DatasetSplit, Sample, load_dataset, split, synth_generate
from .errors import (CheckpointError, ConfigError, ContractError, CurveError, DatasetError,
                     HSCMTError, NumericalError, ShapeError)
from .estimator import HSCMTClassifier, JacobiPCA
from .evalkit import confusion, confidence_interval, metrics, pca_project, roc_pr
from .gradcheck import grad_check, run_suite
from .model import HSCMTNet
from .tensor import Parameter, Tape, Tensor
from .training import TrainConfig, cross_entropy, fit, lr_at

__all__ = [
    "PRESETS", "ModelConfig", "desk_config", "micro_config", "paper_config",
    "import_weights", "load_checkpoint", "save_checkpoint",
    "DatasetSplit", "Sample", "load_dataset", "split", "synth_generate",
    "CheckpointError", "ConfigError", "ContractError", "CurveError", "DatasetError",
    "HSCMTError", "NumericalError", "ShapeError",
    "HSCMTClassifier", "JacobiPCA",
    "confusion", "confidence_interval", "metrics", "pca_project", "roc_pr",
    "grad_check", "run_suite", "HSCMTNet", "Parameter", "Tape", "Tensor",
    "TrainConfig", "cross_entropy", "fit", "lr_at",
]
