"""RFN-Nest infrared/visible image fusion on a small numpy autograd engine."""
from .errors import ConfigError, CorpusError, FormatError, InputError, NumericError, RFNError, ShapeError
from .networks import ArchitectureConfig, ModelWeights, fuse_forward, init_weights
from .training import TrainConfig, train_one_stage, train_stage1, train_stage2

__version__ = "0.1.0"

__all__ = [
    "ArchitectureConfig", "ModelWeights", "TrainConfig", "fuse_forward", "init_weights",
    "train_stage1", "train_stage2", "train_one_stage",
    "RFNError", "ConfigError", "CorpusError", "FormatError", "InputError", "NumericError", "ShapeError",
]
