"""Recurrent visual attention models at desk scale.

Glimpse-based recurrent classifier trained with a hybrid supervised plus
score-function estimator, with single-label and left-to-right sequence
decoding. See the CLI (`dram gen/train/eval/inspect-ckpt`) for end-to-end
runs, the estimator module for the sklearn-style wrappers, and the tensor
module for the underlying taped autodiff engine.
"""

__version__ = "0.1.0"

from .config import Config, ModelConfig, TrainConfig, parse_config
from .estimator import GlimpseClassifier, SequenceTranscriber
from .model import ModelParams, init_params, model_step
from .sensor import GlimpseObservation, SensorConfig, extract_foveal_glimpse
from .tensor import Tape, Tensor

__all__ = [
    "Config", "ModelConfig", "TrainConfig", "parse_config",
    "GlimpseClassifier", "SequenceTranscriber",
    "ModelParams", "init_params", "model_step",
    "GlimpseObservation", "SensorConfig", "extract_foveal_glimpse",
    "Tape", "Tensor",
    "__version__",
]
