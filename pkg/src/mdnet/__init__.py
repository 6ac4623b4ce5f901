"""MDNet: multi-decoder encoder-decoder network for abdominal CT organ segmentation."""

from mdnet.config import EncoderConfig, ModelConfig, TrainConfig, PreprocessConfig
from mdnet.model import MDNet, SegOutputs, count_params_and_macs, predict

__all__ = [
    "EncoderConfig",
    "ModelConfig",
    "TrainConfig",
    "PreprocessConfig",
    "MDNet",
    "SegOutputs",
    "count_params_and_macs",
    "predict",
]

__version__ = "0.1.0"
