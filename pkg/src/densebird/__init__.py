"""DenseNet bird-audio detection on log-Mel filterbank images, in plain numpy."""

from .dsp import FbankImage, WaveBuffer, extract_features, load_wav, stft
from .model import ArchConfig, Model, build_model, load_checkpoint, save_checkpoint
from .train import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "ArchConfig",
    "FbankImage",
    "Model",
    "TrainConfig",
    "WaveBuffer",
    "build_model",
    "extract_features",
    "load_checkpoint",
    "load_wav",
    "save_checkpoint",
    "stft",
    "train",
]
