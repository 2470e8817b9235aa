"""Phonological speech tokenizer at desk scale.

A differentiable k-means bottleneck trained with a weighted mix of a CTC
recognition loss and a feature-reconstruction loss, on synthetic speech
features with known content, prosody and speaker factors.
"""
__version__ = "0.1.0"

from .diffkm import Codebook, DiffKmConfig, bitrate, quantize
from .errors import PhonotokError
from .estimator import PhonologicalTokenizer
from .model import ModelConfig, TokenizerModel
from .synthgen import GenConfig, gen_dataset
from .trainer import TrainConfig

__all__ = [
    "Codebook",
    "DiffKmConfig",
    "GenConfig",
    "ModelConfig",
    "PhonologicalTokenizer",
    "PhonotokError",
    "TokenizerModel",
    "TrainConfig",
    "bitrate",
    "gen_dataset",
    "quantize",
    "__version__",
]
