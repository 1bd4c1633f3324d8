"""Multi-rate residual vector quantization for low-frame-rate audio tokens."""

from .errors import (
    ConfigurationError, CorruptTokenError, EmptyInputError, InsufficientDataError, MreqError,
    TrainingDivergenceError,
)
from .metrics import bitrate, codebook_perplexity, token_budget
from .mrvq import MrvqConfig, build_mrvq, config_from_table, mrvq_forward, rvq_config
from .numerics import FeatureMap, StridedLinearMap
from .vq import Codebook, RvqStack, rvq_decode, rvq_encode

__all__ = [
    "Codebook", "ConfigurationError", "CorruptTokenError", "EmptyInputError", "FeatureMap",
    "InsufficientDataError", "MreqError", "MrvqConfig", "RvqStack", "StridedLinearMap",
    "TrainingDivergenceError", "bitrate", "build_mrvq", "codebook_perplexity", "config_from_table",
    "mrvq_forward", "rvq_config", "rvq_decode", "rvq_encode", "token_budget",
]
__version__ = "0.1.0"
