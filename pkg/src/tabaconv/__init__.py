"""Self-contained tabular time-series representation learning toolkit.

A small numpy-backed autodiff engine, a CSV-to-window feature pipeline with
calendar-aware timestamp decomposition, field+row masking for
reconstruction-style pretraining, an attention-augmented 1-D convolution
encoder, training/fine-tuning loops, and a synthetic labeled-transaction
generator used for end-to-end verification.
"""

from . import masking, model, schema, synth, tensor, training
from .errors import (
    ConfigError,
    ContractError,
    IntegrityError,
    NumericError,
    SchemaError,
    ShapeError,
    UnsupportedVersionError,
)
from .tensor import Tensor, GradReport, grad_check, use_dtype

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "GradReport",
    "grad_check",
    "use_dtype",
    "masking",
    "model",
    "schema",
    "synth",
    "tensor",
    "training",
    "ConfigError",
    "ContractError",
    "IntegrityError",
    "NumericError",
    "SchemaError",
    "ShapeError",
    "UnsupportedVersionError",
    "__version__",
]
