"""From-scratch CNN engine for aerial disaster classification.

Four variants of one seven-block trunk (basenet, scnet, scfcnet, ernet)
plus the surrounding pipeline: dataset scanning and balanced batching,
the training recipe, evaluation and latency benchmarks, Grad-CAM
explanations, and a single-file model format. Everything numeric is
plain numpy; the HTTP service and CLI sit on top.

Set ERNET_THREADS to cap math-library threads; it must be honored before
numpy first loads, which is why the cap is applied here at import time.
"""

import os as _os

_threads = _os.environ.get("ERNET_THREADS")
if _threads:
    for _var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
        "VECLIB_MAXIMUM_THREADS",
    ):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"

from . import data, errors, explain, models, ops, tensor, train  # noqa: E402
from .errors import (  # noqa: E402
    ArgumentError,
    DatasetError,
    ErnetError,
    EvalError,
    FormatError,
    ShapeError,
    StateError,
    TrainingDiverged,
)
from .models import VARIANTS, build_model, load_model, save_model  # noqa: E402
from .tensor import make_rng, spawn_rngs  # noqa: E402

__all__ = [
    "ArgumentError",
    "DatasetError",
    "ErnetError",
    "EvalError",
    "FormatError",
    "ShapeError",
    "StateError",
    "TrainingDiverged",
    "VARIANTS",
    "__version__",
    "build_model",
    "data",
    "errors",
    "explain",
    "load_model",
    "make_rng",
    "models",
    "ops",
    "save_model",
    "spawn_rngs",
    "tensor",
    "train",
]
