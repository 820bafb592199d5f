"""Segmentation with raster-scan rethinker blocks, on plain numpy.

The package is a small but complete stack: a tape-based autograd core
(:mod:`rethseg.tensor`, :mod:`rethseg.ops`), patch slicing and the three
block variants (:mod:`rethseg.patches`, :mod:`rethseg.blocks`), the
encoder-decoder network (:mod:`rethseg.network`), a synthetic benchmark
whose paired classes only differ by context (:mod:`rethseg.data`), and
training, evaluation, ablation, checkpointing, and reporting on top.
"""

from .blocks import BLOCK_VARIANTS
from .checkpoint import load_checkpoint, restore_model, save_checkpoint
from .data import CoOccurrenceSpec, SegSample, generate_sample, window_oracle
from .errors import DataError, NumericError, UsageError
from .metrics import ConfusionMatrix, miou, pixel_acc
from .network import Model, RethNetConfig, StageConfig, build_model, default_config, forward
from .tensor import Tape, Tensor, grad_check, precision, set_precision
from .train import TrainConfig, ablate, evaluate, fit, predict

__version__ = "0.1.0"

__all__ = [
    "BLOCK_VARIANTS",
    "ConfusionMatrix",
    "CoOccurrenceSpec",
    "DataError",
    "Model",
    "NumericError",
    "RethNetConfig",
    "SegSample",
    "StageConfig",
    "Tape",
    "Tensor",
    "TrainConfig",
    "UsageError",
    "__version__",
    "ablate",
    "build_model",
    "default_config",
    "evaluate",
    "fit",
    "forward",
    "generate_sample",
    "grad_check",
    "load_checkpoint",
    "miou",
    "pixel_acc",
    "precision",
    "predict",
    "restore_model",
    "save_checkpoint",
    "set_precision",
    "window_oracle",
]
