"""CPU inference engine, data pipeline and metrics for a lightweight wood panel defect detector."""

from .detect import Box, Detection, decode, iou, nms
from .estimator import LetterboxTransformer, WoodDefectDetector
from .evaluation import CLASS_NAMES, average_precision, evaluate, mean_ap
from .model import Model, ModelSpec, build_model, count_flops, count_params, forward, init_weights

__version__ = "0.1.0"

__all__ = [
    "Box",
    "Detection",
    "decode",
    "iou",
    "nms",
    "LetterboxTransformer",
    "WoodDefectDetector",
    "CLASS_NAMES",
    "average_precision",
    "evaluate",
    "mean_ap",
    "Model",
    "ModelSpec",
    "build_model",
    "count_flops",
    "count_params",
    "forward",
    "init_weights",
]
