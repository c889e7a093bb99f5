"""Strip-convolution encoder / content-aware upsampling decoder for small-structure segmentation, in numpy."""

from .data import PhantomSpec, SegmentationSample, generate, split
from .metrics import ConfusionMatrix, iou
from .model import FAMSeg, ModelConfig, segmentation_loss
from .optim import Optimizer, Phase, Schedule, lr_fit
from .tensor import Tensor
from .train import TrainConfig, evaluate, infer, load_model, save_model, train

__version__ = "0.1.0"

__all__ = [
    "ConfusionMatrix",
    "FAMSeg",
    "ModelConfig",
    "Optimizer",
    "Phase",
    "PhantomSpec",
    "Schedule",
    "SegmentationSample",
    "Tensor",
    "TrainConfig",
    "evaluate",
    "generate",
    "infer",
    "iou",
    "load_model",
    "lr_fit",
    "save_model",
    "segmentation_loss",
    "split",
    "train",
]
