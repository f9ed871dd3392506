"""Multi-task lesion segmentation and cancer classification on a small numpy autodiff engine."""

__version__ = "0.1.0"

from .model import BackboneConfig, MtlModel, backbone_forward, cnet_forward, mtl_forward, snet_forward
from .objectives import bce_with_logit, compute_class_weights, joint_loss, mean_dice, roc_auc, weighted_ce
from .phantom import PhantomConfig, Sample, generate_sample, load_dataset, write_dataset
from .tensor import Graph, Tensor
from .trainer import EvalReport, TrainConfig, evaluate, load_checkpoint, run_strategy, save_checkpoint

__all__ = [
    "BackboneConfig", "MtlModel", "backbone_forward", "cnet_forward", "mtl_forward", "snet_forward",
    "bce_with_logit", "compute_class_weights", "joint_loss", "mean_dice", "roc_auc", "weighted_ce",
    "PhantomConfig", "Sample", "generate_sample", "load_dataset", "write_dataset",
    "Graph", "Tensor",
    "EvalReport", "TrainConfig", "evaluate", "load_checkpoint", "run_strategy", "save_checkpoint",
]
