"""Box-supervised weakly supervised semantic segmentation on synthetic shapes.

Pipeline: generate a shape corpus with exact ground truth, rasterize or
CRF-refine box annotations into pixel pseudo-labels, estimate per-class
filling rates, then train a small FCN with class-wise attention masking and
a filling-rate guided adaptive loss.
"""

__version__ = "0.1.0"

from .dataset import (
    IGNORE,
    BoxAnnotation,
    ImageSample,
    SynthConfig,
    generate_synthetic,
    load_dataset,
    save_dataset,
    tight_box,
)
from .proposals import CrfParams, crf_refine, probmap_to_labels, rasterize_box_labels, unary_from_boxes
from .fillrate import FillRateTable, build_fill_rate_table, collect_fill_samples, mean_fill_rates
from .fcn import Architecture, ModelState, default_architecture, forward, init_model
from .losses import FrSelectionConfig, LossBreakdown, bcm_loss, fr_select, softmax_ce, total_loss
from .train import EvalReport, TrainConfig, evaluate_miou, run_ablation, train
from .estimator import BoxProposalGenerator, FillRateModel, WeakBoxSegmenter

__all__ = [
    "IGNORE",
    "BoxAnnotation",
    "ImageSample",
    "SynthConfig",
    "generate_synthetic",
    "save_dataset",
    "load_dataset",
    "tight_box",
    "CrfParams",
    "rasterize_box_labels",
    "unary_from_boxes",
    "crf_refine",
    "probmap_to_labels",
    "FillRateTable",
    "collect_fill_samples",
    "mean_fill_rates",
    "build_fill_rate_table",
    "Architecture",
    "ModelState",
    "default_architecture",
    "init_model",
    "forward",
    "FrSelectionConfig",
    "LossBreakdown",
    "fr_select",
    "softmax_ce",
    "bcm_loss",
    "total_loss",
    "TrainConfig",
    "EvalReport",
    "train",
    "evaluate_miou",
    "run_ablation",
    "BoxProposalGenerator",
    "FillRateModel",
    "WeakBoxSegmenter",
    "__version__",
]
