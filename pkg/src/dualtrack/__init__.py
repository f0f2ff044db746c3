"""Dual-branch fully-transformer visual tracker with exact cost accounting.

Two sibling branches — one for the template crop, one for the search crop —
share a locally-windowed attention backbone, exchange information through
global and cross-attention fusion blocks, and feed a convolution-free
corner-style head that scores every search token and regresses a box.
Everything runs on a small float64 autodiff core built on numpy, so forward
FLOPs and gradients are exactly reproducible.
"""

from .attention import (AttentionWeights, TokenMap, cross_attention,
                        cyclic_shift, global_attention, local_attention,
                        relative_position_index, shifted_window_mask,
                        window_partition, window_reverse)
from .backbone import ModelConfig, TrackerModel, patch_embed, patch_merge
from .costmodel import (CostReport, count_flops, count_params,
                        flops_attention, flops_global_paper, flops_local_paper)
from .heads import (BoundingBox, PredictionMaps, assign_labels, cls_loss,
                    giou, iou, mlp_head, reg_loss, total_loss)
from .tensor import (ConfigError, FlopCounter, Parameter, ShapeError, Tensor,
                     load_checkpoint, no_grad, save_checkpoint,
                     set_debug_checks, trunc_normal)
from .tracking import (CropTransform, Sequence, SynthSpec, TrackOptions,
                       TrackerState, crop_region, decode_prediction,
                       load_groundtruth, load_results, load_sequence, metrics,
                       save_results, save_sequence, similarity_map, st_token,
                       synth_sequence, track_sequence)
from .train import (SGD, TrainRecord, TrainSettings, TrainingDiverged,
                    make_fixed_pairs, sample_pair, train)

__version__ = "0.1.0"

__all__ = [
    "Tensor", "Parameter", "ShapeError", "ConfigError", "no_grad",
    "FlopCounter", "set_debug_checks", "trunc_normal", "save_checkpoint",
    "load_checkpoint",
    "TokenMap", "AttentionWeights", "relative_position_index",
    "window_partition", "window_reverse", "cyclic_shift",
    "shifted_window_mask", "local_attention", "global_attention",
    "cross_attention",
    "ModelConfig", "TrackerModel", "patch_embed", "patch_merge",
    "BoundingBox", "PredictionMaps", "iou", "giou", "mlp_head",
    "assign_labels", "cls_loss", "reg_loss", "total_loss",
    "CostReport", "flops_local_paper", "flops_global_paper",
    "flops_attention", "count_params", "count_flops",
    "CropTransform", "crop_region", "decode_prediction", "TrackOptions",
    "TrackerState", "track_sequence", "st_token", "metrics", "SynthSpec",
    "Sequence", "synth_sequence", "save_sequence", "load_sequence",
    "load_groundtruth", "save_results", "load_results", "similarity_map",
    "TrainSettings", "TrainingDiverged", "TrainRecord", "SGD",
    "sample_pair", "make_fixed_pairs", "train",
    "__version__",
]
