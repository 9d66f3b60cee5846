"""anoref: test-time refinement of patch-level anomaly maps into
pixel-level segmentations, trained group by group on self-synthesized
pseudo-anomalies."""

from .decoder import ArdModel, ard_forward
from .metrics import ScoredSet, auroc, average_precision, evaluate_image, evaluate_pixel, f1_max
from .pgt import PgtConfig, dice_loss, partition_groups, run_pgt, select_pseudo_normals
from .scorer import CoarseAnomalyMap, PatchFeatureMap, extract_patch_features, image_score, mutual_score
from .synth import SynthPair, paste_anomaly, perlin_mask, procedural_texture, synthesize_set
from .tensor import Graph, Tensor, backward, reset_grads, scalar, sgd_step

__version__ = "0.1.0"

__all__ = [
    "ArdModel",
    "ard_forward",
    "ScoredSet",
    "auroc",
    "average_precision",
    "evaluate_image",
    "evaluate_pixel",
    "f1_max",
    "PgtConfig",
    "dice_loss",
    "partition_groups",
    "run_pgt",
    "select_pseudo_normals",
    "CoarseAnomalyMap",
    "PatchFeatureMap",
    "extract_patch_features",
    "image_score",
    "mutual_score",
    "SynthPair",
    "paste_anomaly",
    "perlin_mask",
    "procedural_texture",
    "synthesize_set",
    "Graph",
    "Tensor",
    "backward",
    "reset_grads",
    "scalar",
    "sgd_step",
    "__version__",
]
