"""Negative-pruned ranked contrastive learning for unpaired image
translation, on a self-contained float64 tape engine.

Layout: `autodiff` is the tape and op set, `kernels` the swappable conv
backend, `features` the encoder taps and projection heads, `negatives` the
prune/rank selection, `losses` the contrastive and adversarial objectives,
`mi` the information-bound diagnostics, and `toy` a complete desk-scale
training testbed. `cli` wires it all to a command line.
"""

from . import kernels
from .autodiff import NonFiniteError, Tape, Tensor, backward, fd_check
from .features import EncoderSpec, FeatureStack, LayerFeatures, encode, project, sample_locations
from .losses import (
    GAN_VARIANTS,
    LossTerm,
    ObjectiveWeights,
    gan_loss_d,
    gan_loss_g,
    multilayer_rank_nce,
    patch_nce,
    rank_nce,
    total_objective,
)
from .mi import (
    MiReport,
    conditional_probs,
    contribution_ranking_check,
    infonce_bound,
    mi_report,
    multisample_bound,
)
from .negatives import (
    NegativeRow,
    NegativeSet,
    NoSurvivorsError,
    SimilarityMatrix,
    prune,
    rank_topk,
    select_negatives,
    similarity_matrix,
)
from .serialization import load_tensors, save_tensors

__version__ = "0.1.0"

__all__ = [
    "EncoderSpec",
    "FeatureStack",
    "GAN_VARIANTS",
    "LayerFeatures",
    "LossTerm",
    "MiReport",
    "NegativeRow",
    "NegativeSet",
    "NoSurvivorsError",
    "NonFiniteError",
    "ObjectiveWeights",
    "SimilarityMatrix",
    "Tape",
    "Tensor",
    "backward",
    "conditional_probs",
    "contribution_ranking_check",
    "encode",
    "fd_check",
    "gan_loss_d",
    "gan_loss_g",
    "infonce_bound",
    "kernels",
    "load_tensors",
    "mi_report",
    "multilayer_rank_nce",
    "multisample_bound",
    "patch_nce",
    "project",
    "prune",
    "rank_nce",
    "rank_topk",
    "sample_locations",
    "save_tensors",
    "select_negatives",
    "similarity_matrix",
    "total_objective",
]
