"""Desk-scale laboratory for generating learned views (latent-space search and
perturbation over an analytic generator) and assimilating them into
contrastive training, with linear-probe / k-NN / mutual-information evaluation.
"""

__version__ = "0.1.0"

from .batching import IndexMap, MultiviewBatch, append_generated, build_two_view
from .losses import LossConfig, a2_loss, align_term, infonce_two_set, simclr_loss
from .modelzoo import (BlobGenerator, ConvDiscriminator, ConvEncoder, ConvInverter,
                       DifferentiableMap, IdentityMap, LinearMap, MlpPredictor,
                       RandomPerceptualNet, StyleMapper, encode, generate, grad_check)
from .viewgen import (CalibratedEpsilon, PerturbConfig, TransformConfig, WSearchConfig,
                      calibrate_epsilon, expert_transform, w_perturb, w_search,
                      w_search_online_1step)

__all__ = [
    "IndexMap", "MultiviewBatch", "append_generated", "build_two_view",
    "LossConfig", "a2_loss", "align_term", "infonce_two_set", "simclr_loss",
    "BlobGenerator", "ConvDiscriminator", "ConvEncoder", "ConvInverter",
    "DifferentiableMap", "IdentityMap", "LinearMap", "MlpPredictor",
    "RandomPerceptualNet", "StyleMapper", "encode", "generate", "grad_check",
    "CalibratedEpsilon", "PerturbConfig", "TransformConfig", "WSearchConfig",
    "calibrate_epsilon", "expert_transform", "w_perturb", "w_search",
    "w_search_online_1step",
    "__version__",
]
