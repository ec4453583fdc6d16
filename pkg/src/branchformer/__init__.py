"""Branchformer encoder: parallel attention and cgMLP branches, merged per block.

Runs on a small numpy autodiff engine in float64. The submodules are:
``tensor`` (autodiff), ``nn`` (fused layers), ``attention``, ``cgmlp``,
``encoder`` (blocks, merges, branch dropout, pruning), ``checkpoint``,
``train``, ``analysis``, ``bench`` and ``cli``.
"""
from .encoder import EncoderConfig, EncoderParams, encoder_forward, init_encoder, prune_to_cgmlp
from .errors import BranchformerError
from .tensor import Tensor, no_grad

__all__ = [
    "BranchformerError",
    "EncoderConfig",
    "EncoderParams",
    "Tensor",
    "encoder_forward",
    "init_encoder",
    "no_grad",
    "prune_to_cgmlp",
]
__version__ = "0.1.0"
