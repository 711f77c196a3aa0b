"""Hindered Transformer (HiT): a ViT variant whose class logit splits exactly over input patches."""

from .model import HiT, HiTConfig, forward_with_ledger
from .attribution import SaliencyMap, saliency_from_ledger, layerwise_contribution

__version__ = "0.1.0"

__all__ = [
    "HiT",
    "HiTConfig",
    "forward_with_ledger",
    "SaliencyMap",
    "saliency_from_ledger",
    "layerwise_contribution",
    "__version__",
]
