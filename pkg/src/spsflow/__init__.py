"""Periodic pattern-sparse CNN weights: pruning, compilation to the PPW
format, a systolic-array simulator and storage/energy models."""

from .compiler import PpwLayer, compile_chain, compile_layer, decode_ppw, next_layer_reorder
from .pruning import KernelVariant, PpsConfig, apply_periodic_mask, make_config
from .systolic import EventCounters, SimResult, run_network, simulate_sps
from .tensors import ConvGeometry, FeatureMap, Tensor4, conv2d_dense

__version__ = "0.1.0"

__all__ = [
    "ConvGeometry", "EventCounters", "FeatureMap", "KernelVariant", "PpsConfig", "PpwLayer",
    "SimResult", "Tensor4", "apply_periodic_mask", "compile_chain", "compile_layer", "conv2d_dense",
    "decode_ppw", "make_config", "next_layer_reorder", "run_network", "simulate_sps",
]
