"""Graph-wired CNNs whose edge weights are predicted per sample by lightweight routers."""
from .graph import StageGraph, pattern_edges, validate
from .model import MODES, ArchConfig, Network, dynamic_forward, static_forward, thresholded_inference
from .routing import Router, ThresholdPolicy
from .tensor import Tensor, backward, no_grad

__all__ = [
    "MODES", "ArchConfig", "Network", "Router", "StageGraph", "Tensor", "ThresholdPolicy",
    "backward", "dynamic_forward", "no_grad", "pattern_edges", "static_forward",
    "thresholded_inference", "validate",
]
