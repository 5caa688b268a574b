"""Retinal vessel and optic disc segmentation with a shared multi-stage CNN.

Pure numpy: layer primitives with hand-written backward passes, the two-head
network, class-balanced training, and the region/boundary evaluation protocol.
"""
from .errors import DRIUError
from .net import NetConfig, NetworkParams, TaskHead, backward, build_network, forward

__version__ = "0.1.0"

__all__ = ["DRIUError", "NetConfig", "NetworkParams", "TaskHead", "backward",
           "build_network", "forward"]
