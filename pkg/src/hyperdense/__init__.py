"""Hyper-densely connected multi-stream 3-D FCNs for multi-modal segmentation, in numpy."""
from .network import (
    PRESETS,
    ArchitectureSpec,
    Network,
    PermutationSpec,
    backward,
    build_network,
    count_parameters,
    describe_wiring,
    forward,
)

__version__ = "0.1.0"
