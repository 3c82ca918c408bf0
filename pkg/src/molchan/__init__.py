"""molchan: voxel-lattice channel models for diffusive molecular communication.

Four mutually cross-checking routes to the mean receiver output (bound
complexes over time): stochastic jump-process simulation, moment ODEs,
continuum diffusion-kernel transfer functions, and discrete lattice
Green's-function transfer functions.
"""

from molchan.netmodel import (
    BurstTrain,
    EmissionSchedule,
    InvalidNetwork,
    LatticeSpec,
    MichaelisMenten,
    NetworkSpec,
    ReceiverSpec,
    TransmitterSpec,
    expand_schedule,
    jump_rate,
    neighbors,
    require_valid,
    validate,
)

__all__ = [
    "BurstTrain",
    "EmissionSchedule",
    "InvalidNetwork",
    "LatticeSpec",
    "MichaelisMenten",
    "NetworkSpec",
    "ReceiverSpec",
    "TransmitterSpec",
    "expand_schedule",
    "jump_rate",
    "neighbors",
    "require_valid",
    "validate",
]

__version__ = "0.1.0"
