"""Saddle search on the averaged dynamics of slow-fast stochastic systems.

Gentlest ascent dynamics driven either by sampled averages of a frozen fast
process (heterogeneous multiscale method) or by simultaneously integrated,
boosted fast replicas (seamless coupling).
"""

from .harness.reference import ReferenceSaddle, make_reference
from .gad import DirectionPair, Flow, GadConfig, MacroState, gad_run
from .hmm import HmmConfig, MSchedule, hmm_run, hmm_step
from .model import (
    CoupledAllenCahnModel,
    ExtendedLagrangianModel,
    ModelError,
    TWOD_MINIMA,
    TWOD_SADDLES,
    SlowFastModel,
    TwoDimOUModel,
    UnsupportedOperation,
    make_model,
)
from .sampling import MicroConfig, estimate_effective, sample_equilibrium
from .scm import ScmConfig, ScmState, scm_run, scm_step

__all__ = [
    "CoupledAllenCahnModel",
    "DirectionPair",
    "ExtendedLagrangianModel",
    "Flow",
    "GadConfig",
    "HmmConfig",
    "MSchedule",
    "MacroState",
    "MicroConfig",
    "ModelError",
    "ReferenceSaddle",
    "ScmConfig",
    "ScmState",
    "SlowFastModel",
    "TWOD_MINIMA",
    "TWOD_SADDLES",
    "TwoDimOUModel",
    "UnsupportedOperation",
    "estimate_effective",
    "gad_run",
    "hmm_run",
    "hmm_step",
    "make_model",
    "make_reference",
    "sample_equilibrium",
    "scm_run",
    "scm_step",
]
