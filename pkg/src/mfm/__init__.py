"""Flow-assisted adaptive MCMC sampling of unnormalized densities.

The sampler mutates an ensemble of chains with local Langevin steps and
occasional non-local proposals routed through a continuous normalizing
flow, while the flow itself is trained on the fly against the chain's own
samples with a simulation-free flow-matching objective.  An ESS-driven
temperature ladder bridges from a simple base density to the target.
"""

from .diagnostics import DiagnosticsReport, ImqKernel
from .driver import ChainEnsemble, MfmConfig, RunArtifacts, run_atsmc, run_fm_oracle, run_mfm
from .flow import AugmentedState, FlowParams, OdeConfig
from .kernels import KernelOutcome, MalaConfig
from .targets import TargetDensity
from .tempering import TemperState

__all__ = [
    "AugmentedState", "ChainEnsemble", "DiagnosticsReport", "FlowParams",
    "ImqKernel", "KernelOutcome", "MalaConfig", "MfmConfig", "OdeConfig",
    "RunArtifacts", "TargetDensity", "TemperState",
    "run_atsmc", "run_fm_oracle", "run_mfm",
]
