"""Discrete-time quantum feedback with memory-dependent signal processing."""
from .backend import NAME as BACKEND
from .core import (
    Instrument,
    KrausSet,
    ParametricChannels,
    QuantumChannel,
    TableChannels,
    ToleranceSettings,
    apply_channel,
    born_probabilities,
    channel_at,
    instrument_apply,
    matrix_exponential,
    post_measurement_state,
)
from .models import MODELS, ModelSpec, build_model
from .resolved import (
    ResolvedState,
    det_step,
    expectation,
    init_resolved,
    marginal_quantum,
    propagate,
    signal_distribution,
)
from .signals import (
    MomentumParams,
    NonMarkovianRule,
    SignalLattice,
    UpdateRule,
    kernel_limit_check,
    markovian_embed_history,
    markovian_embed_momentum,
    project_to_lattice,
    reconstruct_history,
)
from .trajectories import ensemble_estimate, enumerate_paths, run_trajectory, sample_step

__version__ = "0.1.0"
