"""Kuramoto orientation diffusion: score-based generation on periodic phase domains.

The forward process synchronizes coupled oscillators toward a von Mises
terminal state; a learned score drives the reverse desynchronization.
"""
from .errors import ConfigError, DomainError, FormatError, KodmError, NumericalError, StaleCacheError
from .fp_oracle import FPGrid, Frozen, SELF_CONSISTENT, ensemble_vs_fp, fp_solve, fp_step, quasi_stationary_density
from .kuramoto_sde import (
    GLOBAL,
    REFERENCE_ONLY,
    Schedule,
    Topology,
    TrajectoryCache,
    drift,
    forward_step,
    linear_schedule,
    local,
    precompute_cache,
    preset,
    read_cache,
    simulate_chain,
    write_cache,
)
from .phase_core import (
    OrderParameter,
    PhaseField,
    VonMisesParams,
    circular_distance,
    circular_w1,
    order_parameter,
    von_mises_density,
    von_mises_sample,
    wrap,
)
from .sampling import NllConfig, PriorSpec, generate, nll, prior_for, reverse_ode_step, reverse_sde_step
from .score_net import NetConfig, ScoreNet, init_net, load_checkpoint, save_checkpoint, score_backward, score_forward
from .training import TrainConfig, TrainState, dsm_loss, train
from .wrapped_gaussian import WrappedGaussianParams, wg_log_density, wg_sample, wg_score

__version__ = "0.1.0"
