"""Reverse-time generation and likelihood evaluation.

The learned score drives either the stochastic reverse update or its
deterministic (probability-flow style) counterpart.  ``net`` arguments accept a
``ScoreNet``, any callable ``(field, t) -> score`` (analytic oracles in the
tests), or ``None`` for the zero score.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._parallel import ordered_map
from .errors import DomainError, NumericalError
from .kuramoto_sde import GLOBAL, Schedule, Topology, drift
from .phase_core import PhaseField, VonMisesParams, circular_distance, stream, von_mises_log_density, von_mises_sample
from .score_net import ScoreNet, score_forward

__all__ = [
    "PriorSpec",
    "prior_for",
    "NllConfig",
    "NllResult",
    "reverse_sde_step",
    "reverse_ode_step",
    "invert_ode_step",
    "reverse_drift",
    "generate",
    "nll",
    "hutchinson_trace",
    "exact_trace",
]

# stream key prefixes
_PRIOR_KEY = 5
_REVERSE_KEY = 6
_PROBE_KEY = 7

CHUNK = 256


@dataclass(frozen=True)
class PriorSpec:
    vm: VonMisesParams
    r_assumed: float = 1.0


def prior_for(sched: Schedule, r_assumed: float = 1.0) -> PriorSpec:
    """von Mises prior at the terminal step: ``kappa = (K r + K_ref) / D`` at ``T-1``."""
    if not 0.0 <= r_assumed <= 1.0:
        raise DomainError("r_assumed must lie in [0, 1]")
    j = sched.T - 1
    kappa = (sched.coupling[j] * r_assumed + sched.ref_coupling[j]) / sched.D[j]
    return PriorSpec(VonMisesParams(sched.psi_ref, float(kappa)), float(r_assumed))


@dataclass(frozen=True)
class NllConfig:
    hutchinson_probes: int = 8
    jvp_epsilon: float = 1e-5
    max_iterations: int = 20
    tolerance: float = 1e-10

    def __post_init__(self):
        if self.hutchinson_probes < 1:
            raise DomainError("hutchinson_probes must be >= 1")
        if not self.jvp_epsilon > 0:
            raise DomainError("jvp_epsilon must be > 0")


def _score(net, field: PhaseField, t, params=None) -> np.ndarray:
    if net is None:
        return np.zeros(field.phases.shape)
    if isinstance(net, ScoreNet):
        return score_forward(net, field, t, params)
    return np.asarray(net(field, t), dtype=np.float64)


def _check_t(t, sched):
    t = int(t)
    if not 1 <= t <= sched.T:
        raise DomainError(f"reverse step t={t} outside [1, {sched.T}]")
    return t


def reverse_drift(net, field: PhaseField, t, sched: Schedule, topology: Topology = GLOBAL, params=None,
                  score_coef: float = 1.0) -> np.ndarray:
    """``-f(theta, t) + c * D_t * s(theta, t)`` evaluated at reverse step ``t``."""
    t = _check_t(t, sched)
    j = t - 1
    return -drift(field, j, sched, topology) + score_coef * sched.D[j] * _score(net, field, t, params)


def reverse_sde_step(net, field: PhaseField, t, sched: Schedule, topology: Topology = GLOBAL, rng_seed=0,
                     params=None) -> PhaseField:
    """``wrap(theta - f + 2D s + sqrt(2D) eps)``."""
    t = _check_t(t, sched)
    rng = stream(rng_seed)
    b = reverse_drift(net, field, t, sched, topology, params, score_coef=2.0)
    eps = rng.standard_normal(field.phases.shape)
    return field.replace(field.phases + b + np.sqrt(sched.noise_var[t - 1]) * eps)


def reverse_ode_step(net, field: PhaseField, t, sched: Schedule, topology: Topology = GLOBAL,
                     params=None) -> PhaseField:
    """``wrap(theta - f + D s)``; consumes no randomness."""
    return field.replace(field.phases + reverse_drift(net, field, t, sched, topology, params))


def invert_ode_step(net, target: PhaseField, t, sched: Schedule, topology: Topology = GLOBAL, params=None,
                    max_iterations: int = 20, tolerance: float = 1e-10) -> PhaseField:
    """Solve ``reverse_ode_step(theta) = target`` by ``theta <- wrap(target - b(theta))``."""
    y = target.phases
    theta = target
    for _ in range(max_iterations):
        new = target.replace(y - reverse_drift(net, theta, t, sched, topology, params))
        err = float(np.max(circular_distance(new.phases, theta.phases)))
        theta = new
        if err < tolerance:
            return theta
    raise NumericalError(f"ODE inversion did not converge at step {t} (residual {err:.3e})")


def _prior_batch(prior: PriorSpec, ids, field_shape, lattice, seed):
    n = int(np.prod(field_shape))
    rows = [von_mises_sample(prior.vm, n, stream(seed, _PRIOR_KEY, int(i))).phases for i in ids]
    return PhaseField(np.stack(rows).reshape((len(ids),) + tuple(field_shape)), lattice=lattice)


def _run_chunk(net, ids, sched, topology, mode, prior, field_shape, lattice, seed, params, keep):
    field = _prior_batch(prior, ids, field_shape, lattice, seed)
    states = [field.phases] if keep else None
    for t in range(sched.T, 0, -1):
        if mode == "sde":
            eps = np.stack([stream(seed, _REVERSE_KEY, int(i), t).standard_normal(field_shape) for i in ids])
            b = reverse_drift(net, field, t, sched, topology, params, score_coef=2.0)
            field = field.replace(field.phases + b + np.sqrt(sched.noise_var[t - 1]) * eps)
        else:
            field = reverse_ode_step(net, field, t, sched, topology, params)
        if keep:
            states.append(field.phases)
    return field.phases, (np.stack(states[::-1]) if keep else None)


def generate(
    net,
    sched: Schedule,
    topology: Topology,
    n_samples: int,
    mode: str = "sde",
    prior: PriorSpec | None = None,
    rng_seed=0,
    field_shape=None,
    lattice=None,
    params=None,
    trajectory: bool = False,
    threads=None,
):
    """Draw ``theta_T`` from the prior and run ``T`` reverse steps.

    Sample ``i`` uses its own streams, and work is split into fixed-size
    chunks, so results do not depend on the thread count.  With
    ``trajectory=True`` also returns an array indexed ``[t, sample, ...]``.
    """
    if n_samples < 1:
        raise DomainError("n_samples must be >= 1")
    if mode not in ("sde", "ode"):
        raise DomainError(f"unknown sampling mode {mode!r}")
    if isinstance(rng_seed, np.random.Generator):
        raise DomainError("generate needs an integer seed for per-sample streams")
    prior = prior_for(sched) if prior is None else prior
    if field_shape is None:
        if not isinstance(net, ScoreNet):
            raise DomainError("field_shape is required without a ScoreNet")
        cfg = net.config
        if cfg.lattice_shape is not None and cfg.lattice_shape[0] > 1:
            field_shape, lattice = cfg.lattice_shape, True if lattice is None else lattice
        else:
            field_shape = (cfg.input_sites,)
    field_shape = tuple(int(s) for s in field_shape)
    if lattice is None:
        lattice = len(field_shape) == 2
    chunks = [range(a, min(a + CHUNK, n_samples)) for a in range(0, n_samples, CHUNK)]
    out = ordered_map(
        lambda ids: _run_chunk(net, ids, sched, topology, mode, prior, field_shape, lattice, rng_seed, params,
                               trajectory),
        chunks,
        threads,
    )
    samples = PhaseField(np.concatenate([o[0] for o in out]), lattice=lattice)
    if trajectory:
        return samples, np.concatenate([o[1] for o in out], axis=1)
    return samples


# --------------------------------------------------------------------------
# likelihood


def _jvp(net, field, t, sched, topology, params, v, h):
    plus = PhaseField.wrapped(field.phases + h * v, field.lattice)
    minus = PhaseField.wrapped(field.phases - h * v, field.lattice)
    return (reverse_drift(net, plus, t, sched, topology, params)
            - reverse_drift(net, minus, t, sched, topology, params)) / (2.0 * h)


def hutchinson_trace(net, field: PhaseField, t, sched, topology=GLOBAL, probes=8, rng_seed=0, params=None,
                     h=1e-5):
    """Per-probe estimates ``eps^T J_b eps`` (Rademacher ``eps``), shape ``(probes,) + batch``."""
    rng = stream(rng_seed)
    axes = tuple(a + 1 for a in field.field_axes)
    est = []
    for _ in range(probes):
        v = rng.choice(np.array([-1.0, 1.0]), size=field.phases.shape)
        est.append(v * _jvp(net, field, t, sched, topology, params, v, h))
    return np.sum(np.stack(est), axis=axes)


def exact_trace(net, field: PhaseField, t, sched, topology=GLOBAL, params=None, h=1e-5):
    """Trace of ``J_b`` from central differences along every coordinate axis."""
    flat = field.flat_view()
    total = np.zeros(field.batch_shape)
    for i in range(field.n):
        e = np.zeros_like(flat)
        e[..., i] = 1.0
        e = e.reshape(field.phases.shape)
        total = total + _jvp(net, field, t, sched, topology, params, e, h).reshape(flat.shape)[..., i]
    return total


@dataclass(frozen=True, eq=False)
class NllResult:
    """Negative log-likelihood in nats (per batch item) with diagnostics.

    ``stderr`` is the Hutchinson standard error of the trace sum, and
    ``seam_crossings`` counts site updates along the path that wrapped.
    """

    nats: np.ndarray
    log_prior: np.ndarray
    trace_sum: np.ndarray
    stderr: np.ndarray
    seam_crossings: np.ndarray
    theta_T: PhaseField


def nll(net, theta0: PhaseField, sched: Schedule, topology: Topology = GLOBAL, cfg: NllConfig | None = None,
        rng_seed=0, prior: PriorSpec | None = None, params=None) -> NllResult:
    """Negative log-likelihood of ``theta0`` under the deterministic reverse map.

    The data are mapped to noise by inverting the reverse ODE step by step.
    With ``theta_{t-1} = theta_t + b(theta_t)`` at each step,
    ``log p(theta_0) = log p_prior(theta_T) - sum_t Tr J_b(theta_t, t)``
    to first order in ``J_b``.
    """
    cfg = NllConfig() if cfg is None else cfg
    prior = prior_for(sched) if prior is None else prior
    if isinstance(rng_seed, np.random.Generator):
        raise DomainError("nll needs an integer seed")
    field = theta0
    trace_sum = np.zeros(field.batch_shape)
    var_sum = np.zeros(field.batch_shape)
    seams = np.zeros(field.batch_shape, dtype=np.int64)
    P = cfg.hutchinson_probes
    axes = field.field_axes
    for t in range(1, sched.T + 1):
        prev = field
        field = invert_ode_step(net, prev, t, sched, topology, params, cfg.max_iterations, cfg.tolerance)
        raw = field.phases + reverse_drift(net, field, t, sched, topology, params)
        seams += np.sum((raw < -np.pi) | (raw >= np.pi), axis=axes)
        est = hutchinson_trace(net, field, t, sched, topology, P, stream(rng_seed, _PROBE_KEY, t), params,
                               cfg.jvp_epsilon)
        trace_sum += est.mean(axis=0)
        if P > 1:
            var_sum += est.var(axis=0, ddof=1) / P
    log_prior = np.sum(von_mises_log_density(field.phases, prior.vm), axis=axes)
    nats = -(log_prior - trace_sum)
    return NllResult(nats, log_prior, trace_sum, np.sqrt(var_sum), seams, field)
