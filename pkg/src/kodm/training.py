"""Local denoising score matching with Monte-Carlo transition samples.

Each step draws a timestep, pushes data through the forward chain to
``theta_{t-1}`` (or reads it from a trajectory cache), samples ``M`` wrapped
Gaussian transitions and regresses the network onto their exact wrapped-normal
scores.  Parameters are updated with AdamW and tracked by an EMA.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, NumericalError
from .kuramoto_sde import GLOBAL, Schedule, Topology, TrajectoryCache, _as_items, drift, simulate_chain
from .phase_core import PhaseField, stream
from .records import write_csv
from .score_net import NetConfig, ScoreNet, init_net, save_checkpoint, score_backward, score_forward
from .wrapped_gaussian import WrappedGaussianParams, wg_sample, wg_score

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "TrainState",
    "dsm_loss",
    "optimizer_step",
    "ema_update",
    "train",
    "ValidationProbe",
    "make_probes",
    "validation_loss",
    "LOSS_LOG_HEADER",
]

LOSS_LOG_HEADER = ("step", "t", "loss", "val_loss")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    ema_decay: float = 0.995
    mc_samples: int = 5
    batch_size: int = 16
    max_steps: int = 1000
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 10.0
    rng_seed: int = 0
    truncation: int = 3
    # 0 disables
    checkpoint_every: int = 0
    val_every: int = 0
    val_probes: int = 32

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise DomainError("learning_rate must be > 0")
        if not 0 <= self.ema_decay < 1:
            raise DomainError("ema_decay must lie in [0, 1)")
        if self.mc_samples < 1:
            raise DomainError("mc_samples must be >= 1")
        if self.batch_size < 1 or self.max_steps < 0:
            raise DomainError("batch_size must be >= 1 and max_steps >= 0")


@dataclass(eq=False)
class TrainState:
    net: ScoreNet
    ema_params: np.ndarray
    m: np.ndarray
    v: np.ndarray
    step_count: int = 0

    @classmethod
    def fresh(cls, net: ScoreNet) -> "TrainState":
        z = np.zeros_like(net.params)
        return cls(net, net.params.copy(), z, z.copy(), 0)

    def ema_net(self) -> ScoreNet:
        return self.net.with_params(self.ema_params)


def _transition(theta_prev: PhaseField, t: int, sched: Schedule, topology: Topology, truncation=3):
    if not 1 <= t <= sched.T:
        raise DomainError(f"training timestep {t} outside [1, {sched.T}]")
    j = t - 1
    mean = theta_prev.phases + drift(theta_prev, j, sched, topology)
    return WrappedGaussianParams(mean, float(sched.noise_var[j]), truncation)


def dsm_loss(
    net: ScoreNet,
    theta_prev: PhaseField,
    t: int,
    sched: Schedule,
    topology: Topology = GLOBAL,
    M: int = 5,
    rng_seed=0,
    params=None,
    truncation: int = 3,
    with_grad: bool = True,
):
    """Monte-Carlo DSM loss and its parameter gradient.

    ``loss = mean_{m, batch} w_t * mean_sites (s(theta_t^m, t) - target)^2``,
    where ``target`` is the wrapped-Gaussian score of ``theta_t^m`` given
    ``theta_{t-1}`` and ``w_t`` is the variance of that transition.
    """
    if M < 1:
        raise DomainError("M must be >= 1")
    t = int(t)
    kernel = _transition(theta_prev, t, sched, topology, truncation)
    rng = stream(rng_seed)
    weight = float(sched.noise_var[t - 1])
    samples = np.stack([wg_sample(kernel, rng).phases for _ in range(M)])
    stacked = PhaseField(samples, lattice=theta_prev.lattice)
    mean = np.broadcast_to(kernel.mean, samples.shape)
    target = wg_score(stacked, WrappedGaussianParams(mean, kernel.variance, truncation))
    pred = score_forward(net, stacked, t, params)
    resid = pred - target
    n = theta_prev.n
    count = resid.size // n
    loss = weight * float(np.sum(resid * resid)) / (n * count)
    if not with_grad:
        return loss, None
    grad = score_backward(net, stacked, t, (2.0 * weight / (n * count)) * resid, params)
    return loss, grad


def optimizer_step(state: TrainState, gradient, config: TrainConfig) -> TrainState:
    """Bias-corrected adaptive-moment update with decoupled weight decay (in place)."""
    g = np.asarray(gradient, dtype=np.float64)
    bad = np.flatnonzero(~np.isfinite(g))
    if bad.size:
        layer = state.net.layer_of(int(bad[0]))
        raise NumericalError(f"non-finite gradient at step {state.step_count} in layer {layer}")
    k = state.step_count + 1
    b1, b2 = config.beta1, config.beta2
    state.m = b1 * state.m + (1.0 - b1) * g
    state.v = b2 * state.v + (1.0 - b2) * g * g
    m_hat = state.m / (1.0 - b1 ** k)
    v_hat = state.v / (1.0 - b2 ** k)
    p = state.net.params
    p = p - config.learning_rate * config.weight_decay * p
    p = p - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps)
    state.net = state.net.with_params(p)
    state.step_count = k
    return state


def ema_update(state: TrainState, decay: float) -> TrainState:
    if not 0 <= decay < 1:
        raise DomainError("EMA decay must lie in [0, 1)")
    state.ema_params = decay * state.ema_params + (1.0 - decay) * state.net.params
    return state


@dataclass(frozen=True, eq=False)
class ValidationProbe:
    theta_prev: PhaseField
    t: int
    seed: int


def make_probes(dataset, sched, topology, count, seed) -> list:
    """Fixed ``(theta_{t-1}, t, seed)`` probes for a low-variance progress metric."""
    items = _as_items(dataset)
    rng = stream(seed, 2)
    probes = []
    for k in range(count):
        item = items[int(rng.integers(len(items)))]
        t = int(rng.integers(1, sched.T + 1))
        theta_prev = simulate_chain(item, t - 1, sched, topology, seed, sample_id=1_000_000 + k)
        probes.append(ValidationProbe(theta_prev, t, 2_000_000 + k))
    return probes


def validation_loss(net: ScoreNet, probes, sched, topology, M=5, truncation=3, params=None) -> float:
    total = 0.0
    for p in probes:
        total += dsm_loss(net, p.theta_prev, p.t, sched, topology, M, p.seed, params,
                          truncation, with_grad=False)[0]
    return total / len(probes)


def _stack(fields) -> PhaseField:
    return PhaseField(np.stack([f.phases for f in fields]), lattice=fields[0].lattice)


def train(
    dataset,
    sched: Schedule,
    topology: Topology,
    net_config: NetConfig,
    train_config: TrainConfig,
    cache: TrajectoryCache | None = None,
    sink=None,
    probes=None,
    init=None,
    on_step=None,
    record: str | None = None,
):
    """Run the training loop; returns ``(state, log_rows)``.

    Rows are ``(step, t, loss, val_loss)`` with ``val_loss`` ``None`` between
    probes.  ``sink`` is an optional directory receiving ``loss.csv`` and
    periodic checkpoints, both stamped with ``record``.  ``init`` overrides
    the initial network.
    """
    cfg = train_config
    items = _as_items(dataset)
    if not items:
        raise DomainError("train needs a nonempty dataset")
    data = _stack(items)
    net = init if init is not None else init_net(net_config, stream(cfg.rng_seed, 0))
    state = TrainState.fresh(net)
    rows = []
    if cfg.max_steps == 0:
        return state, rows

    by_t = None
    if cache is not None:
        cache.check(sched, topology)
        if not len(cache):
            raise DomainError("trajectory cache is empty")
        by_t = {}
        for idx, rec in enumerate(cache.records):
            by_t.setdefault(rec.t, []).append(idx)
        cache_ts = np.array(sorted(by_t))

    if probes is None and cfg.val_every > 0:
        probes = make_probes(items, sched, topology, cfg.val_probes, cfg.rng_seed)

    def val():
        return validation_loss(state.net, probes, sched, topology, cfg.mc_samples, cfg.truncation,
                               params=state.ema_params)

    if sink is not None:
        os.makedirs(sink, exist_ok=True)

    for step in range(cfg.max_steps):
        rng = stream(cfg.rng_seed, 1, step)
        if by_t is None:
            t = int(rng.integers(1, sched.T + 1))
            idx = rng.integers(len(items), size=cfg.batch_size)
            theta0 = PhaseField(data.phases[idx], lattice=data.lattice)
            theta_prev = simulate_chain(theta0, t - 1, sched, topology, rng)
        else:
            t = int(cache_ts[rng.integers(cache_ts.size)])
            pool = by_t[t]
            picks = rng.integers(len(pool), size=cfg.batch_size)
            theta_prev = _stack([cache.records[pool[i]].theta_prev for i in picks])
        loss, grad = dsm_loss(state.net, theta_prev, t, sched, topology, cfg.mc_samples, rng,
                              truncation=cfg.truncation)
        if not np.isfinite(loss):
            raise NumericalError(f"non-finite loss at step {step} (t={t})")
        norm = float(np.sqrt(np.sum(grad * grad)))
        if cfg.grad_clip and norm > cfg.grad_clip:
            grad = grad * (cfg.grad_clip / norm)
        optimizer_step(state, grad, cfg)
        ema_update(state, cfg.ema_decay)
        val_loss = None
        if probes and cfg.val_every and (step + 1) % cfg.val_every == 0:
            val_loss = val()
            log.info("step %d  loss %.5f  val %.5f", step + 1, loss, val_loss)
        rows.append((step + 1, t, loss, val_loss))
        if on_step is not None:
            on_step(state, rows[-1])
        if sink is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(os.path.join(sink, f"checkpoint-{step + 1:07d}.kodm"), state.net, state.ema_params,
                            record)
    if sink is not None:
        save_checkpoint(os.path.join(sink, "final.kodm"), state.net, state.ema_params, record)
        write_csv(os.path.join(sink, "loss.csv"), LOSS_LOG_HEADER, rows, record)
    return state, rows
