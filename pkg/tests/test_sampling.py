import math

import numpy as np
import pytest

from kodm.errors import DomainError, NumericalError
from kodm.fp_oracle import FPGrid, Frozen, fp_solve
from kodm.kuramoto_sde import GLOBAL, REFERENCE_ONLY, drift, linear_schedule, local, preset
from kodm.phase_core import PhaseField, VonMisesParams, circular_distance, i0, von_mises_density
from kodm.sampling import (
    NllConfig,
    exact_trace,
    generate,
    hutchinson_trace,
    invert_ode_step,
    nll,
    prior_for,
    reverse_drift,
    reverse_ode_step,
    reverse_sde_step,
)
from kodm.score_net import NetConfig, init_net

CFG = NetConfig(input_sites=6, hidden_widths=(12,), time_embed_dim=4, horizon=100)


def random_net(cfg=CFG, seed=0, scale=0.5):
    net = init_net(cfg, seed)
    return net.with_params(np.random.default_rng(seed).normal(0, scale, net.size))


def field(rng, shape=(4, 6), lattice=False):
    return PhaseField(rng.uniform(-math.pi, math.pi, shape), lattice=lattice)


# -- prior ---------------------------------------------------------------------------


def test_prior_kappa(global100):
    p = prior_for(global100)
    assert p.vm.kappa == pytest.approx((0.03 + 0.045) / 0.05, rel=1e-12)
    assert p.vm.mu == global100.psi_ref
    ks = [prior_for(global100, r).vm.kappa for r in (0.0, 0.25, 0.5, 1.0)]
    assert np.all(np.diff(ks) > 0)
    assert ks[0] == pytest.approx(0.045 / 0.05)
    with pytest.raises(DomainError):
        prior_for(global100, 1.5)


# -- reverse steps -----------------------------------------------------------------------


def test_reverse_drift_zero_score_negates_forward(rng, global100):
    f = field(rng)
    for t in (1, 50, 100):
        assert np.array_equal(reverse_drift(None, f, t, global100), -drift(f, t - 1, global100, GLOBAL))
    with pytest.raises(DomainError):
        reverse_drift(None, f, 0, global100)


def test_sde_and_ode_drifts_differ_by_one_score_term(rng, global100):
    net = random_net()
    f = field(rng)
    t = 37
    ode = reverse_drift(net, f, t, global100)
    sde = reverse_drift(net, f, t, global100, score_coef=2.0)
    zero = reverse_drift(None, f, t, global100)
    assert np.allclose(sde - ode, ode - zero, atol=1e-15)


def test_analytic_callable_score(rng, global100):
    f = field(rng)
    s = lambda fld, t: np.cos(fld.phases) * t
    got = reverse_drift(s, f, 10, global100)
    assert np.allclose(got, -drift(f, 9, global100, GLOBAL) + global100.D[9] * 10 * np.cos(f.phases), atol=1e-15)


def test_reverse_sde_step_noise(rng, global100):
    f = PhaseField(np.zeros((20_000, 1)))
    out = reverse_sde_step(None, f, 100, global100, REFERENCE_ONLY, rng_seed=1)
    # reference drift vanishes at psi_ref = 0, leaving pure noise of variance 2D
    assert np.var(out.phases) == pytest.approx(global100.noise_var[99], rel=0.03)


@pytest.mark.parametrize("topology", [GLOBAL, local(1)])
def test_ode_step_invertible(topology, rng):
    sched = preset("global", 100) if topology.kind == "global" else preset("local", 100)
    cfg = NetConfig(input_sites=6, hidden_widths=(12,), time_embed_dim=4, arch="conv", lattice_shape=(2, 3)) \
        if topology.kind == "local" else CFG
    net = random_net(cfg, 1)
    f = field(rng, (4, 2, 3), True) if topology.kind == "local" else field(rng)
    for t in (1, 50, 100):
        y = reverse_ode_step(net, f, t, sched, topology)
        back = invert_ode_step(net, y, t, sched, topology)
        assert np.max(circular_distance(back.phases, f.phases)) < 1e-8


def test_inversion_failure_names_step(rng, global100):
    # a strong score makes the fixed-point map expansive
    net = random_net(seed=2, scale=40.0)
    y = field(rng)
    with pytest.raises(NumericalError, match="step 100"):
        invert_ode_step(net, y, 100, global100, max_iterations=3, tolerance=1e-300)


# -- generation ----------------------------------------------------------------------------------


def test_generate_deterministic_and_thread_independent(global100):
    net = random_net(scale=0.2)
    a = generate(net, global100, GLOBAL, 300, "sde", rng_seed=4, threads=1)
    b = generate(net, global100, GLOBAL, 300, "sde", rng_seed=4, threads=3)
    assert np.array_equal(a.phases, b.phases)
    assert a.phases.shape == (300, 6)
    c = generate(net, global100, GLOBAL, 300, "sde", rng_seed=5)
    assert not np.array_equal(a.phases, c.phases)


def test_generate_prefix_stable(global100):
    # sample i depends only on its own streams
    a = generate(None, global100, GLOBAL, 5, "sde", rng_seed=2, field_shape=(3,))
    b = generate(None, global100, GLOBAL, 300, "sde", rng_seed=2, field_shape=(3,))
    assert np.array_equal(a.phases, b.phases[:5])


def test_generate_trajectory(global100):
    samples, traj = generate(None, global100, GLOBAL, 4, "ode", rng_seed=1, field_shape=(2, 3), trajectory=True)
    assert samples.lattice
    assert traj.shape == (101, 4, 2, 3)
    assert np.array_equal(traj[0], samples.phases)
    # ode with zero score: one step back from T is -f
    theta_T = PhaseField(traj[100], lattice=True)
    assert np.allclose(traj[99], reverse_ode_step(None, theta_T, 100, global100).phases, atol=0)


def test_generate_validation(global100):
    with pytest.raises(DomainError):
        generate(None, global100, GLOBAL, 0, field_shape=(2,))
    with pytest.raises(DomainError):
        generate(None, global100, GLOBAL, 2, mode="euler", field_shape=(2,))
    with pytest.raises(DomainError):
        generate(None, global100, GLOBAL, 2)
    with pytest.raises(DomainError):
        generate(None, global100, GLOBAL, 2, rng_seed=np.random.default_rng(0), field_shape=(2,))


def test_zero_score_sde_returns_prior_spread():
    # with no drift and no score the reverse SDE only adds noise to the prior draw
    sched = linear_schedule(10, (0.01, 0.01), (0.0, 0.0), (0.0, 0.0), warn=False)
    out = generate(None, sched, REFERENCE_ONLY, 4000, "sde", rng_seed=3, field_shape=(1,))
    z = np.exp(1j * out.phases).mean()
    assert abs(z) < 0.05


# -- traces and likelihood -----------------------------------------------------------------


def test_hutchinson_matches_exact_trace(rng, global100):
    net = random_net(seed=3)
    f = field(rng, (3, 6))
    est = hutchinson_trace(net, f, 60, global100, GLOBAL, probes=64, rng_seed=1)
    ex = exact_trace(net, f, 60, global100, GLOBAL)
    se = est.std(axis=0, ddof=1) / math.sqrt(64)
    assert np.all(np.abs(est.mean(axis=0) - ex) <= 2 * se)


def test_exact_trace_matches_analytic_jacobian(rng, global100):
    # zero score: b = -f, so dJ_ii = (K/n) sum_{j != i} cos(theta_j - theta_i) + K_ref cos(psi_ref - theta_i)
    f = field(rng, (2, 6))
    th = f.phases
    t = 80
    j = t - 1
    K, Kr = global100.coupling[j], global100.ref_coupling[j]
    diag = (K / 6) * (np.sum(np.cos(th[:, None, :] - th[:, :, None]), axis=2) - 1.0) + Kr * np.cos(global100.psi_ref - th)
    expect = np.sum(diag, axis=1)
    assert np.allclose(exact_trace(None, f, t, global100), expect, atol=1e-9)


def test_hutchinson_exact_for_single_site(global100):
    f = PhaseField(np.array([[0.3], [-2.0]]))
    est = hutchinson_trace(None, f, 5, global100, REFERENCE_ONLY, probes=3, rng_seed=0)
    assert np.allclose(est, exact_trace(None, f, 5, global100, REFERENCE_ONLY)[None], atol=1e-14)


def test_uniform_limit_nll_identity(rng):
    sched = linear_schedule(30, (1e-3, 0.1), (0.0, 0.0), (0.0, 0.0), warn=False)
    for n in (1, 6):
        f = field(rng, (5, n))
        res = nll(None, f, sched, GLOBAL, NllConfig(hutchinson_probes=2), rng_seed=0)
        assert np.max(np.abs(res.nats - n * math.log(2 * math.pi))) < 1e-9


def test_nll_deterministic_and_fields(rng, global100):
    net = random_net(scale=0.1)
    f = field(rng, (3, 6))
    a = nll(net, f, global100, GLOBAL, NllConfig(hutchinson_probes=2), rng_seed=7)
    b = nll(net, f, global100, GLOBAL, NllConfig(hutchinson_probes=2), rng_seed=7)
    assert np.array_equal(a.nats, b.nats)
    assert a.nats.shape == (3,) and np.all(a.stderr > 0)
    assert np.allclose(a.nats, -(a.log_prior - a.trace_sum))
    # forward ODE map lands where the reverse ODE starts
    back = a.theta_T
    for t in range(global100.T, 0, -1):
        back = reverse_ode_step(net, back, t, global100)
    assert np.max(circular_distance(back.phases, f.phases)) < 1e-7


def grid_score(grid):
    lp = np.log(grid.density)
    d = grid.delta
    der = (np.roll(lp, -1) - np.roll(lp, 1)) / (2 * d)
    c0 = grid.centers[0]

    def f(theta):
        x = (np.asarray(theta) - c0) / d
        i = np.floor(x).astype(int)
        w = x - i
        return (1 - w) * der[i % grid.bins] + w * der[(i + 1) % grid.bins]

    return f


def test_exact_score_nll_matches_entropy():
    """With the true marginal score, E_p0[nll] approaches the entropy of p0.

    Single oscillator, K = 0: the marginals come from the Fokker-Planck oracle
    and the expectation is taken by quadrature on a grid.
    """
    sched = preset("global", 100).with_coupling(0.0)
    kappa, mu = 2.0, 1.0
    g0 = FPGrid.from_function(lambda th: np.exp(kappa * np.cos(th - mu)), 720)
    scores = [grid_score(g) for g in fp_solve(g0, sched, Frozen(0.0))]
    oracle = lambda fld, t: scores[t](fld.phases)
    x = -math.pi + (np.arange(360) + 0.5) * (2 * math.pi / 360)
    res = nll(oracle, PhaseField(x[:, None]), sched, REFERENCE_ONLY, NllConfig(hutchinson_probes=1), 0,
              prior_for(sched))
    w = von_mises_density(x, VonMisesParams(mu, kappa)) * (2 * math.pi / 360)
    expected_nll = float(np.sum(w * res.nats))
    a = i0(kappa)
    i1 = (float(np.i0(kappa + 1e-6)) - float(np.i0(kappa - 1e-6))) / 2e-6
    entropy = math.log(2 * math.pi * a) - kappa * i1 / a
    assert abs(expected_nll - entropy) < 0.1
