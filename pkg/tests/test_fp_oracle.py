import math

import numpy as np
import pytest

from kodm.errors import DomainError, NumericalError
from kodm.fp_oracle import (
    SELF_CONSISTENT,
    FPGrid,
    Frozen,
    _check_mass,
    bin_centers,
    coarsen,
    density_rows,
    density_score,
    ensemble_vs_fp,
    fp_solve,
    fp_step,
    histogram,
    quasi_stationary_density,
    score_identity_check,
)
from kodm.kuramoto_sde import Schedule, linear_schedule, local
from kodm.phase_core import OrderParameter, tv_distance


def const_schedule(steps, noise, K=0.0, Kr=0.0, psi_ref=0.0):
    return Schedule(np.full(steps, noise), np.full(steps, K), np.full(steps, Kr), psi_ref)


def test_grid_validation():
    with pytest.raises(DomainError):
        FPGrid(np.array([0.5, 0.5]))
    with pytest.raises(DomainError):
        FPGrid(np.array([0.5, 0.6, -0.1]))
    with pytest.raises(DomainError):
        FPGrid(np.array([0.3, 0.3, 0.3]))
    g = FPGrid.uniform(8)
    assert g.bins == 8 and g.delta == pytest.approx(math.pi / 4)
    assert g.centers[0] == pytest.approx(-math.pi + math.pi / 8)
    assert g.order_parameter().r == pytest.approx(0.0, abs=1e-15)


def test_heat_flow_fourier_mode_decay():
    # no coupling: the k=1 mode decays as exp(-sum_t D_t)
    sched = linear_schedule(40, (0.01, 0.1), (0.0, 0.0), (0.0, 0.0), warn=False)
    g0 = FPGrid.from_function(lambda th: 1 + 0.5 * np.cos(th - 0.4), 720)
    last = fp_solve(g0, sched, Frozen(0.0))[-1]
    c = bin_centers(720)
    amp = 2 * np.sum(last.density * np.exp(1j * c))
    amp0 = 2 * np.sum(g0.density * np.exp(1j * c))
    assert abs(amp / amp0 - math.exp(-np.sum(sched.D))) < 1e-4
    assert np.angle(amp) == pytest.approx(0.4, abs=1e-9)


def test_mass_conserved_over_long_runs():
    sched = const_schedule(10_000, 0.05, K=0.03, Kr=0.045)
    g0 = FPGrid.from_function(lambda th: np.exp(3 * np.cos(th + 2.0)), 360)
    grids = fp_solve(g0, sched, Frozen(0.6, 1.0))
    assert len(grids) == 10_001
    for g in grids[::500] + [grids[-1]]:
        assert abs(g.density.sum() - 1.0) < 1e-10
        assert np.all(g.density >= 0)


def test_self_consistent_mass_conserved(global100):
    for g in fp_solve(FPGrid.uniform(360), global100, SELF_CONSISTENT):
        assert abs(g.density.sum() - 1.0) < 1e-10


def test_check_mass_guard():
    with pytest.raises(NumericalError):
        _check_mass(np.array([0.5, 0.6, -0.1]), "t=3")
    with pytest.raises(NumericalError):
        _check_mass(np.array([0.5, 0.5, 1e-6]), "t=3")
    out = _check_mass(np.array([0.5, 0.5 + 1e-13, 0.0]), "t=3")
    assert abs(out.sum() - 1.0) < 1e-15


def test_frozen_stationary_density():
    sched = const_schedule(1, 0.05, K=0.03, Kr=0.045)
    r = 0.5
    q = quasi_stationary_density(sched, 0, r, 720)
    after = fp_step(q, 0, sched, OrderParameter(r, 0.0))
    assert tv_distance(after.density, q.density) < 1e-5


def test_frozen_r0_relaxes_to_reference_von_mises(global100):
    sched = global100.frozen(99, 2000)
    last = fp_solve(FPGrid.uniform(720), sched, Frozen(0.0))[-1]
    q = quasi_stationary_density(global100, 99, 0.0, 720)
    assert tv_distance(last.density, q.density) < 1e-4


def test_quasi_stationary_examples(global100):
    flat = quasi_stationary_density(const_schedule(1, 0.1), 0, 1.0, 36)
    assert np.allclose(flat.density, 1 / 36, atol=1e-15)
    q = quasi_stationary_density(global100, 99, 1.0, 36)
    kappa = (0.03 + 0.045) / 0.05
    c = q.centers
    assert math.log(q.density[0] / q.density[18]) == pytest.approx(kappa * (math.cos(c[0]) - math.cos(c[18])), rel=1e-12)
    with pytest.raises(DomainError):
        quasi_stationary_density(global100, 100, 0.5)
    with pytest.raises(DomainError):
        quasi_stationary_density(global100, 0, 1.5)


def test_rotation_covariance():
    bins = 120
    shift = 7
    c = shift * 2 * math.pi / bins
    a = const_schedule(30, 0.02, K=0.01, Kr=0.03, psi_ref=0.0)
    b = const_schedule(30, 0.02, K=0.01, Kr=0.03, psi_ref=c)
    g0 = FPGrid.from_function(lambda th: np.exp(2 * np.cos(th - 1.0)) + 0.3, bins)
    g0r = FPGrid(np.roll(g0.density, shift))
    ga = fp_solve(g0, a, SELF_CONSISTENT)[-1]
    gb = fp_solve(g0r, b, SELF_CONSISTENT)[-1]
    assert np.max(np.abs(np.roll(ga.density, shift) - gb.density)) < 1e-13


@pytest.mark.parametrize("scheme, lo, hi", [("sg", 3.0, 5.0), ("upwind", 1.5, 2.5)])
def test_frozen_convergence_order(scheme, lo, hi, global100):
    sched = global100.frozen(99, 400)
    errs = []
    for bins in (90, 180, 360, 720):
        last = fp_solve(FPGrid.uniform(bins), sched, Frozen(0.5), scheme)[-1]
        errs.append(tv_distance(last.density, quasi_stationary_density(global100, 99, 0.5, bins).density))
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.all(ratios > lo) and np.all(ratios < hi)


def test_fp_step_validation(global100):
    with pytest.raises(DomainError):
        fp_step(FPGrid.uniform(9), 100, global100, OrderParameter(0.0, 0.0))
    with pytest.raises(DomainError):
        fp_solve(FPGrid.uniform(9), global100, "mystery")
    with pytest.raises(NumericalError):
        fp_step(FPGrid.uniform(720), 0, const_schedule(1, 10.0), OrderParameter(0.0, 0.0), max_substeps=10)


def test_density_score_von_mises():
    kappa, mu = 3.0, -0.5
    g = FPGrid.from_function(lambda th: np.exp(kappa * np.cos(th - mu)), 720)
    x = np.linspace(-math.pi, math.pi, 50, endpoint=False)
    assert np.max(np.abs(density_score(g)(x) + kappa * np.sin(x - mu))) < 1e-3


def test_coarsen_and_histogram():
    assert np.allclose(coarsen(np.full(720, 1 / 720), 36), 1 / 36)
    with pytest.raises(DomainError):
        coarsen(np.ones(10), 3)
    h = histogram(np.array([-math.pi, 0.0, math.pi - 1e-12, 0.1]), 4)
    assert h.tolist() == [0.25, 0.0, 0.5, 0.25]


def test_density_rows_long_format():
    rows = density_rows([FPGrid.uniform(3), FPGrid.uniform(3)], t0=5)
    assert len(rows) == 6 and rows[0][0] == 5 and rows[-1][0] == 6


# -- ensemble -----------------------------------------------------------------------------


def test_ensemble_vs_fp_deterministic(global100):
    a = ensemble_vs_fp(500, global100, rng_seed=3, bins=360)
    b = ensemble_vs_fp(500, global100, rng_seed=3, bins=360)
    assert np.array_equal(a.tv, b.tv)
    assert a.t.tolist() == list(range(101))
    assert len(a.rows()) == 101


def test_ensemble_tv_shrinks_with_n(global100):
    means = []
    for n in (200, 2000, 20000):
        rep = ensemble_vs_fp(n, global100, rng_seed=1, bins=360)
        means.append(float(np.mean(rep.tv[10:])))
    assert means[0] > means[1] > means[2]
    # Monte-Carlo floor scales like 1/sqrt(n)
    assert means[0] / means[2] > 5


def test_ensemble_needs_global(local100):
    with pytest.raises(DomainError):
        ensemble_vs_fp(10, local100, local(2))


def test_score_identity_small():
    res = score_identity_check([(-1.0, 3.0, 0.6), (2.0, 5.0, 0.4)], 0.3, 0.2, n_samples=20_000, bins=90,
                               quad_nodes=3600, rng_seed=1)
    assert res.centers.size == 90
    assert np.mean(res.abs_error < 0.1) >= 0.95
