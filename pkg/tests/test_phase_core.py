import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kodm.errors import DomainError
from kodm.phase_core import (
    PhaseField,
    VonMisesParams,
    circular_distance,
    circular_mean,
    circular_w1,
    i0,
    log_i0,
    order_parameter,
    stream,
    tv_distance,
    von_mises_density,
    von_mises_log_density,
    von_mises_sample,
    wrap,
)

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)
phase = st.floats(-math.pi, math.pi, exclude_max=True, allow_nan=False)


# -- wrap ---------------------------------------------------------------


def test_wrap_examples():
    assert wrap(0.0) == 0.0
    assert wrap(math.pi) == -math.pi
    assert wrap(3 * math.pi / 2) == pytest.approx(-math.pi / 2, abs=1e-15)
    assert wrap(-math.pi) == -math.pi


def test_wrap_rejects_non_finite():
    for bad in (np.nan, np.inf, -np.inf):
        with pytest.raises(DomainError):
            wrap(bad)


@given(finite)
def test_wrap_range_and_idempotence(x):
    y = wrap(x)
    assert -math.pi <= y < math.pi
    assert wrap(y) == y


@given(st.floats(-50, 50, allow_nan=False), st.integers(-5, 5))
def test_wrap_periodic(x, k):
    a, b = wrap(x), wrap(x + 2 * math.pi * k)
    assert circular_distance(a, b) < 1e-12


def test_wrap_tiny_negative_does_not_round_to_pi():
    y = wrap(-1e-17 - math.pi)
    assert -math.pi <= y < math.pi


# -- PhaseField -------------------------------------------------------------


def test_phasefield_validation():
    with pytest.raises(DomainError):
        PhaseField(np.array([math.pi]))
    with pytest.raises(DomainError):
        PhaseField(np.zeros(0))
    with pytest.raises(DomainError):
        PhaseField(np.zeros(4), lattice=True)
    f = PhaseField(np.zeros((3, 2, 5)), lattice=True)
    assert f.batch_shape == (3,) and f.field_shape == (2, 5) and f.n == 10
    assert f.flat_view().shape == (3, 10)
    assert len(f) == 3 and f[1].batch_shape == ()
    assert not f.phases.flags.writeable


# -- order parameter ----------------------------------------------------------


def test_order_parameter_examples():
    op = order_parameter(PhaseField(np.full(7, 0.3)))
    assert op.r == pytest.approx(1.0, abs=1e-15) and op.psi == pytest.approx(0.3, abs=1e-15)
    op = order_parameter(PhaseField(np.array([0.0, -math.pi])))
    assert op.r == 0.0 and op.psi == 0.0
    op = order_parameter(PhaseField(np.array([0.0, math.pi / 2])))
    assert op.r == pytest.approx(math.sqrt(2) / 2, abs=1e-12)
    assert op.psi == pytest.approx(math.pi / 4, abs=1e-12)


@settings(max_examples=50)
@given(st.lists(phase, min_size=1, max_size=40), st.floats(-10, 10, allow_nan=False))
def test_order_parameter_rotation_equivariance(ph, c):
    a = order_parameter(PhaseField(np.array(ph)))
    b = order_parameter(PhaseField.wrapped(np.array(ph) + c))
    assert abs(a.r - b.r) < 1e-12
    if a.r > 1e-6:
        assert circular_distance(b.psi, wrap(a.psi + c)) < 1e-9


def test_order_parameter_batched():
    th = np.stack([np.zeros(5), np.array([0.0, math.pi / 2, 0.0, math.pi / 2, 0.0])])
    op = order_parameter(PhaseField(th))
    assert op.r.shape == (2,)
    assert op.r[0] == pytest.approx(1.0)


# -- circular distance ----------------------------------------------------------


def test_circular_distance_examples():
    assert circular_distance(0.0, 0.0) == 0.0
    assert circular_distance(-3 * math.pi / 4, 3 * math.pi / 4) == pytest.approx(math.pi / 2)
    assert circular_distance(0.0, math.pi / 3) == pytest.approx(math.pi / 3)
    assert circular_distance(0.0, -math.pi) == pytest.approx(math.pi)


@given(phase, phase, phase)
def test_circular_distance_metric(a, b, c):
    dab = circular_distance(a, b)
    assert 0 <= dab <= math.pi
    assert dab == pytest.approx(circular_distance(b, a), abs=1e-15)
    assert circular_distance(a, a) == 0
    assert dab <= circular_distance(a, c) + circular_distance(c, b) + 1e-12


# -- Bessel and von Mises --------------------------------------------------------


def test_i0_against_numpy():
    # numpy's i0 is an independent Chebyshev implementation
    for k in (0.0, 0.1, 1.0, 2.5, 10.0, 30.0, 50.0):
        assert i0(k) == pytest.approx(float(np.i0(k)), rel=1e-10)
    assert i0(1.0) == pytest.approx(1.2660658777520082, rel=1e-12)
    assert log_i0(800.0) == pytest.approx(800 - 0.5 * math.log(2 * math.pi * 800) + math.log1p(1 / 6400), rel=1e-9)


def test_von_mises_density_examples():
    assert von_mises_density(1.3, VonMisesParams(0.0, 0.0)) == pytest.approx(1 / (2 * math.pi), rel=1e-14)
    # oracle: e / (2 pi I0(1))
    assert von_mises_density(0.4, VonMisesParams(0.4, 1.0)) == pytest.approx(0.341710, abs=5e-7)
    p = VonMisesParams(0.7, 3.0)
    for x in (0.1, 1.0, 2.5):
        assert von_mises_density(0.7 + x, p) == pytest.approx(von_mises_density(0.7 - x, p), rel=1e-12)


@pytest.mark.parametrize("kappa", [0.0, 0.5, 1.0, 4.0, 20.0])
def test_von_mises_normalization(kappa):
    x = np.linspace(-math.pi, math.pi, 4097)
    y = von_mises_density(x, VonMisesParams(0.3, kappa))
    assert abs(np.trapezoid(y, x) - 1.0) < 1e-8


def test_von_mises_rejects_negative_kappa():
    with pytest.raises(DomainError):
        VonMisesParams(0.0, -1.0)


def test_von_mises_log_density_stable_at_large_kappa():
    v = von_mises_log_density(0.0, VonMisesParams(0.0, 2000.0))
    assert np.isfinite(v)
    assert v == pytest.approx(0.5 * math.log(2000 / (2 * math.pi)), abs=1e-3)


def test_von_mises_sample_uniform_ks():
    x = np.sort(von_mises_sample(VonMisesParams(0.0, 0.0), 10_000, 1).phases)
    cdf = (x + math.pi) / (2 * math.pi)
    n = x.size
    ks = max(np.max(np.arange(1, n + 1) / n - cdf), np.max(cdf - np.arange(n) / n))
    assert ks < 0.02


def test_von_mises_sample_concentrated_mean():
    x = von_mises_sample(VonMisesParams(1.2, 50.0), 10_000, 2).phases
    assert circular_distance(circular_mean(x), 1.2) < 0.02


def test_von_mises_sample_matches_density():
    p = VonMisesParams(-2.5, 2.0)
    x = von_mises_sample(p, 200_000, 3).phases
    hist, edges = np.histogram(x, bins=36, range=(-math.pi, math.pi))
    centers = 0.5 * (edges[1:] + edges[:-1])
    # cell masses by fine quadrature
    fine = np.linspace(-math.pi, math.pi, 36 * 64 + 1)
    dens = von_mises_density(0.5 * (fine[1:] + fine[:-1]), p) * (fine[1] - fine[0])
    mass = dens.reshape(36, 64).sum(axis=1)
    assert tv_distance(hist / x.size, mass) < 0.01
    assert centers.size == 36


def test_von_mises_sample_deterministic():
    p = VonMisesParams(0.1, 3.0)
    a = von_mises_sample(p, 100, 7).phases
    b = von_mises_sample(p, 100, 7).phases
    assert np.array_equal(a, b)


def test_streams_independent_of_order():
    a = stream(5, 1, 2).standard_normal(4)
    stream(5, 9).standard_normal(100)
    b = stream(5, 1, 2).standard_normal(4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, stream(5, 2, 1).standard_normal(4))


# -- distances -----------------------------------------------------------------


def test_circular_w1_shift_oracle():
    # for mass on a short arc the circle and line distances agree, and on the
    # line a rigid shift by c costs exactly |c|
    x = von_mises_sample(VonMisesParams(0.0, 50.0), 5000, 4).phases
    assert circular_w1(x, wrap(x + 0.2)) == pytest.approx(0.2, abs=1e-9)
    assert circular_w1(x, x) == 0.0


def test_circular_w1_antipodal_points():
    # antipodal point masses are pi apart
    assert circular_w1([0.0], [-math.pi]) == pytest.approx(math.pi)


def test_circular_w1_brute_force():
    rng = np.random.default_rng(0)
    a = rng.uniform(-math.pi, math.pi, 7)
    b = rng.uniform(-math.pi, math.pi, 7)
    # equal-size empirical measures: best cyclic matching of sorted samples
    sa, sb = np.sort(a), np.sort(b)
    best = min(np.mean(circular_distance(sa, np.roll(sb, k))) for k in range(7))
    assert circular_w1(a, b) == pytest.approx(best, abs=1e-12)
