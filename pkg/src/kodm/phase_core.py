"""Periodic phase arithmetic, circular statistics and the von Mises distribution.

Phases live on the half-open interval [-pi, pi).  A :class:`PhaseField` holds
one or more oscillator configurations; its trailing axis (flat fields) or two
trailing axes (lattice fields) index oscillators and any leading axes are a
batch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError

TWO_PI = 2.0 * np.pi

__all__ = [
    "PhaseField",
    "OrderParameter",
    "VonMisesParams",
    "wrap",
    "order_parameter",
    "circular_distance",
    "circular_mean",
    "i0",
    "log_i0",
    "von_mises_density",
    "von_mises_log_density",
    "von_mises_sample",
    "mean_resultant_length",
    "circular_w1",
    "tv_distance",
    "stream",
]


def stream(seed, *key) -> np.random.Generator:
    """Counter-style random stream keyed by ``(seed, *key)``.

    Streams with distinct keys are statistically independent, so work keyed by
    sample id and timestep can run in any order or in parallel.
    """
    if isinstance(seed, np.random.Generator):
        if key:
            raise TypeError("a Generator cannot be re-keyed")
        return seed
    return np.random.default_rng(
        np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    )


def wrap(theta):
    """Map angles onto [-pi, pi) via ``((theta + pi) mod 2pi) - pi``.

    Values already inside the interval are returned untouched, which keeps the
    map exactly idempotent in floating point.
    """
    x = np.asarray(theta, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DomainError("wrap: non-finite phase")
    inside = (x >= -np.pi) & (x < np.pi)
    out = np.where(inside, x, np.mod(x + np.pi, TWO_PI) - np.pi)
    # mod can round up to exactly 2pi for tiny negative arguments
    out = np.where(out >= np.pi, out - TWO_PI, out)
    out = np.where(out < -np.pi, -np.pi, out)
    if out.ndim == 0:
        return float(out)
    return out


@dataclass(frozen=True, eq=False)
class PhaseField:
    """Oscillator phases, optionally carrying leading batch axes.

    ``lattice=False``: shape ``(..., n)``.  ``lattice=True``: shape
    ``(..., height, width)``.
    """

    phases: np.ndarray
    lattice: bool = False

    def __post_init__(self):
        arr = np.array(self.phases, dtype=np.float64)
        need = 2 if self.lattice else 1
        if arr.ndim < need:
            raise DomainError(f"PhaseField needs at least {need} axes, got shape {arr.shape}")
        if arr.size == 0 or any(s == 0 for s in arr.shape[arr.ndim - need:]):
            raise DomainError("PhaseField must hold at least one oscillator")
        if not np.all(np.isfinite(arr)):
            raise DomainError("PhaseField contains non-finite phases")
        if np.any(arr < -np.pi) or np.any(arr >= np.pi):
            raise DomainError("PhaseField phases must lie in [-pi, pi); wrap them first")
        arr.setflags(write=False)
        object.__setattr__(self, "phases", arr)

    @classmethod
    def wrapped(cls, theta, lattice=False) -> "PhaseField":
        return cls(wrap(np.asarray(theta, dtype=np.float64)), lattice=lattice)

    @property
    def field_ndim(self) -> int:
        return 2 if self.lattice else 1

    @property
    def field_shape(self) -> tuple:
        return self.phases.shape[self.phases.ndim - self.field_ndim:]

    @property
    def batch_shape(self) -> tuple:
        return self.phases.shape[: self.phases.ndim - self.field_ndim]

    @property
    def n(self) -> int:
        return int(np.prod(self.field_shape))

    @property
    def field_axes(self) -> tuple:
        nd = self.phases.ndim
        return tuple(range(nd - self.field_ndim, nd))

    def replace(self, theta, wrap_phases=True) -> "PhaseField":
        theta = wrap(theta) if wrap_phases else theta
        return PhaseField(theta, lattice=self.lattice)

    def flat_view(self) -> np.ndarray:
        """Phases reshaped to ``batch_shape + (n,)``."""
        return self.phases.reshape(self.batch_shape + (self.n,))

    def __getitem__(self, idx) -> "PhaseField":
        if not self.batch_shape:
            raise IndexError("PhaseField has no batch axis")
        return PhaseField(self.phases[idx], lattice=self.lattice)

    def __len__(self):
        if not self.batch_shape:
            raise TypeError("unbatched PhaseField has no len()")
        return self.batch_shape[0]


@dataclass(frozen=True)
class OrderParameter:
    """Kuramoto coherence ``r`` and mean phase ``psi`` (arrays for batches)."""

    r: np.ndarray | float
    psi: np.ndarray | float


@dataclass(frozen=True)
class VonMisesParams:
    mu: float = 0.0
    kappa: float = 0.0

    def __post_init__(self):
        if not math.isfinite(self.kappa) or self.kappa < 0:
            raise DomainError(f"von Mises concentration must be >= 0, got {self.kappa}")
        object.__setattr__(self, "mu", wrap(float(self.mu)))


R_ZERO = 1e-15


def order_parameter(field: PhaseField) -> OrderParameter:
    """``r * exp(i psi) = mean_j exp(i theta_j)`` over the field axes.

    ``r`` below rounding level (1e-15) is reported as exactly 0, with
    ``psi = 0``: antipodal phases cancel only up to ``sin(pi)`` rounding.
    """
    if not isinstance(field, PhaseField):
        field = PhaseField(np.atleast_1d(field))
    z = np.mean(np.exp(1j * field.phases), axis=field.field_axes)
    r = np.minimum(np.abs(z), 1.0)
    r = np.where(r < R_ZERO, 0.0, r)
    psi = np.where(r == 0.0, 0.0, wrap(np.angle(z)))
    if np.ndim(r) == 0:
        return OrderParameter(float(r), float(psi))
    return OrderParameter(r, psi)


def circular_distance(a, b):
    """Length of the shorter arc between two phases, in [0, pi]."""
    d = np.abs(wrap(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)))
    return float(d) if np.ndim(d) == 0 else d


def circular_mean(theta, axis=None):
    z = np.mean(np.exp(1j * np.asarray(theta, dtype=np.float64)), axis=axis)
    return wrap(np.angle(z))


def mean_resultant_length(theta, axis=None):
    return np.abs(np.mean(np.exp(1j * np.asarray(theta, dtype=np.float64)), axis=axis))


_ASYMPTOTIC_KAPPA = 500.0


def i0(kappa: float) -> float:
    """Modified Bessel function of the first kind, order zero (power series)."""
    kappa = float(kappa)
    if kappa > _ASYMPTOTIC_KAPPA:
        return math.exp(log_i0(kappa))
    q = 0.25 * kappa * kappa
    term = 1.0
    total = 1.0
    k = 0
    while True:
        k += 1
        term *= q / (k * k)
        total += term
        if term < 1e-16 * total:
            return total


def log_i0(kappa: float) -> float:
    kappa = float(kappa)
    if kappa <= _ASYMPTOTIC_KAPPA:
        return math.log(i0(kappa))
    # Hankel expansion; terms beyond the third are below 1e-14 here
    inv = 1.0 / (8.0 * kappa)
    series = 1.0 + inv + 9.0 / 2.0 * inv**2 + 225.0 / 6.0 * inv**3
    return kappa - 0.5 * math.log(2.0 * math.pi * kappa) + math.log(series)


def _check_vm(params: VonMisesParams):
    if params.kappa < 0:
        raise DomainError("von Mises concentration must be >= 0")


def von_mises_log_density(theta, params: VonMisesParams):
    _check_vm(params)
    theta = np.asarray(theta, dtype=np.float64)
    k = params.kappa
    # kappa*(cos - 1) - log(2 pi I0(kappa) e^-kappa) avoids overflow for large kappa
    out = k * (np.cos(theta - params.mu) - 1.0) - (math.log(TWO_PI) + log_i0(k) - k)
    return float(out) if out.ndim == 0 else out


def von_mises_density(theta, params: VonMisesParams):
    """``exp(kappa cos(theta - mu)) / (2 pi I0(kappa))``."""
    out = np.exp(von_mises_log_density(theta, params))
    return float(out) if np.ndim(out) == 0 else out


def von_mises_sample(params: VonMisesParams, n: int, rng_seed, shape=None) -> PhaseField:
    """Best-Fisher rejection sampler with a wrapped-Cauchy envelope.

    Returns a flat field of ``n`` i.i.d. phases.  When ``shape`` is given it
    replaces ``n`` and the phases come back with that shape, the trailing axis
    holding the sites.
    """
    _check_vm(params)
    if n < 1:
        raise DomainError("von_mises_sample needs n >= 1")
    rng = stream(rng_seed)
    size = int(n) if shape is None else int(np.prod(shape))
    kappa = params.kappa
    if kappa < 1e-8:
        out = rng.uniform(-np.pi, np.pi, size)
    else:
        tau = 1.0 + math.sqrt(1.0 + 4.0 * kappa * kappa)
        rho = (tau - math.sqrt(2.0 * tau)) / (2.0 * kappa)
        s = (1.0 + rho * rho) / (2.0 * rho)
        out = np.empty(size)
        filled = 0
        while filled < size:
            want = size - filled
            m = max(16, int(want * 1.5))
            u1, u2, u3 = rng.random((3, m))
            z = np.cos(np.pi * u1)
            f = (1.0 + s * z) / (s + z)
            c = kappa * (s - f)
            with np.errstate(divide="ignore"):
                accept = (c * (2.0 - c) - u2 > 0.0) | (np.log(c / u2) + 1.0 - c >= 0.0)
            vals = np.sign(u3[accept] - 0.5) * np.arccos(np.clip(f[accept], -1.0, 1.0))
            take = vals[:want]
            out[filled:filled + take.size] = take
            filled += take.size
        out = out + params.mu
    out = wrap(out)
    if shape is not None:
        out = np.asarray(out).reshape(shape)
    return PhaseField(np.atleast_1d(out))


def circular_w1(a, b) -> float:
    """Wasserstein-1 distance between two empirical distributions on the circle.

    Uses the identity ``W1 = min_c  integral |F_a - F_b - c|`` whose minimiser
    is a weighted median of the CDF difference.
    """
    a = np.sort(np.ravel(wrap(np.asarray(a, dtype=np.float64))))
    b = np.sort(np.ravel(wrap(np.asarray(b, dtype=np.float64))))
    if a.size == 0 or b.size == 0:
        raise DomainError("circular_w1 needs nonempty samples")
    knots = np.concatenate(([-np.pi], a, b, [np.pi]))
    knots.sort()
    widths = np.diff(knots)
    left = knots[:-1]
    fa = np.searchsorted(a, left, side="right") / a.size
    fb = np.searchsorted(b, left, side="right") / b.size
    diff = fa - fb
    order = np.argsort(diff)
    cum = np.cumsum(widths[order])
    c = diff[order][np.searchsorted(cum, 0.5 * cum[-1])]
    return float(np.sum(widths * np.abs(diff - c)))


def tv_distance(p, q) -> float:
    """Total variation between two probability vectors on matching bins."""
    return 0.5 * float(np.sum(np.abs(np.asarray(p, float) - np.asarray(q, float))))
