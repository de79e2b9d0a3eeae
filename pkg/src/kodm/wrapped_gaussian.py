"""Truncated wrapped-normal transition kernel, its score, and sampling.

Sites are independent scalars with common variance ``2D_{t-1}``.  Densities are
handled in log space throughout; variances down to 1e-4 would underflow in
linear space.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .phase_core import PhaseField, TWO_PI, stream, wrap

DEFAULT_TRUNCATION = 3


@dataclass(frozen=True, eq=False)
class WrappedGaussianParams:
    """``mean`` is the pre-wrap drifted phase ``theta_{t-1} + f(theta_{t-1}, t-1)``."""

    mean: np.ndarray
    variance: float
    truncation: int = DEFAULT_TRUNCATION

    def __post_init__(self):
        var = np.asarray(self.variance, dtype=np.float64)
        if not np.all(np.isfinite(var)) or np.any(var <= 0):
            raise DomainError(f"wrapped Gaussian variance must be > 0, got {self.variance}")
        object.__setattr__(self, "variance", float(var) if var.ndim == 0 else var)
        if int(self.truncation) < 1:
            raise DomainError("truncation must be >= 1")
        mean = self.mean.phases if isinstance(self.mean, PhaseField) else self.mean
        object.__setattr__(self, "mean", np.asarray(mean, dtype=np.float64))
        object.__setattr__(self, "truncation", int(self.truncation))


def _components(theta, params: WrappedGaussianParams):
    theta = theta.phases if isinstance(theta, PhaseField) else theta
    delta = wrap(np.asarray(theta, dtype=np.float64) - params.mean)
    k = np.arange(-params.truncation, params.truncation + 1, dtype=np.float64)
    shifted = np.asarray(delta)[..., None] + TWO_PI * k
    var = np.asarray(params.variance, dtype=np.float64)
    if var.ndim:
        var = var[..., None]
    return shifted, -0.5 * shifted * shifted / var, var


def wg_log_density_sites(theta, params: WrappedGaussianParams) -> np.ndarray:
    """Per-site log density (no summation)."""
    _, logits, var = _components(theta, params)
    m = np.max(logits, axis=-1, keepdims=True)
    lse = m[..., 0] + np.log(np.sum(np.exp(logits - m), axis=-1))
    var = np.squeeze(var, -1) if np.ndim(var) else var
    return lse - 0.5 * np.log(TWO_PI * var)


def wg_log_density(theta, params: WrappedGaussianParams) -> float:
    """Log density summed over all sites."""
    return float(np.sum(wg_log_density_sites(theta, params)))


def wg_score(theta, params: WrappedGaussianParams) -> np.ndarray:
    """Elementwise ``d/dtheta log p``: ``-(1/var) sum_k w_k (delta + 2 pi k)``
    with ``w_k`` the softmax weights of the truncated components."""
    shifted, logits, var = _components(theta, params)
    logits = logits - np.max(logits, axis=-1, keepdims=True)
    w = np.exp(logits)
    w /= np.sum(w, axis=-1, keepdims=True)
    var = np.squeeze(var, -1) if np.ndim(var) else var
    return -np.sum(w * shifted, axis=-1) / var


def wg_sample(params: WrappedGaussianParams, rng_seed, lattice=False) -> PhaseField:
    """``wrap(mean + sqrt(variance) eps)``."""
    rng = stream(rng_seed)
    eps = rng.standard_normal(params.mean.shape)
    return PhaseField(wrap(params.mean + np.sqrt(params.variance) * eps), lattice=lattice)
