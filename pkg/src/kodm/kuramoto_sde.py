"""Forward (synchronizing) stochastic Kuramoto process.

Drifts for the three coupling topologies, Euler-Maruyama steps with unit step
size, linear schedules, forward-chain simulation, a binary trajectory cache
and an empirical signal-to-noise diagnostic.
"""
from __future__ import annotations

import hashlib
import os
import struct
import tempfile
import warnings
from dataclasses import dataclass, field as dc_field

import numpy as np

from ._parallel import ordered_map
from .errors import DomainError, FormatError, StaleCacheError
from .phase_core import PhaseField, stream, wrap

__all__ = [
    "Schedule",
    "Topology",
    "GLOBAL",
    "REFERENCE_ONLY",
    "local",
    "linear_schedule",
    "preset",
    "ordering_violations",
    "drift_global",
    "drift_local",
    "drift",
    "neighborhood_laplacian",
    "forward_step",
    "simulate_chain",
    "simulate_trajectory",
    "TrajectoryCache",
    "CacheRecord",
    "precompute_cache",
    "write_cache",
    "read_cache",
    "empirical_snr",
    "fingerprint",
]


@dataclass(frozen=True, eq=False)
class Schedule:
    """Per-step noise variance ``2D_t``, coupling ``K(t)`` and reference coupling."""

    noise_var: np.ndarray
    coupling: np.ndarray
    ref_coupling: np.ndarray
    psi_ref: float = 0.0

    def __post_init__(self):
        arrays = []
        for name in ("noise_var", "coupling", "ref_coupling"):
            a = np.array(getattr(self, name), dtype=np.float64).reshape(-1)
            if not np.all(np.isfinite(a)):
                raise DomainError(f"schedule {name} must be finite")
            a.setflags(write=False)
            object.__setattr__(self, name, a)
            arrays.append(a)
        if not (arrays[0].size == arrays[1].size == arrays[2].size) or arrays[0].size < 1:
            raise DomainError("schedule sequences must share one length T >= 1")
        if np.any(arrays[0] <= 0):
            raise DomainError("noise variance must be strictly positive")
        if np.any(arrays[1] < 0) or np.any(arrays[2] < 0):
            raise DomainError("coupling strengths must be nonnegative")
        object.__setattr__(self, "psi_ref", wrap(float(self.psi_ref)))

    @property
    def T(self) -> int:
        return int(self.noise_var.size)

    @property
    def D(self) -> np.ndarray:
        return 0.5 * self.noise_var

    def with_coupling(self, coupling) -> "Schedule":
        c = np.broadcast_to(np.asarray(coupling, dtype=np.float64), self.coupling.shape)
        return Schedule(self.noise_var, c, self.ref_coupling, self.psi_ref)

    def frozen(self, t: int, steps: int) -> "Schedule":
        """Constant schedule repeating the coefficients of step ``t``."""
        return Schedule(
            np.full(steps, self.noise_var[t]),
            np.full(steps, self.coupling[t]),
            np.full(steps, self.ref_coupling[t]),
            self.psi_ref,
        )

    def to_bytes(self) -> bytes:
        return (
            struct.pack("<I", self.T)
            + self.noise_var.astype("<f8").tobytes()
            + self.coupling.astype("<f8").tobytes()
            + self.ref_coupling.astype("<f8").tobytes()
            + struct.pack("<d", self.psi_ref)
        )


@dataclass(frozen=True)
class Topology:
    """Coupling topology: ``"global"``, ``"local"`` (with window radius) or ``"reference"``."""

    kind: str = "global"
    radius: int = 2

    def __post_init__(self):
        if self.kind not in ("global", "local", "reference"):
            raise DomainError(f"unknown topology {self.kind!r}")
        if self.kind == "local" and self.radius < 1:
            raise DomainError("local coupling radius must be >= 1")

    def to_bytes(self) -> bytes:
        tag = {"global": 0, "local": 1, "reference": 2}[self.kind]
        radius = self.radius if self.kind == "local" else 0
        return struct.pack("<BI", tag, radius)


GLOBAL = Topology("global")
REFERENCE_ONLY = Topology("reference")


def local(radius: int = 2) -> Topology:
    return Topology("local", radius)


def fingerprint(sched: Schedule, topology: Topology) -> bytes:
    return hashlib.sha256(sched.to_bytes() + topology.to_bytes()).digest()


def ordering_violations(sched: Schedule) -> dict:
    """Steps where the ordering ``K_ref > D > K`` fails, keyed by which inequality."""
    D = sched.D
    return {
        "noise_over_coupling": np.flatnonzero(~(D > sched.coupling)),
        "ref_over_noise": np.flatnonzero(~(sched.ref_coupling > D)),
    }


def linear_schedule(T, noise_range, coupling_range, ref_range, psi_ref=0.0, warn=True) -> Schedule:
    """Linear ramps (endpoints inclusive) for ``2D_t``, ``K(t)`` and ``K_ref(t)``."""
    T = int(T)
    if T < 1:
        raise DomainError("schedule length T must be >= 1")
    if min(noise_range) <= 0:
        raise DomainError("noise variance endpoints must be positive")
    if min(coupling_range) < 0 or min(ref_range) < 0:
        raise DomainError("coupling endpoints must be nonnegative")
    sched = Schedule(
        np.linspace(*noise_range, T),
        np.linspace(*coupling_range, T),
        np.linspace(*ref_range, T),
        psi_ref,
    )
    if warn:
        bad = ordering_violations(sched)
        if bad["noise_over_coupling"].size or bad["ref_over_noise"].size:
            warnings.warn(
                "schedule breaks K_ref(t) > D_t > K(t) at "
                f"{bad['noise_over_coupling'].size} (D>K) / {bad['ref_over_noise'].size} (K_ref>D) steps",
                stacklevel=2,
            )
    return sched


# (2D range, K range, K_ref range) per (coupling kind, T)
PRESETS = {
    ("global", 100): ((1e-4, 0.1), (3e-5, 0.03), (4.5e-5, 0.045)),
    ("global", 300): ((1e-4, 0.07), (3e-5, 0.02), (4.5e-5, 0.03)),
    ("global", 1000): ((1e-4, 0.015), (3e-5, 0.0045), (4.5e-5, 0.00675)),
    ("local", 100): ((1e-4, 0.1), (5e-5, 0.05), (5e-5, 0.05)),
    ("local", 300): ((1e-4, 0.07), (5e-5, 0.03), (5e-5, 0.03)),
    ("local", 1000): ((1e-4, 0.025), (5e-5, 0.01), (5e-5, 0.01)),
}


def preset(kind: str = "global", T: int = 100, psi_ref: float = 0.0) -> Schedule:
    """Published linear schedules.  Global presets are checked for ``D_t > K(t)``."""
    try:
        noise, coupling, ref = PRESETS[(kind, int(T))]
    except KeyError:
        raise DomainError(f"no preset for {kind!r} coupling with T={T}") from None
    sched = linear_schedule(T, noise, coupling, ref, psi_ref, warn=False)
    if kind == "global" and ordering_violations(sched)["noise_over_coupling"].size:
        raise DomainError("global preset violates D_t > K(t)")
    return sched


def _step_index(t, sched: Schedule):
    t_arr = np.asarray(t)
    if t_arr.dtype.kind not in "iu":
        if not np.all(t_arr == np.round(t_arr)):
            raise DomainError("timestep must be an integer")
        t_arr = t_arr.astype(np.int64)
    if np.any(t_arr < 0) or np.any(t_arr > sched.T - 1):
        raise DomainError(f"timestep {t} outside [0, {sched.T - 1}]")
    return t_arr


def _coef(values: np.ndarray, t_idx, field: PhaseField):
    """Schedule entries for ``t_idx`` shaped to broadcast over the field axes."""
    c = values[t_idx]
    if np.ndim(c) == 0:
        return float(c)
    return c.reshape(c.shape + (1,) * field.field_ndim)


def _ref_term(field: PhaseField, t_idx, sched: Schedule):
    return _coef(sched.ref_coupling, t_idx, field) * np.sin(sched.psi_ref - field.phases)


def drift_global(field: PhaseField, t, sched: Schedule, coupling_scale=1.0) -> np.ndarray:
    """All-to-all Kuramoto drift plus reference attraction.

    Evaluated through the order parameter:
    ``(1/N) sum_j sin(theta_j - theta_i) = Y cos(theta_i) - X sin(theta_i)``
    with ``X + iY`` the mean phasor, which is O(N).
    """
    t_idx = _step_index(t, sched)
    theta = field.phases
    axes = field.field_axes
    c, s = np.cos(theta), np.sin(theta)
    X = np.mean(c, axis=axes, keepdims=True)
    Y = np.mean(s, axis=axes, keepdims=True)
    K = _coef(sched.coupling, t_idx, field) * coupling_scale
    return K * (Y * c - X * s) + _ref_term(field, t_idx, sched)


def _box_sum(x: np.ndarray, radius: int) -> np.ndarray:
    """Sum over the (2r+1)^2 window on the two trailing axes, zero outside the grid."""
    pad = [(0, 0)] * (x.ndim - 2) + [(radius + 1, radius), (radius + 1, radius)]
    p = np.pad(x, pad)
    cs = np.cumsum(np.cumsum(p, axis=-1), axis=-2)
    w = 2 * radius + 1
    h, wd = x.shape[-2:]
    return (
        cs[..., w:w + h, w:w + wd]
        - cs[..., 0:h, w:w + wd]
        - cs[..., w:w + h, 0:wd]
        + cs[..., 0:h, 0:wd]
    )


def _window_sum_direct(x: np.ndarray, radius: int) -> np.ndarray:
    out = np.zeros_like(x)
    h, w = x.shape[-2:]
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            ys, yd = slice(max(dy, 0), h + min(dy, 0)), slice(max(-dy, 0), h + min(-dy, 0))
            xs, xd = slice(max(dx, 0), w + min(dx, 0)), slice(max(-dx, 0), w + min(-dx, 0))
            out[..., yd, xd] += x[..., ys, xs]
    return out


def _window_sum(x, radius):
    # shifted sums are exact enough and fast for small windows
    if radius <= 3:
        return _window_sum_direct(x, radius)
    return _box_sum(x, radius)


def _neighbor_count(shape, radius) -> np.ndarray:
    return _window_sum(np.ones(shape[-2:]), radius) - 1.0


def drift_local(field: PhaseField, t, sched: Schedule, radius: int = 2) -> np.ndarray:
    """Nearest-neighbour drift on a lattice: mean over the (2r+1)^2 window minus
    the site itself, truncated (not wrapped) at the borders."""
    if not field.lattice:
        raise DomainError("local coupling needs a lattice field")
    if radius < 1:
        raise DomainError("local coupling radius must be >= 1")
    t_idx = _step_index(t, sched)
    theta = field.phases
    c, s = np.cos(theta), np.sin(theta)
    S = _window_sum(s, radius) - s
    C = _window_sum(c, radius) - c
    count = _neighbor_count(field.field_shape, radius)
    count = np.where(count > 0, count, 1.0)
    coupling = (c * S - s * C) / count
    return _coef(sched.coupling, t_idx, field) * coupling + _ref_term(field, t_idx, sched)


def neighborhood_laplacian(field: PhaseField, radius: int = 2) -> np.ndarray:
    """Graph Laplacian ``mean_{j in N_i}(theta_j - theta_i)`` on the truncated window
    (no wrapping of differences; meant for small-amplitude fields)."""
    if not field.lattice:
        raise DomainError("neighborhood Laplacian needs a lattice field")
    theta = field.phases
    count = _neighbor_count(field.field_shape, radius)
    return (_window_sum(theta, radius) - theta - count * theta) / np.where(count > 0, count, 1.0)


def drift(field: PhaseField, t, sched: Schedule, topology: Topology = GLOBAL) -> np.ndarray:
    if topology.kind == "global":
        return drift_global(field, t, sched)
    if topology.kind == "local":
        return drift_local(field, t, sched, topology.radius)
    t_idx = _step_index(t, sched)
    return _ref_term(field, t_idx, sched)


def forward_step(field: PhaseField, t, sched: Schedule, topology: Topology = GLOBAL, rng_seed=0) -> PhaseField:
    """``wrap(theta + f(theta, t) + sqrt(2D_t) eps)``; unit step size.

    ``rng_seed`` is a Generator or an int; an int seeds the stream keyed ``(seed, 0, t)``.
    """
    t_idx = _step_index(t, sched)
    if isinstance(rng_seed, np.random.Generator):
        rng = rng_seed
    else:
        if np.ndim(t_idx):
            raise DomainError("per-item timesteps need an explicit Generator")
        rng = stream(rng_seed, 0, int(t_idx))
    eps = rng.standard_normal(field.phases.shape)
    sigma = np.sqrt(_coef(sched.noise_var, t_idx, field))
    return field.replace(field.phases + drift(field, t_idx, sched, topology) + sigma * eps)


def simulate_chain(
    theta0: PhaseField,
    t_target: int,
    sched: Schedule,
    topology: Topology = GLOBAL,
    rng_seed=0,
    sample_id: int = 0,
    start: int = 0,
) -> PhaseField:
    """Compose forward steps ``start .. t_target-1``.

    With an int seed, step ``s`` draws from the stream ``(seed, sample_id, s)``,
    so splitting a chain at any step reproduces the unsplit chain.
    """
    t_target = int(t_target)
    if t_target < 0 or t_target > sched.T:
        raise DomainError(f"t_target {t_target} outside [0, {sched.T}]")
    if start < 0 or start > t_target:
        raise DomainError("chain start must lie in [0, t_target]")
    field = theta0
    for s in range(start, t_target):
        rng = rng_seed if isinstance(rng_seed, np.random.Generator) else stream(rng_seed, sample_id, s)
        field = forward_step(field, s, sched, topology, rng)
    return field


def simulate_trajectory(theta0: PhaseField, sched: Schedule, topology: Topology = GLOBAL, rng_seed=0, sample_id=0):
    """All states ``theta_0 .. theta_T`` as one array with a leading time axis."""
    states = [theta0.phases]
    field = theta0
    for s in range(sched.T):
        rng = rng_seed if isinstance(rng_seed, np.random.Generator) else stream(rng_seed, sample_id, s)
        field = forward_step(field, s, sched, topology, rng)
        states.append(field.phases)
    return np.stack(states)


# --------------------------------------------------------------------------
# trajectory cache

_CACHE_MAGIC = b"KODC"
_CACHE_VERSION = 1
_HEADER = struct.Struct("<4sI32sQ")
_RECORD = struct.Struct("<QIBII")


@dataclass(frozen=True, eq=False)
class CacheRecord:
    sample_id: int
    t: int
    theta_prev: PhaseField


@dataclass(eq=False)
class TrajectoryCache:
    """Stored ``(sample_id, t, theta_{t-1})`` triples plus the schedule fingerprint."""

    fingerprint: bytes
    records: list = dc_field(default_factory=list)

    def check(self, sched: Schedule, topology: Topology):
        if self.fingerprint != fingerprint(sched, topology):
            raise StaleCacheError("trajectory cache was built for a different schedule/topology")

    def timesteps(self) -> np.ndarray:
        return np.array([r.t for r in self.records], dtype=np.int64)

    def __len__(self):
        return len(self.records)


def _chain_records(item, theta0, sched, topology, samples_per_item, seed):
    pick = stream(seed, item, sched.T)
    ts = np.sort(pick.integers(1, sched.T + 1, size=samples_per_item))
    out = []
    field = theta0
    current = 0
    for t in ts:
        field = simulate_chain(field, int(t) - 1, sched, topology, seed, sample_id=item, start=current)
        current = int(t) - 1
        out.append(CacheRecord(item, int(t), field))
    return out


def precompute_cache(
    dataset,
    sched: Schedule,
    topology: Topology,
    samples_per_item: int,
    rng_seed=0,
    sink=None,
    threads=None,
) -> TrajectoryCache:
    """Run one forward chain per dataset item and keep ``theta_{t-1}`` at
    ``samples_per_item`` uniformly drawn ``t`` in ``1..T``.

    Chains use the keyed streams of :func:`simulate_chain`, so the result does
    not depend on the worker count.
    """
    items = _as_items(dataset)
    if not items:
        raise DomainError("precompute_cache needs a nonempty dataset")
    if samples_per_item < 0:
        raise DomainError("samples_per_item must be >= 0")
    cache = TrajectoryCache(fingerprint(sched, topology))
    if samples_per_item > 0:
        chunks = ordered_map(
            lambda i: _chain_records(i, items[i], sched, topology, samples_per_item, rng_seed),
            range(len(items)),
            threads,
        )
        for chunk in chunks:
            cache.records.extend(chunk)
    if sink is not None:
        write_cache(cache, sink)
    return cache


def _as_items(dataset) -> list:
    if isinstance(dataset, PhaseField):
        if not dataset.batch_shape:
            return [dataset]
        return [dataset[i] for i in range(len(dataset))]
    return list(dataset)


def _atomic_write(path, payload: bytes):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    try:
        fd, tmp = tempfile.mkstemp(dir=directory, prefix=".kodm-", suffix=".tmp")
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def encode_records(records, fp: bytes) -> bytes:
    parts = [_HEADER.pack(_CACHE_MAGIC, _CACHE_VERSION, fp, len(records))]
    for rec in records:
        f = rec.theta_prev
        if f.batch_shape:
            raise DomainError("cache records hold single fields")
        if f.lattice:
            tag, dims = 1, f.field_shape
        else:
            tag, dims = 0, (f.n, 1)
        parts.append(_RECORD.pack(rec.sample_id, rec.t, tag, *dims))
        parts.append(np.ascontiguousarray(f.phases, dtype="<f8").tobytes())
    return b"".join(parts)


def write_cache(cache: TrajectoryCache, path):
    _atomic_write(path, encode_records(cache.records, cache.fingerprint))


def decode_records(buf: bytes):
    if len(buf) < _HEADER.size:
        raise FormatError("cache header truncated", len(buf))
    magic, version, fp, count = _HEADER.unpack_from(buf, 0)
    if magic != _CACHE_MAGIC:
        raise FormatError("bad cache magic", 0)
    if version != _CACHE_VERSION:
        raise FormatError(f"unsupported cache version {version}", 4)
    pos = _HEADER.size
    records = []
    for _ in range(count):
        if pos + _RECORD.size > len(buf):
            raise FormatError("cache record header truncated", pos)
        sid, t, tag, d0, d1 = _RECORD.unpack_from(buf, pos)
        if tag not in (0, 1):
            raise FormatError(f"bad shape tag {tag}", pos + 12)
        pos += _RECORD.size
        n = d0 * d1
        end = pos + 8 * n
        if end > len(buf):
            raise FormatError("cache payload truncated", pos)
        arr = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).astype(np.float64)
        pos = end
        if tag == 1:
            field = PhaseField(arr.reshape(d0, d1), lattice=True)
        else:
            field = PhaseField(arr)
        records.append(CacheRecord(int(sid), int(t), field))
    if pos != len(buf):
        raise FormatError("trailing bytes after last cache record", pos)
    return fp, records


def read_cache(path, sched: Schedule | None = None, topology: Topology | None = None) -> TrajectoryCache:
    """Load a cache; if ``sched`` is given the fingerprint must match it."""
    with open(path, "rb") as fh:
        buf = fh.read()
    fp, records = decode_records(buf)
    cache = TrajectoryCache(fp, records)
    if sched is not None:
        cache.check(sched, topology or GLOBAL)
        for rec in records:
            if not 1 <= rec.t <= sched.T:
                raise FormatError(f"cache record t={rec.t} outside [1, {sched.T}]")
    return cache


# --------------------------------------------------------------------------
# diagnostics

def empirical_snr(theta0_batch: PhaseField, sched: Schedule, topology: Topology = GLOBAL, probe_seeds=(0,)):
    """Per-step ``(t, r, psi, snr)`` rows for ``t = 0..T``.

    ``c(t) = |mean_i exp(i(theta_t - theta_0))|`` averaged over batch and probes;
    ``snr = c^2 / (1 - c^2)`` (``inf`` at ``c = 1``).  ``r`` is the mean
    coherence and ``psi`` the angle of the mean order-parameter phasor.
    """
    if not theta0_batch.batch_shape:
        theta0_batch = PhaseField(theta0_batch.phases[None], theta0_batch.lattice)
    probe_seeds = list(probe_seeds)
    axes = theta0_batch.field_axes
    c_acc = np.zeros(sched.T + 1)
    r_acc = np.zeros(sched.T + 1)
    z_acc = np.zeros(sched.T + 1, dtype=complex)
    for seed in probe_seeds:
        traj = simulate_trajectory(theta0_batch, sched, topology, seed)
        rel = np.exp(1j * (traj - theta0_batch.phases[None]))
        c_acc += np.mean(np.abs(np.mean(rel, axis=tuple(a + 1 for a in axes))), axis=1)
        z = np.mean(np.exp(1j * traj), axis=tuple(a + 1 for a in axes))
        r_acc += np.mean(np.abs(z), axis=1)
        z_acc += np.mean(z, axis=1)
    k = len(probe_seeds)
    c = np.minimum(c_acc / k, 1.0)
    r = r_acc / k
    psi = wrap(np.angle(z_acc / k))
    with np.errstate(divide="ignore"):
        snr = np.where(c >= 1.0, np.inf, c * c / (1.0 - c * c))
    return [(t, float(r[t]), float(psi[t]), float(snr[t])) for t in range(sched.T + 1)]
