"""Data ingestion: pixel/phase mapping, binary PGM images, toy datasets.

Pixels live in [-1, 1] and map linearly onto [-0.9 pi, 0.9 pi]; the margin
next to the seam is reached only through the dynamics, never by loading data.
"""
from __future__ import annotations

import os
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, FormatError
from .kuramoto_sde import _atomic_write
from .phase_core import PhaseField, VonMisesParams, stream, von_mises_sample, wrap

__all__ = [
    "PIXEL_SCALE",
    "PixelPatch",
    "pixel_to_phase",
    "phase_to_pixel",
    "load_pgm",
    "save_pgm",
    "encode_pgm",
    "decode_pgm",
    "VonMisesMixture",
    "OrientedStripes",
    "ToyDatasetSpec",
    "make_toy_dataset",
    "save_dataset",
    "load_dataset",
]

PIXEL_SCALE = 0.9 * np.pi


@dataclass(frozen=True, eq=False)
class PixelPatch:
    """Grayscale intensities in [-1, 1] with shape ``(height, width)``.

    ``clamped`` counts values that were clipped when the patch came from
    phases; ``comment`` carries a PGM header comment through a round trip.
    """

    values: np.ndarray
    clamped: int = 0
    comment: str | None = None

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2 or 0 in v.shape:
            raise DomainError(f"PixelPatch must be a nonempty 2-D array, got shape {v.shape}")
        if not np.all(np.isfinite(v)) or np.any(np.abs(v) > 1.0):
            raise DomainError("pixel values must lie in [-1, 1]")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def shape(self):
        return self.values.shape


def pixel_to_phase(patch) -> PhaseField:
    values = patch.values if isinstance(patch, PixelPatch) else np.asarray(patch, dtype=np.float64)
    if not np.all(np.isfinite(values)) or np.any(np.abs(values) > 1.0):
        raise DomainError("pixel values must lie in [-1, 1]")
    theta = PIXEL_SCALE * values
    # ingestion guard: data never reaches the seam margin
    assert np.all(np.abs(theta) <= PIXEL_SCALE)
    return PhaseField(theta, lattice=np.ndim(values) >= 2)


def phase_to_pixel(field: PhaseField) -> PixelPatch:
    theta = field.phases if isinstance(field, PhaseField) else np.asarray(field, dtype=np.float64)
    if theta.ndim != 2:
        raise DomainError("phase_to_pixel needs a single 2-D lattice")
    x = theta / PIXEL_SCALE
    clamped = int(np.count_nonzero(np.abs(x) > 1.0))
    return PixelPatch(np.clip(x, -1.0, 1.0), clamped=clamped)


# --------------------------------------------------------------------------
# PGM (P5, maxval 255)

def _header_token(buf: bytes, pos: int, comments: list):
    while pos < len(buf):
        c = buf[pos:pos + 1]
        if c in (b" ", b"\t", b"\n", b"\r", b"\v", b"\f"):
            pos += 1
        elif c == b"#":
            end = buf.find(b"\n", pos)
            end = len(buf) if end < 0 else end
            comments.append(buf[pos + 1:end].decode("utf-8", "replace").strip())
            pos = end + 1
        else:
            break
    start = pos
    while pos < len(buf) and buf[pos:pos + 1] not in (b" ", b"\t", b"\n", b"\r", b"\v", b"\f", b"#"):
        pos += 1
    if start == pos:
        raise FormatError("truncated PGM header", offset=start)
    return buf[start:pos], start, pos


def decode_pgm(buf: bytes) -> PixelPatch:
    if buf[:2] != b"P5":
        raise FormatError("not a binary PGM (expected magic P5)", offset=0)
    comments = []
    pos = 2
    values = []
    for name in ("width", "height", "maxval"):
        tok, start, pos = _header_token(buf, pos, comments)
        if not re.fullmatch(rb"[0-9]+", tok):
            raise FormatError(f"malformed PGM {name} {tok!r}", offset=start)
        values.append(int(tok))
    width, height, maxval = values
    if width < 1 or height < 1:
        raise FormatError("PGM dimensions must be positive", offset=start)
    if maxval != 255:
        raise FormatError(f"unsupported PGM maxval {maxval} (need 255)", offset=start)
    if pos >= len(buf) or buf[pos:pos + 1] not in (b" ", b"\t", b"\n", b"\r", b"\v", b"\f"):
        raise FormatError("missing whitespace after PGM maxval", offset=pos)
    pos += 1
    need = width * height
    payload = buf[pos:pos + need]
    if len(payload) < need:
        raise FormatError(f"truncated PGM payload: {len(payload)} of {need} bytes", offset=pos + len(payload))
    v = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    return PixelPatch(2.0 * (v / 255.0) - 1.0, comment=comments[0] if comments else None)


def _to_u8(values) -> np.ndarray:
    # np.rint rounds half to even
    return np.rint((np.asarray(values) + 1.0) * 127.5).clip(0, 255).astype(np.uint8)


def encode_pgm(patch: PixelPatch, comment: str | None = None) -> bytes:
    comment = patch.comment if comment is None else comment
    h, w = patch.shape
    head = b"P5\n"
    if comment:
        head += b"# " + comment.replace("\n", " ").encode("utf-8") + b"\n"
    head += f"{w} {h}\n255\n".encode("ascii")
    return head + _to_u8(patch.values).tobytes()


def load_pgm(path) -> PixelPatch:
    with open(path, "rb") as fh:
        return decode_pgm(fh.read())


def save_pgm(patch: PixelPatch, path, comment: str | None = None):
    _atomic_write(os.fspath(path), encode_pgm(patch, comment))


# --------------------------------------------------------------------------
# toy datasets


@dataclass(frozen=True)
class VonMisesMixture:
    """``components`` are ``(mu, kappa, weight)`` triples; every site draws independently."""

    components: tuple = ((-np.pi / 2, 8.0, 0.5), (np.pi / 2, 8.0, 0.5))
    sites: int = 64

    def __post_init__(self):
        comps = tuple((float(m), float(k), float(w)) for m, k, w in self.components)
        if not comps:
            raise DomainError("mixture needs at least one component")
        weights = np.array([c[2] for c in comps])
        if np.any(weights <= 0) or abs(weights.sum() - 1.0) > 1e-9:
            raise DomainError("mixture weights must be positive and sum to 1")
        if any(c[1] < 0 for c in comps):
            raise DomainError("mixture concentrations must be >= 0")
        if self.sites < 1:
            raise DomainError("sites must be >= 1")
        object.__setattr__(self, "components", comps)


@dataclass(frozen=True)
class OrientedStripes:
    size: tuple = (8, 8)
    angle_set: tuple = (0.0, np.pi / 4, np.pi / 2, 3 * np.pi / 4)
    frequency_range: tuple = (0.1, 0.25)

    def __post_init__(self):
        object.__setattr__(self, "size", tuple(int(s) for s in self.size))
        object.__setattr__(self, "angle_set", tuple(float(a) for a in self.angle_set))
        if len(self.size) != 2 or min(self.size) < 1:
            raise DomainError("stripe size must be (height, width) with positive entries")
        if not self.angle_set or any(not 0.0 <= a < np.pi for a in self.angle_set):
            raise DomainError("stripe angles must lie in [0, pi)")
        lo, hi = self.frequency_range
        if not 0 <= lo <= hi:
            raise DomainError("frequency_range must satisfy 0 <= lo <= hi")


@dataclass(frozen=True)
class ToyDatasetSpec:
    variant: VonMisesMixture | OrientedStripes = field(default_factory=VonMisesMixture)
    count: int = 1000
    rng_seed: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise DomainError("count must be >= 1")


def mixture_draws(variant: VonMisesMixture, size, rng) -> np.ndarray:
    """Component labels then phases, for ``size`` independent scalars."""
    weights = np.array([c[2] for c in variant.components])
    labels = rng.choice(len(weights), size=size, p=weights / weights.sum())
    out = np.empty(size)
    for k, (mu, kappa, _) in enumerate(variant.components):
        sel = labels == k
        if np.any(sel):
            out[sel] = von_mises_sample(VonMisesParams(mu, kappa), int(np.sum(sel)), rng).phases
    return out


def stripe_image(size, angle, freq) -> np.ndarray:
    """``sin(2 pi freq (x cos a + y sin a))`` with ``x`` the column and ``y`` the row index."""
    h, w = size
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    return np.sin(2.0 * np.pi * freq * (x * np.cos(angle) + y * np.sin(angle)))


def make_toy_dataset(spec: ToyDatasetSpec) -> PhaseField:
    """A batched field with ``spec.count`` items; deterministic given the seed."""
    rng = stream(spec.rng_seed, 11)
    v = spec.variant
    if isinstance(v, VonMisesMixture):
        draws = mixture_draws(v, spec.count * v.sites, rng).reshape(spec.count, v.sites)
        return PhaseField(wrap(draws))
    if isinstance(v, OrientedStripes):
        angles = np.array(v.angle_set)[rng.integers(len(v.angle_set), size=spec.count)]
        freqs = rng.uniform(v.frequency_range[0], v.frequency_range[1], spec.count)
        imgs = [pixel_to_phase(PixelPatch(stripe_image(v.size, a, f))).phases for a, f in zip(angles, freqs)]
        return PhaseField(np.stack(imgs), lattice=True)
    raise DomainError(f"unknown dataset variant {type(v).__name__}")


# --------------------------------------------------------------------------
# dataset files: .npz archives or directories of .pgm files


def save_dataset(data: PhaseField, path, record: str = ""):
    import io

    buf = io.BytesIO()
    np.savez(buf, phases=data.phases, lattice=np.array(data.lattice), record=np.array(record))
    _atomic_write(os.fspath(path), buf.getvalue())


def load_dataset(path) -> PhaseField:
    path = os.fspath(path)
    if os.path.isdir(path):
        names = sorted(n for n in os.listdir(path) if n.lower().endswith(".pgm"))
        if not names:
            raise FormatError(f"no .pgm files in {path}")
        fields = [pixel_to_phase(load_pgm(os.path.join(path, n))).phases for n in names]
        if len({f.shape for f in fields}) != 1:
            raise FormatError("PGM images in a dataset directory must share one size")
        return PhaseField(np.stack(fields), lattice=True)
    try:
        with np.load(path, allow_pickle=False) as z:
            phases = z["phases"]
            lattice = bool(z["lattice"]) if "lattice" in z else phases.ndim >= 3
    except (OSError, ValueError, KeyError) as exc:
        raise FormatError(f"cannot read dataset {path}: {exc}") from None
    if phases.ndim < 2:
        raise FormatError("dataset phases need a leading item axis")
    return PhaseField(phases, lattice=lattice)
