"""Periodicity-aware score networks with exact reverse-mode gradients.

Phases enter only through ``(sin, cos)`` features and the two network outputs
per site are projected back onto the tangent direction,
``s = s1 cos(theta) + s2 sin(theta)``.  Two desk-scale bodies are provided: an
MLP over the whole flattened field and a stack of 3x3 convolutions whose hidden
channels are modulated per channel by the time embedding.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import DomainError, FormatError
from .phase_core import PhaseField, stream

__all__ = [
    "NetConfig",
    "ScoreNet",
    "embed_phases",
    "time_embedding",
    "init_net",
    "score_forward",
    "score_backward",
    "save_checkpoint",
    "load_checkpoint",
    "encode_checkpoint",
]


@dataclass(frozen=True)
class NetConfig:
    input_sites: int
    hidden_widths: tuple = (64, 64)
    time_embed_dim: int = 16
    arch: str = "mlp"
    # conv only: lattice the sites are arranged on; flat fields default to (1, n)
    lattice_shape: tuple | None = None
    horizon: int = 100

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.input_sites < 1:
            raise DomainError("input_sites must be >= 1")
        if not self.hidden_widths or min(self.hidden_widths) < 1:
            raise DomainError("hidden_widths must be a nonempty list of positive widths")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise DomainError("time_embed_dim must be even and >= 2")
        if self.arch not in ("mlp", "conv"):
            raise DomainError(f"unknown arch {self.arch!r}")
        if self.horizon < 1:
            raise DomainError("horizon must be >= 1")
        if self.arch == "conv":
            shape = self.lattice_shape or (1, self.input_sites)
            shape = tuple(int(s) for s in shape)
            if len(shape) != 2 or shape[0] * shape[1] != self.input_sites:
                raise DomainError("lattice_shape must multiply to input_sites")
            object.__setattr__(self, "lattice_shape", shape)
        elif self.lattice_shape is not None:
            object.__setattr__(self, "lattice_shape", tuple(int(s) for s in self.lattice_shape))


def _layer_shapes(cfg: NetConfig):
    shapes = []
    dt = cfg.time_embed_dim
    if cfg.arch == "mlp":
        widths = (2 * cfg.input_sites + dt,) + cfg.hidden_widths + (2 * cfg.input_sites,)
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            shapes.append((f"dense{i}.w", (a, b), a, b))
            shapes.append((f"dense{i}.b", (b,), None, None))
    else:
        chans = (2,) + cfg.hidden_widths + (2,)
        last = len(chans) - 2
        for i, (a, b) in enumerate(zip(chans[:-1], chans[1:])):
            shapes.append((f"conv{i}.w", (3, 3, a, b), 9 * a, 9 * b))
            shapes.append((f"conv{i}.b", (b,), None, None))
            if i < last:
                shapes.append((f"conv{i}.scale", (dt, b), dt, b))
                shapes.append((f"conv{i}.shift", (dt, b), dt, b))
    return shapes


@dataclass(eq=False)
class ScoreNet:
    config: NetConfig
    params: np.ndarray
    layout: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        layout = {}
        offset = 0
        for name, shape, _, _ in _layer_shapes(self.config):
            size = int(np.prod(shape))
            layout[name] = (slice(offset, offset + size), shape)
            offset += size
        params = np.asarray(self.params, dtype=np.float64)
        if params.shape != (offset,):
            raise DomainError(f"parameter vector has length {params.size}, layout needs {offset}")
        if not np.all(np.isfinite(params)):
            raise DomainError("non-finite network parameters")
        self.params = params
        self.layout = layout

    @property
    def size(self) -> int:
        return self.params.size

    def view(self, name: str, params=None) -> np.ndarray:
        sl, shape = self.layout[name]
        p = self.params if params is None else params
        return p[sl].reshape(shape)

    def with_params(self, params) -> "ScoreNet":
        return ScoreNet(self.config, np.array(params, dtype=np.float64))

    def layer_of(self, index: int) -> str:
        for name, (sl, _) in self.layout.items():
            if sl.start <= index < sl.stop:
                return name
        raise IndexError(index)


def init_net(config: NetConfig, seed=0) -> ScoreNet:
    """Glorot-uniform weights, zero biases, zero output layer (initial score is 0)."""
    rng = stream(seed)
    shapes = _layer_shapes(config)
    final_prefix = shapes[-1][0].split(".")[0]
    parts = []
    for name, shape, fan_in, fan_out in shapes:
        if fan_in is None or name.startswith(final_prefix + "."):
            parts.append(np.zeros(int(np.prod(shape))))
        else:
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            parts.append(rng.uniform(-lim, lim, int(np.prod(shape))))
    return ScoreNet(config, np.concatenate(parts))


def embed_phases(field) -> np.ndarray:
    """Interleaved per-site ``(sin theta_i, cos theta_i)`` features, length ``2n``."""
    theta = field.flat_view() if isinstance(field, PhaseField) else np.asarray(field, dtype=np.float64)
    out = np.empty(theta.shape[:-1] + (2 * theta.shape[-1],))
    out[..., 0::2] = np.sin(theta)
    out[..., 1::2] = np.cos(theta)
    return out


def time_embedding(t, T, dim: int) -> np.ndarray:
    """Sinusoidal embedding of ``t/T`` at ``dim/2`` frequencies spaced geometrically in [1, 1e4]."""
    if dim % 2 or dim < 2:
        raise DomainError("time embedding dimension must be even")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > T):
        raise DomainError(f"timestep outside [0, {T}]")
    half = dim // 2
    freqs = np.logspace(0.0, 4.0, half) if half > 1 else np.ones(1)
    arg = (t / T)[..., None] * freqs
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)


def _prepare(net: ScoreNet, field: PhaseField, t):
    cfg = net.config
    if field.n != cfg.input_sites:
        raise DomainError(f"field has {field.n} sites, network expects {cfg.input_sites}")
    theta = field.flat_view().reshape(-1, field.n)
    B = theta.shape[0]
    t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1) if np.ndim(t) else np.asarray(t, float), (B,))
    temb = time_embedding(t_arr, cfg.horizon, cfg.time_embed_dim)
    return theta, temb


def _mlp_forward(net, theta, temb, params):
    cfg = net.config
    n_layers = len(cfg.hidden_widths) + 1
    x = np.concatenate([embed_phases(theta), temb], axis=1)
    acts = [x]
    h = x
    for i in range(n_layers):
        z = h @ net.view(f"dense{i}.w", params) + net.view(f"dense{i}.b", params)
        h = np.tanh(z) if i < n_layers - 1 else z
        acts.append(h)
    n = cfg.input_sites
    return h[:, :n], h[:, n:], acts


def _mlp_backward(net, acts, d_s1, d_s2, params, grad):
    cfg = net.config
    n_layers = len(cfg.hidden_widths) + 1
    delta = np.concatenate([d_s1, d_s2], axis=1)
    for i in reversed(range(n_layers)):
        h_in = acts[i]
        if i < n_layers - 1:
            delta = delta * (1.0 - acts[i + 1] ** 2)
        grad[net.layout[f"dense{i}.w"][0]] = (h_in.T @ delta).ravel()
        grad[net.layout[f"dense{i}.b"][0]] = delta.sum(axis=0)
        delta = delta @ net.view(f"dense{i}.w", params).T
    d_embed = delta[:, : 2 * cfg.input_sites]
    return d_embed[:, 0::2], d_embed[:, 1::2]


def _conv3x3(x, w):
    B, H, W, _ = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.zeros((B, H, W, w.shape[-1]))
    for dy in range(3):
        for dx in range(3):
            out += xp[:, dy:dy + H, dx:dx + W, :] @ w[dy, dx]
    return out


def _conv3x3_backward(x, w, d_out):
    B, H, W, C = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    flat_d = d_out.reshape(-1, d_out.shape[-1])
    for dy in range(3):
        for dx in range(3):
            patch = xp[:, dy:dy + H, dx:dx + W, :].reshape(-1, C)
            dw[dy, dx] = patch.T @ flat_d
            dxp[:, dy:dy + H, dx:dx + W, :] += d_out @ w[dy, dx].T
    return dxp[:, 1:-1, 1:-1, :], dw


def _conv_forward(net, theta, temb, params):
    cfg = net.config
    H, W = cfg.lattice_shape
    n_layers = len(cfg.hidden_widths) + 1
    grid = theta.reshape(-1, H, W)
    h = np.stack([np.sin(grid), np.cos(grid)], axis=-1)
    cache = []
    for i in range(n_layers):
        a = _conv3x3(h, net.view(f"conv{i}.w", params)) + net.view(f"conv{i}.b", params)
        if i < n_layers - 1:
            scale = (temb @ net.view(f"conv{i}.scale", params))[:, None, None, :]
            shift = (temb @ net.view(f"conv{i}.shift", params))[:, None, None, :]
            out = np.tanh(a * (1.0 + scale) + shift)
            cache.append((h, a, scale, out))
        else:
            out = a
            cache.append((h, a, None, out))
        h = out
    out = h.reshape(-1, H * W, 2)
    return out[..., 0], out[..., 1], cache


def _conv_backward(net, cache, temb, d_s1, d_s2, params, grad):
    cfg = net.config
    H, W = cfg.lattice_shape
    n_layers = len(cfg.hidden_widths) + 1
    d = np.stack([d_s1, d_s2], axis=-1).reshape(-1, H, W, 2)
    for i in reversed(range(n_layers)):
        h_in, a, scale, out = cache[i]
        if i < n_layers - 1:
            dz = d * (1.0 - out ** 2)
            d_scale = np.sum(dz * a, axis=(1, 2))
            d_shift = np.sum(dz, axis=(1, 2))
            grad[net.layout[f"conv{i}.scale"][0]] = (temb.T @ d_scale).ravel()
            grad[net.layout[f"conv{i}.shift"][0]] = (temb.T @ d_shift).ravel()
            da = dz * (1.0 + scale)
        else:
            da = d
        grad[net.layout[f"conv{i}.b"][0]] = da.sum(axis=(0, 1, 2))
        d, dw = _conv3x3_backward(h_in, net.view(f"conv{i}.w", params), da)
        grad[net.layout[f"conv{i}.w"][0]] = dw.ravel()
    d = d.reshape(-1, H * W, 2)
    return d[..., 0], d[..., 1]


def _forward(net: ScoreNet, field: PhaseField, t, params=None):
    params = net.params if params is None else params
    theta, temb = _prepare(net, field, t)
    if net.config.arch == "mlp":
        s1, s2, cache = _mlp_forward(net, theta, temb, params)
    else:
        s1, s2, cache = _conv_forward(net, theta, temb, params)
    c, s = np.cos(theta), np.sin(theta)
    score = s1 * c + s2 * s
    return score, (theta, temb, s1, s2, cache)


def score_forward(net: ScoreNet, field: PhaseField, t, params=None) -> np.ndarray:
    """Score per site, shaped like ``field.phases``."""
    score, _ = _forward(net, field, t, params)
    return score.reshape(field.phases.shape)


def score_backward(net: ScoreNet, field: PhaseField, t, output_cotangent, params=None, input_grad=False):
    """Gradient of ``sum_i cotangent_i * s_i`` w.r.t. the parameters.

    With ``input_grad=True`` returns ``(param_grad, phase_grad)``.
    """
    params = net.params if params is None else params
    ct = np.asarray(output_cotangent, dtype=np.float64)
    if ct.shape != field.phases.shape:
        raise DomainError(f"cotangent shape {ct.shape} does not match field {field.phases.shape}")
    _, (theta, temb, s1, s2, cache) = _forward(net, field, t, params)
    ct = ct.reshape(theta.shape)
    c, s = np.cos(theta), np.sin(theta)
    grad = np.zeros_like(params)
    if net.config.arch == "mlp":
        d_sin, d_cos = _mlp_backward(net, cache, ct * c, ct * s, params, grad)
    else:
        d_sin, d_cos = _conv_backward(net, cache, temb, ct * c, ct * s, params, grad)
    if not input_grad:
        return grad
    d_theta = d_sin * c - d_cos * s + ct * (s2 * c - s1 * s)
    return grad, d_theta.reshape(field.phases.shape)


# --------------------------------------------------------------------------
# checkpoints

_CKPT_MAGIC = b"KODM"
_CKPT_VERSION = 1
_ARCH_TAG = {"mlp": 0, "conv": 1}


def _tlv(tag: int, payload: bytes) -> bytes:
    return struct.pack("<BI", tag, len(payload)) + payload


def _encode_config(cfg: NetConfig, record: str | None = None) -> bytes:
    parts = [
        _tlv(1, struct.pack("<I", cfg.input_sites)),
        _tlv(2, struct.pack(f"<{len(cfg.hidden_widths)}I", *cfg.hidden_widths)),
        _tlv(3, struct.pack("<I", cfg.time_embed_dim)),
        _tlv(4, struct.pack("<B", _ARCH_TAG[cfg.arch])),
        _tlv(6, struct.pack("<I", cfg.horizon)),
    ]
    if cfg.lattice_shape is not None:
        parts.append(_tlv(5, struct.pack("<II", *cfg.lattice_shape)))
    if record:
        parts.append(_tlv(7, record.encode("utf-8")))
    body = b"".join(parts)
    return struct.pack("<I", len(body)) + body


def _decode_config(buf: bytes, pos: int):
    if pos + 4 > len(buf):
        raise FormatError("checkpoint config length truncated", pos)
    (length,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    end = pos + length
    if end > len(buf):
        raise FormatError("checkpoint config truncated", pos)
    fields = {}
    while pos < end:
        if pos + 5 > end:
            raise FormatError("checkpoint TLV header truncated", pos)
        tag, size = struct.unpack_from("<BI", buf, pos)
        pos += 5
        value = buf[pos:pos + size]
        if len(value) != size or pos + size > end:
            raise FormatError("checkpoint TLV value truncated", pos)
        if tag == 1:
            fields["input_sites"] = struct.unpack("<I", value)[0]
        elif tag == 2:
            fields["hidden_widths"] = struct.unpack(f"<{size // 4}I", value)
        elif tag == 3:
            fields["time_embed_dim"] = struct.unpack("<I", value)[0]
        elif tag == 4:
            code = struct.unpack("<B", value)[0]
            arch = {v: k for k, v in _ARCH_TAG.items()}.get(code)
            if arch is None:
                raise FormatError(f"unknown arch code {code}", pos)
            fields["arch"] = arch
        elif tag == 5:
            fields["lattice_shape"] = struct.unpack("<II", value)
        elif tag == 6:
            fields["horizon"] = struct.unpack("<I", value)[0]
        elif tag == 7:
            # run record: provenance only
            pass
        else:
            raise FormatError(f"unknown checkpoint tag {tag}", pos - 5)
        pos += size
    try:
        return NetConfig(**fields), end
    except (TypeError, DomainError) as exc:
        raise FormatError(f"invalid network config in checkpoint: {exc}") from exc


def encode_checkpoint(net: ScoreNet, ema_params=None, record: str | None = None) -> bytes:
    parts = [_CKPT_MAGIC, struct.pack("<I", _CKPT_VERSION), _encode_config(net.config, record)]
    parts.append(struct.pack("<Q", net.size))
    parts.append(net.params.astype("<f8").tobytes())
    if ema_params is None:
        parts.append(struct.pack("<B", 0))
    else:
        ema = np.asarray(ema_params, dtype="<f8")
        if ema.shape != net.params.shape:
            raise DomainError("EMA parameters must match the network size")
        parts.append(struct.pack("<B", 1))
        parts.append(ema.tobytes())
    return b"".join(parts)


def save_checkpoint(path, net: ScoreNet, ema_params=None, record: str | None = None):
    """Write atomically (temporary file + rename)."""
    from .kuramoto_sde import _atomic_write

    _atomic_write(path, encode_checkpoint(net, ema_params, record))


def decode_checkpoint(buf: bytes):
    if buf[:4] != _CKPT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    if len(buf) < 8:
        raise FormatError("checkpoint header truncated", len(buf))
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != _CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    cfg, pos = _decode_config(buf, 8)
    if pos + 8 > len(buf):
        raise FormatError("parameter count truncated", pos)
    (count,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    if pos + 8 * count > len(buf):
        raise FormatError("parameter payload truncated", pos)
    params = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(np.float64)
    pos += 8 * count
    if pos >= len(buf):
        raise FormatError("EMA flag missing", pos)
    flag = buf[pos]
    pos += 1
    ema = None
    if flag == 1:
        if pos + 8 * count > len(buf):
            raise FormatError("EMA payload truncated", pos)
        ema = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(np.float64)
        pos += 8 * count
    elif flag != 0:
        raise FormatError(f"bad EMA flag {flag}", pos - 1)
    if pos != len(buf):
        raise FormatError("trailing bytes after checkpoint", pos)
    try:
        net = ScoreNet(cfg, params)
    except DomainError as exc:
        raise FormatError(str(exc)) from exc
    return net, ema


def load_checkpoint(path):
    """Return ``(net, ema_params_or_None)``."""
    with open(os.fspath(path), "rb") as fh:
        return decode_checkpoint(fh.read())
