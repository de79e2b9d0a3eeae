"""Experiment configuration files.

UTF-8 text with ``[section]`` headers, ``key = value`` lines and ``#``
comments.  Every key is checked against a schema; an unknown section or key is
a :class:`ConfigError` so that a misspelled hyperparameter cannot silently
fall back to its default.
"""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError
from .kuramoto_sde import Schedule, Topology, linear_schedule, preset
from .records import config_digest, run_record
from .sampling import NllConfig, PriorSpec, prior_for
from .score_net import NetConfig
from .training import TrainConfig

__all__ = ["RunConfig", "load_config", "parse_config", "DatasetConfig", "load_dataset_spec", "parse_dataset_spec"]


def _floats(text):
    return tuple(float(x) for x in text.replace(",", " ").split())


def _ints(text):
    return tuple(int(x) for x in text.replace(",", " ").split())


def _bool(text):
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


SCHEMA = {
    "run": {"seed": int},
    "schedule": {
        "kind": str,
        "steps": int,
        "psi_ref": float,
        "noise_range": _floats,
        "coupling_range": _floats,
        "ref_range": _floats,
        "reference_only": _bool,
    },
    "topology": {"kind": str, "radius": int},
    "model": {"arch": str, "hidden": _ints, "time_embed": int, "sites": int, "lattice": _ints},
    "train": {
        "learning_rate": float,
        "ema_decay": float,
        "mc_samples": int,
        "batch_size": int,
        "steps": int,
        "weight_decay": float,
        "grad_clip": float,
        "checkpoint_every": int,
        "val_every": int,
        "val_probes": int,
    },
    "data": {"path": str},
    "sample": {"r_assumed": float, "use_ema": _bool},
    "nll": {"probes": int, "jvp_epsilon": float},
    "fp": {"bins": int, "hist_bins": int, "scheme": str},
    "cache": {"samples_per_item": int},
}


def _read(text: str, schema) -> dict:
    parser = configparser.ConfigParser(
        interpolation=None, comment_prefixes=("#",), inline_comment_prefixes=("#",), delimiters=("=",)
    )
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    out = {}
    for section in parser.sections():
        if section not in schema:
            raise ConfigError(f"unknown config section [{section}]")
        keys = schema[section]
        out[section] = {}
        for key, raw in parser.items(section):
            if key not in keys:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            try:
                out[section][key] = keys[key](raw.strip())
            except ValueError as exc:
                raise ConfigError(f"bad value for {section}.{key}: {exc}") from None
    return out


@dataclass(frozen=True, eq=False)
class RunConfig:
    sched: Schedule
    topology: Topology
    net: NetConfig
    train: TrainConfig
    seed: int = 0
    data_path: str | None = None
    r_assumed: float = 1.0
    use_ema: bool = True
    nll: NllConfig = field(default_factory=NllConfig)
    fp_bins: int = 720
    fp_hist_bins: int = 36
    fp_scheme: str = "sg"
    samples_per_item: int = 8
    digest: str = ""

    @property
    def record(self) -> str:
        return run_record(self.digest, self.seed)

    def prior(self) -> PriorSpec:
        return prior_for(self.sched, self.r_assumed)


def _schedule(sec: dict) -> Schedule:
    kind = sec.get("kind", "global")
    T = sec.get("steps", 100)
    psi_ref = sec.get("psi_ref", 0.0)
    if kind in ("global", "local"):
        extra = {"noise_range", "coupling_range", "ref_range"} & set(sec)
        if extra:
            raise ConfigError(f"schedule.kind = {kind} is a preset; drop {sorted(extra)} or use kind = linear")
        sched = preset(kind, T, psi_ref)
    elif kind == "linear":
        for name in ("noise_range", "coupling_range", "ref_range"):
            if name not in sec:
                raise ConfigError(f"linear schedule needs schedule.{name}")
            if len(sec[name]) != 2:
                raise ConfigError(f"schedule.{name} takes two numbers")
        sched = linear_schedule(T, sec["noise_range"], sec["coupling_range"], sec["ref_range"], psi_ref)
    else:
        raise ConfigError(f"unknown schedule kind {kind!r}")
    if sec.get("reference_only", False):
        sched = sched.with_coupling(0.0)
    return sched


def parse_config(text: str, base_dir: str = ".") -> RunConfig:
    raw = _read(text, SCHEMA)
    try:
        sched = _schedule(raw.get("schedule", {}))
        top = raw.get("topology", {})
        topology = Topology(top.get("kind", "global"), top.get("radius", 2))
        if raw.get("schedule", {}).get("reference_only", False) and "topology" not in raw:
            topology = Topology("reference")
        m = raw.get("model", {})
        lattice = m.get("lattice")
        sites = m.get("sites", int(np.prod(lattice)) if lattice else 64)
        net = NetConfig(
            input_sites=sites,
            hidden_widths=m.get("hidden", (64, 64)),
            time_embed_dim=m.get("time_embed", 16),
            arch=m.get("arch", "mlp"),
            lattice_shape=lattice,
            horizon=sched.T,
        )
        tr = raw.get("train", {})
        seed = raw.get("run", {}).get("seed", 0)
        train = TrainConfig(
            learning_rate=tr.get("learning_rate", 1e-4),
            ema_decay=tr.get("ema_decay", 0.995),
            mc_samples=tr.get("mc_samples", 5),
            batch_size=tr.get("batch_size", 16),
            max_steps=tr.get("steps", 1000),
            weight_decay=tr.get("weight_decay", 0.0),
            grad_clip=tr.get("grad_clip", 10.0),
            rng_seed=seed,
            checkpoint_every=tr.get("checkpoint_every", 0),
            val_every=tr.get("val_every", 0),
            val_probes=tr.get("val_probes", 32),
        )
        nl = raw.get("nll", {})
        nll = NllConfig(hutchinson_probes=nl.get("probes", 8), jvp_epsilon=nl.get("jvp_epsilon", 1e-5))
    except DomainError as exc:
        raise ConfigError(str(exc)) from None
    data = raw.get("data", {}).get("path")
    if data is not None and not os.path.isabs(data):
        data = os.path.join(base_dir, data)
    fp = raw.get("fp", {})
    if fp.get("scheme", "sg") not in ("sg", "upwind"):
        raise ConfigError(f"unknown fp.scheme {fp['scheme']!r}")
    bins, hist = fp.get("bins", 720), fp.get("hist_bins", 36)
    if bins < 3 or hist < 1 or bins % hist:
        raise ConfigError("fp.bins must be >= 3 and a multiple of fp.hist_bins")
    sp = raw.get("sample", {})
    r_assumed = sp.get("r_assumed", 1.0)
    if not 0 <= r_assumed <= 1:
        raise ConfigError("sample.r_assumed must lie in [0, 1]")
    spi = raw.get("cache", {}).get("samples_per_item", 8)
    if spi < 0:
        raise ConfigError("cache.samples_per_item must be >= 0")
    return RunConfig(
        sched, topology, net, train, seed, data, r_assumed, sp.get("use_ema", True), nll,
        bins, hist, fp.get("scheme", "sg"), spi, config_digest(text),
    )


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except UnicodeDecodeError:
        raise ConfigError(f"config {path} is not UTF-8") from None
    return parse_config(text, os.path.dirname(os.path.abspath(path)))


# --------------------------------------------------------------------------
# toy dataset spec files

DATASET_SCHEMA = {
    "dataset": {
        "variant": str,
        "count": int,
        "seed": int,
        "sites": int,
        "components": str,
        "size": _ints,
        "angles": _floats,
        "freq_range": _floats,
    }
}


@dataclass(frozen=True)
class DatasetConfig:
    spec: object
    digest: str

    @property
    def record(self) -> str:
        return run_record(self.digest, self.spec.rng_seed)


def _components(text):
    comps = []
    for chunk in text.split(","):
        parts = chunk.split(":")
        if len(parts) != 3:
            raise ConfigError(f"mixture component {chunk.strip()!r} must be mu:kappa:weight")
        try:
            comps.append(tuple(float(p) for p in parts))
        except ValueError:
            raise ConfigError(f"mixture component {chunk.strip()!r} is not numeric") from None
    return tuple(comps)


def parse_dataset_spec(text: str) -> DatasetConfig:
    from .data_io import OrientedStripes, ToyDatasetSpec, VonMisesMixture

    raw = _read(text, DATASET_SCHEMA).get("dataset")
    if raw is None:
        raise ConfigError("dataset spec needs a [dataset] section")
    variant = raw.get("variant", "mixture")
    try:
        if variant == "mixture":
            for k in ("size", "angles", "freq_range"):
                if k in raw:
                    raise ConfigError(f"dataset.{k} does not apply to the mixture variant")
            kw = {}
            if "components" in raw:
                kw["components"] = _components(raw["components"])
            v = VonMisesMixture(sites=raw.get("sites", 64), **kw)
        elif variant == "stripes":
            for k in ("sites", "components"):
                if k in raw:
                    raise ConfigError(f"dataset.{k} does not apply to the stripes variant")
            kw = {}
            if "size" in raw:
                kw["size"] = raw["size"]
            if "angles" in raw:
                kw["angle_set"] = raw["angles"]
            if "freq_range" in raw:
                kw["frequency_range"] = raw["freq_range"]
            v = OrientedStripes(**kw)
        else:
            raise ConfigError(f"unknown dataset variant {variant!r}")
        spec = ToyDatasetSpec(v, raw.get("count", 1000), raw.get("seed", 0))
    except DomainError as exc:
        raise ConfigError(str(exc)) from None
    return DatasetConfig(spec, config_digest(text))


def load_dataset_spec(path) -> DatasetConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_dataset_spec(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read dataset spec {path}: {exc.strerror}") from None
