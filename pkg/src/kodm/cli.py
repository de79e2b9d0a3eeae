"""Command-line entry point ``kodm``.

Exit codes: 0 success, 2 configuration error, 3 data or format error,
4 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import io
import logging
import os
import sys

import numpy as np

from .config import load_config, load_dataset_spec
from .data_io import load_dataset, make_toy_dataset, phase_to_pixel, save_dataset, save_pgm
from .errors import ConfigError, KodmError
from .fp_oracle import density_rows, ensemble_vs_fp
from .kuramoto_sde import _atomic_write, empirical_snr, precompute_cache, read_cache, write_cache
from .phase_core import PhaseField, order_parameter, stream
from .records import write_csv
from .sampling import generate, nll
from .score_net import load_checkpoint
from .training import train

log = logging.getLogger("kodm")


def _dataset(path, cfg):
    if path is None:
        raise ConfigError("no dataset given (set [data] path or pass --data)")
    data = load_dataset(path)
    if data.n != cfg.net.input_sites:
        raise ConfigError(f"dataset has {data.n} sites per item, [model] expects {cfg.net.input_sites}")
    return data


def _net(args, cfg):
    net, ema = load_checkpoint(args.checkpoint)
    if net.config.horizon != cfg.sched.T:
        raise ConfigError(f"checkpoint horizon {net.config.horizon} does not match schedule T={cfg.sched.T}")
    if cfg.use_ema and ema is not None:
        net = net.with_params(ema)
    return net


def cmd_train(args):
    cfg = load_config(args.config)
    data = _dataset(cfg.data_path, cfg)
    cache = read_cache(args.cache, cfg.sched, cfg.topology) if args.cache else None
    out = args.out or "."
    _, rows = train(data, cfg.sched, cfg.topology, cfg.net, cfg.train, cache=cache, sink=out,
                    record=cfg.record)
    last = rows[-1] if rows else None
    if last:
        log.info("trained %d steps; last loss %.5f", last[0], last[2])
    return 0


def cmd_sample(args):
    cfg = load_config(args.config)
    net = _net(args, cfg)
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    res = generate(net, cfg.sched, cfg.topology, args.n, args.mode, cfg.prior(), cfg.seed,
                   trajectory=args.dump_trajectory)
    samples, traj = res if args.dump_trajectory else (res, None)
    save_dataset(samples, os.path.join(out, "samples.npz"), cfg.record)
    if samples.lattice:
        clamped = 0
        for i in range(len(samples)):
            patch = phase_to_pixel(samples.phases[i])
            clamped += patch.clamped
            save_pgm(patch, os.path.join(out, f"sample-{i:05d}.pgm"), cfg.record)
        log.info("%d generated phases fell in the dead zone beyond 0.9*pi", clamped)
    if traj is not None:
        buf = io.BytesIO()
        np.savez(buf, trajectory=traj, record=np.array(cfg.record))
        _atomic_write(os.path.join(out, "trajectory.npz"), buf.getvalue())
        rows = []
        for t in range(traj.shape[0]):
            op = order_parameter(PhaseField(traj[t], samples.lattice))
            rows.append((t, float(np.mean(op.r)), float(np.angle(np.mean(np.exp(1j * np.asarray(op.psi)))))))
        write_csv(os.path.join(out, "trajectory_order.csv"), ("t", "r", "psi"), rows, cfg.record)
    return 0


def cmd_forward_diag(args):
    cfg = load_config(args.config)
    if cfg.data_path is not None:
        data = _dataset(cfg.data_path, cfg)
        idx = np.arange(args.n) % len(data)
        theta0 = PhaseField(data.phases[idx], data.lattice)
    else:
        shape = (args.n,) + (tuple(cfg.net.lattice_shape) if cfg.net.lattice_shape and cfg.net.lattice_shape[0] > 1
                             else (cfg.net.input_sites,))
        theta0 = PhaseField(stream(cfg.seed, 12).uniform(-np.pi, np.pi, shape), len(shape) == 3)
    rows = empirical_snr(theta0, cfg.sched, cfg.topology, probe_seeds=(cfg.seed,))
    write_csv(args.out, ("t", "r", "psi", "snr"), rows, cfg.record)
    return 0


def cmd_fp_verify(args):
    cfg = load_config(args.config)
    rep = ensemble_vs_fp(args.n, cfg.sched, cfg.topology, cfg.seed, cfg.fp_bins, cfg.fp_hist_bins, cfg.fp_scheme)
    write_csv(args.out, ("t", "tv"), rep.rows(), cfg.record)
    if args.densities:
        from .fp_oracle import FPGrid, SELF_CONSISTENT, fp_solve

        grids = fp_solve(FPGrid.uniform(cfg.fp_bins), cfg.sched, SELF_CONSISTENT, cfg.fp_scheme)
        write_csv(args.densities, ("t", "bin_center", "density"), density_rows(grids), cfg.record)
    return 0


def cmd_nll(args):
    cfg = load_config(args.config)
    net = _net(args, cfg)
    data = _dataset(args.data, cfg)
    nll_cfg = cfg.nll if args.probes is None else dataclasses.replace(cfg.nll, hutchinson_probes=args.probes)
    res = nll(net, data, cfg.sched, cfg.topology, nll_cfg, cfg.seed, cfg.prior())
    n = data.n
    rows = [
        (i, float(res.nats[i]), float(res.nats[i] / n), float(res.stderr[i]), int(res.seam_crossings[i]))
        for i in range(len(data))
    ]
    write_csv(args.out, ("index", "nll", "nll_per_site", "stderr", "seam_crossings"), rows, cfg.record)
    return 0


def cmd_cache(args):
    cfg = load_config(args.config)
    data = _dataset(args.data, cfg)
    cache = precompute_cache(data, cfg.sched, cfg.topology, cfg.samples_per_item, cfg.seed)
    write_cache(cache, args.out)
    return 0


def cmd_make_data(args):
    ds = load_dataset_spec(args.spec)
    data = make_toy_dataset(ds.spec)
    os.makedirs(args.out, exist_ok=True)
    save_dataset(data, os.path.join(args.out, "data.npz"), ds.record)
    if data.lattice:
        pgm_dir = os.path.join(args.out, "pgm")
        os.makedirs(pgm_dir, exist_ok=True)
        for i in range(len(data)):
            save_pgm(phase_to_pixel(data.phases[i]), os.path.join(pgm_dir, f"{i:05d}.pgm"), ds.record)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kodm", description="Kuramoto orientation diffusion experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train a score network")
    s.add_argument("--config", required=True)
    s.add_argument("--cache")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("sample", help="generate samples from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--mode", choices=("sde", "ode"), default="sde")
    s.add_argument("--dump-trajectory", action="store_true")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_sample)

    s = sub.add_parser("forward-diag", help="order parameter and empirical SNR per step")
    s.add_argument("--config", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_forward_diag)

    s = sub.add_parser("fp-verify", help="ensemble vs Fokker-Planck TV report")
    s.add_argument("--config", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--densities", help="also write the PDE densities (long CSV)")
    s.set_defaults(fn=cmd_fp_verify)

    s = sub.add_parser("nll", help="negative log-likelihood of a dataset")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--probes", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_nll)

    s = sub.add_parser("cache", help="precompute a forward trajectory cache")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_cache)

    s = sub.add_parser("make-data", help="write a synthetic dataset")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_make_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    for k in ("n", "probes"):
        v = getattr(args, k, None)
        if v is not None and v < 1:
            print(f"kodm: --{k} must be >= 1", file=sys.stderr)
            return 2
    try:
        return args.fn(args)
    except KodmError as exc:
        print(f"kodm: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"kodm: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
