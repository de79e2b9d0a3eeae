"""Shared CLI workload: small configs and one run of every subcommand."""
import os

from kodm import cli

FLAT_CONFIG = """\
[run]
seed = 3
[schedule]
kind = linear
steps = 10
noise_range = 0.001, 0.1   # inline comment
coupling_range = 0.0001, 0.02
ref_range = 0.0006, 0.06
[model]
arch = mlp
hidden = 8
time_embed = 4
sites = 4
[train]
learning_rate = 0.001
steps = 6
batch_size = 4
mc_samples = 2
checkpoint_every = 3
val_every = 3
val_probes = 2
[data]
path = data/data.npz
[nll]
probes = 2
[fp]
bins = 72
hist_bins = 36
[cache]
samples_per_item = 2
"""

LATTICE_CONFIG = """\
[run]
seed = 1
[schedule]
kind = linear
steps = 8
noise_range = 0.001, 0.1
coupling_range = 0.0001, 0.02
ref_range = 0.0006, 0.06
[topology]
kind = local
radius = 1
[model]
arch = conv
hidden = 4, 4
time_embed = 4
lattice = 4, 4
[train]
steps = 3
batch_size = 2
mc_samples = 1
[data]
path = stripes/pgm
"""

MIXTURE_SPEC = """\
[dataset]
variant = mixture
count = 12
seed = 5
sites = 4
components = -1.5708:8:0.5, 1.5708:8:0.5
"""

STRIPE_SPEC = """\
[dataset]
variant = stripes
count = 3
seed = 2
size = 4, 4
angles = 0, 0.7853981633974483
"""


def write_workspace(root):
    os.makedirs(root, exist_ok=True)
    with open(os.path.join(root, "run.ini"), "w") as fh:
        fh.write(FLAT_CONFIG)
    with open(os.path.join(root, "lattice.ini"), "w") as fh:
        fh.write(LATTICE_CONFIG)
    with open(os.path.join(root, "mix.ini"), "w") as fh:
        fh.write(MIXTURE_SPEC)
    with open(os.path.join(root, "stripes.ini"), "w") as fh:
        fh.write(STRIPE_SPEC)


def run_all(root):
    j = lambda *p: os.path.join(root, *p)
    cmds = [
        ["make-data", "--spec", j("mix.ini"), "--out", j("data")],
        ["make-data", "--spec", j("stripes.ini"), "--out", j("stripes")],
        ["cache", "--config", j("run.ini"), "--data", j("data", "data.npz"), "--out", j("traj.kodc")],
        ["train", "--config", j("run.ini"), "--out", j("train")],
        ["train", "--config", j("run.ini"), "--cache", j("traj.kodc"), "--out", j("train_cached")],
        ["sample", "--checkpoint", j("train", "final.kodm"), "--config", j("run.ini"), "--n", "5",
         "--out", j("samples_sde")],
        ["sample", "--checkpoint", j("train", "final.kodm"), "--config", j("run.ini"), "--n", "5", "--mode", "ode",
         "--dump-trajectory", "--out", j("samples_ode")],
        ["forward-diag", "--config", j("run.ini"), "--n", "6", "--out", j("diag.csv")],
        ["fp-verify", "--config", j("run.ini"), "--n", "200", "--out", j("tv.csv"), "--densities", j("dens.csv")],
        ["nll", "--checkpoint", j("train", "final.kodm"), "--config", j("run.ini"), "--data", j("data", "data.npz"),
         "--out", j("nll.csv")],
        ["train", "--config", j("lattice.ini"), "--out", j("lat_train")],
        ["sample", "--checkpoint", j("lat_train", "final.kodm"), "--config", j("lattice.ini"), "--n", "2",
         "--out", j("lat_samples")],
        ["forward-diag", "--config", j("lattice.ini"), "--n", "2", "--out", j("lat_diag.csv")],
    ]
    for argv in cmds:
        assert cli.main(argv) == 0, argv


def snapshot(root):
    out = {}
    for base, _, files in os.walk(root):
        for name in files:
            path = os.path.join(base, name)
            with open(path, "rb") as fh:
                out[os.path.relpath(path, root)] = fh.read()
    return out
