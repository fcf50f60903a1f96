"""Experiment preparation and hyper-parameter sweeps.

A sweep re-runs the full attack once per value of a single swept
parameter, holding everything else (dataset, victim, seed) fixed.
Values that cannot be run are skipped with a note instead of aborting
the whole table.
"""

import os
from dataclasses import replace

import numpy as np

from . import solver as sv
from .data import load_dataset, make_digit_splits, sample_attack_batch, Splits
from .errors import ConfigError, InputError, OptimizationError
from .plotting import plot_sweep
from .quantized import load_checkpoint
from .victim import desk_architecture, train_victim

# spec'd sweep names -> ExperimentConfig fields
PARAM_KEYS = {
    "t": "target",
    "eps": "eps",
    "kappa": "kappa",
    "M": "m",
    "b": "b",
    "gamma": "gamma",
}

_INT_PARAMS = ("t", "M", "b")


def load_splits(cfg):
    """Resolve the config's dataset key into train/attacker/test splits.

    "builtin" renders the synthetic digit benchmark from the master
    seed. Anything else must be a directory holding attacker.bin and
    test.bin bundles (plus train.bin when the victim is trained here).
    """
    if cfg.dataset == "builtin":
        return make_digit_splits(cfg.seed)
    root = cfg.dataset
    if not os.path.isdir(root):
        raise InputError(
            f"dataset {root!r} is neither 'builtin' nor a bundle directory")
    train_path = os.path.join(root, "train.bin")
    train = load_dataset(train_path, tag="train") if os.path.exists(train_path) else None
    if train is None and cfg.victim == "train":
        raise InputError(f"victim = train needs {train_path}")
    return Splits(
        train=train,
        attacker=load_dataset(os.path.join(root, "attacker.bin"), tag="attacker"),
        test=load_dataset(os.path.join(root, "test.bin"), tag="test"),
    )


def load_victim(cfg, splits):
    """Train the victim or load it from a checkpoint path.

    Returns (model, info dict). Seeds for training and batch sampling
    are fixed offsets of the master seed so the three RNG streams
    (data, training, batch choice) never collide.
    """
    if cfg.victim == "train":
        model, info = train_victim(
            desk_architecture(), splits.train, epochs=cfg.epochs,
            seed=cfg.seed + 1, q_bits=cfg.q_bits, lr=cfg.train_lr)
        return model, info
    model = load_checkpoint(cfg.victim)
    if model.q_bits != cfg.q_bits:
        raise ConfigError(
            f"checkpoint is {model.q_bits}-bit but config says q_bits = {cfg.q_bits}",
            keys=["q_bits"])
    return model, {}


def run_attack(cfg, model, splits):
    """One full attack under `cfg`. Returns the solver's outcome."""
    batch = sample_attack_batch(splits.attacker, cfg.m, seed=cfg.seed + 2)
    return sv.staged_attack(
        model, batch.images, batch.labels,
        splits.test.images, splits.test.labels,
        cfg.admm_config(), cfg.mode)


def sweep(param, values, base_cfg, model=None, splits=None):
    """Run one attack per value of `param`, fixed seed.

    Returns (reports, notes): lists parallel to `values`, where a
    skipped value has report None and a note explaining why.
    """
    if param not in PARAM_KEYS:
        raise InputError(
            f"cannot sweep {param!r}; choose one of {sorted(PARAM_KEYS)}")
    if splits is None:
        splits = load_splits(base_cfg)
    if model is None:
        model, _ = load_victim(base_cfg, splits)

    key = PARAM_KEYS[param]
    reports, notes = [], []
    for value in values:
        typed = int(value) if param in _INT_PARAMS else float(value)
        try:
            cfg = replace(base_cfg, **{key: typed})
            if param == "t" and typed >= model.n_classes:
                raise InputError(
                    f"target {typed} out of range for {model.n_classes} classes")
            out = run_attack(cfg, model, splits)
        except (ConfigError, InputError, OptimizationError) as exc:
            reports.append(None)
            notes.append(f"skipped: {exc}")
            continue
        reports.append(out.report)
        notes.append("")
    return reports, notes


def sweep_csv_text(param, values, reports, notes):
    lines = [f"{param},ta,pa_ta,asr,n_flip,mse,note"]
    for value, rep, note in zip(values, reports, notes):
        if rep is None:
            lines.append(f"{value},,,,,,{_csv_quote(note)}")
        else:
            lines.append(
                f"{value},{rep.ta!r},{rep.pa_ta!r},{rep.asr!r},"
                f"{rep.n_flip},{rep.mse!r},{_csv_quote(note)}")
    return "\n".join(lines) + "\n"


def _csv_quote(text):
    if "," in text or '"' in text:
        return '"' + text.replace('"', '""') + '"'
    return text


def write_sweep_outputs(param, values, reports, notes, out_dir):
    """Emit the CSV table and the metric plot; returns written paths."""
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"sweep_{param}.csv")
    with open(csv_path, "w") as fh:
        fh.write(sweep_csv_text(param, values, reports, notes))
    numeric = [float(v) for v in values]
    plot_path = os.path.join(out_dir, f"sweep_{param}.png")
    plot_sweep(param, numeric, reports, plot_path)
    return [csv_path, plot_path]
