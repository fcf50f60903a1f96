"""Command line front end: train, attack, eval, defend, sweep, render.

Every command resolves one flat configuration (file defaults, flag
overrides), writes a parseable config echo with the resolved seed into
the output directory, runs, and prints a one line summary. Artifacts
reference each other by content hash, never by timestamp. Failures
print a single machine readable JSON object to stderr and exit nonzero.
"""

import argparse
import hashlib
import json
import os
import sys
from dataclasses import fields, replace

import numpy as np

from . import trigger as tg
from .config import _SCHEMA, config_from_overrides, load_config
from .data import load_dataset, load_image_directory
from .defense import defense_eval
from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    FormatError,
    InputError,
    OptimizationError,
    StealthflipError,
)
from .metrics import evaluate
from .plotting import plot_convergence, render_trigger_panel
from .quantized import apply_flips, load_checkpoint, save_checkpoint
from .solver import read_flip_list, write_flip_list
from .sweep import PARAM_KEYS, load_splits, load_victim, run_attack, sweep, write_sweep_outputs
from .trigger import load_trigger, save_trigger
from .victim import accuracy

CHECKPOINT_NAME = "victim.ckpt"
TRIGGER_NAME = "trigger.bin"
FLIP_LIST_NAME = "flips.json"
TRACE_NAME = "trace.csv"
REPORT_NAME = "report.json"
ECHO_NAME = "config_echo.cfg"


def _sha256(data):
    if isinstance(data, str):
        data = data.encode()
    return hashlib.sha256(data).hexdigest()


def _file_sha256(path):
    with open(path, "rb") as fh:
        return _sha256(fh.read())


def _config_dict(cfg):
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}


def _resolve_config(args):
    overrides = {}
    for key in _SCHEMA:
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if args.config:
        cfg = load_config(args.config, overrides)
    else:
        cfg = config_from_overrides(overrides)
    if cfg.seed < 0:
        cfg = replace(cfg, seed=int.from_bytes(os.urandom(4), "little"))
    return cfg


def _write_echo(cfg):
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, ECHO_NAME)
    with open(path, "w") as fh:
        fh.write(cfg.to_text())
    return path


def _dataset_sha256(test_set):
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(test_set.images).tobytes())
    h.update(np.ascontiguousarray(test_set.labels).tobytes())
    return h.hexdigest()


def _artifact_paths(cfg):
    out = cfg.out_dir
    ckpt = os.path.join(out, CHECKPOINT_NAME)
    if not os.path.exists(ckpt) and cfg.victim != "train":
        ckpt = cfg.victim
    return {
        "checkpoint": ckpt,
        "trigger": os.path.join(out, TRIGGER_NAME),
        "flip_list": os.path.join(out, FLIP_LIST_NAME),
        "trace": os.path.join(out, TRACE_NAME),
    }


def _report_from_artifacts(cfg, splits):
    """Re-derive the attack report purely from files on disk.

    Both `attack` and `eval` build their reports through this path, so
    an eval run over freshly written artifacts reproduces the attack's
    report byte for byte.
    """
    paths = _artifact_paths(cfg)
    for name in ("checkpoint", "trigger", "flip_list"):
        if not os.path.exists(paths[name]):
            raise InputError(
                f"missing {name} artifact {paths[name]!r}; run attack first")
    model = load_checkpoint(paths["checkpoint"])
    trig = load_trigger(paths["trigger"])
    flips = read_flip_list(paths["flip_list"])
    attacked = apply_flips(model, flips)
    report = evaluate(model, attacked, trig,
                      splits.test.images, splits.test.labels, cfg.target)
    report.config = _config_dict(cfg)
    report.provenance = {
        "checkpoint_file": os.path.basename(paths["checkpoint"]),
        "checkpoint_sha256": _file_sha256(paths["checkpoint"]),
        "trigger_file": os.path.basename(paths["trigger"]),
        "trigger_sha256": _file_sha256(paths["trigger"]),
        "flip_list_file": os.path.basename(paths["flip_list"]),
        "flip_list_sha256": _file_sha256(paths["flip_list"]),
        "dataset_sha256": _dataset_sha256(splits.test),
    }
    if os.path.exists(paths["trace"]):
        report.provenance["trace_file"] = os.path.basename(paths["trace"])
        report.provenance["trace_sha256"] = _file_sha256(paths["trace"])
    return report, model, attacked, trig


def cmd_train(cfg, args):
    splits = load_splits(cfg)
    model, _ = load_victim(cfg, splits)
    _write_echo(cfg)
    path = os.path.join(cfg.out_dir, CHECKPOINT_NAME)
    data = save_checkpoint(model, path)
    ta = 100.0 * accuracy(model, splits.test)
    print(f"train: TA={ta:.2f}% checkpoint={path} sha256={_sha256(data)[:12]}")
    return 0


def cmd_attack(cfg, args):
    splits = load_splits(cfg)
    model, _ = load_victim(cfg, splits)
    _write_echo(cfg)
    outcome = run_attack(cfg, model, splits)

    out = cfg.out_dir
    save_checkpoint(model, os.path.join(out, CHECKPOINT_NAME))
    save_trigger(outcome.trigger, os.path.join(out, TRIGGER_NAME))
    write_flip_list(model, outcome.flips, os.path.join(out, FLIP_LIST_NAME))
    outcome.trace.to_csv(os.path.join(out, TRACE_NAME))

    report, _, _, trig = _report_from_artifacts(cfg, splits)
    report_path = os.path.join(out, REPORT_NAME)
    with open(report_path, "w") as fh:
        fh.write(report.to_json())
    plot_convergence(outcome.trace, os.path.join(out, "convergence.png"))
    render_trigger_panel(splits.test.images, trig,
                         os.path.join(out, "trigger_panel.png"))
    print(f"attack t={cfg.target} mode={cfg.mode}: ASR={report.asr:.1f}% "
          f"PA-TA={report.pa_ta:.1f}% TA={report.ta:.1f}% "
          f"N_flip={report.n_flip} MSE={report.mse:.2f} -> {report_path}")
    return 0


def cmd_eval(cfg, args):
    splits = load_splits(cfg)
    _write_echo(cfg)
    report, _, _, _ = _report_from_artifacts(cfg, splits)
    report_path = os.path.join(cfg.out_dir, "report_eval.json")
    with open(report_path, "w") as fh:
        fh.write(report.to_json())
    print(f"eval t={cfg.target}: ASR={report.asr:.1f}% PA-TA={report.pa_ta:.1f}% "
          f"TA={report.ta:.1f}% N_flip={report.n_flip} -> {report_path}")
    return 0


def cmd_defend(cfg, args):
    splits = load_splits(cfg)
    _write_echo(cfg)
    base, model, attacked, trig = _report_from_artifacts(cfg, splits)
    report = defense_eval(model, attacked, trig,
                          splits.test.images, splits.test.labels,
                          cfg.target, cfg.defense)
    report.config = base.config
    report.provenance = base.provenance
    report_path = os.path.join(cfg.out_dir, f"report_defense_{cfg.defense}.json")
    with open(report_path, "w") as fh:
        fh.write(report.to_json())
    print(f"defend {cfg.defense}: ASR={report.asr:.1f}% "
          f"(undefended {base.asr:.1f}%) PA-TA={report.pa_ta:.1f}% -> {report_path}")
    return 0


def cmd_sweep(cfg, args):
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise InputError("sweep needs at least one value")
    _write_echo(cfg)
    reports, notes = sweep(args.param, values, cfg)
    written = write_sweep_outputs(args.param, values, reports, notes, cfg.out_dir)
    ok = sum(r is not None for r in reports)
    skipped = len(reports) - ok
    for value, note in zip(values, notes):
        if note:
            print(f"  {args.param}={value}: {note}")
    print(f"sweep {args.param} over {len(values)} values: "
          f"{ok} ok, {skipped} skipped -> {written[0]}")
    return 0


def cmd_render(cfg, args):
    trig_path = args.trigger_file or os.path.join(cfg.out_dir, TRIGGER_NAME)
    trig = load_trigger(trig_path)
    if args.images is None:
        images = load_splits(cfg).test.images
    elif os.path.isdir(args.images):
        images = load_image_directory(args.images).images
    else:
        images = load_dataset(args.images).images
    count = max(1, min(args.count, images.shape[0]))
    images = images[:count]
    warped = tg.warp(images, trig)

    render_dir = os.path.join(cfg.out_dir, "render")
    os.makedirs(render_dir, exist_ok=True)
    _write_echo(cfg)
    from PIL import Image

    written = []
    for i in range(count):
        for stem, batch in (("clean", images), ("triggered", warped)):
            arr = np.clip(np.round(batch[i] * 255.0), 0, 255).astype(np.uint8)
            arr = arr[:, :, 0] if arr.shape[-1] == 1 else arr
            path = os.path.join(render_dir, f"{stem}_{i:03d}.png")
            Image.fromarray(arr).save(path)
            written.append(path)
    panel = os.path.join(render_dir, "panel.png")
    render_trigger_panel(images, trig, panel, max_images=count)
    written.append(panel)
    print(f"render: {count} image pairs from {trig_path} -> {render_dir}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "attack": cmd_attack,
    "eval": cmd_eval,
    "defend": cmd_defend,
    "sweep": cmd_sweep,
    "render": cmd_render,
}

_EXIT_CODES = (
    (ConfigError, 2),
    (FormatError, 3),
    (InputError, 4),
    (DimensionError, 4),
    (OptimizationError, 5),
    (ContractError, 6),
    (StealthflipError, 1),
    (FileNotFoundError, 4),
)


def _add_config_flags(parser):
    parser.add_argument("--config", metavar="FILE",
                        help="config file supplying defaults; flags override it")
    for key, (typ, help_text) in _SCHEMA.items():
        flag = "--" + key.replace("_", "-")
        parser.add_argument(flag, dest=key, metavar=typ.__name__.upper(),
                            help=help_text)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="stealthflip",
        description="Bit-flip trojan attacks on quantized classifiers.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "train": "train a victim and write its checkpoint",
        "attack": "run the joint attack; writes trigger, flip list, trace, report",
        "eval": "recompute a report from previously written artifacts",
        "defend": "evaluate the attack under a feature squeezing defense",
        "sweep": "re-run the attack across values of one parameter",
        "render": "write clean/triggered image files for a saved trigger",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        _add_config_flags(p)
        if name == "sweep":
            p.add_argument("--param", required=True, choices=sorted(PARAM_KEYS),
                           help="which parameter to sweep")
            p.add_argument("--values", required=True,
                           help="comma separated list of values")
        if name == "render":
            p.add_argument("--trigger-file", help="trigger artifact to render "
                           "(default: out_dir/trigger.bin)")
            p.add_argument("--images", help="dataset bundle or image directory "
                           "(default: the config dataset's test split)")
            p.add_argument("--count", type=int, default=8,
                           help="how many images to render")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except Exception as exc:  # noqa: BLE001 - boundary turns errors into JSON
        code = 1
        for klass, klass_code in _EXIT_CODES:
            if isinstance(exc, klass):
                code = klass_code
                break
        payload = {"error": {"type": type(exc).__name__, "message": str(exc)}}
        if isinstance(exc, ConfigError) and exc.keys:
            payload["error"]["keys"] = exc.keys
        print(json.dumps(payload, sort_keys=True), file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
