"""Command-line entry point.

Subcommands:
    gen     simulate a PDE and write a snapshot file
    train   fit a decoder to a snapshot file, write a checkpoint + manifest
    test    evaluate a checkpoint on fresh sensor layouts, write a CSV report
    report  summarize a CSV report as JSON

All subcommands take a JSON config file.  Unknown keys are rejected so typos
fail loudly.  Exit codes: 0 success, 1 runtime failure, 2 bad usage/config.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import tempfile
from dataclasses import asdict

import numpy as np

from . import datagen as dg
from . import decoder as dec
from . import harness as hz
from . import sensing as sn


class ConfigError(Exception):
    pass


def _load_config(path, allowed, required=()):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = sorted(set(raw) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    missing = sorted(set(required) - set(raw))
    if missing:
        raise ConfigError(f"missing required config keys: {', '.join(missing)}")
    return raw


def _file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _atomic_json(obj, path):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


# ---------------------------------------------------------------------------
# gen

GEN_KEYS = {
    "system", "output", "seed", "nx", "ny", "nu", "dt", "steps",
    "output_every", "n_snapshots",
}


def cmd_gen(args):
    cfg = _load_config(args.config, GEN_KEYS, required=("system", "output"))
    system = cfg["system"]
    seed = cfg.get("seed", 0)
    if system == "burgers2d":
        nx = cfg.get("nx", 64)
        ic = dg.burgers_ic(seed=seed, nx=nx, ny=cfg.get("ny", nx))
        snaps = dg.solve_burgers(
            ic, nu=cfg.get("nu", 0.01), dt=cfg.get("dt", 1e-4),
            steps=cfg.get("steps", 10000), nx=nx,
            output_every=cfg.get("output_every", 100))
    elif system == "allen-cahn":
        snaps = dg.solve_allen_cahn(
            dt=cfg.get("dt", 1e-4), steps=cfg.get("steps", 10000),
            nx=cfg.get("nx", 128), output_every=cfg.get("output_every", 200))
    elif system == "conv-diff":
        snaps = dg.solve_conv_diff(
            seed=seed, dt=cfg.get("dt", 0.01), steps=cfg.get("steps", 39),
            nx=cfg.get("nx", 64))
    elif system == "vortex-street":
        snaps = dg.synthetic_vortex_street(
            n_snapshots=cfg.get("n_snapshots", 25), nx=cfg.get("nx", 64),
            ny=cfg.get("ny", 64), seed=seed)
    else:
        raise ConfigError(f"unknown system {system!r}")
    dg.save_snapshots(snaps, cfg["output"])
    print(f"wrote {cfg['output']}: {snaps.L} snapshots, "
          f"{snaps.n_vars} variables, {snaps.omega} points")
    return 0


# ---------------------------------------------------------------------------
# train

TRAIN_KEYS = {
    "data", "checkpoint", "manifest",
    "gamma", "stride", "n_sensors", "n_labels", "hidden", "latent_width",
    "activation", "mode", "outer_iters", "outer_lr", "optimizer", "batch",
    "inner_steps", "inner_lr0", "inner_lr_ramp", "inner_init", "inner_loss",
    "physics_weight0", "physics_ramp", "n_collocation",
    "seed", "net_seed", "static_labels", "sensor_snr_db", "log_every",
    "resume",
}


def cmd_train(args):
    cfg = _load_config(args.config, TRAIN_KEYS, required=("data", "checkpoint"))
    data_path = cfg.pop("data")
    ckpt_path = cfg.pop("checkpoint")
    manifest_path = cfg.pop("manifest", None)
    resume = cfg.pop("resume", False)
    snaps = dg.load_snapshots(data_path)
    try:
        tcfg = hz.TrainConfig(**cfg)
    except TypeError as exc:
        raise ConfigError(str(exc))

    net = None
    start_iter = 0
    if resume:
        if manifest_path is None:
            raise ConfigError("resume requires a manifest path")
        if os.path.exists(ckpt_path) and os.path.exists(manifest_path):
            with open(manifest_path) as fh:
                start_iter = json.load(fh)["completed_iters"]
            net = dec.load_checkpoint(ckpt_path)
            print(f"resuming from iteration {start_iter}")

    def progress(it, loss):
        print(f"iter {it:5d}  loss {loss:.6e}", flush=True)

    net, history = hz.train(snaps, tcfg, callback=progress,
                            net=net, start_iter=start_iter)
    dec.save_checkpoint(net, ckpt_path)
    print(f"wrote {ckpt_path}")
    if manifest_path is not None:
        manifest = {
            "config": {**asdict(tcfg), "hidden": list(tcfg.hidden)},
            "data": {"path": data_path, "sha256": _file_sha256(data_path)},
            "checkpoint": {"path": ckpt_path, "sha256": _file_sha256(ckpt_path)},
            "completed_iters": tcfg.outer_iters,
            "final_loss": history["loss"][-1],
        }
        _atomic_json(manifest, manifest_path)
        print(f"wrote {manifest_path}")
    return 0


# ---------------------------------------------------------------------------
# test

TEST_KEYS = {
    "data", "checkpoint", "report",
    "sensor_counts", "snr_db", "n_chunks", "inner_steps", "inner_lr",
    "inner_loss", "eval_index", "seed", "stride",
}


def cmd_test(args):
    cfg = _load_config(args.config, TEST_KEYS,
                       required=("data", "checkpoint", "report"))
    snaps = dg.load_snapshots(cfg.pop("data"))
    net = dec.load_checkpoint(cfg.pop("checkpoint"))
    report_path = cfg.pop("report")
    stride = cfg.pop("stride", 1)
    if "snr_db" in cfg:
        cfg["snr_db"] = tuple(None if v is None else float(v) for v in cfg["snr_db"])
    try:
        tcfg = hz.TestConfig(**cfg)
    except TypeError as exc:
        raise ConfigError(str(exc))
    report = hz.test(snaps, net, tcfg, stride=stride)
    hz.write_report_csv(report, report_path)
    print(f"wrote {report_path}: {len(report.rows)} rows")
    for cell in report.summary():
        print(f"  sensors={cell['n_sensors']:3d} snr={cell['snr_db']}: "
              f"mean error {cell['mean_error']:.4f}")
    return 0


# ---------------------------------------------------------------------------
# report

REPORT_KEYS = {"input", "output"}


def cmd_report(args):
    cfg = _load_config(args.config, REPORT_KEYS, required=("input", "output"))
    report = hz.read_report_csv(cfg["input"])
    hz.write_report_summary(report, cfg["output"])
    print(f"wrote {cfg['output']}")
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ensers",
        description="Sparse-sensor field reconstruction: data generation, "
                    "training, and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, doc in (
        ("gen", cmd_gen, "simulate a PDE and write snapshots"),
        ("train", cmd_train, "train a decoder, write a checkpoint"),
        ("test", cmd_test, "evaluate a checkpoint, write a CSV report"),
        ("report", cmd_report, "summarize a CSV report as JSON"),
    ):
        p = sub.add_parser(name, help=doc)
        p.add_argument("config", help="path to a JSON config file")
        p.set_defaults(fn=fn)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
