"""Training and evaluation driver.

Training alternates the inner inference loop (fit the reduced state to sensor
readings) with outer gradient steps on the decoder parameters.  The outer
objective per window is a label-reconstruction error plus a weighted
collocation residual; both the inner step size and the physics weight ramp
linearly over the outer iterations.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import decoder as dec
from . import inner as inn
from . import physics as ph
from . import sensing as sn
from . import datagen as dg


class TrainingError(Exception):
    pass


@dataclass
class TrainConfig:
    gamma: int = 4
    stride: int = 1
    n_sensors: int = 32
    n_labels: int = 800
    hidden: tuple = (100, 100)
    latent_width: int = 8
    activation: str = "softplus"
    mode: str = "discrete"

    outer_iters: int = 2001
    outer_lr: float = 2e-4
    optimizer: str = "sgd"  # sgd | adam
    batch: int = 11

    inner_steps: int = 4
    inner_lr0: float = 0.1
    inner_lr_ramp: float = 0.006
    inner_init: str = "zero"
    inner_loss: str = "mse"

    physics_weight0: float = 0.005
    physics_ramp: float = 1e-4
    n_collocation: int = 0  # continuous mode: points per physics evaluation

    seed: int = 0
    net_seed: int = 0
    static_labels: bool = False
    sensor_snr_db: float = None
    log_every: int = 100

    def __post_init__(self):
        if self.gamma < 3:
            raise TrainingError("window length must be >= 3 (needs interior stages)")
        if self.mode not in ("discrete", "continuous"):
            raise TrainingError(f"unknown mode {self.mode!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise TrainingError(f"unknown optimizer {self.optimizer!r}")
        if isinstance(self.hidden, list):
            self.hidden = tuple(self.hidden)


@dataclass
class TestConfig:
    sensor_counts: tuple = (4, 8, 16)
    snr_db: tuple = (None,)
    n_chunks: int = 12
    inner_steps: int = 100
    inner_lr: float = 5.0
    inner_loss: str = "huber"
    eval_index: int = 2  # window position used for the error metric (mid-window)
    seed: int = 1

    def __post_init__(self):
        if isinstance(self.sensor_counts, list):
            self.sensor_counts = tuple(self.sensor_counts)
        if isinstance(self.snr_db, list):
            self.snr_db = tuple(self.snr_db)


@dataclass
class ErrorReport:
    rows: list = field(default_factory=list)  # dicts: chunk, var, n_sensors, snr_db, error

    def add(self, chunk, var, n_sensors, snr_db, error):
        self.rows.append({
            "chunk": int(chunk), "var": int(var), "n_sensors": int(n_sensors),
            "snr_db": snr_db, "error": float(error),
        })

    def mean_error(self, n_sensors=None, snr_db=None):
        sel = [r["error"] for r in self.rows
               if (n_sensors is None or r["n_sensors"] == n_sensors)
               and (snr_db is None or r["snr_db"] == snr_db)]
        if not sel:
            raise TrainingError("no matching rows")
        return float(np.mean(sel))

    def summary(self):
        cells = {}
        for r in self.rows:
            key = (r["n_sensors"], r["snr_db"])
            cells.setdefault(key, []).append(r["error"])
        return [
            {"n_sensors": p, "snr_db": s, "mean_error": float(np.mean(v)),
             "max_error": float(np.max(v)), "count": len(v)}
            for (p, s), v in sorted(cells.items(), key=lambda kv: (kv[0][0], str(kv[0][1])))
        ]


def label_project(D, idx):
    """Predicted values at the label locations (same gather as the sensors)."""
    return inn.sensor_project(D, idx)


def _window_dt(snapshots: dg.SnapshotSet, cfg_gamma, stride):
    return (cfg_gamma - 1) * stride * snapshots.dt_output


def _physics_term(net, xi, D, snapshots, cfg: TrainConfig, tableau, coords_all, rng):
    dt = _window_dt(snapshots, cfg.gamma, cfg.stride)
    if cfg.mode == "discrete":
        spec = snapshots.rhs_spec()
        return ph.physics_loss_discrete(D, dt, tableau, spec)
    n_pts = cfg.n_collocation or 50
    pick = rng.choice(coords_all.shape[0], size=min(n_pts, coords_all.shape[0]), replace=False)
    return ph.physics_loss_continuous(net, xi, coords_all[pick], dt, tableau, snapshots.system)


def train(snapshots: dg.SnapshotSet, cfg: TrainConfig, callback=None,
          net=None, start_iter=0):
    """Train a decoder on one snapshot set; returns (net, history dict).

    Passing an existing net with start_iter > 0 resumes a previous run: the
    step-size and physics-weight schedules continue from start_iter, and
    outer_iters counts total iterations including the completed ones.
    """
    rng = np.random.default_rng(cfg.seed)
    omega = snapshots.omega
    M = snapshots.n_vars
    L = snapshots.L

    sensor_layout = sn.sample_layout(L, M, cfg.n_sensors, omega, seed=cfg.seed)
    label_layout = sn.sample_layout(
        L, M, cfg.n_labels, omega, seed=cfg.seed + 1, static=cfg.static_labels)
    noise = None
    if cfg.sensor_snr_db is not None:
        noise = dg.NoiseSpec(snr_db=cfg.sensor_snr_db, seed=cfg.seed + 2)
    chunks = sn.build_chunks(
        snapshots.Z, sensor_layout, label_layout, cfg.gamma, cfg.stride,
        sensor_noise=noise)
    if len(chunks) < 1:
        raise TrainingError("no training windows: snapshot set too short")

    coord_dim = 1 if snapshots.ny == 1 else 2
    if cfg.mode == "discrete":
        if net is None:
            net_cfg = dec.NetConfig(
                input_width=cfg.latent_width, hidden=cfg.hidden,
                output_width=cfg.gamma * M * omega, activation=cfg.activation,
                seed=cfg.net_seed)
            net = dec.init(net_cfg, mode="discrete", gamma=cfg.gamma, n_vars=M, omega=omega)
        coords_all = None
    else:
        if net is None:
            net_cfg = dec.NetConfig(
                input_width=cfg.latent_width + coord_dim, hidden=cfg.hidden,
                output_width=cfg.gamma * M, activation=cfg.activation,
                seed=cfg.net_seed)
            net = dec.init(net_cfg, mode="continuous", gamma=cfg.gamma, n_vars=M,
                           omega=omega, coord_dim=coord_dim)
        coords_all = dg.grid_coordinates(snapshots)
    if net.mode != cfg.mode or net.gamma != cfg.gamma:
        raise TrainingError("supplied net does not match the training config")

    tableau = ph.collocation_tableau(cfg.gamma - 2)
    history = {"loss": [], "label_loss": [], "physics_loss": []}
    params = net.parameters()
    order = np.arange(len(chunks))
    pos = len(chunks)  # force reshuffle on first draw
    adam_m = [np.zeros_like(p.value) for p in params]
    adam_v = [np.zeros_like(p.value) for p in params]

    for it in range(start_iter, cfg.outer_iters):
        inner_cfg = inn.InnerConfig(
            steps=cfg.inner_steps,
            lr=cfg.inner_lr0 + it * cfg.inner_lr_ramp,
            init=cfg.inner_init, init_seed=cfg.seed + it,
            unroll=True, loss=cfg.inner_loss)
        zeta = cfg.physics_weight0 + it * cfg.physics_ramp

        grad_sum = [np.zeros_like(p.value) for p in params]
        label_acc = 0.0
        phys_acc = 0.0
        for _ in range(cfg.batch):
            if pos >= len(chunks):
                rng.shuffle(order)
                pos = 0
            c = chunks[order[pos]]
            pos += 1

            if cfg.mode == "discrete":
                xi, _ = inn.infer(net, c.chi, c.sensor_idx, inner_cfg)
                D = dec.decode_discrete(net, xi)
            else:
                xi, _ = inn.infer(net, c.chi, c.sensor_idx, inner_cfg,
                                  coords=coords_all)
                D = dec.decode_continuous(net, xi, ad.constant(coords_all))
            # summed, not averaged, so the data and physics terms share the
            # same squared-norm scale
            label_loss = ad.sum_(ad.square(ad.sub(
                ad.constant(c.phi), label_project(D, c.label_idx))))
            phys = _physics_term(net, xi, D, snapshots, cfg, tableau, coords_all, rng)
            total = ad.add(label_loss, ad.smul(phys, zeta))
            if not np.isfinite(total.value):
                raise TrainingError(f"non-finite outer loss at iteration {it}")
            grads = ad.gradient(total, params)
            for gs, g in zip(grad_sum, grads):
                gs += g
            label_acc += float(label_loss.value)
            phys_acc += float(phys.value)

        if cfg.optimizer == "sgd":
            for p, gs in zip(params, grad_sum):
                p.value = p.value - cfg.outer_lr * (gs / cfg.batch)
        else:
            b1, b2, eps = 0.9, 0.999, 1e-8
            step = it - start_iter + 1
            for j, (p, gs) in enumerate(zip(params, grad_sum)):
                g = gs / cfg.batch
                adam_m[j] = b1 * adam_m[j] + (1 - b1) * g
                adam_v[j] = b2 * adam_v[j] + (1 - b2) * g * g
                mhat = adam_m[j] / (1 - b1**step)
                vhat = adam_v[j] / (1 - b2**step)
                p.value = p.value - cfg.outer_lr * mhat / (np.sqrt(vhat) + eps)

        mean_total = (label_acc + zeta * phys_acc) / cfg.batch
        history["loss"].append(mean_total)
        history["label_loss"].append(label_acc / cfg.batch)
        history["physics_loss"].append(phys_acc / cfg.batch)
        if history["loss"][0] > 0 and mean_total > 1e6 * history["loss"][0]:
            raise TrainingError(f"training diverged at iteration {it}")
        if callback is not None and it % cfg.log_every == 0:
            callback(it, mean_total)
    return net, history


def test(snapshots: dg.SnapshotSet, net: dec.DecoderNet, cfg: TestConfig,
         stride=1):
    """Evaluate a trained decoder on fresh sensor layouts.

    For each (sensor count, noise level) cell, draws a new layout, runs
    inference on n_chunks windows, and records the relative reconstruction
    error per variable at one window position.
    """
    report = ErrorReport()
    omega = snapshots.omega
    M = snapshots.n_vars
    L = snapshots.L
    gamma = net.gamma
    if not 0 <= cfg.eval_index < gamma:
        raise TrainingError("evaluation index outside the window")
    coords_all = dg.grid_coordinates(snapshots) if net.mode == "continuous" else None

    n_avail = sn.n_chunks(L, gamma, stride)
    n_use = min(cfg.n_chunks, n_avail)
    for p in cfg.sensor_counts:
        for snr in cfg.snr_db:
            layout = sn.sample_layout(L, M, p, omega,
                                      seed=cfg.seed + 1000 * p + (0 if snr is None else int(snr)))
            noise = None if snr is None else dg.NoiseSpec(snr_db=snr, seed=cfg.seed + 7)
            readings = sn.measure(snapshots.Z, layout, noise)
            inner_cfg = inn.InnerConfig(
                steps=cfg.inner_steps, lr=cfg.inner_lr,
                init="zero", unroll=False, loss=cfg.inner_loss)
            for k in range(n_use):
                lo = k * stride
                chi = readings[lo:lo + gamma]
                sidx = layout.idx[lo:lo + gamma]
                if net.mode == "discrete":
                    xi, _ = inn.infer(net, chi, sidx, inner_cfg)
                    with ad.no_grad():
                        D = dec.decode_discrete(net, ad.constant(xi.value)).value
                else:
                    xi, _ = inn.infer(net, chi, sidx, inner_cfg, coords=coords_all)
                    with ad.no_grad():
                        D = dec.decode_continuous(
                            net, ad.constant(xi.value), ad.constant(coords_all)).value
                truth = snapshots.Z[lo:lo + gamma]
                for m in range(M):
                    num = np.linalg.norm(D[cfg.eval_index, m] - truth[cfg.eval_index, m])
                    den = np.linalg.norm(truth[cfg.eval_index, m])
                    report.add(k, m, p, snr, num / den if den > 0 else num)
    return report


def reconstruct_window(snapshots: dg.SnapshotSet, net: dec.DecoderNet,
                       chi, sensor_idx, inner_cfg: inn.InnerConfig,
                       coords=None):
    """Convenience: infer a reduced state and return the decoded block."""
    if net.mode == "discrete":
        xi, trace = inn.infer(net, chi, sensor_idx, inner_cfg)
        with ad.no_grad():
            D = dec.decode_discrete(net, ad.constant(xi.value)).value
    else:
        if coords is None:
            coords = dg.grid_coordinates(snapshots)
        xi, trace = inn.infer(net, chi, sensor_idx, inner_cfg, coords=coords)
        with ad.no_grad():
            D = dec.decode_continuous(net, ad.constant(xi.value),
                                      ad.constant(coords)).value
    return D, trace


def write_report_csv(report: ErrorReport, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["chunk", "var", "n_sensors", "snr_db", "error"])
        writer.writeheader()
        for row in report.rows:
            writer.writerow(row)


def write_report_summary(report: ErrorReport, path):
    with open(path, "w") as fh:
        json.dump({"cells": report.summary()}, fh, indent=2)
        fh.write("\n")


def read_report_csv(path):
    report = ErrorReport()
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            snr = row["snr_db"]
            report.add(int(row["chunk"]), int(row["var"]), int(row["n_sensors"]),
                       None if snr in ("", "None") else float(snr), float(row["error"]))
    return report
