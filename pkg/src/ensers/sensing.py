"""Random sensor/label placement, measurement extraction and chunking."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .datagen import NoiseSpec, add_noise


class SensingError(Exception):
    pass


@dataclass
class Layout:
    """Per-(timestep, variable) index sets, one row of one-hot matrices each."""

    idx: np.ndarray  # (L, M, count) integer indices into [0, omega-1]
    omega: int
    seed: int
    static: bool = False

    def __post_init__(self):
        self.idx = np.asarray(self.idx, dtype=np.intp)
        if self.idx.ndim != 3:
            raise SensingError(f"layout must be (L, M, count), got {self.idx.shape}")
        if self.idx.size and (self.idx.min() < 0 or self.idx.max() >= self.omega):
            raise SensingError(f"layout indices out of range [0, {self.omega - 1}]")

    @property
    def count(self):
        return self.idx.shape[2]

    def window(self, k, z, gamma):
        """Index slice covering timesteps k*z .. k*z+gamma-1."""
        return self.idx[k * z : k * z + gamma]


SensorLayout = Layout
DataLayout = Layout


def sample_layout(L, M, count, omega, seed, with_replacement=False, static=False):
    """Independent uniform index draws per (timestep, variable).

    Without replacement each (l, m) row is a distinct-index sample; a static
    layout draws one row per variable and repeats it at every timestep.
    """
    if count > omega and not with_replacement:
        raise SensingError(f"cannot draw {count} of {omega} locations without replacement")
    rng = np.random.default_rng(seed)
    rows = 1 if static else L
    draw = np.empty((rows, M, count), dtype=np.intp)
    for l in range(rows):
        for m in range(M):
            if with_replacement:
                draw[l, m] = rng.integers(0, omega, size=count)
            else:
                draw[l, m] = rng.permutation(omega)[:count]
    idx = np.broadcast_to(draw[0], (L, M, count)).copy() if static else draw
    return Layout(idx=idx, omega=omega, seed=seed, static=static)


def measure(Z, layout: Layout, noise: NoiseSpec | None = None):
    """Gather field values at layout indices, then optionally add noise.

    Equivalent to multiplying each state by its stack of one-hot measurement
    rows.  Noise, when configured, is applied to the gathered values.
    """
    Z = np.asarray(Z, dtype=np.float64)
    if layout.idx.shape[:2] != Z.shape[:2]:
        raise SensingError(
            f"layout shape {layout.idx.shape[:2]} does not match data {Z.shape[:2]}"
        )
    if layout.idx.size and layout.idx.max() >= Z.shape[2]:
        raise SensingError("layout index out of range for this field")
    values = np.take_along_axis(Z, layout.idx, axis=2)
    if noise is not None and noise.snr_db is not None:
        values = add_noise(values, noise)
    return values


@dataclass
class Chunk:
    """One training/test sample: gamma consecutive states' measurements."""

    k: int
    chi: np.ndarray  # (gamma, M, p) sensor values
    phi: np.ndarray  # (gamma, M, h) label values
    sensor_idx: np.ndarray  # (gamma, M, p)
    label_idx: np.ndarray  # (gamma, M, h)


def n_chunks(L, gamma, z):
    if gamma > L:
        raise SensingError(f"gamma={gamma} exceeds record length L={L}")
    return (L - gamma) // z + 1


def chunk(sensor_values, label_values, sensor_layout, data_layout, gamma, z):
    """Split measured records into overlapping gamma-state windows.

    Chunk k covers timesteps [k*z, k*z + gamma - 1]; the number of chunks is
    floor((L - gamma) / z) + 1.
    """
    L = sensor_values.shape[0]
    out = []
    for k in range(n_chunks(L, gamma, z)):
        sl = slice(k * z, k * z + gamma)
        out.append(
            Chunk(
                k=k,
                chi=sensor_values[sl].copy(),
                phi=label_values[sl].copy(),
                sensor_idx=sensor_layout.idx[sl].copy(),
                label_idx=data_layout.idx[sl].copy(),
            )
        )
    return out


def build_chunks(Z, sensor_layout, data_layout, gamma, z, sensor_noise=None):
    """measure + chunk in one step; labels stay noise-free."""
    chi_all = measure(Z, sensor_layout, sensor_noise)
    phi_all = measure(Z, data_layout, None)
    return chunk(chi_all, phi_all, sensor_layout, data_layout, gamma, z)


def save_layout(layout: Layout, path):
    doc = {
        "format": "ensers-layout-v1",
        "omega": layout.omega,
        "seed": layout.seed,
        "static": layout.static,
        "shape": list(layout.idx.shape),
        "idx": layout.idx.ravel().tolist(),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_layout(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != "ensers-layout-v1":
        raise SensingError("not an ensers layout file")
    idx = np.asarray(doc["idx"], dtype=np.intp).reshape(doc["shape"])
    return Layout(idx=idx, omega=doc["omega"], seed=doc["seed"], static=doc.get("static", False))
