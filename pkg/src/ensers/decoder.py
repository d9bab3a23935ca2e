"""Feed-forward decoder network mapping a reduced state to full field blocks.

Two modes:

* ``discrete`` — input is the reduced state (width ``varsigma``), output is the
  whole block of ``gamma`` states reshaped to (gamma, M, omega).
* ``continuous`` — input is the reduced state concatenated with one spatial
  coordinate (width ``varsigma + coord_dim``); evaluating all ``omega``
  collocation points in one batch yields the same (gamma, M, omega) block.

Output reshape is row-major with index order (time, variable, space), fixed
across the codebase.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


class DecoderError(Exception):
    pass


ACTIVATIONS = {"softplus": ad.softplus, "tanh": ad.tanh, "linear": lambda x: x}


@dataclass(frozen=True)
class NetConfig:
    """Layer plan for the decoder.  The output layer is always linear."""

    input_width: int
    hidden: tuple
    output_width: int
    activation: str = "softplus"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if len(self.hidden) < 1:
            raise DecoderError("need at least one hidden layer")
        widths = (self.input_width,) + self.hidden + (self.output_width,)
        if any(w <= 0 for w in widths):
            raise DecoderError(f"zero-width layer in {widths}")
        if self.activation not in ACTIVATIONS:
            raise DecoderError(f"unknown activation {self.activation!r}")

    @property
    def widths(self):
        return (self.input_width,) + self.hidden + (self.output_width,)

    def param_count(self):
        w = self.widths
        return sum(w[i] * w[i + 1] + w[i + 1] for i in range(len(w) - 1))


@dataclass
class DecoderNet:
    config: NetConfig
    mode: str  # "discrete" | "continuous"
    gamma: int
    n_vars: int
    omega: int
    coord_dim: int = 0
    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)

    @property
    def varsigma(self):
        return self.config.input_width - (self.coord_dim if self.mode == "continuous" else 0)

    def parameters(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def set_flat_parameters(self, flat):
        """Overwrite parameter values from one flat vector (in-place)."""
        flat = np.asarray(flat, dtype=np.float64)
        pos = 0
        for p in self.parameters():
            n = p.value.size
            p.value = flat[pos : pos + n].reshape(p.value.shape).copy()
            pos += n
        if pos != flat.size:
            raise DecoderError("flat parameter vector length mismatch")

    def flat_parameters(self):
        return np.concatenate([p.value.ravel() for p in self.parameters()])


def init(config: NetConfig, mode: str, gamma: int, n_vars: int, omega: int, coord_dim: int = 0):
    """Build a decoder with uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights.

    Deterministic for a fixed config seed; biases start at zero.
    """
    if mode not in ("discrete", "continuous"):
        raise DecoderError(f"unknown mode {mode!r}")
    if mode == "discrete":
        expected = gamma * n_vars * omega
        if config.output_width != expected:
            raise DecoderError(
                f"discrete output width {config.output_width} != gamma*M*omega = {expected}"
            )
    else:
        if coord_dim < 1:
            raise DecoderError("continuous mode needs coord_dim >= 1")
        expected = gamma * n_vars
        if config.output_width != expected:
            raise DecoderError(
                f"continuous output width {config.output_width} != gamma*M = {expected}"
            )
    rng = np.random.default_rng(config.seed)
    net = DecoderNet(config, mode, gamma, n_vars, omega, coord_dim)
    w = config.widths
    for i in range(len(w) - 1):
        bound = 1.0 / np.sqrt(w[i])
        net.weights.append(ad.leaf(rng.uniform(-bound, bound, size=(w[i], w[i + 1]))))
        net.biases.append(ad.leaf(np.zeros(w[i + 1])))
    return net


def _forward(net: DecoderNet, x):
    """Apply all layers to a (batch, input_width) node."""
    act = ACTIVATIONS[net.config.activation]
    h = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = ad.add(ad.matmul(h, w), b)
        if i != last:
            h = act(h)
    return h


def decode_discrete(net: DecoderNet, xi):
    """Full block prediction: (gamma, M, omega) from one reduced state."""
    if net.mode != "discrete":
        raise DecoderError(f"decode_discrete on a {net.mode} net")
    xi = xi if isinstance(xi, ad.Node) else ad.constant(xi)
    if xi.value.shape != (net.varsigma,):
        raise DecoderError(f"reduced state shape {xi.value.shape}, expected ({net.varsigma},)")
    out = _forward(net, ad.reshape(xi, (1, net.varsigma)))
    return ad.reshape(out, (net.gamma, net.n_vars, net.omega))


def decode_continuous(net: DecoderNet, xi, coords):
    """Batched per-point prediction assembled into (gamma, M, omega).

    ``coords`` holds the omega collocation points as rows; the batched
    evaluation is value-identical to an explicit per-point loop.
    """
    if net.mode != "continuous":
        raise DecoderError(f"decode_continuous on a {net.mode} net")
    xi = xi if isinstance(xi, ad.Node) else ad.constant(xi)
    coords = coords if isinstance(coords, ad.Node) else ad.constant(coords)
    if coords.value.ndim != 2 or coords.value.shape[1] != net.coord_dim:
        raise DecoderError(
            f"coordinate block shape {coords.value.shape}, expected (omega, {net.coord_dim})"
        )
    if xi.value.shape != (net.varsigma,):
        raise DecoderError(f"reduced state shape {xi.value.shape}, expected ({net.varsigma},)")
    n_pts = coords.value.shape[0]
    tiled = ad.broadcast_to(ad.reshape(xi, (1, net.varsigma)), (n_pts, net.varsigma))
    out = _forward(net, ad.concat([tiled, coords], axis=1))  # (n_pts, gamma*M)
    return ad.reshape(ad.transpose(out), (net.gamma, net.n_vars, n_pts))


# ---------------------------------------------------------------------------
# checkpoint format: one file, JSON header line + little-endian float64 blob


def save_checkpoint(net: DecoderNet, path):
    header = {
        "format": "ensers-checkpoint-v1",
        "layer_widths": list(net.config.widths),
        "activation": net.config.activation,
        "mode": net.mode,
        "gamma": net.gamma,
        "n_vars": net.n_vars,
        "omega": net.omega,
        "coord_dim": net.coord_dim,
        "varsigma": net.varsigma,
        "seed": net.config.seed,
        "param_count": net.config.param_count(),
    }
    blob = net.flat_parameters().astype("<f8").tobytes()
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(json.dumps(header).encode("utf-8") + b"\n")
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path):
    with open(path, "rb") as fh:
        line = fh.readline()
        blob = fh.read()
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DecoderError(f"bad checkpoint header: {exc}")
    if header.get("format") != "ensers-checkpoint-v1":
        raise DecoderError("not an ensers checkpoint")
    widths = header["layer_widths"]
    config = NetConfig(
        input_width=widths[0],
        hidden=tuple(widths[1:-1]),
        output_width=widths[-1],
        activation=header["activation"],
        seed=header["seed"],
    )
    flat = np.frombuffer(blob, dtype="<f8").astype(np.float64)
    if flat.size != header["param_count"]:
        raise DecoderError(
            f"checkpoint payload has {flat.size} values, header says {header['param_count']}"
        )
    net = init(
        config,
        header["mode"],
        header["gamma"],
        header["n_vars"],
        header["omega"],
        header["coord_dim"],
    )
    net.set_flat_parameters(flat)
    return net
