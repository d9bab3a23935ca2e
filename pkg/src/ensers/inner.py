"""The inner inference loop: fit the reduced state to sensor readings.

Given sensor values for a gamma-state window, the reduced state is obtained by
a fixed number of gradient-descent steps on the sensor-reconstruction energy.
With ``unroll=True`` every step is recorded, so gradients of the outer
training loss w.r.t. the network parameters flow through the whole loop
(second-order derivatives of the inner energy included).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import decoder as dec


class InferenceError(Exception):
    pass


@dataclass
class InnerConfig:
    steps: int = 4
    lr: float = 0.1
    init: str = "zero"  # zero | gaussian (sigma = 0.1)
    init_seed: int = 0
    unroll: bool = False
    loss: str = "mse"  # mse | huber

    def __post_init__(self):
        if self.steps < 0:
            raise InferenceError("step count must be >= 0")
        if self.lr <= 0:
            raise InferenceError("step size must be > 0")
        if self.init not in ("zero", "gaussian"):
            raise InferenceError(f"unknown init {self.init!r}")
        if self.loss not in ("mse", "huber"):
            raise InferenceError(f"unknown inner loss {self.loss!r}")


@dataclass
class InferenceTrace:
    losses: list = field(default_factory=list)
    xi: np.ndarray = None


def sensor_project(D, idx):
    """Values of a predicted block at the sensor locations.

    Exactly the product with the one-hot measurement matrices, realized as an
    index gather: out[i, m, j] = D[i, m, idx[i, m, j]].
    """
    return ad.gather(D, np.asarray(idx, dtype=np.intp))


def _initial_xi(varsigma, cfg: InnerConfig):
    if cfg.init == "zero":
        return np.zeros(varsigma)
    rng = np.random.default_rng(cfg.init_seed)
    return 0.1 * rng.standard_normal(varsigma)


def _inner_loss(chi, Q, kind):
    if kind == "mse":
        return ad.mse(ad.constant(chi), Q)
    return ad.huber(ad.constant(chi), Q, delta=1.0)


def infer(net: dec.DecoderNet, chi, sensor_idx, cfg: InnerConfig, coords=None):
    """Run the inner loop; returns (xi node, trace).

    chi is (gamma, M, p) sensor values, sensor_idx the matching index window.
    Any sensor count p >= 1 works with the same trained parameters.  The loop
    aborts if the inner energy turns non-finite or exceeds 1e6x its initial
    value.  With unroll=False the network parameters are never touched and the
    result carries no graph.
    """
    if (coords is not None) != (net.mode == "continuous"):
        raise InferenceError("coords must be supplied iff the decoder is continuous")
    chi = np.asarray(chi, dtype=np.float64)
    coords_c = None if coords is None else ad.constant(np.asarray(coords, dtype=np.float64))

    def decode(xi_node):
        if net.mode == "discrete":
            return dec.decode_discrete(net, xi_node)
        return dec.decode_continuous(net, xi_node, coords_c)

    trace = InferenceTrace()
    xi = ad.leaf(_initial_xi(net.varsigma, cfg))
    initial_loss = None
    for step in range(cfg.steps):
        D = decode(xi)
        Q = sensor_project(D, sensor_idx)
        loss = _inner_loss(chi, Q, cfg.loss)
        lval = float(loss.value)
        if not np.isfinite(lval):
            raise InferenceError(f"non-finite inner loss at step {step}")
        if initial_loss is None:
            initial_loss = lval
        elif initial_loss > 0 and lval > 1e6 * initial_loss:
            raise InferenceError(
                f"inner loop diverged at step {step}: loss {lval:.3e} vs initial {initial_loss:.3e}"
            )
        trace.losses.append(lval)
        (g,) = ad.gradient(loss, [xi], create_graph=cfg.unroll)
        if cfg.unroll:
            xi = ad.sub(xi, ad.smul(g, cfg.lr))
        else:
            xi = ad.leaf(xi.value - cfg.lr * g)
    trace.xi = xi.value.copy()
    return xi, trace


def outer_gradient_check(net: dec.DecoderNet, chi, sensor_idx, phi, label_idx, cfg: InnerConfig, step=1e-5, coords=None):
    """Compare unrolled d(outer loss)/d(theta) against central differences.

    The outer loss is the label-reconstruction MSE after inference.  Returns
    the max relative error over all parameter components.
    """
    if not cfg.unroll:
        raise InferenceError("outer_gradient_check requires unroll=True")
    n_params = net.config.param_count()
    if n_params > 10_000:
        raise InferenceError(f"net too large for finite differences ({n_params} params)")

    def outer_loss_value():
        eval_cfg = InnerConfig(
            steps=cfg.steps, lr=cfg.lr, init=cfg.init, init_seed=cfg.init_seed,
            unroll=False, loss=cfg.loss,
        )
        xi, _ = infer(net, chi, sensor_idx, eval_cfg, coords=coords)
        if net.mode == "discrete":
            D = dec.decode_discrete(net, ad.constant(xi.value))
        else:
            D = dec.decode_continuous(net, ad.constant(xi.value), ad.constant(coords))
        Q = sensor_project(D, label_idx)
        return float(ad.mse(ad.constant(phi), Q).value)

    # analytic gradient through the unrolled loop
    xi, _ = infer(net, chi, sensor_idx, cfg, coords=coords)
    if net.mode == "discrete":
        D = dec.decode_discrete(net, xi)
    else:
        D = dec.decode_continuous(net, xi, ad.constant(coords))
    Q = sensor_project(D, label_idx)
    loss = ad.mse(ad.constant(phi), Q)
    analytic = ad.gradient(loss, net.parameters())
    flat_analytic = np.concatenate([g.ravel() for g in analytic])

    base = net.flat_parameters()
    numeric = np.zeros_like(base)
    for i in range(base.size):
        for sgn in (1.0, -1.0):
            pert = base.copy()
            pert[i] += sgn * step
            net.set_flat_parameters(pert)
            val = outer_loss_value()
            if sgn > 0:
                plus = val
            else:
                minus = val
        numeric[i] = (plus - minus) / (2.0 * step)
    net.set_flat_parameters(base)
    return float(np.max(np.abs(flat_analytic - numeric) / (np.abs(numeric) + 1e-12)))


def first_order_gradient(net: dec.DecoderNet, chi, sensor_idx, phi, label_idx, cfg: InnerConfig, coords=None):
    """Stop-gradient approximation: xi is inferred, then treated as constant.

    Exists to document that unrolling matters; compare with the unrolled
    gradient on the same instance.
    """
    eval_cfg = InnerConfig(
        steps=cfg.steps, lr=cfg.lr, init=cfg.init, init_seed=cfg.init_seed,
        unroll=False, loss=cfg.loss,
    )
    xi, _ = infer(net, chi, sensor_idx, eval_cfg, coords=coords)
    if net.mode == "discrete":
        D = dec.decode_discrete(net, ad.constant(xi.value))
    else:
        D = dec.decode_continuous(net, ad.constant(xi.value), ad.constant(coords))
    Q = sensor_project(D, label_idx)
    loss = ad.mse(ad.constant(phi), Q)
    grads = ad.gradient(loss, net.parameters())
    return np.concatenate([g.ravel() for g in grads])
