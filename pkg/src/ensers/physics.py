"""Physics-based consistency losses between predicted state blocks.

A block of ``gamma`` predicted states is interpreted as one implicit
Runge-Kutta collocation step: the first and last states are the step
endpoints, the ``q = gamma - 2`` interior states sit on equispaced collocation
nodes.  Each stage equation yields an estimate of the initial state; the loss
is the summed squared discrepancy of all estimates.

Spatial derivatives come from fixed 5x5 stencils (discrete fields) or from
coordinate autodiff through the decoder (continuous fields).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import Polynomial
from scipy import ndimage

from . import autodiff as ad
from .autodiff import Node


class PhysicsError(Exception):
    pass


# ---------------------------------------------------------------------------
# collocation tableau


@dataclass(frozen=True)
class ButcherTableau:
    q: int
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.c, dtype=np.float64)
        a = np.asarray(self.a, dtype=np.float64)
        if not (np.all(np.diff(c) > 0) and c[0] > 0 and c[-1] < 1):
            raise PhysicsError(f"stage nodes must be strictly increasing in (0, 1): {c}")
        if np.max(np.abs(a.sum(axis=1) - c)) > 1e-12:
            raise PhysicsError("row sums of a must equal c")


def collocation_tableau(q):
    """Collocation coefficients on equispaced interior nodes c_i = i/(q+1).

    a_ij integrates the j-th Lagrange basis polynomial from 0 to c_i, b_j from
    0 to 1, so the scheme is exact on polynomial trajectories of degree <= q.
    """
    if q < 1:
        raise PhysicsError("need at least one stage")
    if q > 12:
        raise PhysicsError("q > 12: Lagrange integration is ill-conditioned")
    c = np.arange(1, q + 1) / (q + 1)
    a = np.zeros((q, q))
    b = np.zeros(q)
    for j in range(q):
        others = np.delete(c, j)
        ell = Polynomial.fromroots(others) / np.prod(c[j] - others) if q > 1 else Polynomial([1.0])
        integral = ell.integ()
        a[:, j] = integral(c) - integral(0.0)
        b[j] = integral(1.0) - integral(0.0)
    return ButcherTableau(q=q, a=a, b=b, c=c)


# ---------------------------------------------------------------------------
# 5x5 stencils (4th-order first derivatives with cross-smoothing, and the
# 4th-order second-derivative cross)

_E = np.array(
    [
        [1.0, -8.0, 0.0, 8.0, -1.0],
        [2.0, -16.0, 0.0, 16.0, -2.0],
        [3.0, -24.0, 0.0, 24.0, -3.0],
        [2.0, -16.0, 0.0, 16.0, -2.0],
        [1.0, -8.0, 0.0, 8.0, -1.0],
    ]
)

KERNEL_DX = _E / (9.0 * 12.0)  # pattern along axis 1 (x), divide by dx at use
KERNEL_DY = _E.T / (9.0 * 12.0)

_D2_ROW = np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / 12.0
KERNEL_DXX = np.zeros((5, 5))
KERNEL_DXX[2, :] = _D2_ROW  # divide by dx^2 at use
KERNEL_DYY = KERNEL_DXX.T.copy()

# 1D variants for one-dimensional fields
KERNEL_1D_DX = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / 12.0
KERNEL_1D_DXX = _D2_ROW.copy()


def _apply2d(f, kernel, periodic):
    """Cross-correlate a field (Node or ndarray) with a fixed kernel."""
    if isinstance(f, Node):
        return ad.conv2d(f, kernel, mode="wrap" if periodic else "valid")
    f = np.asarray(f, dtype=np.float64)
    if f.shape[0] < 5 or f.shape[1] < 5:
        raise PhysicsError(f"field {f.shape} smaller than the 5x5 stencil")
    if periodic:
        return ndimage.correlate(f, kernel, mode="wrap")
    from scipy.signal import correlate2d

    return correlate2d(f, kernel, mode="valid")


def stencil_dx(f, dx, periodic=True):
    """d/dx along axis 1 of a (ny, nx) field."""
    return _apply2d(f, KERNEL_DX / dx, periodic)


def stencil_dy(f, dy, periodic=True):
    """d/dy along axis 0 of a (ny, nx) field."""
    return _apply2d(f, KERNEL_DY / dy, periodic)


def stencil_lap(f, dx, dy, periodic=True):
    """Laplacian with per-axis 1/(12 dx^2), 1/(12 dy^2) scaling."""
    kernel = KERNEL_DXX / dx**2 + KERNEL_DYY / dy**2
    return _apply2d(f, kernel, periodic)


def _apply1d(f, kernel, periodic):
    if isinstance(f, Node):
        return ad.conv1d(f, kernel, mode="wrap" if periodic else "valid")
    f = np.asarray(f, dtype=np.float64)
    if periodic:
        return ndimage.correlate1d(f, kernel, mode="wrap")
    return np.correlate(f, kernel, mode="valid")


def stencil_dx_1d(f, dx, periodic=True):
    return _apply1d(f, KERNEL_1D_DX / dx, periodic)


def stencil_dxx_1d(f, dx, periodic=True):
    return _apply1d(f, KERNEL_1D_DXX / dx**2, periodic)


# ---------------------------------------------------------------------------
# right-hand sides


@dataclass
class RhsSpec:
    """Which dynamical system a state block obeys, plus grid metadata.

    Fields are stored (ny, nx) with x along the second axis and flattened
    row-major to length omega = ny * nx (1D systems: omega = nx).
    """

    system: str  # burgers2d | navier-stokes-2d | allen-cahn | conv-diff
    nx: int
    ny: int = 1
    dx: float = 1.0
    dy: float = 1.0
    periodic: bool = True
    nu: float = 0.0
    coeff_a: np.ndarray = None  # conv-diff convection fields on the grid
    coeff_b: np.ndarray = None
    coeff_c: float = 0.0
    coeff_d: float = 0.0

    def __post_init__(self):
        known = ("burgers2d", "navier-stokes-2d", "allen-cahn", "conv-diff")
        if self.system not in known:
            raise PhysicsError(f"unknown system {self.system!r}; known: {known}")
        if self.system == "conv-diff":
            for name, f in (("coeff_a", self.coeff_a), ("coeff_b", self.coeff_b)):
                if f is None or np.asarray(f).shape != (self.ny, self.nx):
                    raise PhysicsError(f"{name} must match grid shape ({self.ny}, {self.nx})")

    @property
    def n_vars(self):
        return {"burgers2d": 2, "navier-stokes-2d": 3, "allen-cahn": 1, "conv-diff": 1}[
            self.system
        ]

    @property
    def omega(self):
        return self.nx * (self.ny if self.system != "allen-cahn" else 1)


def cd_coefficient_a(x, y):
    return 0.5 * (np.cos(y) + x * (2.0 * np.pi - x) * np.sin(x)) + 0.6


def cd_coefficient_b(x, y):
    return 2.0 * (np.cos(y) + np.sin(x)) + 0.8


def _grid2d(states_row, spec):
    """(omega,) node/array -> (ny, nx) field."""
    if isinstance(states_row, Node):
        return ad.reshape(states_row, (spec.ny, spec.nx))
    return np.asarray(states_row).reshape(spec.ny, spec.nx)


def _flatten(f):
    if isinstance(f, Node):
        return ad.reshape(f, (f.value.size,))
    return np.asarray(f).ravel()


def rhs_eval(spec: RhsSpec, states):
    """Time-derivative operator F-hat applied to one state tuple.

    ``states`` is (M, omega) (Node or ndarray).  Returns (M, n_eval) where
    n_eval == omega for periodic fields and the interior count otherwise; the
    pressure row of navier-stokes-2d is identically zero (no evolution
    equation for pressure).
    """
    is_node = isinstance(states, Node)
    per = spec.periodic

    def row(m):
        return states[m] if is_node else np.asarray(states[m])

    if spec.system == "burgers2d":
        u = _grid2d(row(0), spec)
        v = _grid2d(row(1), spec)
        fu = _burgers_component(u, v, u, spec)
        fv = _burgers_component(u, v, v, spec)
        return _stack([_flatten(fu), _flatten(fv)], is_node)
    if spec.system == "navier-stokes-2d":
        u = _grid2d(row(0), spec)
        v = _grid2d(row(1), spec)
        p = _grid2d(row(2), spec)
        fu = _burgers_component(u, v, u, spec)
        fv = _burgers_component(u, v, v, spec)
        px = stencil_dx(p, spec.dx, per)
        py = stencil_dy(p, spec.dy, per)
        fu = ad.sub(fu, px) if is_node else fu - px
        fv = ad.sub(fv, py) if is_node else fv - py
        zero = (
            ad.smul(_flatten(fu), 0.0) if is_node else np.zeros(np.asarray(fu).size)
        )
        return _stack([_flatten(fu), _flatten(fv), zero], is_node)
    if spec.system == "allen-cahn":
        u = row(0)
        uxx = stencil_dxx_1d(u, spec.dx, per)
        if is_node:
            uc = _crop1d(u) if not per else u
            react = ad.sub(ad.smul(uc, 5.0), ad.smul(ad.powi(uc, 3), 5.0))
            f = ad.add(ad.smul(uxx, 1e-4), react)
        else:
            uc = u[2:-2] if not per else u
            f = 1e-4 * uxx + 5.0 * uc - 5.0 * uc**3
        return _stack([f], is_node)
    # conv-diff
    u = _grid2d(row(0), spec)
    ux = stencil_dx(u, spec.dx, per)
    uy = stencil_dy(u, spec.dy, per)
    kxx = KERNEL_DXX / spec.dx**2
    kyy = KERNEL_DYY / spec.dy**2
    uxx = _apply2d(u, kxx, per)
    uyy = _apply2d(u, kyy, per)
    a = spec.coeff_a if per else spec.coeff_a[2:-2, 2:-2]
    b = spec.coeff_b if per else spec.coeff_b[2:-2, 2:-2]
    if is_node:
        f = ad.add(
            ad.add(ad.mul(ad.constant(a), ux), ad.mul(ad.constant(b), uy)),
            ad.add(ad.smul(uxx, spec.coeff_c), ad.smul(uyy, spec.coeff_d)),
        )
    else:
        f = a * ux + b * uy + spec.coeff_c * uxx + spec.coeff_d * uyy
    return _stack([_flatten(f)], is_node)


def _burgers_component(u, v, w, spec):
    """-(u w_x + v w_y) + nu lap(w) for a velocity component w."""
    per = spec.periodic
    wx = stencil_dx(w, spec.dx, per)
    wy = stencil_dy(w, spec.dy, per)
    lap = stencil_lap(w, spec.dx, spec.dy, per)
    if isinstance(w, Node):
        uc, vc = (u, v) if per else (_crop2d(u), _crop2d(v))
        adv = ad.add(ad.mul(uc, wx), ad.mul(vc, wy))
        return ad.sub(ad.smul(lap, spec.nu), adv)
    uc, vc = (u, v) if per else (u[2:-2, 2:-2], v[2:-2, 2:-2])
    return spec.nu * lap - (uc * wx + vc * wy)


def _crop2d(f):
    return ad.getitem(f, (slice(2, -2), slice(2, -2)))


def _crop1d(f):
    return ad.getitem(f, slice(2, -2))


def _stack(rows, is_node):
    if is_node:
        n = rows[0].value.size
        return ad.concat([ad.reshape(r, (1, n)) for r in rows], axis=0)
    return np.stack(rows)


# ---------------------------------------------------------------------------
# physics losses for discrete fields


def crop_state(states_row, spec):
    """Restrict a (omega,) state to the stencil-evaluable interior, flat."""
    if spec.periodic:
        return states_row
    if spec.system == "allen-cahn":
        return _crop1d(states_row) if isinstance(states_row, Node) else states_row[2:-2]
    f = _grid2d(states_row, spec)
    f = _crop2d(f) if isinstance(f, Node) else f[2:-2, 2:-2]
    return _flatten(f)


def physics_loss_discrete(block, dt, tableau: ButcherTableau, spec, rows=None):
    """Collocation residual of a (gamma, M, omega) block.

    Each interior state j supplies F-hat(V^{n+c_j}); estimates
    W_i = V^{n+c_i} - dt * sum_j a_ij F_j (and the endpoint analogue with b)
    must all equal the first state.  Returns sum of squared discrepancies.
    The positive-dt-times-F-subtracted convention is the one under which the
    loss vanishes on exact trajectories.

    ``spec`` is an RhsSpec, or a plain callable (M, omega) -> (M, omega) for
    systems with an exactly known right-hand side (used by the oracle tests).
    """
    is_node = isinstance(block, Node)
    gamma = block.value.shape[0] if is_node else block.shape[0]
    n_vars = block.value.shape[1] if is_node else block.shape[1]
    if gamma != tableau.q + 2:
        raise PhysicsError(f"block has {gamma} states, tableau needs q+2 = {tableau.q + 2}")
    if rows is None:
        rows = tuple(range(n_vars))

    def state(i):
        return block[i] if is_node else np.asarray(block[i])

    if callable(spec) and not isinstance(spec, RhsSpec):
        rhs_fn = spec

        def crop_fn(row):
            return row

    else:
        rhs_fn = lambda s: rhs_eval(spec, s)

        def crop_fn(row):
            return crop_state(row, spec)

    f_stages = [rhs_fn(state(j)) for j in range(1, tableau.q + 1)]

    def cropped(i):
        parts = [crop_fn(state(i)[m]) for m in rows]
        return _stack(parts, is_node)

    v0 = cropped(0)
    total = ad.constant(0.0) if is_node else 0.0
    weights = [tableau.a[i] for i in range(tableau.q)] + [tableau.b]
    states_idx = list(range(1, tableau.q + 1)) + [gamma - 1]
    for w, si in zip(weights, states_idx):
        if is_node:
            acc = None
            for j, f in enumerate(f_stages):
                sel = _stack([f[m] for m in rows], True) if rows != tuple(range(n_vars)) else f
                term = ad.smul(sel, float(w[j]))
                acc = term if acc is None else ad.add(acc, term)
            west = ad.sub(cropped(si), ad.smul(acc, dt))
            total = ad.add(total, ad.sum_(ad.square(ad.sub(west, v0))))
        else:
            acc = sum(w[j] * f_stages[j][list(rows)] for j in range(tableau.q))
            west = cropped(si) - dt * acc
            total = total + float(np.sum((west - v0) ** 2))
    return total


def divergence_penalty(block, spec: RhsSpec):
    """sum over states of || du/dx + dv/dy ||^2 (incompressibility)."""
    is_node = isinstance(block, Node)
    gamma = block.value.shape[0] if is_node else block.shape[0]
    total = ad.constant(0.0) if is_node else 0.0
    for i in range(gamma):
        u = _grid2d(block[i, 0] if is_node else np.asarray(block[i][0]), spec)
        v = _grid2d(block[i, 1] if is_node else np.asarray(block[i][1]), spec)
        div_ = stencil_dx(u, spec.dx, spec.periodic)
        div2 = stencil_dy(v, spec.dy, spec.periodic)
        if is_node:
            total = ad.add(total, ad.sum_(ad.square(ad.add(div_, div2))))
        else:
            total = total + float(np.sum((div_ + div2) ** 2))
    return total


def physics_loss_flow(block, dt, tableau: ButcherTableau, spec: RhsSpec):
    """Momentum collocation residual plus the continuity penalty (M == 3)."""
    n_vars = block.value.shape[1] if isinstance(block, Node) else block.shape[1]
    if n_vars != 3:
        raise PhysicsError(f"flow loss expects M=3 (u, v, p); got M={n_vars}")
    irk = physics_loss_discrete(block, dt, tableau, spec, rows=(0, 1))
    div = divergence_penalty(block, spec)
    return ad.add(irk, div) if isinstance(block, Node) else irk + div


# ---------------------------------------------------------------------------
# continuous (coordinate-autodiff) residuals


@dataclass
class ContinuousSystem:
    """Residual definition for a continuous-mode system (M == 1)."""

    system: str  # allen-cahn | conv-diff
    coord_dim: int = 1


def residual_continuous(net, xi, coords_values, system: str):
    """Per-point time-derivative operator F-hat via coordinate autodiff.

    Returns (F, D, coords) where F is a (gamma, omega) node of residual-
    operator values, D the decoded (gamma, M, omega) block and coords the
    coordinate leaf the derivatives were taken against.  Gradients of
    gradients w.r.t. the coordinates supply the second derivatives, so the
    result stays differentiable w.r.t. the network parameters.
    """
    from . import decoder as dec

    if net.mode != "continuous":
        raise PhysicsError("continuous residual needs a continuous-mode decoder")
    if system not in ("allen-cahn", "conv-diff"):
        raise PhysicsError(f"no continuous residual registered for {system!r}")
    coords = ad.leaf(np.asarray(coords_values, dtype=np.float64))
    D = dec.decode_continuous(net, xi, coords)
    gamma = D.value.shape[0]
    n_pts = coords.value.shape[0]
    frows = []
    for i in range(gamma):
        u = D[i, 0]  # (omega,)
        (g1,) = ad.gradient(ad.sum_(u), [coords], create_graph=True)  # (omega, d)
        if system == "allen-cahn":
            ux = g1[:, 0]
            (g2,) = ad.gradient(ad.sum_(ux), [coords], create_graph=True)
            uxx = g2[:, 0]
            f = ad.add(ad.smul(uxx, 1e-4), ad.sub(ad.smul(u, 5.0), ad.smul(ad.powi(u, 3), 5.0)))
        else:
            x = coords.value[:, 0]
            y = coords.value[:, 1]
            a = ad.constant(cd_coefficient_a(x, y))
            b = ad.constant(cd_coefficient_b(x, y))
            ux, uy = g1[:, 0], g1[:, 1]
            (gxx,) = ad.gradient(ad.sum_(ux), [coords], create_graph=True)
            (gyy,) = ad.gradient(ad.sum_(uy), [coords], create_graph=True)
            f = ad.add(
                ad.add(ad.mul(a, ux), ad.mul(b, uy)),
                ad.add(ad.smul(gxx[:, 0], 0.2), ad.smul(gyy[:, 1], 0.3)),
            )
        frows.append(ad.reshape(f, (1, n_pts)))
    return ad.concat(frows, axis=0), D, coords


def physics_loss_continuous(net, xi, coords_values, dt, tableau: ButcherTableau, system: str):
    """Collocation residual with autodiff F-hat replacing stencils."""
    F, D, _ = residual_continuous(net, xi, coords_values, system)
    gamma = D.value.shape[0]
    if gamma != tableau.q + 2:
        raise PhysicsError(f"block has {gamma} states, tableau needs q+2 = {tableau.q + 2}")
    v0 = D[0, 0]
    total = ad.constant(0.0)
    weights = [tableau.a[i] for i in range(tableau.q)] + [tableau.b]
    states_idx = list(range(1, tableau.q + 1)) + [gamma - 1]
    for w, si in zip(weights, states_idx):
        acc = None
        for j in range(tableau.q):
            term = ad.smul(F[j + 1], float(w[j]))
            acc = term if acc is None else ad.add(acc, term)
        west = ad.sub(D[si, 0], ad.smul(acc, dt))
        total = ad.add(total, ad.sum_(ad.square(ad.sub(west, v0))))
    return total
