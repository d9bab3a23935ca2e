"""Ground-truth snapshot generation for the four reference systems.

In-repo solvers cover 2D Burgers (finite differences + RK4), Allen-Cahn 1D
(semi-implicit Fourier) and variable-coefficient convection-diffusion 2D
(pseudo-spectral + RK4).  Cylinder-wake style M=3 data is ingested from files;
a synthetic traveling-vortex generator exists purely to exercise that pipeline
in tests and is not a flow simulation.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import physics as ph


class DatagenError(Exception):
    pass


@dataclass
class NoiseSpec:
    """SNR-calibrated additive Gaussian noise; snr_db=None is the identity."""

    snr_db: float | None = None
    seed: int = 0


@dataclass
class SnapshotSet:
    """Full simulated field tensor with grid and time metadata."""

    Z: np.ndarray  # (L, M, omega)
    system: str
    nx: int
    ny: int
    dx: float
    dy: float
    dt_output: float
    periodic: bool
    extents: tuple = ((0.0, 1.0), (0.0, 1.0))
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.Z = np.asarray(self.Z, dtype=np.float64)
        if self.Z.ndim != 3:
            raise DatagenError(f"Z must be (L, M, omega), got {self.Z.shape}")
        omega = self.nx * self.ny
        if self.Z.shape[2] != omega:
            raise DatagenError(f"omega {self.Z.shape[2]} != nx*ny = {omega}")
        if not np.all(np.isfinite(self.Z)):
            raise DatagenError("snapshot payload contains non-finite values")

    @property
    def L(self):
        return self.Z.shape[0]

    @property
    def n_vars(self):
        return self.Z.shape[1]

    @property
    def omega(self):
        return self.Z.shape[2]

    def rhs_spec(self):
        """The RhsSpec matching this data set (for residual self-checks)."""
        kwargs = dict(
            nx=self.nx, ny=self.ny, dx=self.dx, dy=self.dy, periodic=self.periodic
        )
        if self.system in ("burgers2d", "navier-stokes-2d"):
            return ph.RhsSpec(self.system, nu=self.meta.get("nu", 0.0), **kwargs)
        if self.system == "allen-cahn":
            return ph.RhsSpec(self.system, **kwargs)
        if self.system == "conv-diff":
            x = np.arange(self.nx) * self.dx
            y = np.arange(self.ny) * self.dy
            X, Y = np.meshgrid(x, y)
            return ph.RhsSpec(
                self.system,
                coeff_a=ph.cd_coefficient_a(X, Y),
                coeff_b=ph.cd_coefficient_b(X, Y),
                coeff_c=0.2,
                coeff_d=0.3,
                **kwargs,
            )
        raise DatagenError(f"no rhs spec for system {self.system!r}")


# ---------------------------------------------------------------------------
# noise


def add_noise(s, spec: NoiseSpec):
    """r = s + sqrt(P / (2 * 10^(SNR_dB/10))) * N(0, 1), with P = sum(s^2)/n.

    The power is computed over the tensor being corrupted; deterministic per
    seed; snr_db=None returns the input unchanged.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.size == 0:
        raise DatagenError("cannot add noise to an empty tensor")
    if spec.snr_db is None:
        return s.copy()
    power = float(np.sum(s * s) / s.size)
    scale = np.sqrt(power / (2.0 * 10.0 ** (spec.snr_db / 10.0)))
    rng = np.random.default_rng(spec.seed)
    return s + scale * rng.standard_normal(s.shape)


# ---------------------------------------------------------------------------
# 2D Burgers


def burgers_ic(seed, nx, ny):
    """Random truncated-Fourier initial condition on [0,1]^2.

    Each velocity component is a sum over integer wavenumbers i, j in [-4, 4]
    of random sine/cosine modes, normalized to amplitude exactly 2 and shifted
    by a uniform constant.
    """
    rng = np.random.default_rng(seed)
    n_modes = 4
    x = np.arange(nx) / nx
    y = np.arange(ny) / ny
    X, Y = np.meshgrid(x, y)
    w = np.zeros((2, ny, nx))
    for i in range(-n_modes, n_modes + 1):
        for j in range(-n_modes, n_modes + 1):
            a = rng.standard_normal(2)
            b = rng.standard_normal(2)
            phase = 2.0 * np.pi * (i * X + j * Y)
            w += a[:, None, None] * np.sin(phase) + b[:, None, None] * np.cos(phase)
    c = rng.uniform(-1.0, 1.0, size=2)
    out = np.empty_like(w)
    for m in range(2):
        out[m] = 2.0 * w[m] / np.max(np.abs(w[m])) + c[m]
    return out[0], out[1]


def solve_burgers(ic, nu, dt, steps, nx, output_every, seed=None):
    """Explicit RK4, 4th-order central stencils, periodic wrap on [0,1]^2."""
    u0, v0 = ic
    u0 = np.asarray(u0, dtype=np.float64)
    v0 = np.asarray(v0, dtype=np.float64)
    ny = u0.shape[0]
    dx = 1.0 / nx
    dy = 1.0 / ny
    cfl = max(np.max(np.abs(u0)), np.max(np.abs(v0))) * dt / dx
    if cfl >= 1.0:
        raise DatagenError(f"CFL violation at t=0: max|u|*dt/dx = {cfl:.3f} >= 1")
    spec = ph.RhsSpec("burgers2d", nx=nx, ny=ny, dx=dx, dy=dy, nu=nu, periodic=True)

    def rhs(state):
        return ph.rhs_eval(spec, state)

    state = np.stack([u0.ravel(), v0.ravel()])
    snaps = [state.copy()]
    for step in range(steps):
        k1 = rhs(state)
        k2 = rhs(state + 0.5 * dt * k1)
        k3 = rhs(state + 0.5 * dt * k2)
        k4 = rhs(state + dt * k3)
        state = state + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(state)):
            raise DatagenError(f"solution blew up at step {step + 1}")
        if (step + 1) % output_every == 0:
            snaps.append(state.copy())
    return SnapshotSet(
        Z=np.stack(snaps),
        system="burgers2d",
        nx=nx,
        ny=ny,
        dx=dx,
        dy=dy,
        dt_output=dt * output_every,
        periodic=True,
        extents=((0.0, 1.0), (0.0, 1.0)),
        meta={"nu": nu, "dt": dt, "seed": seed},
    )


# ---------------------------------------------------------------------------
# Allen-Cahn 1D


def solve_allen_cahn(dt=1e-4, steps=9800, nx=128, output_every=200):
    """u_t = 1e-4 u_xx - 5 u^3 + 5 u on [-1, 1], periodic.

    Semi-implicit: the stiff diffusion term is integrated implicitly in
    Fourier space, the reaction term explicitly.
    """
    if nx < 64:
        raise DatagenError("allen-cahn solver needs nx >= 64")
    dx = 2.0 / nx
    x = -1.0 + np.arange(nx) * dx
    u = x**2 * np.cos(np.pi * x)
    k = 2.0 * np.pi * np.fft.fftfreq(nx, d=dx)
    denom = 1.0 + dt * 1e-4 * k**2
    snaps = [u.copy()]
    for step in range(steps):
        react = 5.0 * (u - u**3)
        u = np.real(np.fft.ifft((np.fft.fft(u + dt * react)) / denom))
        if not np.all(np.isfinite(u)) or np.max(np.abs(u)) > 1e3:
            raise DatagenError(f"allen-cahn blow-up at step {step + 1}")
        if (step + 1) % output_every == 0:
            snaps.append(u.copy())
    Z = np.stack(snaps)[:, None, :]
    return SnapshotSet(
        Z=Z,
        system="allen-cahn",
        nx=nx,
        ny=1,
        dx=dx,
        dy=1.0,
        dt_output=dt * output_every,
        periodic=True,
        extents=((-1.0, 1.0),),
        meta={"dt": dt},
    )


# ---------------------------------------------------------------------------
# convection-diffusion 2D


def conv_diff_ic(seed, nx, ny, n_modes=30, max_wavenumber=9, std=np.sqrt(0.02)):
    """Random low-wavenumber Fourier initial condition on [0, 2pi]^2."""
    rng = np.random.default_rng(seed)
    x = np.arange(nx) * (2.0 * np.pi / nx)
    y = np.arange(ny) * (2.0 * np.pi / ny)
    X, Y = np.meshgrid(x, y)
    u = np.zeros((ny, nx))
    for _ in range(n_modes):
        kx = rng.integers(-max_wavenumber, max_wavenumber + 1)
        ky = rng.integers(-max_wavenumber, max_wavenumber + 1)
        lam, gam = rng.normal(0.0, std, size=2)
        u += lam * np.cos(kx * X + ky * Y) + gam * np.sin(kx * X + ky * Y)
    return u


def solve_conv_diff(
    seed=0,
    dt=0.01,
    steps=39,
    nx=64,
    ny=None,
    output_every=1,
    coeff_a=None,
    coeff_b=None,
    coeff_c=0.2,
    coeff_d=0.3,
    ic=None,
):
    """Pseudo-spectral derivatives + RK4 for the variable-coefficient system.

    u_t = a(x,y) u_x + b(x,y) u_y + c u_xx + d u_yy, periodic on [0, 2pi]^2.
    """
    ny = nx if ny is None else ny
    dx = 2.0 * np.pi / nx
    dy = 2.0 * np.pi / ny
    x = np.arange(nx) * dx
    y = np.arange(ny) * dy
    X, Y = np.meshgrid(x, y)
    a = ph.cd_coefficient_a(X, Y) if coeff_a is None else np.broadcast_to(coeff_a, (ny, nx))
    b = ph.cd_coefficient_b(X, Y) if coeff_b is None else np.broadcast_to(coeff_b, (ny, nx))
    u = conv_diff_ic(seed, nx, ny) if ic is None else np.asarray(ic, dtype=np.float64)

    kx = np.fft.fftfreq(nx, d=dx) * 2.0 * np.pi
    ky = np.fft.fftfreq(ny, d=dy) * 2.0 * np.pi
    KX, KY = np.meshgrid(kx, ky)

    def rhs(f):
        fh = np.fft.fft2(f)
        fx = np.real(np.fft.ifft2(1j * KX * fh))
        fy = np.real(np.fft.ifft2(1j * KY * fh))
        fxx = np.real(np.fft.ifft2(-(KX**2) * fh))
        fyy = np.real(np.fft.ifft2(-(KY**2) * fh))
        return a * fx + b * fy + coeff_c * fxx + coeff_d * fyy

    snaps = [u.ravel().copy()]
    for step in range(steps):
        k1 = rhs(u)
        k2 = rhs(u + 0.5 * dt * k1)
        k3 = rhs(u + 0.5 * dt * k2)
        k4 = rhs(u + dt * k3)
        u = u + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(u)):
            raise DatagenError(f"conv-diff blow-up at step {step + 1}")
        if (step + 1) % output_every == 0:
            snaps.append(u.ravel().copy())
    Z = np.stack(snaps)[:, None, :]
    return SnapshotSet(
        Z=Z,
        system="conv-diff",
        nx=nx,
        ny=ny,
        dx=dx,
        dy=dy,
        dt_output=dt * output_every,
        periodic=True,
        extents=((0.0, 2.0 * np.pi), (0.0, 2.0 * np.pi)),
        meta={"dt": dt, "seed": seed, "coeff_c": coeff_c, "coeff_d": coeff_d},
    )


# ---------------------------------------------------------------------------
# synthetic M=3 data (pipeline exercise only, deliberately non-physical)


def synthetic_vortex_street(n_snapshots=25, nx=64, ny=64, seed=0):
    """Analytic traveling Oseen-vortex superposition with a pressure proxy.

    Exists so the (u, v, p) file-ingestion pipeline can be tested without any
    CFD dependency.  The fields are smooth and time-coherent but do not solve
    the Navier-Stokes equations.
    """
    rng = np.random.default_rng(seed)
    dx = 4.0 / nx
    dy = 4.0 / ny
    x = 1.5 + np.arange(nx) * dx
    y = -2.0 + np.arange(ny) * dy
    X, Y = np.meshgrid(x, y)
    centers = rng.uniform([1.5, -2.0], [5.5, 2.0], size=(4, 2))
    strengths = rng.uniform(-1.0, 1.0, size=4)
    core = 0.4
    Z = np.zeros((n_snapshots, 3, nx * ny))
    for n in range(n_snapshots):
        u = np.ones_like(X)
        v = np.zeros_like(X)
        p = np.zeros_like(X)
        for (cx, cy), s in zip(centers, strengths):
            cxn = 1.5 + (cx - 1.5 + 0.08 * n) % 4.0
            r2 = (X - cxn) ** 2 + (Y - cy) ** 2
            swirl = s * (1.0 - np.exp(-r2 / core**2)) / (r2 + core**2)
            u += -swirl * (Y - cy)
            v += swirl * (X - cxn)
            p -= 0.5 * s**2 * np.exp(-r2 / core**2)
        Z[n, 0] = u.ravel()
        Z[n, 1] = v.ravel()
        Z[n, 2] = p.ravel()
    return SnapshotSet(
        Z=Z,
        system="navier-stokes-2d",
        nx=nx,
        ny=ny,
        dx=dx,
        dy=dy,
        dt_output=0.02,
        periodic=False,
        extents=((1.5, 5.5), (-2.0, 2.0)),
        meta={"nu": 0.005, "seed": seed, "synthetic": True},
    )


# ---------------------------------------------------------------------------
# snapshot file format: JSON header line + little-endian float64 payload


def save_snapshots(snapshots: SnapshotSet, path):
    header = {
        "format": "ensers-snapshots-v1",
        "system": snapshots.system,
        "L": snapshots.L,
        "M": snapshots.n_vars,
        "omega": snapshots.omega,
        "nx": snapshots.nx,
        "ny": snapshots.ny,
        "dx": snapshots.dx,
        "dy": snapshots.dy,
        "dt_output": snapshots.dt_output,
        "periodic": snapshots.periodic,
        "extents": [list(e) for e in snapshots.extents],
        "meta": snapshots.meta,
    }
    payload = snapshots.Z.astype("<f8").tobytes()
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(json.dumps(header).encode("utf-8") + b"\n")
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_snapshots(path):
    with open(path, "rb") as fh:
        line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatagenError(f"bad snapshot header: {exc}")
    if header.get("format") != "ensers-snapshots-v1":
        raise DatagenError("not an ensers snapshot file")
    expected = header["L"] * header["M"] * header["omega"]
    flat = np.frombuffer(payload, dtype="<f8")
    if flat.size != expected:
        raise DatagenError(
            f"payload has {flat.size} values, header says L*M*omega = {expected}"
        )
    Z = flat.astype(np.float64).reshape(header["L"], header["M"], header["omega"])
    return SnapshotSet(
        Z=Z,
        system=header["system"],
        nx=header["nx"],
        ny=header["ny"],
        dx=header["dx"],
        dy=header["dy"],
        dt_output=header["dt_output"],
        periodic=header["periodic"],
        extents=tuple(tuple(e) for e in header["extents"]),
        meta=header.get("meta", {}),
    )


def grid_coordinates(snapshots: SnapshotSet):
    """Collocation coordinates (omega, d) matching the flattened field order."""
    if snapshots.ny == 1:
        (x0, x1) = snapshots.extents[0]
        return (x0 + np.arange(snapshots.nx) * snapshots.dx)[:, None]
    (x0, _), (y0, _) = snapshots.extents[0], snapshots.extents[1]
    x = x0 + np.arange(snapshots.nx) * snapshots.dx
    y = y0 + np.arange(snapshots.ny) * snapshots.dy
    X, Y = np.meshgrid(x, y)
    return np.stack([X.ravel(), Y.ravel()], axis=1)
