"""Infinite-horizon pairwise safety value function for the relative Dubins game.

The ego agent maximizes the value (evader), the other agent minimizes it.
The value is obtained by backward time-stepping of the HJI variational
inequality with a first-order Lax-Friedrichs scheme until it stops changing.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .dynamics import RelativeState, wrap_angle

log = logging.getLogger(__name__)

SCHEME_VERSION = "llf1-cfl"


@dataclass(frozen=True)
class Grid3D:
    x_lo: float = -2.5
    x_hi: float = 2.5
    nx: int = 201
    y_lo: float = -2.5
    y_hi: float = 2.5
    ny: int = 201
    ntheta: int = 37

    def __post_init__(self):
        if self.nx < 3 or self.ny < 3 or self.ntheta < 3:
            raise ValueError("every axis needs at least 3 nodes")
        if not (self.x_hi > self.x_lo and self.y_hi > self.y_lo):
            raise ValueError("axis bounds must be increasing")

    @property
    def dx(self) -> float:
        return (self.x_hi - self.x_lo) / (self.nx - 1)

    @property
    def dy(self) -> float:
        return (self.y_hi - self.y_lo) / (self.ny - 1)

    @property
    def dtheta(self) -> float:
        return 2.0 * np.pi / self.ntheta

    @property
    def xs(self) -> np.ndarray:
        return np.linspace(self.x_lo, self.x_hi, self.nx)

    @property
    def ys(self) -> np.ndarray:
        return np.linspace(self.y_lo, self.y_hi, self.ny)

    @property
    def thetas(self) -> np.ndarray:
        # node 0 sits at -pi; pi itself is node 0 again
        return -np.pi + self.dtheta * np.arange(self.ntheta)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.ntheta)

    def mesh(self):
        return np.meshgrid(self.xs, self.ys, self.thetas, indexing="ij")

    @classmethod
    def coarse(cls) -> "Grid3D":
        """The 61 x 61 x 37 grid over [-3, 3]^2: quick to solve but too coarse to shield with."""
        return cls(-3.0, 3.0, 61, -3.0, 3.0, 61, 37)

    def mirror_index(self) -> np.ndarray:
        """Theta-node permutation realizing theta -> -theta."""
        return (-np.arange(self.ntheta)) % self.ntheta


@dataclass(frozen=True)
class GameParams:
    v: float = 0.22
    omega_max: float = 2.84
    d: float = 0.35

    def __post_init__(self):
        if self.v <= 0 or self.omega_max <= 0 or self.d <= 0:
            raise ValueError("game parameters must be positive")


@dataclass
class ValueFunction:
    grid: Grid3D
    values: np.ndarray
    converged: bool = False
    iterations: int = 0
    residual: float = float("nan")
    params: GameParams | None = None
    params_hash: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.values.shape != self.grid.shape:
            raise ValueError(f"values shape {self.values.shape} != grid {self.grid.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("value function contains non-finite entries")

    # -- queries -----------------------------------------------------------
    def interpolate(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Values at (M, 3) relative states and a per-point 'was clamped' mask."""
        pts = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
        vals = np.empty(len(pts))
        clamped = np.zeros(len(pts), dtype=np.uint8)
        g = self.grid
        kernels.trilinear(
            np.ascontiguousarray(self.values), g.x_lo, g.y_lo, g.dx, g.dy, g.dtheta,
            pts, vals, clamped,
        )
        return vals, clamped.astype(bool)

    def gradient(self, points) -> np.ndarray:
        """Central-difference gradient of the interpolant, one grid step per axis."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        g = self.grid
        steps = np.array([g.dx, g.dy, g.dtheta])
        shifted = np.concatenate(
            [pts + s * steps[a] * np.eye(3)[a] for a in range(3) for s in (1.0, -1.0)]
        )
        vals, _ = self.interpolate(shifted)
        vals = vals.reshape(6, len(pts))
        return np.stack([(vals[2 * a] - vals[2 * a + 1]) / (2 * steps[a]) for a in range(3)], axis=1)


def signed_distance_target(grid: Grid3D, d: float) -> ValueFunction:
    """Implicit surface of the danger zone: planar distance minus ``d``."""
    if d <= 0:
        raise ValueError("collision radius must be positive")
    X, Y, _ = grid.mesh()
    return ValueFunction(grid=grid, values=np.sqrt(X**2 + Y**2) - d)


def hamiltonian(px, py, theta, q, params: GameParams):
    """Closed-form max over ego turn rate, min over other turn rate of q . g."""
    qx, qy, qt = q[..., 0], q[..., 1], q[..., 2]
    v, w = params.v, params.omega_max
    return (qx * (v * np.cos(theta) - v) + qy * v * np.sin(theta)
            + w * np.abs(qx * py - qy * px - qt) - w * np.abs(qt))


def dissipation_coefficients(grid: Grid3D, params: GameParams) -> tuple[float, float, float]:
    """Grid-wide per-axis bounds on |dH/dq|; they fix the CFL time step.

    The sweep itself uses the node-local version of the same bounds.
    """
    v, w = params.v, params.omega_max
    th = grid.thetas
    ax = np.max(np.abs(v * np.cos(th) - v)) + w * max(abs(grid.y_lo), abs(grid.y_hi))
    ay = np.max(np.abs(v * np.sin(th))) + w * max(abs(grid.x_lo), abs(grid.x_hi))
    at = 2.0 * w
    return float(ax), float(ay), float(at)


def cfl_timestep(grid: Grid3D, params: GameParams, cfl: float = 0.5) -> float:
    ax, ay, at = dissipation_coefficients(grid, params)
    return cfl / (ax / grid.dx + ay / grid.dy + at / grid.dtheta)


def params_hash(grid: Grid3D, params: GameParams, tol: float, max_iters: int, cfl: float = 0.5) -> str:
    blob = json.dumps(
        {"grid": asdict(grid), "game": asdict(params), "tol": tol,
         "max_iters": max_iters, "cfl": cfl, "scheme": SCHEME_VERSION},
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode()).hexdigest()


def solve_brs(
    grid: Grid3D,
    params: GameParams,
    tol: float = 1e-4,
    max_iters: int = 2000,
    cfl: float = 0.5,
    target: ValueFunction | None = None,
    callback=None,
) -> ValueFunction:
    """Sweep ``V <- min(V, V + dt * H_LF)`` until the max-norm change drops below ``tol``.

    ``callback(k, V_prev, V_next)``, if given, sees every sweep (used by tests
    to check monotonicity). The result is flagged unconverged when
    ``max_iters`` runs out.
    """
    if target is None:
        target = signed_distance_target(grid, params.d)
    V = np.ascontiguousarray(target.values, dtype=np.float64).copy()
    nxt = np.empty_like(V)
    xs, ys, th = grid.xs, grid.ys, grid.thetas
    cos_th, sin_th = np.cos(th), np.sin(th)
    at = dissipation_coefficients(grid, params)[2]
    dt = cfl_timestep(grid, params, cfl)
    residual = float("inf")
    converged = False
    k = 0
    t0 = time.perf_counter()
    while k < max_iters:
        residual = kernels.lf_sweep(
            V, nxt, xs, ys, cos_th, sin_th, grid.dx, grid.dy, grid.dtheta,
            params.v, params.omega_max, at, dt,
        )
        k += 1
        if callback is not None:
            callback(k, V, nxt)
        V, nxt = nxt, V
        if residual < tol:
            converged = True
            break
    elapsed = time.perf_counter() - t0
    log.info("solve_brs: %d sweeps, residual %.3g, %.1fs (%s backend)",
             k, residual, elapsed, kernels.BACKEND)
    return ValueFunction(
        grid=grid, values=V, converged=converged, iterations=k, residual=float(residual),
        params=params, params_hash=params_hash(grid, params, tol, max_iters, cfl),
        metadata={"dt": dt, "seconds": elapsed, "backend": kernels.BACKEND,
                  "horizon": k * dt},
    )


def _as_points(x) -> np.ndarray:
    if isinstance(x, RelativeState):
        return x.as_array()[None, :]
    return np.atleast_2d(np.asarray(x, dtype=float))


def value_at(vf: ValueFunction, x) -> float:
    """Interpolated value at one relative state (out-of-grid positions clamp)."""
    vals, clamped = vf.interpolate(_as_points(x))
    if clamped[0]:
        log.debug("value_at: state %s outside grid, clamped", x)
    return float(vals[0])


def values_at(vf: ValueFunction, xs) -> np.ndarray:
    return vf.interpolate(_as_points(xs))[0]


def avoidance_argument(vf: ValueFunction, xs) -> np.ndarray:
    """The switching function ``q_x*py - q_y*px - q_theta`` at each state."""
    pts = _as_points(xs)
    q = vf.gradient(pts)
    return q[:, 0] * pts[:, 1] - q[:, 1] * pts[:, 0] - q[:, 2]


def optimal_avoidance(vf: ValueFunction, x, omega_max: float | None = None):
    """Bang-bang ego turn rate maximizing the value; zero argument maps to -omega_max."""
    if omega_max is None:
        if vf.params is None:
            raise ValueError("omega_max unknown: pass it or use a solved value function")
        omega_max = vf.params.omega_max
    arg = avoidance_argument(vf, x)
    omega = np.where(arg > 0.0, omega_max, -omega_max)
    if isinstance(x, RelativeState) or np.ndim(x) == 1:
        return float(omega[0])
    return omega


def mirror_values(vf: ValueFunction) -> np.ndarray:
    """Node values of V(px, -py, -theta) on the same grid (requires a y-symmetric grid)."""
    g = vf.grid
    if not np.isclose(g.y_lo, -g.y_hi):
        raise ValueError("mirror requires symmetric py bounds")
    return vf.values[:, ::-1, :][:, :, g.mirror_index()]


# -- HJVF1 binary format -------------------------------------------------------

MAGIC = b"HJVF1"
_HEADER = struct.Struct("<5s3x6d3q3dqdq32s")


def save_value_function(vf: ValueFunction, path) -> None:
    g = vf.grid
    p = vf.params or GameParams()
    digest = bytes.fromhex(vf.params_hash) if vf.params_hash else b"\0" * 32
    header = _HEADER.pack(
        MAGIC, g.x_lo, g.x_hi, g.y_lo, g.y_hi, -np.pi, np.pi,
        g.nx, g.ny, g.ntheta, p.v, p.omega_max, p.d,
        int(vf.converged), float(vf.residual), int(vf.iterations), digest,
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(vf.values, dtype="<f8").tobytes(order="C"))
    tmp.replace(path)


class FormatError(ValueError):
    pass


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    f = _HEADER.unpack(raw)
    if f[0] != MAGIC:
        raise FormatError(f"{path}: bad magic {f[0]!r}")
    return {
        "grid": Grid3D(x_lo=f[1], x_hi=f[2], y_lo=f[3], y_hi=f[4], nx=f[7], ny=f[8], ntheta=f[9]),
        "game": GameParams(v=f[10], omega_max=f[11], d=f[12]),
        "converged": bool(f[13]),
        "residual": f[14],
        "iterations": f[15],
        "params_hash": f[16].hex() if any(f[16]) else "",
    }


def load_value_function(path, mmap: bool = True) -> ValueFunction:
    """Load an HJVF1 file; with ``mmap`` the node values are a read-only memory map."""
    h = read_header(path)
    g = h["grid"]
    count = g.nx * g.ny * g.ntheta
    if mmap:
        values = np.memmap(path, dtype="<f8", mode="r", offset=_HEADER.size, shape=g.shape)
    else:
        with open(path, "rb") as fh:
            fh.seek(_HEADER.size)
            values = np.frombuffer(fh.read(), dtype="<f8")
        if values.size != count:
            raise FormatError(f"{path}: expected {count} values, found {values.size}")
        values = values.reshape(g.shape).copy()
        values.setflags(write=False)
    return ValueFunction(
        grid=g, values=values, converged=h["converged"], iterations=h["iterations"],
        residual=h["residual"], params=h["game"], params_hash=h["params_hash"],
    )


__all__ = [
    "Grid3D", "GameParams", "ValueFunction", "signed_distance_target", "solve_brs",
    "value_at", "values_at", "optimal_avoidance", "avoidance_argument", "hamiltonian",
    "save_value_function", "load_value_function", "read_header", "FormatError",
    "mirror_values", "cfl_timestep", "dissipation_coefficients", "params_hash",
    "wrap_angle",
]
