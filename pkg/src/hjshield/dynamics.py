"""Unicycle kinematics and the pairwise relative Dubins model.

Relative states are always expressed in the ego agent's body frame: the
position of the other agent rotated by minus the ego heading, and the
heading difference ``other - ego``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ControlBoundsError(ValueError):
    """A control command exceeds the configured actuator limits."""


def wrap_angle(theta):
    """Map angles to [-pi, pi). Works on scalars and arrays."""
    wrapped = np.mod(np.asarray(theta, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    # mod can round up to exactly pi for inputs a hair below -pi
    wrapped = np.where(wrapped >= np.pi, wrapped - 2.0 * np.pi, wrapped)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


@dataclass(frozen=True)
class AgentState:
    px: float
    py: float
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    def as_array(self) -> np.ndarray:
        return np.array([self.px, self.py, self.theta])

    @classmethod
    def from_array(cls, a) -> "AgentState":
        return cls(float(a[0]), float(a[1]), float(a[2]))


@dataclass(frozen=True)
class ControlInput:
    v: float
    omega: float


@dataclass(frozen=True)
class RelativeState:
    px: float
    py: float
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    def as_array(self) -> np.ndarray:
        return np.array([self.px, self.py, self.theta])


@dataclass(frozen=True)
class DynamicsParams:
    v_max: float = 0.22
    omega_max: float = 2.84
    dt: float = 0.1
    integrator: str = "rk4"

    def __post_init__(self):
        if self.v_max <= 0 or self.omega_max <= 0 or self.dt <= 0:
            raise ValueError("v_max, omega_max and dt must be positive")
        if self.integrator not in ("euler", "rk4"):
            raise ValueError(f"unknown integrator {self.integrator!r}")


_BOUND_SLACK = 1e-9


def check_controls(v, omega, params: DynamicsParams) -> None:
    v = np.asarray(v)
    omega = np.asarray(omega)
    if np.any(np.abs(v) > params.v_max + _BOUND_SLACK):
        raise ControlBoundsError(f"|v| exceeds v_max={params.v_max}")
    if np.any(np.abs(omega) > params.omega_max + _BOUND_SLACK):
        raise ControlBoundsError(f"|omega| exceeds omega_max={params.omega_max}")


def _unicycle(states, controls):
    th = states[..., 2]
    v = controls[..., 0]
    return np.stack([v * np.cos(th), v * np.sin(th), controls[..., 1]], axis=-1)


def integrate(f, x, dt, integrator):
    """One step of ``x' = f(x)`` with a fixed-step scheme."""
    if integrator == "euler":
        return x + dt * f(x)
    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def step_states(states: np.ndarray, controls: np.ndarray, params: DynamicsParams) -> np.ndarray:
    """Vectorised ``step_agent`` over an (N, 3) array of poses and (N, 2) controls."""
    states = np.asarray(states, dtype=float)
    controls = np.asarray(controls, dtype=float)
    check_controls(controls[..., 0], controls[..., 1], params)
    nxt = integrate(lambda s: _unicycle(s, controls), states, params.dt, params.integrator)
    nxt[..., 2] = wrap_angle(nxt[..., 2])
    return nxt


def step_agent(state: AgentState, u: ControlInput, params: DynamicsParams) -> AgentState:
    nxt = step_states(state.as_array(), np.array([u.v, u.omega]), params)
    return AgentState.from_array(nxt)


def relative_states(ego: np.ndarray, others: np.ndarray) -> np.ndarray:
    """Relative poses of ``others`` in the body frame of ``ego`` (broadcasting)."""
    ego = np.asarray(ego, dtype=float)
    others = np.asarray(others, dtype=float)
    dx = others[..., 0] - ego[..., 0]
    dy = others[..., 1] - ego[..., 1]
    c = np.cos(ego[..., 2])
    s = np.sin(ego[..., 2])
    out = np.empty(np.broadcast(dx, ego[..., 2]).shape + (3,))
    out[..., 0] = c * dx + s * dy
    out[..., 1] = -s * dx + c * dy
    out[..., 2] = wrap_angle(others[..., 2] - ego[..., 2])
    return out


def relative_state(ego: AgentState, other: AgentState) -> RelativeState:
    r = relative_states(ego.as_array(), other.as_array())
    return RelativeState(float(r[0]), float(r[1]), float(r[2]))


def relative_derivative(x, omega_i, omega_j, v):
    """Right-hand side of the relative Dubins model (both agents at speed ``v``).

    Returns ``(dpx, dpy, dtheta)``; ``x`` may be a RelativeState or an array
    whose last axis is (px, py, theta).
    """
    if isinstance(x, RelativeState):
        x = x.as_array()
    x = np.asarray(x, dtype=float)
    px, py, th = x[..., 0], x[..., 1], x[..., 2]
    dpx = -v + v * np.cos(th) + omega_i * py
    dpy = v * np.sin(th) - omega_i * px
    dth = omega_j - omega_i + 0.0 * px
    if np.ndim(dpx) == 0:
        return float(dpx), float(dpy), float(dth)
    return dpx, dpy, dth


def step_relative(x: np.ndarray, omega_i, omega_j, v, dt, integrator="rk4") -> np.ndarray:
    """Integrate the relative model for one step (used by the game oracle and tests)."""

    def f(s):
        return np.stack(relative_derivative(s, omega_i, omega_j, v), axis=-1)

    nxt = integrate(f, np.asarray(x, dtype=float), dt, integrator)
    nxt[..., 2] = wrap_angle(nxt[..., 2])
    return nxt
