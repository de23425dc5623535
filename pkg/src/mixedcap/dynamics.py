"""Point-mass vehicle model, RK4 integration and lane geometry.

State is ``[x, y, theta, v]``; controls are ``[u1, u2]`` (steering and
acceleration).  The array-level functions (``vector_field``, ``rk4``) are
written against ``jax.numpy`` and broadcast over leading batch dimensions so
the planners can differentiate through them; the object-level wrappers
return plain numpy values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ._jax import jax, jnp
from .errors import IntegrationError, ParameterError


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    theta: float
    v: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta, self.v], dtype=float)

    @classmethod
    def from_array(cls, arr) -> "VehicleState":
        x, y, theta, v = (float(a) for a in np.asarray(arr, dtype=float))
        return cls(x, y, theta, v)


@dataclass(frozen=True)
class ControlInput:
    u1: float = 0.0
    u2: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.u1, self.u2], dtype=float)


@dataclass(frozen=True)
class DynamicsParams:
    friction: float = 0.05
    dt: float = 0.1
    u1_max: float = 0.5
    u2_min: float = -4.0
    u2_max: float = 4.0

    def __post_init__(self):
        if self.friction < 0:
            raise ParameterError("friction must be >= 0")
        if self.dt <= 0:
            raise ParameterError("timestep must be > 0")
        if self.u1_max < 0 or self.u2_min > self.u2_max:
            raise ParameterError("empty control box")

    @property
    def control_low(self) -> np.ndarray:
        return np.array([-self.u1_max, self.u2_min])

    @property
    def control_high(self) -> np.ndarray:
        return np.array([self.u1_max, self.u2_max])


@dataclass(frozen=True)
class RoadGeometry:
    lane_count: int = 2
    lane_width: float = 3.7
    length: float = 1000.0

    def __post_init__(self):
        if self.lane_count < 1:
            raise ParameterError("lane_count must be >= 1")
        if self.lane_width <= 0:
            raise ParameterError("lane_width must be > 0")

    @property
    def lane_centers(self) -> np.ndarray:
        return self.lane_width * np.arange(self.lane_count, dtype=float)

    @property
    def left_edge(self) -> float:
        return -0.5 * self.lane_width

    @property
    def right_edge(self) -> float:
        return (self.lane_count - 0.5) * self.lane_width

    def center(self, lane: int) -> float:
        return float(self.lane_width * lane)


def vector_field(state, u, friction):
    """Time derivative of ``state`` under control ``u``; batches over leading axes."""
    theta, v = state[..., 2], state[..., 3]
    return jnp.stack(
        [v * jnp.cos(theta), v * jnp.sin(theta), v * u[..., 0], u[..., 1] - friction * v],
        axis=-1,
    )


def wrap_angle(theta):
    """Map angles to ``(-pi, pi]``."""
    return theta - 2.0 * jnp.pi * jnp.ceil((theta - jnp.pi) / (2.0 * jnp.pi))


def rk4(state, u, friction, dt):
    """One classical Runge-Kutta step with the control held constant.

    No clamping is applied; planners use this form so gradients stay smooth.
    """
    k1 = vector_field(state, u, friction)
    k2 = vector_field(state + 0.5 * dt * k1, u, friction)
    k3 = vector_field(state + 0.5 * dt * k2, u, friction)
    k4 = vector_field(state + dt * k3, u, friction)
    return state + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def clip_controls(u, low, high):
    return jnp.clip(u, low, high)


def physical_step(state, u, friction, dt, low, high):
    """Simulator step: clip controls to the box, integrate, clamp ``v >= 0``, wrap heading."""
    nxt = rk4(state, clip_controls(u, low, high), friction, dt)
    return jnp.stack(
        [nxt[..., 0], nxt[..., 1], wrap_angle(nxt[..., 2]), jnp.maximum(nxt[..., 3], 0.0)],
        axis=-1,
    )


_physical_step_jit = jax.jit(physical_step)


def _as_state(s) -> np.ndarray:
    return s.as_array() if isinstance(s, VehicleState) else np.asarray(s, dtype=float)


def _as_control(u) -> np.ndarray:
    return u.as_array() if isinstance(u, ControlInput) else np.asarray(u, dtype=float)


def derivative(s, u, p: DynamicsParams) -> np.ndarray:
    """``[v cos(theta), v sin(theta), v u1, u2 - friction v]`` as a numpy array."""
    return np.asarray(vector_field(jnp.asarray(_as_state(s)), jnp.asarray(_as_control(u)), p.friction))


def step_array(states, controls, p: DynamicsParams) -> np.ndarray:
    """Advance one or many states (``(..., 4)``) by ``p.dt``."""
    out = np.asarray(
        _physical_step_jit(
            jnp.asarray(states, dtype=jnp.float64),
            jnp.asarray(controls, dtype=jnp.float64),
            p.friction,
            p.dt,
            jnp.asarray(p.control_low),
            jnp.asarray(p.control_high),
        )
    )
    if not np.all(np.isfinite(out)):
        raise IntegrationError(f"non-finite state after integration: {out}")
    return out


def step(s, u, p: DynamicsParams) -> VehicleState:
    """Advance a single vehicle by one timestep."""
    state = _as_state(s)
    if not np.all(np.isfinite(state)):
        raise IntegrationError(f"non-finite input state: {state}")
    return VehicleState.from_array(step_array(state, _as_control(u), p))


def lane_of(s, g: RoadGeometry) -> Optional[int]:
    """Nearest lane index for a state (or a bare lateral offset); ``None`` when off-road.

    Ties between two lane centers resolve to the lower index.
    """
    y = float(s.y) if isinstance(s, VehicleState) else float(s)
    if not math.isfinite(y) or y < g.left_edge or y > g.right_edge:
        return None
    dist = np.abs(g.lane_centers - y)
    return int(np.argmin(dist))


def lanes_of(ys, g: RoadGeometry) -> np.ndarray:
    """Vectorized :func:`lane_of`; off-road entries are ``-1``."""
    ys = np.asarray(ys, dtype=float)
    idx = np.argmin(np.abs(ys[:, None] - g.lane_centers[None, :]), axis=1)
    off = (ys < g.left_edge) | (ys > g.right_edge) | ~np.isfinite(ys)
    return np.where(off, -1, idx)
