"""Reward-based driver models and the nested (leader-follower) robot planner.

Humans maximize a smooth hand-specified reward over a short horizon with
every other vehicle extrapolated at constant velocity.  A robot paired with
a human plans through the human's best response: for each candidate robot
control sequence the human's plan is re-optimized against the robot's
rollout, and the robot ascends its own reward plus an influence term on
the predicted human trajectory.

Everything numeric runs under ``jax.jit``.  Gradients of the planning
objectives come from autodiff; ``feature_gradients`` holds the hand-derived
state gradients of the reward features, checked against finite differences
in the test suite.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from enum import Enum
from functools import partial
from typing import Optional, Sequence

import numpy as np

from ._jax import jax, jnp
from .dynamics import DynamicsParams, RoadGeometry, rk4
from .errors import NumericError, ParameterError

log = logging.getLogger(__name__)

FEATURES = (
    "speed_tracking",
    "lane_center",
    "heading_alignment",
    "collision_avoidance",
    "road_bounds",
    "target_lane",
)
# far-away filler for padded neighbour slots
_FAR = 1e4


class Influence(str, Enum):
    NONE = "none"
    MERGE_LEFT = "merge_left"
    MERGE_RIGHT = "merge_right"
    YIELD_GAP = "yield_gap"


@dataclass(frozen=True)
class RewardWeights:
    """Feature weights plus the shape constants of the smooth features.

    The Gaussian proximity penalty uses ``collision_length`` for vehicles
    ahead, ``collision_length_behind`` for vehicles behind and
    ``collision_width`` laterally.  ``target_lane`` weighs the squared
    offset from an assigned lane (zero for humans).
    """

    speed_tracking: float = 1.0
    lane_center: float = 4.0
    heading_alignment: float = 500.0
    collision_avoidance: float = 50.0
    road_bounds: float = 1000.0
    target_speed: float = 25.0
    target_lane: float = 0.0
    collision_length: float = 20.0
    collision_length_behind: float = 6.0
    collision_width: float = 1.5

    def __post_init__(self):
        if self.collision_avoidance < 0 or self.road_bounds < 0:
            raise ParameterError("collision and road-bound weights must be >= 0")
        if self.target_speed <= 0:
            raise ParameterError("target_speed must be > 0")
        if min(self.collision_length, self.collision_length_behind, self.collision_width) <= 0:
            raise ParameterError("collision scales must be > 0")

    def weight_vector(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in FEATURES], dtype=float)

    def shape_vector(self) -> np.ndarray:
        return np.array([self.target_speed, self.collision_length,
                         self.collision_length_behind, self.collision_width])

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


HUMAN_WEIGHTS = RewardWeights()
ROBOT_WEIGHTS = RewardWeights(
    lane_center=4.0,
    target_lane=10.0,
    collision_length=12.0,
    collision_width=2.0,
)


@dataclass(frozen=True)
class ControllerConfig:
    horizon: int = 5
    plan_iterations: int = 20
    inner_iterations: int = 20
    outer_iterations: int = 10
    max_backtracks: int = 8
    step_size: float = 1.0
    inner_step_size: float = 1.0
    inner_step_decay: float = 0.85
    fd_epsilon: float = 1e-4
    neighbors: int = 6
    influence_weight: float = 20.0
    steering_scale: float = 0.01
    accel_scale: float = 1.0

    def __post_init__(self):
        if self.horizon < 1:
            raise ParameterError("horizon must be >= 1")
        for name in ("plan_iterations", "inner_iterations", "outer_iterations"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1")
        if self.neighbors < 1:
            raise ParameterError("neighbors must be >= 1")

    @property
    def scale(self) -> np.ndarray:
        return np.array([self.steering_scale, self.accel_scale])

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class Plan:
    controls: np.ndarray
    predicted_states: np.ndarray
    objective: float
    paired_states: Optional[np.ndarray] = None
    paired_controls: Optional[np.ndarray] = None
    fallback: bool = False
    history: list = field(default_factory=list)

    @property
    def first_control(self) -> np.ndarray:
        return self.controls[0]


@dataclass(frozen=True)
class Snapshot:
    """Read-only view of the road used by the planners.

    ``warm`` optionally maps a row index to the controls executed last tick,
    used to warm-start that vehicle's next plan.
    """

    states: np.ndarray
    geometry: RoadGeometry
    dynamics: DynamicsParams
    warm: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# reward features


# half the vehicle body width; the body, not just its centre, has to stay on the road
BODY_HALF_WIDTH = 0.9


def _road_consts(geometry: RoadGeometry) -> np.ndarray:
    return np.array([geometry.lane_width, geometry.left_edge, geometry.right_edge, BODY_HALF_WIDTH])


def features(state, others, mask, shape, road, target_y):
    """Feature vector (ordered as ``FEATURES``) for one ego state.

    ``others`` is ``(K, 4)`` with ``mask`` flagging live rows, ``shape`` is
    ``(target_speed, length_ahead, length_behind, width)`` and ``road`` is
    ``(lane_width, left_edge, right_edge, half_width)``.  All features are <= 0.
    """
    x, y, theta, v = state[0], state[1], state[2], state[3]
    vt, b = shape[0], shape[3]
    lw, ymin, ymax, hw = road[0], road[1], road[2], road[3]
    speed = -((v - vt) ** 2)
    # periodic between the outer lane centers, quadratic beyond them
    yc = jnp.clip(y, ymin + 0.5 * lw, ymax - 0.5 * lw)
    lane = -((lw / jnp.pi) ** 2) * jnp.sin(jnp.pi * yc / lw) ** 2 - (y - yc) ** 2
    heading = -(theta**2)
    dx = x - others[:, 0]
    dy = y - others[:, 1]
    # the length switches where dx = 0, where the penalty is flat in x, so it stays C1
    a = jnp.where(dx < 0, shape[1], shape[2])
    coll = -jnp.sum(mask * jnp.exp(-(dx**2) / a**2 - dy**2 / b**2))
    over = jnp.maximum(y - ymax + hw, 0.0)
    under = jnp.maximum(ymin + hw - y, 0.0)
    bounds = -(over**2) - under**2
    target = -((y - target_y) ** 2)
    return jnp.stack([speed, lane, heading, coll, bounds, target])


def feature_gradients(state, others, mask, shape, road, target_y) -> np.ndarray:
    """Hand-derived ``d feature / d state``, shape ``(len(FEATURES), 4)``."""
    state = np.asarray(state, dtype=float)
    others = np.asarray(others, dtype=float)
    mask = np.asarray(mask, dtype=float)
    x, y, theta, v = state
    vt, b = shape[0], shape[3]
    lw, ymin, ymax, hw = road
    grad = np.zeros((len(FEATURES), 4))
    grad[0, 3] = -2.0 * (v - vt)
    yc = min(max(y, ymin + 0.5 * lw), ymax - 0.5 * lw)
    grad[1, 1] = -(lw / np.pi) * np.sin(2.0 * np.pi * yc / lw) - 2.0 * (y - yc)
    grad[2, 2] = -2.0 * theta
    dx = x - others[:, 0]
    dy = y - others[:, 1]
    a = np.where(dx < 0, shape[1], shape[2])
    e = mask * np.exp(-(dx**2) / a**2 - dy**2 / b**2)
    grad[3, 0] = np.sum(e * 2.0 * dx / a**2)
    grad[3, 1] = np.sum(e * 2.0 * dy / b**2)
    grad[4, 1] = -2.0 * max(y - ymax + hw, 0.0) + 2.0 * max(ymin + hw - y, 0.0)
    grad[5, 1] = -2.0 * (y - target_y)
    return grad


def reward(state, others, mask, wvec, shape, road, target_y):
    return jnp.dot(wvec, features(state, others, mask, shape, road, target_y))


def human_reward(snapshot: Snapshot, index: int, weights: RewardWeights,
                 target_y: float = 0.0, neighbors: Optional[int] = None) -> float:
    """Instantaneous reward of vehicle ``index`` in ``snapshot``."""
    others, mask = neighbour_block(snapshot.states, index, neighbors or len(snapshot.states))
    return float(
        reward(
            jnp.asarray(snapshot.states[index]),
            jnp.asarray(others),
            jnp.asarray(mask),
            jnp.asarray(weights.weight_vector()),
            jnp.asarray(weights.shape_vector()),
            jnp.asarray(_road_consts(snapshot.geometry)),
            target_y,
        )
    )


# ---------------------------------------------------------------------------
# rollouts and objectives


def neighbour_block(states: np.ndarray, index: int, k: int, exclude: Sequence[int] = ()):
    """The ``k`` vehicles nearest to ``index`` (padded far away), and a live mask."""
    states = np.asarray(states, dtype=float)
    skip = {index, *exclude}
    rows = [j for j in range(len(states)) if j not in skip]
    out = np.full((k, 4), _FAR)
    out[:, 2:] = 0.0
    mask = np.zeros(k)
    if rows:
        cand = states[rows]
        dist = np.hypot(cand[:, 0] - states[index, 0], cand[:, 1] - states[index, 1])
        order = np.argsort(dist, kind="stable")[:k]
        out[: len(order)] = cand[order]
        mask[: len(order)] = 1.0
    return out, mask


def constant_velocity(states, steps: int, dt: float):
    """Straight-line extrapolation, ``(steps + 1, K, 4)``."""
    t = dt * jnp.arange(steps + 1)[:, None]
    x = states[None, :, 0] + t * states[None, :, 3] * jnp.cos(states[None, :, 2])
    y = states[None, :, 1] + t * states[None, :, 3] * jnp.sin(states[None, :, 2])
    th = jnp.broadcast_to(states[None, :, 2], x.shape)
    v = jnp.broadcast_to(states[None, :, 3], x.shape)
    return jnp.stack([x, y, th, v], axis=-1)


def rollout(state0, controls, friction, dt):
    def body(s, u):
        nxt = rk4(s, u, friction, dt)
        return nxt, nxt

    _, traj = jax.lax.scan(body, state0, controls)
    return jnp.concatenate([state0[None], traj], axis=0)


def trajectory_reward(traj, others_traj, mask, wvec, shape, road, target_y):
    """Summed reward over steps ``1..N`` of a trajectory against moving neighbours."""
    per = jax.vmap(reward, in_axes=(0, 0, None, None, None, None, None))(
        traj[1:], others_traj[1:], mask, wvec, shape, road, target_y
    )
    return jnp.sum(per)


def _controls(z, scale):
    return z * scale


def _project(z, zlow, zhigh):
    return jnp.clip(z, zlow, zhigh)


def _ascend(obj, z0, zlow, zhigh, iters, t0, backtracks):
    """Normalized gradient ascent with a backtracking line search.

    Each iteration tries steps ``t, t/2, ..., t/2**backtracks`` in turn and
    accepts the first that improves the objective, so the objective never
    decreases.  Returns the final point, its value and the per-iteration
    objective history (starting value first).
    """
    grad_fn = jax.grad(obj)

    def body(carry, _):
        z, jz, t = carry
        g = grad_fn(z)
        gn = g / (jnp.sqrt(jnp.sum(g * g)) + 1e-12)

        def pending(c):
            k, _, jc = c
            return (k <= backtracks) & ~(jc > jz)

        def shrink(c):
            k, _, _ = c
            zc = _project(z + t * 0.5**k * gn, zlow, zhigh)
            return k + 1, zc, obj(zc)

        k, zc, jc = jax.lax.while_loop(pending, shrink, (0, z, jz))
        ok = jc > jz
        z_new = jnp.where(ok, zc, z)
        j_new = jnp.where(ok, jc, jz)
        t_new = jnp.where(ok, jnp.minimum(2.0 * t * 0.5 ** (k - 1), 4.0 * t0),
                          jnp.maximum(t * 0.5**backtracks, 1e-6))
        return (z_new, j_new, t_new), j_new

    j0 = obj(z0)
    (z, jz, _), hist = jax.lax.scan(body, (z0, j0, t0), None, length=iters)
    return z, jz, jnp.concatenate([j0[None], hist])


def _inner_descent(obj, z0, zlow, zhigh, iters, eta0, decay):
    """Fixed-schedule smooth ascent used for the follower's best response.

    Step sizes are a fixed decaying schedule with smoothly normalized
    gradients, so the result is differentiable in the leader's controls.
    """
    grad_fn = jax.grad(obj)

    def body(z, eta):
        g = grad_fn(z)
        z = _project(z + eta * g / jnp.sqrt(jnp.sum(g * g) + 1e-2), zlow, zhigh)
        return z, None

    etas = eta0 * decay ** jnp.arange(iters)
    z, _ = jax.lax.scan(body, z0, etas)
    return z


# ---------------------------------------------------------------------------
# single-level planning


@partial(jax.jit, static_argnames=("horizon", "iters", "backtracks"))
def _plan_batch(ego0, others0, mask, wvec, shape, road, target_y, starts,
                friction, dt, scale, zlow, zhigh, t0, horizon, iters, backtracks):
    def one(e0, oth, m, w, sh, ty, st):
        others_traj = constant_velocity(oth, horizon, dt)

        def obj(z):
            traj = rollout(e0, _controls(z, scale), friction, dt)
            return trajectory_reward(traj, others_traj, m, w, sh, road, ty)

        zs, js, _ = jax.vmap(lambda z: _ascend(obj, z, zlow, zhigh, iters, t0, backtracks))(st)
        best = jnp.argmax(js)
        z = zs[best]
        return z, js[best], rollout(e0, _controls(z, scale), friction, dt)

    return jax.vmap(one)(ego0, others0, mask, wvec, shape, target_y, starts)


def _starts(state, warm, cfg: ControllerConfig, p: DynamicsParams, kinds) -> np.ndarray:
    """Initial control sequences in scaled units, shape ``(len(kinds), N, 2)``."""
    N = cfg.horizon
    eq = p.friction * max(float(state[3]), 0.0) / cfg.accel_scale
    out = []
    for kind in kinds:
        z = np.zeros((N, 2))
        if kind == "zero":
            pass
        elif kind == "equilibrium":
            z[:, 1] = eq
        elif kind == "warm":
            if warm is not None:
                w = np.asarray(warm, dtype=float) / cfg.scale
                z[:-1] = w[1:]
                z[-1] = w[-1]
            else:
                z[:, 1] = eq
        elif kind == "left":
            z[:, 0] = -1.0
            z[:, 1] = eq
        elif kind == "right":
            z[:, 0] = 1.0
            z[:, 1] = eq
        elif kind == "brake":
            z[:, 1] = eq - 2.0 / cfg.accel_scale
        elif kind == "accelerate":
            z[:, 1] = eq + 1.0 / cfg.accel_scale
        else:
            raise ValueError(kind)
        out.append(z)
    return np.stack(out)


PLAN_STARTS = ("zero", "equilibrium", "warm", "left", "right")


def _zbox(cfg: ControllerConfig, p: DynamicsParams):
    return p.control_low / cfg.scale, p.control_high / cfg.scale


def plan_batch(snapshot: Snapshot, indices: Sequence[int], weights: Sequence[RewardWeights],
               target_ys: Sequence[float], cfg: ControllerConfig, pad_to: Optional[int] = None) -> list:
    """Single-level plans for several vehicles against constant-velocity traffic.

    Each vehicle ascends its own summed reward from several initial control
    sequences (including all-zero controls) and keeps the best.
    """
    indices = list(indices)
    if not indices:
        return []
    p = snapshot.dynamics
    B = max(len(indices), pad_to or 0)
    K = cfg.neighbors
    ego0 = np.zeros((B, 4))
    others0 = np.zeros((B, K, 4))
    mask = np.zeros((B, K))
    wvec = np.zeros((B, len(FEATURES)))
    shape = np.ones((B, 4))
    ty = np.zeros(B)
    starts = np.zeros((B, len(PLAN_STARTS), cfg.horizon, 2))
    for row, (i, w, t) in enumerate(zip(indices, weights, target_ys)):
        ego0[row] = snapshot.states[i]
        others0[row], mask[row] = neighbour_block(snapshot.states, i, K)
        wvec[row] = w.weight_vector()
        shape[row] = w.shape_vector()
        ty[row] = t
        starts[row] = _starts(snapshot.states[i], snapshot.warm.get(i), cfg, p, PLAN_STARTS)
    for row in range(len(indices), B):
        ego0[row] = [0.0, 0.0, 0.0, 1.0]
        others0[row, :, 0] = _FAR
    zlow, zhigh = _zbox(cfg, p)
    z, js, trajs = _plan_batch(
        jnp.asarray(ego0), jnp.asarray(others0), jnp.asarray(mask), jnp.asarray(wvec),
        jnp.asarray(shape), jnp.asarray(_road_consts(snapshot.geometry)), jnp.asarray(ty),
        jnp.asarray(starts), p.friction, p.dt, jnp.asarray(cfg.scale), jnp.asarray(zlow),
        jnp.asarray(zhigh), cfg.step_size, cfg.horizon, cfg.plan_iterations, cfg.max_backtracks,
    )
    z, js, trajs = np.asarray(z), np.asarray(js), np.asarray(trajs)
    plans = []
    for row in range(len(indices)):
        if not np.isfinite(js[row]):
            raise NumericError(f"non-finite planning objective for vehicle row {indices[row]}")
        plans.append(Plan(controls=z[row] * cfg.scale, predicted_states=trajs[row], objective=float(js[row])))
    return plans


def human_plan(snapshot: Snapshot, index: int, cfg: ControllerConfig,
               weights: RewardWeights = HUMAN_WEIGHTS, target_y: float = 0.0) -> Plan:
    """Best N-step plan for one vehicle maximizing its own reward."""
    return plan_batch(snapshot, [index], [weights], [target_y], cfg)[0]


def plan_objective(snapshot: Snapshot, index: int, controls, cfg: ControllerConfig,
                   weights: RewardWeights = HUMAN_WEIGHTS, target_y: float = 0.0) -> float:
    """Summed reward of an explicit control sequence under constant-velocity traffic."""
    p = snapshot.dynamics
    others, mask = neighbour_block(snapshot.states, index, cfg.neighbors)
    traj = rollout(jnp.asarray(snapshot.states[index]), jnp.asarray(controls, dtype=jnp.float64),
                   p.friction, p.dt)
    others_traj = constant_velocity(jnp.asarray(others), cfg.horizon, p.dt)
    return float(trajectory_reward(traj, others_traj, jnp.asarray(mask), jnp.asarray(weights.weight_vector()),
                                   jnp.asarray(weights.shape_vector()),
                                   jnp.asarray(_road_consts(snapshot.geometry)), target_y))


# ---------------------------------------------------------------------------
# nested planning


def _influence_terms(kind: Influence, target_y: float):
    """(merge weight, yield weight) selecting the influence term."""
    if kind in (Influence.MERGE_LEFT, Influence.MERGE_RIGHT):
        return 1.0, 0.0
    if kind is Influence.YIELD_GAP:
        return 0.0, 1.0
    return 0.0, 0.0


def _bilevel_parts(zr, r0, h0, r_others, r_mask, h_others, h_mask, wr, sr, wh, sh, road,
                   r_ty, h_ty, merge_w, yield_w, infl_y, infl_w, h_starts, friction, dt, scale,
                   zlow, zhigh, inner_iters, eta0, decay):
    horizon = zr.shape[0]
    r_traj = rollout(r0, _controls(zr, scale), friction, dt)
    h_oth = constant_velocity(h_others, horizon, dt)
    # robot joins the human's neighbour set with its planned trajectory
    h_oth = jnp.concatenate([h_oth, r_traj[:, None, :]], axis=1)
    h_m = jnp.concatenate([h_mask, jnp.ones(1)])

    def h_obj(zh):
        traj = rollout(h0, _controls(zh, scale), friction, dt)
        return trajectory_reward(traj, h_oth, h_m, wh, sh, road, h_ty)

    finals = jax.vmap(lambda z: _inner_descent(h_obj, z, zlow, zhigh, inner_iters, eta0, decay))(h_starts)
    zhs = jnp.concatenate([h_starts, finals], axis=0)
    jhs = jax.vmap(h_obj)(zhs)
    best = jnp.argmax(jhs)
    zh = zhs[best]
    h_traj = rollout(h0, _controls(zh, scale), friction, dt)

    r_oth = constant_velocity(r_others, horizon, dt)
    r_oth = jnp.concatenate([r_oth, h_traj[:, None, :]], axis=1)
    r_m = jnp.concatenate([r_mask, jnp.ones(1)])
    own = trajectory_reward(r_traj, r_oth, r_m, wr, sr, road, r_ty)
    cv_x = h0[0] + dt * horizon * h0[3] * jnp.cos(h0[2])
    influence = merge_w * (-((h_traj[-1, 1] - infl_y) ** 2)) + yield_w * (-(h_traj[-1, 0] - cv_x))
    start_j = jnp.max(jax.vmap(h_obj)(h_starts))
    return own + infl_w * influence, zh, r_traj, h_traj, jhs[best], start_j


@partial(jax.jit, static_argnames=("inner_iters", "outer_iters", "backtracks"))
def _nested(r0, h0, r_others, r_mask, h_others, h_mask, wr, sr, wh, sh, road, r_ty, h_ty,
            merge_w, yield_w, infl_y, infl_w, r_starts, h_starts, friction, dt, scale, zlow, zhigh,
            t0, eta0, decay, inner_iters, outer_iters, backtracks):
    def parts(zr):
        return _bilevel_parts(zr, r0, h0, r_others, r_mask, h_others, h_mask, wr, sr, wh, sh, road,
                              r_ty, h_ty, merge_w, yield_w, infl_y, infl_w, h_starts, friction, dt,
                              scale, zlow, zhigh, inner_iters, eta0, decay)

    def obj(zr):
        return parts(zr)[0]

    def run(z0):
        return _ascend(obj, z0, zlow, zhigh, outer_iters, t0, backtracks)

    zs, js, hists = jax.vmap(run)(r_starts)
    best = jnp.argmax(js)
    z = zs[best]
    total, zh, r_traj, h_traj, jh, jh_start = parts(z)
    return z, total, zh, r_traj, h_traj, jh, jh_start, hists[best]


NESTED_STARTS = ("warm", "equilibrium", "brake")


def _inner_starts(influence: Influence) -> tuple:
    # a leader straight ahead makes left/right symmetric; seed the side that matters
    if influence is Influence.MERGE_RIGHT:
        return ("equilibrium", "right")
    if influence is Influence.MERGE_LEFT:
        return ("equilibrium", "left")
    return ("equilibrium", "brake")


def nested_plan(snapshot: Snapshot, robot: int, human: Optional[int], cfg: ControllerConfig,
                weights_robot: RewardWeights = ROBOT_WEIGHTS,
                weights_human: RewardWeights = HUMAN_WEIGHTS,
                influence: Influence = Influence.NONE, robot_target_y: float = 0.0,
                influence_target_y: float = 0.0) -> Plan:
    """Leader-follower plan for ``robot`` anticipating the best response of ``human``.

    Without a paired human the problem collapses to single-level planning on
    the robot's own reward.  When the follower's inner ascent ends below its
    starting objective (divergence) the human is predicted at constant
    velocity instead and the plan is flagged ``fallback``.
    """
    influence = Influence(influence)
    if human is None:
        return plan_batch(snapshot, [robot], [weights_robot], [robot_target_y], cfg)[0]
    p = snapshot.dynamics
    K = cfg.neighbors
    r_others, r_mask = neighbour_block(snapshot.states, robot, K, exclude=(human,))
    h_others, h_mask = neighbour_block(snapshot.states, human, K, exclude=(robot,))
    merge_w, yield_w = _influence_terms(influence, influence_target_y)
    r_starts = _starts(snapshot.states[robot], snapshot.warm.get(robot), cfg, p, NESTED_STARTS)
    h_starts = _starts(snapshot.states[human], None, cfg, p, _inner_starts(influence))
    zlow, zhigh = _zbox(cfg, p)
    out = _nested(
        jnp.asarray(snapshot.states[robot]), jnp.asarray(snapshot.states[human]),
        jnp.asarray(r_others), jnp.asarray(r_mask), jnp.asarray(h_others), jnp.asarray(h_mask),
        jnp.asarray(weights_robot.weight_vector()), jnp.asarray(weights_robot.shape_vector()),
        jnp.asarray(weights_human.weight_vector()), jnp.asarray(weights_human.shape_vector()),
        jnp.asarray(_road_consts(snapshot.geometry)), robot_target_y, 0.0,
        merge_w, yield_w, influence_target_y, cfg.influence_weight,
        jnp.asarray(r_starts), jnp.asarray(h_starts), p.friction, p.dt, jnp.asarray(cfg.scale),
        jnp.asarray(zlow), jnp.asarray(zhigh), cfg.step_size, cfg.inner_step_size,
        cfg.inner_step_decay, cfg.inner_iterations, cfg.outer_iterations, cfg.max_backtracks,
    )
    z, total, zh, r_traj, h_traj, jh, jh_start, hist = (np.asarray(a) for a in out)
    if not np.isfinite(total):
        raise NumericError("non-finite nested objective")
    diverged = (not np.isfinite(jh)) or jh < jh_start - 1e-9
    if diverged:
        log.debug("inner best response diverged for robot row %d; using constant velocity", robot)
        plan = plan_batch(snapshot, [robot], [weights_robot], [robot_target_y], cfg)[0]
        plan.fallback = True
        cv = np.asarray(constant_velocity(jnp.asarray(snapshot.states[[human]]), cfg.horizon, p.dt))[:, 0]
        plan.paired_states = cv
        return plan
    return Plan(
        controls=z * cfg.scale,
        predicted_states=r_traj,
        objective=float(total),
        paired_states=h_traj,
        paired_controls=zh * cfg.scale,
        history=[float(v) for v in hist],
    )


def bilevel_function(snapshot: Snapshot, robot: int, human: int, cfg: ControllerConfig,
                     weights_robot: RewardWeights = ROBOT_WEIGHTS,
                     weights_human: RewardWeights = HUMAN_WEIGHTS,
                     influence: Influence = Influence.NONE, robot_target_y: float = 0.0,
                     influence_target_y: float = 0.0):
    """Compiled map ``robot controls -> ((value, human controls), gradient)`` for one snapshot.

    The value is the robot objective evaluated through the follower's best
    response; the gradient is taken by autodiff through the inner ascent.
    """
    p = snapshot.dynamics
    K = cfg.neighbors
    r_others, r_mask = neighbour_block(snapshot.states, robot, K, exclude=(human,))
    h_others, h_mask = neighbour_block(snapshot.states, human, K, exclude=(robot,))
    influence = Influence(influence)
    merge_w, yield_w = _influence_terms(influence, influence_target_y)
    h_starts = _starts(snapshot.states[human], None, cfg, p, _inner_starts(influence))
    zlow, zhigh = _zbox(cfg, p)
    scale = jnp.asarray(cfg.scale)

    def f(u):
        out = _bilevel_parts(
            u / scale, jnp.asarray(snapshot.states[robot]), jnp.asarray(snapshot.states[human]),
            jnp.asarray(r_others), jnp.asarray(r_mask), jnp.asarray(h_others), jnp.asarray(h_mask),
            jnp.asarray(weights_robot.weight_vector()), jnp.asarray(weights_robot.shape_vector()),
            jnp.asarray(weights_human.weight_vector()), jnp.asarray(weights_human.shape_vector()),
            jnp.asarray(_road_consts(snapshot.geometry)), robot_target_y, 0.0, merge_w, yield_w,
            influence_target_y, cfg.influence_weight, jnp.asarray(h_starts), p.friction, p.dt,
            scale, jnp.asarray(zlow), jnp.asarray(zhigh), cfg.inner_iterations,
            cfg.inner_step_size, cfg.inner_step_decay,
        )
        return out[0], out[1] * scale

    return jax.jit(jax.value_and_grad(f, has_aux=True))


def bilevel_objective(snapshot: Snapshot, robot: int, human: int, robot_controls, cfg: ControllerConfig,
                      weights_robot: RewardWeights = ROBOT_WEIGHTS,
                      weights_human: RewardWeights = HUMAN_WEIGHTS,
                      influence: Influence = Influence.NONE, robot_target_y: float = 0.0,
                      influence_target_y: float = 0.0):
    """Robot objective through the follower's best response, and its autodiff gradient.

    Returns ``(value, gradient, human_controls)``; the gradient is with
    respect to the robot's unscaled control sequence.
    """
    fn = bilevel_function(snapshot, robot, human, cfg, weights_robot, weights_human, influence,
                          robot_target_y, influence_target_y)
    (value, zh), grad = fn(jnp.asarray(robot_controls, dtype=jnp.float64))
    return float(value), np.asarray(grad), np.asarray(zh)


def finite_difference_gradient(fn, x, eps: float = 1e-4) -> np.ndarray:
    """Central finite differences of a scalar function of an array."""
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        grad[idx] = (fn(xp) - fn(xm)) / (2.0 * eps)
    return grad
