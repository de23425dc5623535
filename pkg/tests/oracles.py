"""Independent reference computations shared by the unit and acceptance tests."""

import itertools

import jax
import jax.numpy as jnp
import numpy as np

from mixedcap.capacity import RoadParams
from mixedcap.dynamics import RoadGeometry
from mixedcap.interaction import (
    FEATURES,
    HUMAN_WEIGHTS,
    _road_consts,
    constant_velocity,
    feature_gradients,
    features,
    finite_difference_gradient,
    neighbour_block,
    rollout,
    trajectory_reward,
)


def random_params(rng: np.random.Generator, n: int) -> RoadParams:
    L = rng.uniform(0.0, 10.0)
    h_bar = rng.uniform(0.0, 30.0)
    h = h_bar + rng.uniform(0.5, 60.0)
    return RoadParams(L, h, h_bar, rng.uniform(100.0, 5000.0), n)


def random_feature_case(rng: np.random.Generator, k: int = 4):
    lanes = int(rng.integers(1, 4))
    g = RoadGeometry(lane_count=lanes)
    state = np.array([rng.uniform(-20, 20), rng.uniform(g.left_edge - 1.0, g.right_edge + 1.0),
                      rng.uniform(-0.4, 0.4), rng.uniform(0.0, 35.0)])
    others = np.column_stack([state[0] + rng.uniform(-30, 30, k), rng.uniform(g.left_edge, g.right_edge, k),
                              rng.uniform(-0.2, 0.2, k), rng.uniform(0, 30, k)])
    mask = (rng.random(k) < 0.8).astype(float)
    shape = np.array([rng.uniform(15, 30), rng.uniform(5, 25), rng.uniform(3, 10), rng.uniform(1, 3)])
    return state, others, mask, shape, _road_consts(g), float(rng.choice(g.lane_centers))


def feature_gradient_errors(count: int, seed: int = 0, eps: float = 1e-6) -> np.ndarray:
    """Relative error of every analytic feature gradient against central differences.

    Returns ``(count, len(FEATURES))``; each entry is ``|analytic - fd| / max(|fd|, 1e-8)``
    in the Euclidean norm over the four state coordinates.
    """
    rng = np.random.default_rng(seed)
    feats = jax.jit(features)
    out = np.zeros((count, len(FEATURES)))
    for i in range(count):
        state, others, mask, shape, road, ty = random_feature_case(rng)
        analytic = feature_gradients(state, others, mask, shape, road, ty)
        for j in range(len(FEATURES)):
            fd = finite_difference_gradient(
                lambda s: float(feats(s, others, mask, shape, road, ty)[j]), state, eps)
            out[i, j] = np.linalg.norm(analytic[j] - fd) / max(np.linalg.norm(fd), 1e-8)
    return out


def grid_plan_oracle(states, index, geometry, dynamics, horizon=5, weights=HUMAN_WEIGHTS,
                     steer=(-0.04, 0.0, 0.04), accel=(-2.0, 0.0, 2.0), neighbors=6):
    """Exhaustive search over a coarse per-step control grid; returns the best control sequence."""
    others, mask = neighbour_block(states, index, neighbors)
    others_traj = constant_velocity(jnp.asarray(others), horizon, dynamics.dt)
    road = jnp.asarray(_road_consts(geometry))
    w, s = jnp.asarray(weights.weight_vector()), jnp.asarray(weights.shape_vector())
    cells = np.array(list(itertools.product(steer, accel)))
    seqs = np.array(list(itertools.product(range(len(cells)), repeat=horizon)))
    controls = jnp.asarray(cells[seqs])

    def value(u):
        traj = rollout(jnp.asarray(states[index]), u, dynamics.friction, dynamics.dt)
        return trajectory_reward(traj, others_traj, jnp.asarray(mask), w, s, road, 0.0)

    values = np.asarray(jax.jit(jax.vmap(value))(controls))
    return np.asarray(controls[int(np.argmax(values))]), float(values.max())
