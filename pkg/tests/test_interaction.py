import jax.numpy as jnp
import numpy as np
import pytest

from mixedcap.dynamics import DynamicsParams, RoadGeometry
from mixedcap.errors import ParameterError
from mixedcap.interaction import (
    HUMAN_WEIGHTS,
    ROBOT_WEIGHTS,
    ControllerConfig,
    Influence,
    RewardWeights,
    Snapshot,
    bilevel_function,
    bilevel_objective,
    finite_difference_gradient,
    human_plan,
    human_reward,
    nested_plan,
    neighbour_block,
    plan_batch,
    plan_objective,
    rollout,
)
from oracles import feature_gradient_errors, grid_plan_oracle

GEOM = RoadGeometry(lane_count=2)
DYN = DynamicsParams()
CFG = ControllerConfig()


def snap(rows):
    return Snapshot(np.asarray(rows, dtype=float), GEOM, DYN)


class TestReward:
    def test_alone_at_target_is_zero(self):
        assert human_reward(snap([[0, 0, 0, 25.0]]), 0, HUMAN_WEIGHTS) == pytest.approx(0.0, abs=1e-12)

    def test_near_vehicle_lowers_reward(self):
        near = human_reward(snap([[0, 0, 0, 25.0], [2, 0, 0, 25.0]]), 0, HUMAN_WEIGHTS)
        far = human_reward(snap([[0, 0, 0, 25.0], [50, 0, 0, 25.0]]), 0, HUMAN_WEIGHTS)
        assert near < far <= 0.0

    def test_off_road_penalized(self):
        inside = human_reward(snap([[0, 0.0, 0, 25.0]]), 0, HUMAN_WEIGHTS)
        outside = human_reward(snap([[0, GEOM.right_edge + 0.5, 0, 25.0]]), 0, HUMAN_WEIGHTS)
        assert outside < inside - 100

    def test_feature_gradients(self):
        errs = feature_gradient_errors(100, seed=1)
        assert errs.max() < 1e-4

    def test_weights_validated(self):
        with pytest.raises(ParameterError):
            RewardWeights(target_speed=0.0)
        with pytest.raises(ParameterError):
            RewardWeights(collision_avoidance=-1.0)
        with pytest.raises(ParameterError):
            ControllerConfig(horizon=0)

    def test_neighbour_block_pads(self):
        others, mask = neighbour_block(np.array([[0, 0, 0, 1.0], [5, 0, 0, 1.0], [1, 3.7, 0, 1.0]]), 0, 4)
        assert list(mask) == [1, 1, 0, 0]
        assert others[0, 0] == 1 and others[1, 0] == 5


class TestHumanPlan:
    def test_open_road_accelerates(self):
        plan = human_plan(snap([[0, 0, 0, 18.0]]), 0, CFG)
        assert plan.controls.shape == (CFG.horizon, 2)
        assert plan.predicted_states.shape == (CFG.horizon + 1, 4)
        assert plan.first_control[1] > 0

    def test_at_optimum_holds_speed(self):
        plan = human_plan(snap([[0, 0, 0, 25.0]]), 0, CFG)
        assert np.abs(plan.controls[:, 0]).max() < 1e-6
        assert plan.controls[:, 1] == pytest.approx(DYN.friction * 25.0, abs=1e-6)

    def test_changes_lane_around_slow_blocker(self):
        rows = [[0, 0, 0, 25.0], [15, 0, 0, 10.0]]
        plan = human_plan(snap(rows), 0, CFG)
        best, _ = grid_plan_oracle(np.asarray(rows, float), 0, GEOM, DYN)
        oracle_y = rollout(jnp.asarray(rows[0], dtype=float), jnp.asarray(best), DYN.friction, DYN.dt)[-1, 1]
        # both the planner and the grid oracle move toward the free lane
        assert oracle_y > 0.5
        assert plan.predicted_states[-1, 1] > 0.5

    def test_no_worse_than_zero_controls(self):
        rng = np.random.default_rng(4)
        for _ in range(5):
            rows = np.column_stack([rng.uniform(0, 60, 4), rng.choice([0.0, 3.7], 4),
                                    np.zeros(4), rng.uniform(15, 30, 4)])
            s = snap(rows)
            for i in range(4):
                plan = human_plan(s, i, CFG)
                zero = plan_objective(s, i, np.zeros((CFG.horizon, 2)), CFG)
                assert plan.objective >= zero - 1e-9
                assert plan_objective(s, i, plan.controls, CFG) == pytest.approx(plan.objective, rel=1e-9)

    def test_deterministic_and_batch_consistent(self):
        rows = [[0, 0, 0, 20.0], [20, 3.7, 0, 22.0], [40, 0, 0.05, 24.0]]
        a = plan_batch(snap(rows), [0, 1, 2], [HUMAN_WEIGHTS] * 3, [0.0] * 3, CFG)
        b = plan_batch(snap(rows), [0, 1, 2], [HUMAN_WEIGHTS] * 3, [0.0] * 3, CFG, pad_to=8)
        for pa, pb in zip(a, b):
            assert np.array_equal(pa.controls, pb.controls)
        assert np.array_equal(human_plan(snap(rows), 1, CFG).controls, a[1].controls)


class TestNestedPlan:
    def test_without_human_is_single_level(self):
        s = snap([[0, 0, 0, 20.0]])
        nested = nested_plan(s, 0, None, CFG)
        single = human_plan(s, 0, CFG, ROBOT_WEIGHTS)
        assert np.array_equal(nested.controls, single.controls)

    def test_far_human_is_inert(self):
        nested = nested_plan(snap([[0, 0, 0, 20.0], [-400, 3.7, 0, 20.0]]), 0, 1, CFG)
        single = human_plan(snap([[0, 0, 0, 20.0]]), 0, CFG, ROBOT_WEIGHTS)
        assert nested.controls == pytest.approx(single.controls, abs=1e-3)

    @pytest.mark.parametrize("gap,vh", [(8, 25.0), (12, 25.0), (12, 28.0)])
    def test_merge_right_slows_robot(self, gap, vh):
        s = snap([[gap, 0, 0, 25.0], [0, 0, 0, vh]])
        plain = nested_plan(s, 0, 1, CFG)
        merge = nested_plan(s, 0, 1, CFG, influence=Influence.MERGE_RIGHT, influence_target_y=GEOM.center(1))
        assert not merge.fallback
        assert merge.predicted_states[-1, 3] < plain.predicted_states[-1, 3]
        assert merge.paired_states[-1, 1] > plain.paired_states[-1, 1] + 0.5

    def test_yield_gap_slows_follower(self):
        rows = [[20, 0, 0, 20.0], [0, 0, 0, 25.0]]
        plan = nested_plan(snap(rows), 0, 1, CFG, influence=Influence.YIELD_GAP)
        alone = human_plan(snap(rows[1:]), 0, CFG)
        assert plan.paired_states[-1, 3] < alone.predicted_states[-1, 3] - 0.05

    def test_outer_history_monotone(self):
        s = snap([[12, 0, 0, 25.0], [0, 0, 0, 27.0]])
        plan = nested_plan(s, 0, 1, CFG, influence=Influence.MERGE_RIGHT, influence_target_y=3.7)
        assert np.all(np.diff(plan.history) >= -1e-9)

    def test_deterministic(self):
        s = snap([[12, 0, 0, 25.0], [0, 0, 0, 27.0]])
        a = nested_plan(s, 0, 1, CFG, influence=Influence.MERGE_RIGHT, influence_target_y=3.7)
        b = nested_plan(s, 0, 1, CFG, influence=Influence.MERGE_RIGHT, influence_target_y=3.7)
        assert np.array_equal(a.controls, b.controls)
        assert np.array_equal(a.paired_states, b.paired_states)

    def test_bilevel_gradient_matches_differences(self):
        s = snap([[12, 0, 0, 25.0], [0, 0, 0, 27.0]])
        rng = np.random.default_rng(2)
        u = np.column_stack([rng.uniform(-0.01, 0.01, CFG.horizon), rng.uniform(-1, 1, CFG.horizon)])
        kw = dict(influence=Influence.MERGE_RIGHT, influence_target_y=3.7)
        value, grad, zh = bilevel_objective(s, 0, 1, u, CFG, **kw)
        assert zh.shape == (CFG.horizon, 2) and np.isfinite(value)
        fn = bilevel_function(s, 0, 1, CFG, **kw)
        fd = finite_difference_gradient(lambda x: float(fn(x)[0][0]), u, 1e-4)
        assert np.linalg.norm(grad - fd) <= 1e-3 * np.linalg.norm(fd)
