import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mixedcap.capacity import (
    BERNOULLI,
    UPPER_BOUND,
    LaneAssignment,
    LaneCensus,
    LatencyParams,
    RoadParams,
    VehicleType,
    bpr_congestion_term,
    bpr_latency,
    congestion_reduction,
    constraint_residual,
    headway,
    lane_capacity,
    lane_capacity_ub,
    lane_ordering_capacity,
    ordering_capacity,
    total_capacity,
)
from mixedcap.errors import DimensionError, ParameterError

alphas = st.floats(0.0, 1.0, allow_nan=False)


@st.composite
def road_params(draw, n=None):
    # vehicles have a length; with L + h_bar near 0 a full platoon takes no space
    L = draw(st.floats(0.1, 10.0))
    h_bar = draw(st.floats(0.0, 30.0))
    h = h_bar + draw(st.floats(0.5, 60.0))
    lanes = n if n is not None else draw(st.integers(1, 6))
    return RoadParams(L, h, h_bar, draw(st.floats(100.0, 5000.0)), lanes)


def string_capacity(types, p):
    # independent oracle: lay the string out bumper to bumper and count vehicles per d meters
    space = len(types) * p.L
    for follower, leader in zip(types[1:], types[:-1]):
        space += p.h_bar if (follower and leader) else p.h
    return len(types) * p.d / space


class TestLaneCapacity:
    def test_endpoints(self, params):
        assert lane_capacity(0.0, params) == pytest.approx(1000 / 34)
        assert lane_capacity(1.0, params) == pytest.approx(1000 / 15)
        assert lane_capacity_ub(0.0, params) == pytest.approx(29.412, abs=1e-3)
        assert lane_capacity_ub(1.0, params) == pytest.approx(66.667, abs=1e-3)

    def test_half_autonomy_against_random_string(self, params):
        assert lane_capacity(0.5, params) == pytest.approx(1000 / 29.25)
        rng = np.random.default_rng(3)
        types = rng.random(200_000) < 0.5
        assert string_capacity(types, params) == pytest.approx(lane_capacity(0.5, params), rel=0.01)

    def test_ub_against_single_platoon(self, params):
        assert lane_capacity_ub(0.5, params) == pytest.approx(40.816, abs=1e-3)
        types = np.r_[np.ones(50_000, bool), np.zeros(50_000, bool)]
        assert string_capacity(types, params) == pytest.approx(lane_capacity_ub(0.5, params), rel=1e-3)

    @given(road_params(), alphas, alphas)
    def test_monotone(self, p, a, b):
        lo, hi = sorted((a, b))
        if hi - lo > 1e-6:
            assert lane_capacity(lo, p) < lane_capacity(hi, p)
            assert lane_capacity_ub(lo, p) < lane_capacity_ub(hi, p)

    @given(road_params(), alphas)
    def test_ub_dominates(self, p, a):
        c, cu = lane_capacity(a, p), lane_capacity_ub(a, p)
        assert cu >= c * (1 - 1e-12)
        if 1e-6 < a < 1 - 1e-6:
            assert cu > c

    def test_bad_alpha(self, params):
        with pytest.raises(ParameterError):
            lane_capacity(1.5, params)


class TestRoadParams:
    @pytest.mark.parametrize("kw", [
        dict(L=-1.0), dict(d=0.0), dict(n=0), dict(h=10.0, h_bar=11.0), dict(h_bar=-1.0),
        dict(n=1.5), dict(L=float("nan")), dict(L=0.0, h_bar=0.0),
    ])
    def test_invalid(self, kw):
        with pytest.raises(ParameterError):
            RoadParams(**kw)

    def test_derived(self, params):
        assert (params.k1, params.k2) == (34.0, 19.0)


class TestTotals:
    def test_totals(self, params):
        p3 = params.with_lanes(3)
        assert total_capacity(LaneAssignment((0.5,) * 3, 0.5), p3) == pytest.approx(102.564, abs=1e-3)
        assert total_capacity(LaneAssignment((1.0, 0.0), 0.5), params) == pytest.approx(96.08, abs=1e-2)
        for n in (1, 4, 7):
            pn = params.with_lanes(n)
            assert total_capacity(LaneAssignment((0.0,) * n, 0.0), pn) == pytest.approx(n * 1000 / 34)

    def test_length_mismatch(self, params):
        with pytest.raises(DimensionError):
            total_capacity(LaneAssignment((0.5,) * 3, 0.5), params)
        with pytest.raises(DimensionError):
            constraint_residual(LaneAssignment((0.5,), 0.5), params)

    def test_residual_examples(self, params):
        assert constraint_residual(LaneAssignment((0.3, 0.3), 0.3), params) == 0.0
        g = constraint_residual(LaneAssignment((1.0, 0.0), 0.5), params)
        assert g == pytest.approx(0.5 * 1000 / 15 - 0.5 * 1000 / 34)
        assert g == pytest.approx(18.63, abs=1e-2)
        assert abs(constraint_residual(LaneAssignment((0.8146, 0.0), 0.5), params)) < 1e-2

    @settings(max_examples=200)
    @given(road_params(n=3), st.lists(alphas, min_size=3, max_size=3), alphas,
           st.integers(0, 2), st.sampled_from([BERNOULLI, UPPER_BOUND]))
    def test_residual_increasing(self, p, vec, ab, i, model):
        bumped = list(vec)
        bumped[i] = min(1.0, vec[i] + 1e-3)
        if bumped[i] - vec[i] < 1e-4:
            return
        g0 = constraint_residual(LaneAssignment(vec, ab), p, model)
        g1 = constraint_residual(LaneAssignment(bumped, ab), p, model)
        assert g1 > g0


class TestOrdering:
    def test_examples(self, params):
        aaaa = lane_ordering_capacity("AAAA", params)
        assert aaaa.capacity == pytest.approx(4000 / 49) and not aaaa.degenerate
        assert lane_ordering_capacity("HAHA", params).capacity == pytest.approx(4000 / 106)
        single = lane_ordering_capacity(["A"], params)
        assert single.capacity == pytest.approx(1000 / 34) and single.degenerate
        assert lane_ordering_capacity([], params).degenerate

    def test_headway_types(self, params):
        assert headway("A", "A", params) == 11.0
        assert headway("A", "H", params) == 30.0
        assert headway(VehicleType.HUMAN, True, params) == 30.0
        with pytest.raises(ParameterError):
            VehicleType.parse("truck")

    @pytest.mark.parametrize("alpha", [0.2, 0.5, 0.8])
    def test_bernoulli_and_sorted_strings_converge(self, params, alpha):
        rng = np.random.default_rng(int(alpha * 10))
        types = ["A" if r else "H" for r in rng.random(20_000) < alpha]
        got = ordering_capacity([types], params)[0].capacity
        assert got == pytest.approx(lane_capacity(alpha, params), rel=0.02)
        ordered = sorted(types)  # all "A" first
        assert lane_ordering_capacity(ordered, params).capacity == pytest.approx(
            lane_capacity_ub(alpha, params), rel=0.02)

    def test_census(self):
        assert LaneCensus(3, 1).autonomy_level == 0.25
        with pytest.raises(ParameterError):
            LaneCensus(0, 0).autonomy_level
        with pytest.raises(ParameterError):
            LaneCensus(-1, 0)


class TestLatency:
    def test_free_flow(self):
        assert bpr_latency(LatencyParams(12.0, 100.0, 0.0)) == 12.0

    def test_at_capacity(self):
        assert bpr_latency(LatencyParams(12.0, 100.0, 100.0)) == pytest.approx(1.15 * 12.0)

    def test_capacity_gain(self):
        before = bpr_congestion_term(LatencyParams(1.0, 100.0, 80.0))
        after = bpr_congestion_term(LatencyParams(1.0, 120.0, 80.0))
        assert after / before == pytest.approx(congestion_reduction(1.2))
        assert congestion_reduction(1.2) == pytest.approx(0.4823, abs=1e-4)

    @pytest.mark.parametrize("kw", [
        dict(practical_capacity=0.0), dict(free_flow_time=0.0), dict(congestion_coeff=-1.0),
        dict(exponent=0.5), dict(flow=-1.0),
    ])
    def test_invalid(self, kw):
        args = dict(free_flow_time=1.0, practical_capacity=10.0)
        args.update(kw)
        with pytest.raises(ParameterError):
            LatencyParams(**args)
        with pytest.raises(ParameterError):
            congestion_reduction(0.0)
