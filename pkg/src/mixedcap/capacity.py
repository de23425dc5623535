"""Analytic capacity models for mixed-autonomy lanes and roads.

Two per-lane models are provided:

* ``bernoulli`` -- vehicle types arrive i.i.d., so an autonomous car follows
  another autonomous car with probability alpha**2 and the expected space
  per vehicle is ``k1 - alpha**2 * k2``.
* ``upper_bound`` -- all autonomous cars of the lane form a single platoon,
  giving ``k1 - alpha * k2`` per vehicle.

Here ``k1 = L + h`` and ``k2 = h - h_bar``.  Capacities are real valued
(vehicles per lane length ``d``) and never truncated to integers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import DimensionError, ParameterError

BERNOULLI = "bernoulli"
UPPER_BOUND = "upper_bound"
MODELS = (BERNOULLI, UPPER_BOUND)

# |G| tolerance for assignments built analytically
ANALYTIC_FEAS_TOL = 1e-9


class VehicleType(str, Enum):
    HUMAN = "human"
    AUTONOMOUS = "autonomous"

    @property
    def short(self) -> str:
        return "A" if self is VehicleType.AUTONOMOUS else "H"

    @classmethod
    def parse(cls, value) -> "VehicleType":
        if isinstance(value, cls):
            return value
        if isinstance(value, (bool, np.bool_)):
            return cls.AUTONOMOUS if value else cls.HUMAN
        key = str(value).strip().lower()
        if key in ("a", "autonomous", "robot", "av"):
            return cls.AUTONOMOUS
        if key in ("h", "human", "hv"):
            return cls.HUMAN
        raise ParameterError(f"unknown vehicle type {value!r}")


@dataclass(frozen=True)
class RoadParams:
    """Physical road constants, shared by every lane.

    Lengths are in meters: vehicle length ``L``, human headway ``h``,
    platoon headway ``h_bar`` and lane length ``d``; ``n`` is the lane count.
    """

    L: float = 4.0
    h: float = 30.0
    h_bar: float = 11.0
    d: float = 1000.0
    n: int = 2

    def __post_init__(self):
        for name in ("L", "h", "h_bar", "d"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise ParameterError(f"{name} must be finite, got {value}")
        if self.L < 0:
            raise ParameterError(f"vehicle length L must be >= 0, got {self.L}")
        if self.d <= 0:
            raise ParameterError(f"lane length d must be > 0, got {self.d}")
        if int(self.n) != self.n or self.n < 1:
            raise ParameterError(f"lane count n must be a positive integer, got {self.n}")
        if not self.h > self.h_bar >= 0:
            raise ParameterError(
                f"headways must satisfy h > h_bar >= 0, got h={self.h}, h_bar={self.h_bar}"
            )
        if self.L + self.h_bar <= 0:
            # a platoon would take no space at all and capacity would be unbounded
            raise ParameterError("L + h_bar must be > 0")

    @property
    def k1(self) -> float:
        return self.L + self.h

    @property
    def k2(self) -> float:
        return self.h - self.h_bar

    def with_lanes(self, n: int) -> "RoadParams":
        return RoadParams(self.L, self.h, self.h_bar, self.d, n)


@dataclass(frozen=True)
class LaneCensus:
    """Human (``x``) and autonomous (``y``) vehicle counts of one lane."""

    human_count: int
    autonomous_count: int

    def __post_init__(self):
        if self.human_count < 0 or self.autonomous_count < 0:
            raise ParameterError("vehicle counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.human_count + self.autonomous_count

    @property
    def autonomy_level(self) -> float:
        if self.total < 1:
            raise ParameterError("autonomy level of an empty lane is undefined")
        return self.autonomous_count / self.total


@dataclass(frozen=True)
class LaneAssignment:
    """Per-lane autonomy levels together with the feed autonomy level."""

    alphas: tuple
    overall_alpha: float

    def __post_init__(self):
        alphas = tuple(float(a) for a in self.alphas)
        object.__setattr__(self, "alphas", alphas)
        check_alpha(self.overall_alpha)
        for a in alphas:
            check_alpha(a)

    @property
    def n(self) -> int:
        return len(self.alphas)

    def sorted(self) -> "LaneAssignment":
        return LaneAssignment(tuple(sorted(self.alphas, reverse=True)), self.overall_alpha)


@dataclass(frozen=True)
class LatencyParams:
    """Inputs of the BPR volume-delay function ``t0 * (1 + rho * (x / c')**sigma)``."""

    free_flow_time: float
    practical_capacity: float
    flow: float = 0.0
    congestion_coeff: float = 0.15
    exponent: float = 4.0

    def __post_init__(self):
        if self.practical_capacity <= 0:
            raise ParameterError("practical capacity must be > 0")
        if self.free_flow_time <= 0:
            raise ParameterError("free-flow time must be > 0")
        if self.congestion_coeff < 0:
            raise ParameterError("congestion coefficient must be >= 0")
        if self.exponent < 1:
            raise ParameterError("exponent must be >= 1")
        if self.flow < 0:
            raise ParameterError("flow must be >= 0")


class LaneCapacity(NamedTuple):
    capacity: float
    degenerate: bool


def check_alpha(alpha: float) -> float:
    if not (0.0 <= alpha <= 1.0):
        raise ParameterError(f"autonomy level must lie in [0, 1], got {alpha}")
    return float(alpha)


def _check_model(model: str) -> str:
    if model not in MODELS:
        raise ParameterError(f"unknown capacity model {model!r}; expected one of {MODELS}")
    return model


def lane_capacity(alpha: float, params: RoadParams) -> float:
    """Capacity of one lane whose vehicle types follow a Bernoulli process."""
    check_alpha(alpha)
    a2 = alpha * alpha
    # k1 - a2*k2 expanded so that it cannot cancel to zero near alpha = 1
    return params.d / (params.L + (1.0 - a2) * params.h + a2 * params.h_bar)


def lane_capacity_ub(alpha: float, params: RoadParams) -> float:
    """Capacity of one lane when its autonomous cars form one platoon."""
    check_alpha(alpha)
    return params.d / (params.L + (1.0 - alpha) * params.h + alpha * params.h_bar)


def capacity_fn(model: str):
    return lane_capacity if _check_model(model) == BERNOULLI else lane_capacity_ub


def _check_length(assignment: LaneAssignment, params: RoadParams):
    if assignment.n != params.n:
        raise DimensionError(
            f"assignment has {assignment.n} lanes but road has n={params.n}"
        )


def total_capacity(assignment: LaneAssignment, params: RoadParams, model: str = BERNOULLI) -> float:
    _check_length(assignment, params)
    cap = capacity_fn(model)
    return math.fsum(cap(a, params) for a in assignment.alphas)


def constraint_residual(
    assignment: LaneAssignment, params: RoadParams, model: str = BERNOULLI
) -> float:
    """Autonomous-volume residual ``sum_i (alpha_i - alpha_bar) * c(alpha_i)``.

    Zero exactly when the lanes together carry the feed autonomy level.
    """
    _check_length(assignment, params)
    cap = capacity_fn(model)
    ab = assignment.overall_alpha
    return math.fsum((a - ab) * cap(a, params) for a in assignment.alphas)


def is_feasible(
    assignment: LaneAssignment,
    params: RoadParams,
    model: str = BERNOULLI,
    tol: float = ANALYTIC_FEAS_TOL,
) -> bool:
    return abs(constraint_residual(assignment, params, model)) <= tol


def headway(follower, leader, params: RoadParams) -> float:
    """Following distance kept by ``follower`` behind ``leader``."""
    auto = VehicleType.AUTONOMOUS
    if VehicleType.parse(follower) is auto and VehicleType.parse(leader) is auto:
        return params.h_bar
    return params.h


def lane_ordering_capacity(ordering: Sequence, params: RoadParams) -> LaneCapacity:
    """Effective capacity of a single lane given its front-to-back type order.

    The frontmost vehicle contributes no headway.  Lanes holding fewer than
    two vehicles fall back to ``d / (L + h)`` and are flagged degenerate.
    """
    types = [VehicleType.parse(t) for t in ordering]
    count = len(types)
    fallback = LaneCapacity(params.d / params.k1, True)
    if count < 2:
        return fallback
    gaps = math.fsum(headway(types[j], types[j - 1], params) for j in range(1, count))
    space = count * params.L + gaps
    if space <= 0:
        return fallback
    return LaneCapacity(count * params.d / space, False)


def ordering_capacity(orderings: Iterable[Sequence], params: RoadParams) -> list:
    """Per-lane :class:`LaneCapacity` for a list of front-to-back orderings."""
    return [lane_ordering_capacity(lane, params) for lane in orderings]


def bpr_congestion_term(p: LatencyParams) -> float:
    return p.congestion_coeff * (p.flow / p.practical_capacity) ** p.exponent


def bpr_latency(p: LatencyParams) -> float:
    """Travel time under the BPR volume-delay function."""
    return p.free_flow_time * (1.0 + bpr_congestion_term(p))


def congestion_reduction(capacity_gain: float, exponent: float = 4.0) -> float:
    """Factor by which the congestion term shrinks when capacity grows by ``capacity_gain``.

    At fixed flow, ``(x / (g c'))**sigma = g**-sigma * (x / c')**sigma``.
    """
    if capacity_gain <= 0:
        raise ParameterError("capacity gain factor must be > 0")
    return capacity_gain ** (-exponent)
