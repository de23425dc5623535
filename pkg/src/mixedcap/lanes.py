"""Optimal, worst-case and brute-force lane assignments, and the price metrics.

The planner chooses per-lane autonomy levels ``alpha`` maximizing total
capacity subject to the lanes jointly carrying the feed autonomy level
``alpha_bar`` (``constraint_residual == 0``).  The optimum fills ``m`` lanes
with autonomous cars, leaves at most one mixed lane and makes the rest
human-only.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import brentq

from .capacity import (
    BERNOULLI,
    UPPER_BOUND,
    LaneAssignment,
    RoadParams,
    capacity_fn,
    check_alpha,
    constraint_residual,
    lane_capacity,
    lane_capacity_ub,
    total_capacity,
)
from .errors import CapabilityError, ConsistencyError, ParameterError

log = logging.getLogger(__name__)

SOLVER_FEAS_TOL = 1e-6
BRUTE_FORCE_MAX_LANES = 4
FULL_GRID_MAX_LANES = 3


@dataclass(frozen=True)
class OptimalAssignment:
    assignment: LaneAssignment
    full_autonomy_lanes: int
    mixed_lane_alpha: Optional[float]
    total_capacity: float
    model: str = BERNOULLI

    @property
    def alphas(self) -> tuple:
        return self.assignment.alphas

    @property
    def mixed_lane(self) -> Optional[int]:
        """0-based index of the mixed lane, if any lane is left after the full ones."""
        if self.mixed_lane_alpha is None:
            return None
        return self.full_autonomy_lanes


@dataclass(frozen=True)
class PriceMetrics:
    lambda_bound: float
    gamma_bound: float
    gamma_cap: float
    lambda_argmax: float
    achieved_lambda: float
    achieved_gamma: float


def full_lane_count(alpha_bar: float, params: RoadParams) -> int:
    """Number of fully autonomous lanes at the optimum (both capacity models)."""
    check_alpha(alpha_bar)
    k1, k2, n = params.k1, params.k2, params.n
    x = alpha_bar * n * (k1 - k2) / (k1 - alpha_bar * k2)
    return min(n, int(math.floor(x + 1e-9)))


def _mixed_ratio(alpha_bar: float, m: int, params: RoadParams) -> float:
    # required value of (a - alpha_bar) / (capacity denominator) on the mixed lane
    k1, k2, n = params.k1, params.k2, params.n
    return (n - m - 1) * alpha_bar / k1 - m * (1.0 - alpha_bar) / (k1 - k2)


def _quadratic_roots(a: float, c: float) -> list:
    # roots of a*x**2 + x - c = 0
    if abs(a) < 1e-15:
        return [c]
    disc = 1.0 + 4.0 * a * c
    if disc < 0:
        return []
    q = -0.5 * (1.0 + math.sqrt(disc))
    return [q / a, -c / q]


def _build(alphas, alpha_bar, params, model, m, mixed) -> OptimalAssignment:
    assignment = LaneAssignment(tuple(alphas), alpha_bar)
    return OptimalAssignment(
        assignment=assignment,
        full_autonomy_lanes=m,
        mixed_lane_alpha=mixed,
        total_capacity=total_capacity(assignment, params, model),
        model=model,
    )


def optimal_assignment(alpha_bar: float, params: RoadParams) -> OptimalAssignment:
    """Closed-form maximizer of the Bernoulli-model road capacity.

    Lanes ``0..m-1`` are fully autonomous, lane ``m`` holds the root in
    ``[0, 1)`` of ``R k2 a**2 + a - (alpha_bar + R k1) = 0`` and the
    remaining lanes are human-only.
    """
    check_alpha(alpha_bar)
    n, k1, k2 = params.n, params.k1, params.k2
    m = full_lane_count(alpha_bar, params)
    if m >= n:
        return _build([1.0] * n, alpha_bar, params, BERNOULLI, n, None)

    R = _mixed_ratio(alpha_bar, m, params)
    roots = _quadratic_roots(R * k2, alpha_bar + R * k1)
    tol = 1e-12
    inside = [min(max(r, 0.0), 1.0) for r in roots if -tol <= r < 1.0 + tol]

    def vec(a):
        return [1.0] * m + [a] + [0.0] * (n - m - 1)

    def residual(a):
        return abs(constraint_residual(LaneAssignment(tuple(vec(a)), alpha_bar), params))

    if not inside:
        raise ConsistencyError(
            f"no mixed-lane root in [0,1) for alpha_bar={alpha_bar}, m={m}: roots={roots}"
        )
    if len(inside) > 1:
        log.warning("two mixed-lane roots in [0,1): %s; keeping the smaller |G|", inside)
    mixed = min(inside, key=residual)
    if mixed >= 1.0:
        # x sat within rounding of an integer: the mixed lane is in fact full
        return _build([1.0] * (m + 1) + [0.0] * (n - m - 1), alpha_bar, params, BERNOULLI, m + 1,
                      0.0 if m + 1 < n else None)
    out = _build(vec(mixed), alpha_bar, params, BERNOULLI, m, mixed)
    scale = max(1.0, out.total_capacity)
    if residual(mixed) > SOLVER_FEAS_TOL * scale:
        raise ConsistencyError(f"closed-form assignment infeasible: |G|={residual(mixed)}")
    return out


def optimistic_assignment(alpha_bar: float, params: RoadParams) -> OptimalAssignment:
    """One-mixed-lane assignment for the platoon (upper-bound) model.

    Uses the same number of full lanes as :func:`optimal_assignment`; the
    mixed level is found by bracketing the upper-bound residual.
    """
    check_alpha(alpha_bar)
    n = params.n
    m = full_lane_count(alpha_bar, params)
    if m >= n:
        return _build([1.0] * n, alpha_bar, params, UPPER_BOUND, n, None)

    def residual(b):
        vec = [1.0] * m + [b] + [0.0] * (n - m - 1)
        return constraint_residual(LaneAssignment(tuple(vec), alpha_bar), params, UPPER_BOUND)

    lo, hi = residual(0.0), residual(1.0)
    if lo > SOLVER_FEAS_TOL or hi < -SOLVER_FEAS_TOL:
        raise ConsistencyError(
            f"upper-bound residual does not change sign on [0,1] (alpha_bar={alpha_bar}, m={m})"
        )
    if abs(lo) <= 1e-12:
        beta = 0.0
    else:
        beta = brentq(residual, 0.0, 1.0, xtol=1e-15, rtol=1e-15, maxiter=200)
    return _build([1.0] * m + [beta] + [0.0] * (n - m - 1), alpha_bar, params, UPPER_BOUND, m, beta)


def solve_free_coordinate(fixed: np.ndarray, alpha_bar: float, params: RoadParams,
                          model: str = BERNOULLI, iters: int = 200):
    """Solve the last lane's autonomy level from the zero-residual condition.

    ``fixed`` has shape ``(k, n-1)``; returns ``(free, ok)`` arrays of length
    ``k`` where ``ok`` marks rows admitting a root in ``[0, 1]``.  The
    residual is strictly increasing in each coordinate, so a vectorized
    bisection is exact to machine precision.
    """
    fixed = np.atleast_2d(np.asarray(fixed, dtype=float))
    k1, k2, d = params.k1, params.k2, params.d
    if model == BERNOULLI:
        def g(a):
            return (a - alpha_bar) * d / (k1 - a * a * k2)
    else:
        def g(a):
            return (a - alpha_bar) * d / (k1 - a * k2)
    target = -g(fixed).sum(axis=1) if fixed.shape[1] else np.zeros(fixed.shape[0])
    lo = np.zeros(fixed.shape[0])
    hi = np.ones(fixed.shape[0])
    ok = (g(lo) <= target) & (target <= g(hi))
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        below = g(mid) < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.all(hi - lo <= 1e-16):
            break
    return 0.5 * (lo + hi), ok


def _grid(step: float) -> np.ndarray:
    count = int(round(1.0 / step))
    return np.linspace(0.0, 1.0, count + 1)


def brute_force_assignment(alpha_bar: float, params: RoadParams, grid_step: float = 0.01,
                           full_grid: bool = True, structured: bool = True,
                           unit_tol: float = 1e-9) -> OptimalAssignment:
    """Exhaustive search oracle for the Bernoulli-model lane assignment.

    Candidates fix ``n-1`` lanes and solve the last one from the residual.
    Structured candidates pin lanes to ``{0, 1}`` with at most one on the
    grid; for ``n <= 3`` a full grid over ``n-1`` lanes is added.  Lanes
    within ``unit_tol`` of 1 count as fully autonomous in the result.
    """
    check_alpha(alpha_bar)
    n = params.n
    if n > BRUTE_FORCE_MAX_LANES:
        raise CapabilityError(f"brute force supports n <= {BRUTE_FORCE_MAX_LANES}, got {n}")
    if not (0.0 < grid_step <= 0.1):
        raise ParameterError(f"grid_step must be in (0, 0.1], got {grid_step}")

    grid = _grid(grid_step)
    blocks = []
    if n == 1:
        blocks.append(np.zeros((1, 0)))
    else:
        if structured:
            for n_grid in (0, 1):
                n_pin = n - 1 - n_grid
                if n_pin < 0:
                    continue
                if n_pin:
                    pins = np.array(list(itertools.product((0.0, 1.0), repeat=n_pin)))
                else:
                    pins = np.zeros((1, 0))
                if n_grid:
                    g = np.repeat(grid, len(pins))[:, None]
                    p = np.tile(pins, (len(grid), 1))
                    blocks.append(np.hstack([g, p]))
                else:
                    blocks.append(pins)
        if full_grid and n <= FULL_GRID_MAX_LANES:
            mesh = np.meshgrid(*([grid] * (n - 1)), indexing="ij")
            blocks.append(np.stack([a.ravel() for a in mesh], axis=1))
    if not blocks:
        raise ParameterError("brute force needs structured or full-grid candidates")
    fixed = np.vstack(blocks)
    free, ok = solve_free_coordinate(fixed, alpha_bar, params)
    cand = np.hstack([fixed, free[:, None]])[ok]
    if len(cand) == 0:
        raise ConsistencyError("no feasible candidate found by brute force")
    k1, k2, d = params.k1, params.k2, params.d
    caps = (d / (k1 - cand * cand * k2)).sum(axis=1)
    best = np.sort(cand[int(np.argmax(caps))])[::-1]
    m = int(np.sum(best >= 1.0 - unit_tol))
    mixed = float(best[m]) if m < n else None
    alphas = [min(max(float(a), 0.0), 1.0) for a in best]
    return _build(alphas, alpha_bar, params, BERNOULLI, m, mixed)


def sample_feasible_assignments(alpha_bar: float, params: RoadParams, count: int,
                                rng: np.random.Generator, model: str = BERNOULLI,
                                max_rounds: int = 1000) -> np.ndarray:
    """Random feasible assignments: ``n-1`` drawn lanes, the last one solved.

    Each row draws uniform levels and pulls them toward ``alpha_bar`` by a
    uniform random factor, so rows range from near-uniform to widely spread
    and stay feasible with reasonable probability on many lanes.
    """
    check_alpha(alpha_bar)
    n = params.n
    out = []
    have = 0
    for _ in range(max_rounds):
        size = max(4 * count, 16)
        spread = rng.uniform(0.0, 1.0, size=(size, 1))
        fixed = alpha_bar + spread * (rng.uniform(0.0, 1.0, size=(size, n - 1)) - alpha_bar)
        free, ok = solve_free_coordinate(fixed, alpha_bar, params, model)
        rows = np.hstack([fixed, free[:, None]])[ok]
        out.append(rows)
        have += len(rows)
        if have >= count:
            break
    rows = np.vstack(out)[:count]
    if len(rows) < count:
        raise ConsistencyError(f"could only sample {len(rows)} feasible assignments")
    return rows


def worst_case_assignment(alpha_bar: float, params: RoadParams):
    """Uniform assignment, which minimizes Bernoulli capacity among feasible ones."""
    check_alpha(alpha_bar)
    assignment = LaneAssignment(tuple([float(alpha_bar)] * params.n), alpha_bar)
    return assignment, params.n * lane_capacity(alpha_bar, params)


def ub_total_capacity(alpha_bar: float, params: RoadParams) -> float:
    return params.n * lane_capacity_ub(alpha_bar, params)


def negligence_argmax(params: RoadParams) -> float:
    k1, k2 = params.k1, params.k2
    return (k1 - math.sqrt(k1 * k1 - k1 * k2)) / k2


def negligence_bound(params: RoadParams) -> float:
    """Upper bound on the price of negligence, ``2 (k1 - sqrt(k1^2 - k1 k2)) / k2``."""
    return 2.0 * negligence_argmax(params)


def achieved_lambda(alpha_bar: float, params: RoadParams) -> float:
    return lane_capacity_ub(alpha_bar, params) / lane_capacity(alpha_bar, params)


def no_control_bound(params: RoadParams) -> float:
    n, L, h, hb = params.n, params.L, params.h, params.h_bar
    return 2.0 * n * (L + h) / ((2 * n - 1) * (L + h) + math.sqrt((L + h) * (L + hb)))


def no_control_cap(n: int) -> float:
    return 2.0 * n / (2.0 * n - 1.0)


def achieved_gamma(alpha_bar: float, params: RoadParams) -> float:
    return ub_total_capacity(alpha_bar, params) / optimal_assignment(alpha_bar, params).total_capacity


def price_metrics(params: RoadParams, alpha_bar: float) -> PriceMetrics:
    return PriceMetrics(
        lambda_bound=negligence_bound(params),
        gamma_bound=no_control_bound(params),
        gamma_cap=no_control_cap(params.n),
        lambda_argmax=negligence_argmax(params),
        achieved_lambda=achieved_lambda(alpha_bar, params),
        achieved_gamma=achieved_gamma(alpha_bar, params),
    )


def price_of_negligence(params: RoadParams, alpha_bar: Optional[float] = None):
    """Return ``(bound, argmax, achieved)``; ``achieved`` is None without ``alpha_bar``."""
    achieved = None if alpha_bar is None else achieved_lambda(alpha_bar, params)
    return negligence_bound(params), negligence_argmax(params), achieved


def price_of_no_control(params: RoadParams, alpha_bar: Optional[float] = None):
    """Return ``(bound, cap, achieved)``; ``achieved`` is None without ``alpha_bar``."""
    achieved = None if alpha_bar is None else achieved_gamma(alpha_bar, params)
    return no_control_bound(params), no_control_cap(params.n), achieved


def assignment_capacity(alphas, params: RoadParams, model: str = BERNOULLI) -> float:
    cap = capacity_fn(model)
    return math.fsum(cap(float(a), params) for a in alphas)
