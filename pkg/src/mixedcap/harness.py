"""Experiment harness: single runs, autonomy sweeps, bound tables and planning reports.

Outputs are plain files so any plotting stack can consume them: CSV for
traces and sweeps, JSON for summaries, JSON-lines for the event stream.
Floats in CSVs are written with a fixed format so identical runs produce
byte-identical files.
"""

from __future__ import annotations

import collections
import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from multiprocessing import get_context
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .capacity import LatencyParams, RoadParams, bpr_latency, congestion_reduction, lane_capacity
from .config import RunConfig
from .errors import CollisionError, ConsistencyError, MixedCapError
from .lanes import (
    optimal_assignment,
    optimistic_assignment,
    price_metrics,
    ub_total_capacity,
    worst_case_assignment,
)
from .orchestrator import Phase, init_world, start_record, tick

log = logging.getLogger(__name__)

FLOAT_FMT = "{:.6f}"
SWEEP_COLUMNS = ("alpha_bar", "seed", "achieved", "lower", "upper", "baseline")
BOUNDS_COLUMNS = ("alpha_bar", "worst_case", "optimal", "upper", "full_lanes", "mixed_alpha",
                  "achieved_lambda", "achieved_gamma", "lambda_bound", "gamma_bound")
DEFAULT_SWEEP_ALPHAS = tuple(round(0.1 * k, 1) for k in range(11))
DEFAULT_SWEEP_SEEDS = 5
DIP_WINDOW = 20
DIP_FRACTION = 0.10


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _f(x) -> str:
    return "nan" if x is None or not math.isfinite(x) else FLOAT_FMT.format(x)


@dataclass(frozen=True)
class CapacityBounds:
    lower: float
    upper: float
    upper_slack: float
    baseline: float


def capacity_bounds(alpha_bar: float, params: RoadParams, per_lane: int) -> CapacityBounds:
    """Theoretical band for a measured run.

    ``lower`` is the optimal Bernoulli capacity, ``upper`` the platooned
    bound ``n c_UB``.  A finite lane of ``per_lane`` vehicles measured without
    the frontmost headway can exceed ``upper``; ``upper_slack`` removes one
    human headway per lane from the platooned space.
    """
    k = per_lane
    space = k * (params.k1 - alpha_bar * params.k2) - params.h
    slack = params.n * k * params.d / space if space > 0 else math.inf
    return CapacityBounds(
        lower=optimal_assignment(alpha_bar, params).total_capacity,
        upper=ub_total_capacity(alpha_bar, params),
        upper_slack=max(slack, ub_total_capacity(alpha_bar, params)),
        baseline=worst_case_assignment(alpha_bar, params)[1],
    )


@dataclass
class PairingDip:
    robot: int
    human: int
    start: int
    end: int
    pre_mean: float
    minimum: float

    @property
    def drop(self) -> float:
        return 1.0 - self.minimum / self.pre_mean if self.pre_mean > 0 else 0.0

    def passes(self, fraction: float = DIP_FRACTION) -> bool:
        return self.minimum <= (1.0 - fraction) * self.pre_mean


@dataclass
class RunMetrics:
    alpha_bar: float
    seed: int
    status: str
    ids: list
    types: list
    times: list = field(default_factory=list)
    phases: list = field(default_factory=list)
    capacities: list = field(default_factory=list)
    velocities: list = field(default_factory=list)
    bounds: Optional[CapacityBounds] = None
    event_counts: dict = field(default_factory=dict)
    phase_timestamps: list = field(default_factory=list)
    dips: list = field(default_factory=list)
    diagnostic: Optional[dict] = None

    @property
    def completed(self) -> bool:
        return self.status == "completed"

    @property
    def initial_capacity(self) -> float:
        return self.capacities[0]

    @property
    def final_capacity(self) -> float:
        return self.capacities[-1]

    @property
    def ticks(self) -> int:
        return len(self.capacities) - 1

    def in_sandwich(self, tolerance: float = 0.05) -> bool:
        b = self.bounds
        return (1.0 - tolerance) * b.lower <= self.final_capacity <= b.upper_slack

    def summary(self) -> dict:
        b = self.bounds
        return {
            "alpha_bar": self.alpha_bar,
            "seed": self.seed,
            "status": self.status,
            "ticks": self.ticks,
            "initial_capacity": self.initial_capacity,
            "final_capacity": self.final_capacity,
            "lower_bound": b.lower,
            "upper_bound": b.upper,
            "upper_bound_with_slack": b.upper_slack,
            "baseline": b.baseline,
            "event_counts": dict(sorted(self.event_counts.items())),
            "phase_timestamps": self.phase_timestamps,
            "velocity_dips": [dict(d.__dict__, drop=d.drop, passes=d.passes()) for d in self.dips],
            "diagnostic": self.diagnostic,
        }

    def capacity_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["tick", "time", "phase", "capacity"])
        for k, (t, ph, cap) in enumerate(zip(self.times, self.phases, self.capacities)):
            w.writerow([k, _f(t), ph, _f(cap)])
        return buf.getvalue()

    def velocity_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["tick", "time"] + [f"{t}{i}" for i, t in zip(self.ids, self.types)])
        for k, (t, vs) in enumerate(zip(self.times, self.velocities)):
            w.writerow([k, _f(t)] + [_f(v) for v in vs])
        return buf.getvalue()


def velocity_dips(events: Iterable[dict], velocities, ids: list, window: int = DIP_WINDOW) -> list:
    """Velocity of each robot during its phase-2 eviction pairings against its prior rolling mean.

    ``velocities[k]`` is the state after tick ``k``.  A pairing still open
    at the end of the run closes at the last recorded tick.
    """
    vel = np.asarray(velocities, dtype=float)
    last = len(vel) - 1
    open_ = {}
    out = []

    def close(rid, end):
        hid, start = open_.pop(rid)
        col = ids.index(rid)
        pre = vel[max(0, start - window):start + 1, col].mean()
        out.append(PairingDip(rid, hid, start, end, float(pre), float(vel[start:end + 1, col].min())))

    for e in events:
        if e.get("influence") != "merge_right":
            continue
        if e["event"] == "pairing_start" and e["phase"] == Phase.EVICT.label:
            open_[e["robot"]] = (e["human"], e["tick"])
        elif e["event"] == "pairing_end" and e["robot"] in open_:
            close(e["robot"], e["tick"])
    for rid in sorted(open_):
        close(rid, last)
    return out


def _totals(census) -> tuple:
    return sum(c.human_count for c in census), sum(c.autonomous_count for c in census)


def _check_consistency(world, expected: tuple, history):
    totals = _totals(world.census())
    if totals != expected:
        raise ConsistencyError(f"vehicle counts changed from {expected} to {totals} at tick {world.tick}")
    phases = [p for _, p in history]
    if any(b < a for a, b in zip(phases, phases[1:])):
        raise ConsistencyError(f"phase sequence went backwards: {phases}")


class _EventLog:
    """Append-only JSON-lines sink, flushed after every tick."""

    def __init__(self, path: Optional[Path]):
        self._fh = open(path, "w") if path is not None else None

    def write(self, events):
        if self._fh is None:
            return
        for e in events:
            self._fh.write(json.dumps(e, sort_keys=True, default=_json_default) + "\n")
        self._fh.flush()

    def close(self):
        if self._fh is not None:
            self._fh.close()


def run_simulation(cfg: RunConfig, out_dir=None, keep_events: bool = False):
    """Run phases 0 through 3 under ``cfg``.

    Returns :class:`RunMetrics` (and the event list when ``keep_events``).
    A collision ends the run with status ``"collision"``; traces up to the
    last completed tick are kept and written like any other run.
    """
    params, c = cfg.params, cfg.controllers()
    world = init_world(params, cfg.vehicle_count, cfg.alpha_bar, cfg.seed, cfg.init_mode,
                       cfg.geometry, cfg.initial_speed)
    rec = start_record(world, c, cfg.alpha_bar)
    expected = _totals(world.census())
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.yaml").write_text(cfg.to_yaml())
    sink = _EventLog(out / "events.jsonl" if out is not None else None)
    m = RunMetrics(cfg.alpha_bar, cfg.seed, "completed", [int(i) for i in world.ids],
                   [t.short for t in world.types])
    m.bounds = capacity_bounds(cfg.alpha_bar, params, cfg.vehicle_count // params.n)
    events = []
    counts = collections.Counter()

    def record():
        m.times.append(world.clock)
        m.phases.append(rec.phase.label)
        m.capacities.append(world.capacity(params))
        m.velocities.append([float(v) for v in world.states[:, 3]])

    record()
    m.phase_timestamps.append({"phase": rec.phase.label, "tick": 0, "time": 0.0})
    try:
        while rec.phase is not Phase.DONE and world.tick < c.budgets.total:
            world, rec, evs = tick(world, rec, c)
            sink.write(evs)
            for e in evs:
                counts[e["event"]] += 1
                if e["event"] == "phase_transition":
                    m.phase_timestamps.append({"phase": e["to"], "tick": e["tick"],
                                               "time": round(e["tick"] * c.dynamics.dt, 6)})
            events.extend(e for e in evs if e["event"] != "tick")
            _check_consistency(world, expected, rec.history)
            record()
    except CollisionError as exc:
        m.status = "collision"
        m.diagnostic = {"message": str(exc), **exc.diagnostic}
        counts["collision"] += 1
        sink.write([{"event": "collision", **m.diagnostic}])
        log.warning("run alpha=%s seed=%s aborted: %s", cfg.alpha_bar, cfg.seed, exc)
    finally:
        sink.close()
    m.event_counts = dict(counts)
    m.dips = velocity_dips(events, m.velocities, m.ids)
    if out is not None:
        write_run(m, out)
    return (m, events) if keep_events else m


def write_run(m: RunMetrics, out: Path):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "capacity.csv").write_text(m.capacity_csv())
    (out / "velocity.csv").write_text(m.velocity_csv())
    (out / "metrics.json").write_text(json.dumps(m.summary(), indent=2, sort_keys=True, default=_json_default) + "\n")


@dataclass
class SweepPoint:
    alpha_bar: float
    seed: int
    achieved: float
    bounds: CapacityBounds
    status: str
    dips: list = field(default_factory=list)
    error: Optional[str] = None
    initial: float = math.nan

    def row(self) -> list:
        b = self.bounds
        return [_f(self.alpha_bar), self.seed, _f(self.achieved), _f(b.lower), _f(b.upper), _f(b.baseline)]


def _sweep_job(args) -> SweepPoint:
    cfg_dict, alpha, seed, out_dir = args
    cfg = RunConfig.from_dict(cfg_dict).replace(alpha_bar=alpha, seed=seed)
    params = cfg.params
    bounds = capacity_bounds(alpha, params, cfg.vehicle_count // params.n)
    run_dir = Path(out_dir) / f"alpha_{alpha:.2f}_seed_{seed}" if out_dir is not None else None
    try:
        m = run_simulation(cfg, run_dir)
    except MixedCapError as exc:
        return SweepPoint(alpha, seed, math.nan, bounds, "error", error=f"{type(exc).__name__}: {exc}")
    achieved = m.final_capacity if m.completed else math.nan
    err = m.diagnostic.get("message") if m.diagnostic else None
    return SweepPoint(alpha, seed, achieved, bounds, m.status, m.dips, err, m.initial_capacity)


def run_sweep(cfg: RunConfig, alphas=DEFAULT_SWEEP_ALPHAS, seeds=DEFAULT_SWEEP_SEEDS,
              out_dir=None, jobs: int = 1, keep_runs: bool = False) -> list:
    """One run per (alpha, seed); failed points are recorded and the sweep carries on.

    ``seeds`` is a count (seeds ``0..k-1``) or an explicit list.  Rows are
    sorted by (alpha, seed) before writing, so the output does not depend on
    job completion order.
    """
    seed_list = list(range(seeds)) if isinstance(seeds, int) else [int(s) for s in seeds]
    for a in alphas:
        if not 0.0 <= a <= 1.0:
            raise MixedCapError(f"sweep autonomy level {a} outside [0, 1]")
    out = Path(out_dir) if out_dir is not None else None
    runs_dir = out / "runs" if (out is not None and keep_runs) else None
    jobs_args = [(cfg.to_dict(), float(a), s, runs_dir) for a in alphas for s in seed_list]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs, mp_context=get_context("spawn")) as pool:
            points = list(pool.map(_sweep_job, jobs_args))
    else:
        points = [_sweep_job(a) for a in jobs_args]
    points.sort(key=lambda p: (p.alpha_bar, p.seed))
    if out is not None:
        write_sweep(points, out)
    return points


def sweep_csv(points: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for p in points:
        w.writerow(p.row())
    return buf.getvalue()


def write_sweep(points: list, out: Path):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.csv").write_text(sweep_csv(points))
    failures = [{"alpha_bar": p.alpha_bar, "seed": p.seed, "status": p.status, "error": p.error}
                for p in points if p.status != "completed"]
    (out / "sweep_failures.json").write_text(json.dumps(failures, indent=2) + "\n")


def bounds_rows(params: RoadParams, alphas) -> list:
    rows = []
    pm = price_metrics(params, 0.0)
    for a in alphas:
        opt = optimal_assignment(a, params)
        lam = price_metrics(params, a)
        rows.append({
            "alpha_bar": float(a),
            "worst_case": worst_case_assignment(a, params)[1],
            "optimal": opt.total_capacity,
            "upper": ub_total_capacity(a, params),
            "full_lanes": opt.full_autonomy_lanes,
            "mixed_alpha": opt.mixed_lane_alpha if opt.mixed_lane_alpha is not None else math.nan,
            "achieved_lambda": lam.achieved_lambda,
            "achieved_gamma": lam.achieved_gamma,
            "lambda_bound": pm.lambda_bound,
            "gamma_bound": pm.gamma_bound,
        })
    return rows


def bounds_csv(rows: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BOUNDS_COLUMNS)
    for r in rows:
        w.writerow([r["full_lanes"] if k == "full_lanes" else _f(r[k]) for k in BOUNDS_COLUMNS])
    return buf.getvalue()


def plan_report(cfg: RunConfig, free_flow_time: float = 1.0, flow_ratio: float = 1.0) -> dict:
    """Assignment, bounds and price ratios for the configured road and autonomy level.

    Latency figures use the BPR function at a flow of ``flow_ratio`` times the
    uncontrolled capacity; only their ratios carry meaning.
    """
    params, a = cfg.params, cfg.alpha_bar
    opt = optimal_assignment(a, params)
    ub = optimistic_assignment(a, params)
    worst = worst_case_assignment(a, params)[1]
    upper = ub_total_capacity(a, params)
    pm = price_metrics(params, a)
    flow = flow_ratio * worst

    def latency(cap):
        return bpr_latency(LatencyParams(free_flow_time, cap, flow))

    return {
        "road": {"L": params.L, "h": params.h, "h_bar": params.h_bar, "d": params.d, "n": params.n},
        "alpha_bar": a,
        "optimal_assignment": list(opt.alphas),
        "full_autonomy_lanes": opt.full_autonomy_lanes,
        "mixed_lane_alpha": opt.mixed_lane_alpha,
        "optimal_capacity": opt.total_capacity,
        "optimistic_assignment": list(ub.alphas),
        "worst_case_capacity": worst,
        "upper_bound_capacity": upper,
        "single_lane_capacity": lane_capacity(a, params),
        "lambda_bound": pm.lambda_bound,
        "lambda_argmax": pm.lambda_argmax,
        "achieved_lambda": pm.achieved_lambda,
        "gamma_bound": pm.gamma_bound,
        "gamma_cap": pm.gamma_cap,
        "achieved_gamma": pm.achieved_gamma,
        "latency": {
            "flow": flow,
            "worst_case": latency(worst),
            "optimal": latency(opt.total_capacity),
            "upper_bound": latency(upper),
            "congestion_factor_optimal": congestion_reduction(opt.total_capacity / worst),
            "congestion_factor_upper": congestion_reduction(upper / worst),
        },
    }


def format_plan(report: dict) -> str:
    lat = report["latency"]
    mixed = report["mixed_lane_alpha"]
    lines = [
        f"autonomy level          {report['alpha_bar']:.4f} on {report['road']['n']} lanes",
        f"optimal assignment      {', '.join(f'{x:.4f}' for x in report['optimal_assignment'])}",
        f"full autonomous lanes   {report['full_autonomy_lanes']}"
        + (f", mixed lane at {mixed:.4f}" if mixed is not None else ""),
        f"capacity worst / opt / upper   {report['worst_case_capacity']:.3f} / "
        f"{report['optimal_capacity']:.3f} / {report['upper_bound_capacity']:.3f}",
        f"price of negligence     {report['achieved_lambda']:.4f} (bound {report['lambda_bound']:.4f})",
        f"price of no control     {report['achieved_gamma']:.4f} (bound {report['gamma_bound']:.4f},"
        f" cap {report['gamma_cap']:.4f})",
        f"BPR latency worst / opt / upper   {lat['worst_case']:.4f} / {lat['optimal']:.4f} / "
        f"{lat['upper_bound']:.4f}",
    ]
    return "\n".join(lines)
