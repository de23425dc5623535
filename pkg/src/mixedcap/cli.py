"""Command-line entry point: ``mixedcap {plan,simulate,sweep,bounds}``.

Exit codes: 0 success, 2 configuration error, 3 collision abort,
4 internal consistency error.  The output directory comes from ``--out``,
then the ``MIXEDCAP_OUTPUT_DIR`` environment variable, then the config file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, apply_overrides, load_config
from .errors import ConfigError, ConsistencyError, MixedCapError, ParameterError
from .harness import (
    DEFAULT_SWEEP_ALPHAS,
    DEFAULT_SWEEP_SEEDS,
    _json_default,
    bounds_csv,
    bounds_rows,
    format_plan,
    plan_report,
    run_simulation,
    run_sweep,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_COLLISION = 3
EXIT_INTERNAL = 4

log = logging.getLogger("mixedcap")


def _float_list(text: str) -> list:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected a comma-separated list of numbers, got {text!r}") from exc


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    sets = list(args.set or [])
    if getattr(args, "alpha", None) is not None:
        sets.append(f"alpha_bar={args.alpha}")
    if getattr(args, "seed", None) is not None:
        sets.append(f"seed={args.seed}")
    return apply_overrides(cfg, sets)


def _out_dir(args, cfg: RunConfig) -> Path:
    return Path(args.out) if args.out else cfg.output_path()


def cmd_plan(args) -> int:
    cfg = _config(args)
    report = plan_report(cfg)
    if args.json:
        print(json.dumps(report, indent=2, default=_json_default))
    else:
        print(format_plan(report))
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    m = run_simulation(cfg, out)
    b = m.bounds
    print(f"status {m.status} after {m.ticks} ticks; capacity {m.initial_capacity:.3f} -> "
          f"{m.final_capacity:.3f} (lower {b.lower:.3f}, upper {b.upper:.3f}); outputs in {out}")
    return EXIT_OK if m.completed else EXIT_COLLISION


def cmd_sweep(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    alphas = _float_list(args.alphas) if args.alphas else list(DEFAULT_SWEEP_ALPHAS)
    for a in alphas:
        if not 0.0 <= a <= 1.0:
            raise ConfigError(f"alphas: {a} outside [0, 1]")
    points = run_sweep(cfg, alphas, args.seeds, out, jobs=args.jobs, keep_runs=args.keep_runs)
    failed = sum(p.status != "completed" for p in points)
    print(f"{len(points)} runs, {failed} failed; table in {out / 'sweep.csv'}")
    return EXIT_OK


def cmd_bounds(args) -> int:
    cfg = _config(args)
    if not 0 < args.step <= 1:
        raise ConfigError("step: must lie in (0, 1]")
    count = int(round(1.0 / args.step))
    alphas = np.linspace(0.0, 1.0, count + 1)
    text = bounds_csv(bounds_rows(cfg.params, alphas))
    if args.out or args.write:
        out = _out_dir(args, cfg)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bounds.csv").write_text(text)
        print(f"wrote {out / 'bounds.csv'}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixedcap", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("-c", "--config", help="YAML run configuration")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config field, e.g. controller.horizon=4 (repeatable)")
        p.add_argument("--alpha", type=float, help="overall autonomy level")
        if out:
            p.add_argument("-o", "--out", help="output directory")

    p = sub.add_parser("plan", help="optimal assignment, bounds and price ratios")
    common(p, out=False)
    p.add_argument("--json", action="store_true", help="emit JSON instead of text")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("simulate", help="run the phased reordering policy once")
    common(p)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="runs over a grid of autonomy levels and seeds")
    common(p)
    p.add_argument("--alphas", help="comma-separated autonomy levels (default 0,0.1,...,1)")
    p.add_argument("--seeds", type=int, default=DEFAULT_SWEEP_SEEDS, help="seeds per level")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.add_argument("--keep-runs", action="store_true", help="also write every run's traces")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bounds", help="capacity curves and price bounds over an autonomy grid (CSV)")
    common(p)
    p.add_argument("--step", type=float, default=0.01, help="grid step")
    p.add_argument("--write", action="store_true", help="write bounds.csv instead of printing")
    p.set_defaults(func=cmd_bounds)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ParameterError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConsistencyError as exc:
        print(f"internal consistency error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except MixedCapError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
