"""Command-line front end.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numerical
failure.  Every command is a thin wrapper over the library API.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .ambiguity.aperture import calibrate
from .config import ConfigError, RunConfig
from .montecarlo import run_monte_carlo, write_rows
from .pipeline import (
    NumericalFailure,
    ablate,
    run_filter,
    simulate,
    summarize,
    write_reports,
    write_summary_table,
)
from .simulator import (
    Scenario,
    false_fix_scenario,
    static_scenario,
    urban_drive,
    write_dd_csv,
    write_imu_csv,
)

log = logging.getLogger("cdgnss_nav")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

BUILTIN_SCENARIOS = {
    "urban": lambda seed: urban_drive(600.0, seed=seed),
    "static": lambda seed: static_scenario(60.0, seed=seed),
    "false-fix": lambda seed: false_fix_scenario(seed=seed),
}


def load_config(path: str | None) -> RunConfig:
    return RunConfig() if path is None else RunConfig.load(path)


def load_scenario(spec: str, seed: int) -> Scenario:
    """A scenario JSON file, or ``builtin:<name>``."""
    if spec.startswith("builtin:"):
        name = spec.split(":", 1)[1]
        if name not in BUILTIN_SCENARIOS:
            raise ConfigError(f"unknown builtin scenario {name!r}; choose from {sorted(BUILTIN_SCENARIOS)}")
        return BUILTIN_SCENARIOS[name](seed)
    with open(spec) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{spec}: {exc}") from exc
    try:
        return Scenario.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{spec}: {exc}") from exc


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_montecarlo(args) -> int:
    cfg = load_config(args.config)
    spec = cfg.montecarlo_spec(seed=args.seed)

    def progress(rows):
        for r in rows:
            log.info("yaw %5.1f deg %-13s Ps=%.4f Pf=%.4f Pu=%.4f",
                     r.sigma_yaw_deg, r.method, r.p_success, r.p_fail, r.p_float)

    rows = run_monte_carlo(spec, threads=args.threads, progress=progress)
    write_rows(args.out, rows)
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    sc = load_scenario(args.scenario, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    done = []
    try:
        res = run_filter(sc, cfg, seed=args.seed, progress=done.append)
    except KeyboardInterrupt:
        write_reports(out / "epochs.csv", done)
        _write_json(out / "summary.json", {**summarize(done), "interrupted": True})
        return 130
    write_reports(out / "epochs.csv", res.reports)
    _write_json(out / "summary.json", res.summary)
    if args.streams:
        _, imu, epochs = simulate(sc, cfg, seed=args.seed)
        write_imu_csv(out / "imu.csv", imu)
        write_dd_csv(out / "dd.csv", epochs)
    print(json.dumps(res.summary, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    cfg.with_flags(args.flags)  # validate before any work
    sc = load_scenario(args.scenario, args.seed)
    rows = ablate(sc, cfg, args.flags, seed=args.seed)
    write_summary_table(args.out, rows)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    dofs = range(1, args.max_dof + 1)

    def progress(dof, adop, rate):
        log.info("dof %2d adop %.3f wrong-fix rate %.4f", dof, adop, rate)

    table = calibrate(dofs, args.adops, samples=args.samples, models=args.models,
                      seed=args.seed, progress=progress)
    table.write_csv(args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="cdgnss-nav",
        description="Multi-antenna CDGNSS/INS simulation, Monte Carlo and calibration tools.",
        epilog="exit codes: 0 ok, 2 configuration error, 3 I/O error, 4 numerical failure",
    )
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, scenario: bool):
        sp.add_argument("--config", help="run configuration JSON (defaults if omitted)")
        if scenario:
            sp.add_argument("--scenario", required=True,
                            help="scenario JSON file or builtin:{urban,static,false-fix}")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", required=True)

    mc = sub.add_parser("montecarlo", help="linearization Monte Carlo (CSV)")
    common(mc, scenario=False)
    mc.add_argument("--threads", type=int, default=1)
    mc.set_defaults(func=cmd_montecarlo)

    run = sub.add_parser("run", help="filter run: epochs.csv and summary.json in --out")
    common(run, scenario=True)
    run.add_argument("--streams", action="store_true",
                     help="also write the simulated imu.csv and dd.csv inputs")
    run.set_defaults(func=cmd_run)

    ab = sub.add_parser("ablate", help="summary table over ablation flags (CSV)")
    common(ab, scenario=True)
    ab.add_argument("--flags", nargs="+", default=["no-zupt", "no-nhc", "no-false-fix-detection"])
    ab.set_defaults(func=cmd_ablate)

    cal = sub.add_parser("calibrate-aperture", help="build the aperture threshold table (CSV)")
    cal.add_argument("--seed", type=int, default=20240)
    cal.add_argument("--out", required=True)
    cal.add_argument("--max-dof", type=int, default=30)
    cal.add_argument("--adops", type=float, nargs="+",
                     default=[0.03, 0.05, 0.08, 0.12, 0.17, 0.25, 0.35, 0.5, 0.7, 1.0])
    cal.add_argument("--samples", type=int, default=100_000)
    cal.add_argument("--models", type=int, default=100)
    cal.set_defaults(func=cmd_calibrate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if getattr(args, "threads", 1) < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericalFailure, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
