"""Command-line front end.

Usage::

    dgpc run.ini [--set key=value ...] [--out DIR] [--diagnostics] [--vtk]
    dgpc run.ini --study space --levels 3 [--workers 2]

Exit status: 0 on success, 1 when a solver fails, 2 for usage or
configuration errors.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace

from dgpc.config import ConfigError, load_config
from dgpc.runner import StudyError, run, run_convergence_study
from dgpc.stepping import SteppingError

log = logging.getLogger("dgpc")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="dgpc",
        description="dG pressure-correction solver for the incompressible Navier-Stokes equations.",
    )
    p.add_argument("config", help="configuration file (INI-style key = value text)")
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a configuration key; repeatable (e.g. --set tau=2^-10 --set forms.sigma_tilde=8)",
    )
    p.add_argument("-o", "--out", help="output directory (default: output_dir from the config)")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging; repeat for debug output")
    p.add_argument("--study", choices=("space", "time"), help="run a convergence study instead of a single run")
    p.add_argument("--levels", type=int, default=3, help="refinement levels of a study (default 3)")
    p.add_argument("--workers", type=int, default=1, help="threads for the levels of a study (default 1)")
    p.add_argument("--diagnostics", action="store_true", help="check the discrete identities every step")
    p.add_argument("--vtk", action="store_true", help="write fields.vtk at the final time")
    return p


def _setup_logging(verbosity: int, logfile: str) -> None:
    level = logging.WARNING if verbosity == 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    root = logging.getLogger()
    root.setLevel(logging.DEBUG)
    for h in list(root.handlers):
        if getattr(h, "_dgpc", False):
            root.removeHandler(h)
            h.close()
    console = logging.StreamHandler(sys.stderr)
    console.setLevel(level)
    console.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
    fileh = logging.FileHandler(logfile, mode="w", encoding="utf-8")
    fileh.setLevel(logging.INFO)
    fileh.setFormatter(logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s"))
    for h in (console, fileh):
        h._dgpc = True
        root.addHandler(h)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_config(args.config, args.overrides)
        if args.diagnostics:
            config = replace(config, diagnostics=True)
        if args.vtk:
            config = replace(config, vtk=True)
    except ConfigError as exc:
        print(f"dgpc: configuration error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"dgpc: cannot read {args.config}: {exc}", file=sys.stderr)
        return 2
    if args.levels < 2 and args.study:
        print("dgpc: --levels must be at least 2", file=sys.stderr)
        return 2

    out = args.out or config.output_dir
    os.makedirs(out, exist_ok=True)
    _setup_logging(args.verbose, os.path.join(out, "study.log" if args.study else "run.log"))
    log.info("configuration:\n%s", config.to_text())
    try:
        if args.study:
            reports = []
            table = run_convergence_study(config, args.study, args.levels, workers=args.workers, reports=reports)
            with open(os.path.join(out, "rates.csv"), "w", encoding="utf-8", newline="\n") as fh:
                fh.write(table.to_csv())
            for i, rep in enumerate(reports):
                with open(os.path.join(out, f"report_level{i}.json"), "w", encoding="utf-8") as fh:
                    fh.write(rep.to_json())
            print(table.format())
        else:
            report = run(config, out)
            print(f"T = {report.final_time:g}, {report.steps} steps, {report.wall_clock:.2f} s")
            print(f"||v - u(T)|| = {report.err_v:.6e}")
            print(f"||u_h - u(T)|| = {report.err_u:.6e}")
            print(f"||p_h - p(T)|| = {report.err_p:.6e}")
            for w in report.warnings:
                print(f"warning: {w}")
    except (SteppingError, StudyError) as exc:
        log.error("solver failure: %s", exc)
        print(f"dgpc: solver failure: {exc}", file=sys.stderr)
        return 1
    finally:
        for h in list(logging.getLogger().handlers):
            if getattr(h, "_dgpc", False):
                logging.getLogger().removeHandler(h)
                h.close()
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
