"""Command line: validate, run, tap, verify and export-lp.

Exit codes: 0 success, 2 invalid input, 3 solver failure, 4 iteration limit.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .assembler import assemble_centralized
from .backend import write_lp
from .config import build_case, echo, load_config
from .errors import ConfigValidationError, IterationLimit, SolverFailure, ValidationFailure
from .pipeline import ReportedFailure, run
from .report import emit_report, read_document, verify

EXIT_OK, EXIT_INVALID, EXIT_SOLVER, EXIT_LIMIT = 0, 2, 3, 4


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ptdro", description="Day-ahead charging-game scheduling under uncertainty.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="scenario file or name of a shipped scenario")
        sp.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)

    sp = sub.add_parser("validate", help="load a scenario and print the materialized document")
    common(sp)
    sp.add_argument("--quiet", action="store_true")

    for name in ("run", "tap"):
        sp = sub.add_parser(name, help="solve a scenario" if name == "run" else "equilibrium traffic assignment only")
        common(sp)
        if name == "run":
            sp.add_argument("--mode", choices=("dro", "ro", "dm", "traditional", "tap-only"))
        sp.add_argument("--tolerance", type=float)
        sp.add_argument("--max-iters", type=int)
        sp.add_argument("--bpr-segments", type=int)
        sp.add_argument("--dg-segments", type=int)
        sp.add_argument("--threads", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", default="ptdro-out")
        sp.add_argument("--format", default="json,csv", help="comma-separated subset of json,csv")

    sp = sub.add_parser("verify", help="recompute a report's cost breakdown from its own tables")
    common(sp)
    sp.add_argument("--out", default="ptdro-out", help="report directory or report.json")
    sp.add_argument("--tolerance", type=float, default=1e-6)

    sp = sub.add_parser("export-lp", help="write the deterministic model in LP text form")
    common(sp)
    sp.add_argument("--out", default="model.lp")
    sp.add_argument("--bpr-segments", type=int)
    sp.add_argument("--dg-segments", type=int)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)],
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ConfigValidationError as exc:
        for problem in exc.problems:
            print(f"invalid: {problem}", file=sys.stderr)
        return EXIT_INVALID
    except ValidationFailure as exc:
        print(f"invalid: {exc}", file=sys.stderr)
        return EXIT_INVALID

    if args.command == "validate":
        try:
            build_case(cfg)
        except ValidationFailure as exc:
            print(f"invalid: {exc}", file=sys.stderr)
            return EXIT_INVALID
        if not args.quiet:
            sys.stdout.write(echo(cfg))
        return EXIT_OK

    if args.command == "export-lp":
        try:
            model = assemble_centralized(build_case(cfg, args.bpr_segments, args.dg_segments), name=cfg.name)
        except ValidationFailure as exc:
            print(f"invalid: {exc}", file=sys.stderr)
            return EXIT_INVALID
        Path(args.out).write_text(write_lp(model.lp))
        print(f"wrote {args.out} ({model.lp.n_cols} columns, {model.lp.n_rows} rows)")
        return EXIT_OK

    if args.command == "verify":
        try:
            doc = read_document(args.out)
        except (OSError, ValueError) as exc:
            print(f"error: cannot read report: {exc}", file=sys.stderr)
            return EXIT_INVALID
        issues = verify(doc, build_case(cfg, doc.get("settings", {}).get("bpr_segments"),
                                        doc.get("settings", {}).get("dg_segments")), args.tolerance)
        for i in issues:
            print(f"mismatch: {i}", file=sys.stderr)
        if not issues:
            print("report is self-consistent")
        return EXIT_INVALID if issues else EXIT_OK

    if args.seed is not None:
        cfg.data["run"]["seed"] = args.seed
    mode = "tap-only" if args.command == "tap" else args.mode
    formats = tuple(f.strip() for f in args.format.split(",") if f.strip())
    try:
        report = run(cfg, mode, args.tolerance, args.max_iters, args.bpr_segments, args.dg_segments, args.threads)
    except ReportedFailure as fail:
        emit_report(fail.report, args.out, formats)
        print(f"failed: {fail.report.message}", file=sys.stderr)
        if isinstance(fail.cause, IterationLimit):
            return EXIT_LIMIT
        return EXIT_SOLVER if isinstance(fail.cause, SolverFailure) else EXIT_INVALID
    emit_report(report, args.out, formats)
    summary = f"{report.mode}: objective {report.objective:.6f} in {report.wall_time:.1f} s"
    if report.mode == "tap-only":
        zero = [lid for lid, v in report.link_flows.items() if max(abs(f) for f in v) <= 1e-6]
        summary += f"; zero-flow links {zero}"
    print(summary)
    print(f"report written to {args.out}")
    return EXIT_OK if report.converged else EXIT_LIMIT


if __name__ == "__main__":
    sys.exit(main())
