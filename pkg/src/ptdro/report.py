"""Report emission (JSON document plus flat CSV tables) and the self-consistency audit."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .assembler import Case, cost_breakdown
from .grid import MgSchedule
from .pipeline import RunReport
from .transport import FlowPattern

SCHEDULE_COLUMNS = ("mg", "bus", "slot", "buy", "sell", "u", "dg", "esc", "esd", "v", "energy", "load", "load_up",
                    "load_dn", "r_up", "r_dn", "charge", "pv", "price")
TRACE_COLUMNS = ("iteration", "lower_bound", "upper_bound", "gap", "shell_values")


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    # round first so tiny negatives do not print as -0.000000
    return f"{round(float(v), 6) + 0.0:.6f}"


def to_document(report: RunReport) -> dict:
    doc = asdict(report)
    # JSON object keys must be strings
    doc["link_flows"] = {str(k): v for k, v in report.link_flows.items()}
    doc["prices"] = {str(k): v for k, v in report.prices.items()}
    doc["trace"] = [{"iteration": k, "lower_bound": lb, "upper_bound": ub, "gap": gap, "shell_values": list(sv)}
                    for k, lb, ub, gap, sv in report.trace]
    return doc


def emit_report(report: RunReport, out_dir, formats=("json", "csv")) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if "json" in formats:
        p = out / "report.json"
        p.write_text(json.dumps(to_document(report), indent=1, allow_nan=True))
        written.append(p)
    if "csv" in formats:
        p = out / "schedule.csv"
        with p.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(SCHEDULE_COLUMNS)
            for s in report.schedules:
                price = report.prices.get(s["mg"])
                for t in range(len(s["buy"])):
                    w.writerow([s["mg"], s["bus"], t + 1] + [_fmt(s[c][t]) for c in SCHEDULE_COLUMNS[3:-1]]
                               + ["" if price is None else _fmt(price[t])])
        written.append(p)
        p = out / "links.csv"
        with p.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("link", "slot", "flow"))
            for lid, vals in report.link_flows.items():
                for t, v in enumerate(vals):
                    w.writerow([lid, t + 1, _fmt(v)])
        written.append(p)
        p = out / "paths.csv"
        with p.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("od", "path", "links", "slot", "flow"))
            for od, paths in report.path_flows.items():
                for i, rec in enumerate(paths):
                    for t, v in enumerate(rec["flow"]):
                        w.writerow([od, i + 1, " ".join(map(str, rec["links"])), t + 1, _fmt(v)])
        written.append(p)
        p = out / "trace.csv"
        with p.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_COLUMNS)
            for k, lb, ub, gap, sv in report.trace:
                w.writerow([k, _fmt(lb), _fmt(ub), _fmt(gap), " ".join(_fmt(v) for v in sv)])
        written.append(p)
        p = out / "breakdown.csv"
        with p.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("term", "dollars"))
            for k, v in report.breakdown.items():
                w.writerow([k, _fmt(v)])
            if report.objective is not None:
                w.writerow(["objective", _fmt(report.objective)])
        written.append(p)
    return written


def read_document(path) -> dict:
    p = Path(path)
    if p.is_dir():
        p = p / "report.json"
    return json.loads(p.read_text())


def _schedules_from(doc) -> list[MgSchedule]:
    out = []
    for s in doc["schedules"]:
        arr = {k: np.asarray(v, float) for k, v in s.items() if isinstance(v, list)}
        out.append(MgSchedule(s["mg"], s["bus"], **arr))
    return out


def _flows_from(doc, case: Case) -> FlowPattern | None:
    if not doc["link_flows"] or case.network is None:
        return None
    ids = [ln.id for ln in case.network.links]
    lf = np.array([doc["link_flows"][str(i)] for i in ids])
    return FlowPattern({}, lf, {}, ids)


def verify(doc: dict, case: Case, tol: float = 1e-6) -> list[str]:
    """Recompute the cost breakdown from the report's own tables; returns the mismatches."""
    issues = []
    if doc.get("status") not in ("ok", "iteration_limit"):
        return [f"report status is {doc.get('status')}: {doc.get('message')}"]
    if not doc["schedules"]:
        return issues
    again = cost_breakdown(case, _flows_from(doc, case), _schedules_from(doc))
    for k, v in again.items():
        if abs(v - doc["breakdown"].get(k, 0.0)) > tol * max(1.0, abs(v)):
            issues.append(f"{k}: report {doc['breakdown'].get(k)} vs recomputed {v}")
    total = sum(doc["breakdown"].values())
    if doc["objective"] is not None and abs(total - doc["objective"]) > tol * max(1.0, abs(total)):
        issues.append(f"breakdown sums to {total}, objective is {doc['objective']}")
    return issues
