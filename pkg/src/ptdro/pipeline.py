"""Run orchestration: config -> case -> uncertainty -> selected mode -> report."""

from __future__ import annotations

import logging
import time
import traceback
from dataclasses import dataclass, field

import numpy as np

from .assembler import (Case, Solution, assemble_centralized, compactify, cost_breakdown, decode, pin_equilibrium,
                        solve_centralized)
from .baselines import recourse_at, solve_dm, solve_ro_ccg, solve_traditional
from .config import ScenarioConfig, build_case
from .dro import benders_loop
from .errors import PtdroError
from .grid import balance_residual
from .transport import linearize_bpr, solve_ue, wardrop_residual
from .uncertainty import (AmbiguitySet, LoadBoxes, build_ambiguity, default_budgets, demand_box, deviations,
                          estimate_probabilities, propagate_flow_box, read_history, synthetic_history)

log = logging.getLogger(__name__)


@dataclass
class RunReport:
    mode: str
    case: str
    status: str = "ok"
    message: str = ""
    objective: float | None = None
    breakdown: dict = field(default_factory=dict)
    schedules: list = field(default_factory=list)   # list of dicts of lists
    link_flows: dict = field(default_factory=dict)  # link id -> list
    path_flows: dict = field(default_factory=dict)  # od key -> list of {"links", "flow"}
    prices: dict = field(default_factory=dict)      # mg -> list
    trace: list = field(default_factory=list)       # (k, LB, UB, gap, shell values)
    residuals: dict = field(default_factory=dict)
    wall_time: float = 0.0
    converged: bool = True
    settings: dict = field(default_factory=dict)


def build_uncertainty(cfg: ScenarioConfig, case: Case) -> tuple[AmbiguitySet, LoadBoxes | None]:
    T, n = case.T, len(case.mgs)
    e_de = np.zeros((n, T))
    boxes = None
    tr = cfg.data["transport"]
    if case.network is not None and case.pathsets:
        box = demand_box([ps.od for ps in case.pathsets], tr["box_width"])
        boxes = propagate_flow_box(case.network, case.pathsets, box, case.nominal_prices(), case.tariff.e,
                                   case.tariff.omega, case.H)
        for k, st in enumerate(boxes.energy.keys):
            i = [m.name for m in case.mgs].index(st)
            e_de[i] = deviations(boxes.nominal_energy[k], boxes.energy.lower[k], boxes.energy.upper[k])
    pv_de = np.array([m.pv_de for m in case.mgs])
    amb = cfg.ambiguity
    M0 = amb["shells"]
    budgets = default_budgets(2 * n, M0, T) if amb["budgets"] == "auto" else np.asarray(amb["budgets"], float)
    if budgets.ndim == 1:
        budgets = np.tile(budgets, (T, 1))
    probs = amb["probabilities"]
    if probs == "auto":
        rng = np.random.default_rng(cfg.run["seed"])
        probs = estimate_probabilities(synthetic_history(rng, T, 2 * n, amb["history_days"], amb["history_spread"]),
                                       budgets)
    elif probs == "history":
        pred_charge = np.zeros((n, T))
        if boxes is not None:
            for k, st in enumerate(boxes.energy.keys):
                pred_charge[[m.name for m in case.mgs].index(st)] = boxes.nominal_energy[k]
        pred_pv = np.array([m.pv_pr for m in case.mgs])
        samples = read_history(amb["history"], [m.name for m in case.mgs], pred_charge, pred_pv, e_de, pv_de)
        probs = estimate_probabilities(samples, budgets)
    return build_ambiguity(e_de, pv_de, budgets, probs), boxes


def _fill_solution(report: RunReport, case: Case, sol: Solution, residual_prices=None):
    report.breakdown = cost_breakdown(case, sol.flows, sol.schedules)
    report.schedules = [schedule_record(s) for s in sol.schedules]
    if sol.flows is not None:
        report.link_flows = {lid: sol.flows.link_flows[k].tolist() for k, lid in enumerate(sol.flows.link_ids)}
        report.path_flows = {ps.od.key: [{"links": list(p), "flow": sol.flows.path_flows[ps.od.key][i].tolist()}
                                         for i, p in enumerate(ps.paths)] for ps in case.pathsets}
    prices = residual_prices if residual_prices is not None else sol.prices
    if prices is not None:
        report.prices = {k: np.asarray(v).tolist() for k, v in prices.items()}
    report.residuals = residuals(case, sol)


def schedule_record(s) -> dict:
    keys = ("buy", "sell", "u", "dg", "esc", "esd", "v", "energy", "load", "load_up", "load_dn", "r_up", "r_dn",
            "charge", "pv")
    return {"mg": s.name, "bus": s.bus, **{k: np.asarray(getattr(s, k), float).tolist() for k in keys}}


def residuals(case: Case, sol: Solution) -> dict:
    out = {"balance": balance_residual(case.topology, sol.schedules, sol.line_flows)}
    soc = 0.0
    cyc = 0.0
    excl = 0.0
    for s in sol.schedules:
        es = case.mg(s.name).es
        soc = max(soc, float(np.max(np.maximum(es.emin - s.energy, 0.0))), float(np.max(np.maximum(s.energy - es.emax, 0.0))))
        cyc = max(cyc, abs(float(s.energy[-1]) - es.e0))
        excl = max(excl, float(np.max(np.minimum(s.buy, s.sell))), float(np.max(np.minimum(s.esc, s.esd))))
    out["soc_bounds"] = soc
    out["soc_cycle"] = cyc
    out["exclusivity"] = excl
    fmax = np.array([ln.fmax for ln in case.topology.lines])[:, None]
    out["line_limits"] = float(np.max(np.maximum(np.abs(sol.line_flows) - fmax, 0.0))) if len(fmax) else 0.0
    # drivers pay the tariff, so the equilibrium is checked there and not at the balance duals
    if sol.flows is not None:
        out["wardrop"] = wardrop_residual(case.network, case.pathsets, sol.flows, case.nominal_prices(), case.tariff.e,
                                          case.tariff.omega, case.pwl())
    return out


def recourse_prices(cm, recs) -> dict:
    """Balance prices from the recourse duals at the nominal point."""
    out = {m.name: np.zeros(cm.T) for m in cm.model.case.mgs}
    rows = {cm.model.grid.balance[m.bus, t]: (m.name, t) for m in cm.model.case.mgs for t in range(cm.T)}
    for t, rec in enumerate(recs):
        for k, (r, sign, _) in enumerate(cm.slots[t].origin):
            if r in rows:
                name, tt = rows[r]
                out[name][tt] += sign * rec.nu[k]
    return out


def run(cfg: ScenarioConfig, mode: str | None = None, tolerance: float | None = None, max_iters: int | None = None,
        bpr_segments: int | None = None, dg_segments: int | None = None, threads: int | None = None) -> RunReport:
    """Execute one mode; failures are recorded in the report instead of lost."""
    mode = mode or cfg.run["mode"]
    tol = tolerance or cfg.run["tolerance"]
    iters = max_iters or cfg.run["max_iters"]
    threads = threads or cfg.run["threads"]
    report = RunReport(mode, cfg.name, settings={"tolerance": tol, "max_iters": iters,
                                                 "bpr_segments": bpr_segments or cfg.run["bpr_segments"],
                                                 "dg_segments": dg_segments or cfg.run["dg_segments"],
                                                 "subproblem": cfg.run["subproblem"], "big_m": cfg.run["big_m"]})
    t0 = time.perf_counter()
    try:
        case = build_case(cfg, bpr_segments, dg_segments)
        if mode == "tap-only":
            _run_tap(report, case)
        elif mode == "dm":
            res = solve_dm(case)
            report.objective = res.objective
            _fill_solution(report, case, res.solution)
        elif mode == "traditional":
            res = solve_traditional(case)
            report.objective = res.objective
            _fill_solution(report, case, res.solution)
        elif mode in ("dro", "ro"):
            _run_robust(report, cfg, case, mode, tol, iters, threads)
        else:
            raise ValueError(f"unknown mode {mode}")
    except PtdroError as exc:
        report.status = "error"
        report.message = f"{type(exc).__name__}: {exc}"
        report.wall_time = time.perf_counter() - t0
        log.debug(traceback.format_exc())
        raise ReportedFailure(report, exc) from exc
    report.wall_time = time.perf_counter() - t0
    return report


class ReportedFailure(Exception):
    def __init__(self, report: RunReport, cause: Exception):
        super().__init__(str(cause))
        self.report = report
        self.cause = cause


def _run_tap(report: RunReport, case: Case):
    flows = solve_ue(case.network, case.pathsets, case.nominal_prices(), case.tariff.e, case.tariff.omega, case.H)
    report.objective = flows.objective
    report.link_flows = {lid: flows.link_flows[k].tolist() for k, lid in enumerate(flows.link_ids)}
    report.path_flows = {ps.od.key: [{"links": list(p), "flow": flows.path_flows[ps.od.key][i].tolist()}
                                     for i, p in enumerate(ps.paths)] for ps in case.pathsets}
    report.prices = {k: np.asarray(v).tolist() for k, v in case.nominal_prices().items()}
    report.residuals = {"wardrop": wardrop_residual(case.network, case.pathsets, flows, case.nominal_prices(),
                                                    case.tariff.e, case.tariff.omega, linearize_bpr(case.network, case.H))}


def _run_robust(report, cfg, case, mode, tol, iters, threads):
    amb, _ = build_uncertainty(cfg, case)
    model = assemble_centralized(case, name=mode)
    dm = solve_centralized(model)
    # traffic does not see sigma; its binaries follow from the nominal equilibrium
    pinned = pin_equilibrium(model, dm.x)
    log.info("pinned %d traffic binaries", pinned)
    cm = compactify(model, amb.e_de, amb.pv_de)
    run = cfg.run
    sp = {"method": run["subproblem"], "big_m": None if run["big_m"] == "auto" else float(run["big_m"])}
    if mode == "dro":
        # the deterministic schedule is a feasible first guess and cuts there are cheap
        x0 = dm.x[cm.first]
        state = benders_loop(cm, amb, tol=tol, max_iters=iters, threads=threads, x0=x0, sp=sp)
        x, obj, trace, ok = state.x, state.UB, state.trace, state.converged
    else:
        res = solve_ro_ccg(cm, tol=tol, max_iters=iters, sp=sp)
        x, obj, trace, ok = res.x, res.objective, res.trace, res.converged
    recs = recourse_at(cm, x)
    full = cm.expand(x, [r.y for r in recs])
    nominal = float(cm.c @ x + cm.const + sum(r.value for r in recs))
    sol = decode(model, full, nominal)
    prices = recourse_prices(cm, recs)
    report.objective = obj
    _fill_solution(report, case, sol, prices)
    report.breakdown["risk_premium"] = obj - nominal
    report.trace = [(k, lb, ub, gap, list(v)) for k, lb, ub, gap, v in trace]
    report.converged = ok
    if not ok:
        report.status = "iteration_limit"
