"""Comparison modes: deterministic model, robust C&CG and the traditional joint optimum."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .assembler import Case, CompactModel, Solution, assemble_centralized, solve_centralized
from .backend import Status, solve_mip
from .dro import preflight, solve_recourse, solve_subproblem
from .errors import IterationLimit, MasterInfeasible

log = logging.getLogger(__name__)


@dataclass
class BaselineResult:
    mode: str
    objective: float
    x: np.ndarray
    solution: Solution | None = None
    iterations: int = 0
    wall_time: float = 0.0
    trace: list = field(default_factory=list)
    converged: bool = True
    scenarios: list = field(default_factory=list)


def solve_dm(case: Case, gap: float = 1e-6) -> BaselineResult:
    t0 = time.perf_counter()
    model = assemble_centralized(case, equilibrium=True, name="dm")
    sol = solve_centralized(model, gap=gap)
    return BaselineResult("DM", sol.objective, sol.x, sol, wall_time=time.perf_counter() - t0)


def solve_traditional(case: Case, gap: float = 1e-6) -> BaselineResult:
    """System optimum: same physics, no equilibrium complementarity."""
    t0 = time.perf_counter()
    model = assemble_centralized(case, equilibrium=False, name="trad")
    sol = solve_centralized(model, gap=gap)
    return BaselineResult("TRAD", sol.objective, sol.x, sol, wall_time=time.perf_counter() - t0)


def solve_ro_ccg(cm: CompactModel, tol: float = 1e-4, max_iters: int = 50, budget: float | None = None,
                 raise_on_limit: bool = False, sp: dict | None = None) -> BaselineResult:
    """min_x c'x + sum_t max_{sigma in box} Q_t(x, sigma) by column-and-constraint generation.

    The inner maximization reuses the dual subproblem with eta = 0 and a
    single full-budget shell.
    """
    t0 = time.perf_counter()
    budget = float(cm.dim) if budget is None else budget
    master, xcols = cm.master_template("ro_master")
    theta = [master.add_var(f"theta.t{t}", -np.inf, np.inf, obj=1.0) for t in range(cm.T)]
    scenarios = []

    def add_scenario(t, sigma):
        k = len(scenarios)
        cost = cm.add_recourse_copy(master, xcols, t, sigma, f"sc{k}")
        master.add_row({theta[t]: 1.0, **{j: -v for j, v in cost.items()}}, ">=", 0.0, name=f"sc{k}.value")
        scenarios.append((t, np.asarray(sigma, float).copy()))

    for t in range(cm.T):
        add_scenario(t, np.zeros(cm.dim))
    LB, UB = -np.inf, np.inf
    best_x = None
    trace = []
    converged = False
    k = 0
    checked = False
    for k in range(1, max_iters + 1):
        res = solve_mip(master, gap=1e-9)
        if res.status != Status.OPTIMAL or res.x is None:
            raise MasterInfeasible(f"C&CG master {res.status}")
        x = res.x[xcols]
        x = np.where(cm.x_int, np.round(x), x)
        LB = max(LB, res.objective)
        if not checked:
            preflight(cm, x)
            checked = True
        worst = [solve_subproblem(cm, x, None, budget, t, **(sp or {})) for t in range(cm.T)]
        ub = float(cm.c @ x + cm.const + sum(w.value for w in worst))
        if ub < UB:
            UB, best_x = ub, x
        gap = (UB - LB) / max(abs(UB), 1e-9)
        trace.append((k, LB, UB, gap, [w.value for w in worst]))
        log.info("ccg %d: LB=%.6f UB=%.6f", k, LB, UB)
        if gap <= tol:
            converged = True
            break
        known = {(t, tuple(np.round(s, 9))) for t, s in scenarios}
        added = False
        for w in worst:
            key = (w.t, tuple(np.round(w.sigma, 9)))
            if key not in known:
                add_scenario(w.t, w.sigma)
                added = True
        if not added:
            converged = True
            break
    if not converged:
        if raise_on_limit:
            raise IterationLimit(f"C&CG stopped after {max_iters} iterations")
        log.warning("C&CG hit the iteration limit")
    return BaselineResult("RO", UB, best_x, iterations=k, wall_time=time.perf_counter() - t0, trace=trace,
                          converged=converged, scenarios=scenarios)


def recourse_at(cm: CompactModel, x, sigmas=None):
    """Recourse values and y blocks per slot at the given deviations (nominal by default)."""
    out = []
    for t in range(cm.T):
        s = np.zeros(cm.dim) if sigmas is None else sigmas[t]
        out.append(solve_recourse(cm, t, x, s))
    return out
