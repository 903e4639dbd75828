"""Linear and mixed-integer programming backend.

Problems are built incrementally in a :class:`LinearProgram` (named columns and
rows, sparse coefficients) and handed to HiGHS through scipy. LPs come back
with row duals; MIPs can be polished by fixing the integers and re-solving the
LP, which also yields duals for price extraction.
"""

from __future__ import annotations

import math
import re
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import Bounds, LinearConstraint, linprog, milp

from .errors import InfeasibleFixing, NumericalFailure

INF = math.inf
SENSES = ("<=", ">=", "=")
_NAME_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_.]*$")


class Status:
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    ITERATION_LIMIT = "iteration_limit"


@dataclass
class Tolerances:
    feasibility: float = 1e-7
    optimality: float = 1e-7
    mip_gap: float = 1e-6
    integrality: float = 1e-6


DEFAULT_TOL = Tolerances()


class LinearProgram:
    """Sparse LP/MIP under construction.

    Columns and rows carry free-form tag dictionaries (stage, slot, kind,...)
    that the model assembler uses for the two-stage split.
    """

    def __init__(self, name: str = "model", sense: str = "min"):
        if sense not in ("min", "max"):
            raise ValueError("sense must be 'min' or 'max'")
        self.name = name
        self.sense = sense
        self.col_names: list[str] = []
        self.lb: list[float] = []
        self.ub: list[float] = []
        self.integer: list[bool] = []
        self.col_tags: list[dict] = []
        self.row_names: list[str] = []
        self.row_cols: list[np.ndarray] = []
        self.row_vals: list[np.ndarray] = []
        self.row_sense: list[str] = []
        self.rhs: list[float] = []
        self.row_tags: list[dict] = []
        self.obj: dict[int, float] = {}
        self.obj_constant = 0.0
        self._cols: dict[str, int] = {}
        self._rows: dict[str, int] = {}

    # -- construction -----------------------------------------------------
    @property
    def n_cols(self) -> int:
        return len(self.col_names)

    @property
    def n_rows(self) -> int:
        return len(self.row_names)

    def add_var(self, name=None, lb=0.0, ub=INF, integer=False, binary=False, obj=0.0, **tags) -> int:
        if binary:
            integer, lb, ub = True, 0.0, 1.0
        if name is None:
            name = f"c{self.n_cols}"
        if name in self._cols:
            raise ValueError(f"duplicate column name {name!r}")
        lb, ub = float(lb), float(ub)
        if lb > ub:
            raise ValueError(f"column {name!r}: lower bound {lb} above upper bound {ub}")
        if integer and not (math.isfinite(lb) and math.isfinite(ub)):
            raise ValueError(f"integer column {name!r} needs finite bounds")
        idx = self.n_cols
        self._cols[name] = idx
        self.col_names.append(name)
        self.lb.append(lb)
        self.ub.append(ub)
        self.integer.append(bool(integer))
        self.col_tags.append(tags)
        if obj:
            self.obj[idx] = float(obj)
        return idx

    def add_row(self, coefs, sense: str, rhs: float, name=None, **tags) -> int:
        """Add ``sum coef*x  sense  rhs``; ``coefs`` maps column index to coefficient."""
        if sense not in SENSES:
            raise ValueError(f"unknown row sense {sense!r}")
        if name is None:
            name = f"r{self.n_rows}"
        if name in self._rows:
            raise ValueError(f"duplicate row name {name!r}")
        items = coefs.items() if isinstance(coefs, dict) else coefs
        merged: dict[int, float] = {}
        for j, a in items:
            j = int(j)
            if not 0 <= j < self.n_cols:
                raise IndexError(f"row {name!r} references unknown column {j}")
            merged[j] = merged.get(j, 0.0) + float(a)
        cols = np.fromiter(merged.keys(), dtype=np.int64, count=len(merged))
        vals = np.fromiter(merged.values(), dtype=float, count=len(merged))
        keep = vals != 0.0
        idx = self.n_rows
        self._rows[name] = idx
        self.row_names.append(name)
        self.row_cols.append(cols[keep])
        self.row_vals.append(vals[keep])
        self.row_sense.append(sense)
        self.rhs.append(float(rhs))
        self.row_tags.append(tags)
        return idx

    def add_obj(self, col: int, coef: float) -> None:
        self.obj[col] = self.obj.get(col, 0.0) + float(coef)

    def col(self, name: str) -> int:
        return self._cols[name]

    def row(self, name: str) -> int:
        return self._rows[name]

    def has_col(self, name: str) -> bool:
        return name in self._cols

    def row_coefficients(self, row) -> dict[str, float]:
        i = self._rows[row] if isinstance(row, str) else row
        return {self.col_names[j]: float(a) for j, a in zip(self.row_cols[i], self.row_vals[i])}

    # -- dense views ------------------------------------------------------
    def matrix(self) -> sp.csr_matrix:
        nnz = [len(c) for c in self.row_cols]
        if sum(nnz) == 0:
            return sp.csr_matrix((self.n_rows, self.n_cols))
        rows = np.repeat(np.arange(self.n_rows), nnz)
        cols = np.concatenate(self.row_cols)
        vals = np.concatenate(self.row_vals)
        return sp.csr_matrix((vals, (rows, cols)), shape=(self.n_rows, self.n_cols))

    def objective_vector(self) -> np.ndarray:
        c = np.zeros(self.n_cols)
        for j, a in self.obj.items():
            c[j] = a
        return c

    def evaluate(self, x) -> float:
        return float(self.objective_vector() @ np.asarray(x, float) + self.obj_constant)

    def max_violation(self, x) -> float:
        """Largest row or bound violation of ``x`` (absolute)."""
        x = np.asarray(x, float)
        worst = 0.0
        if self.n_rows:
            ax = self.matrix() @ x
            r = np.asarray(self.rhs)
            s = np.asarray(self.row_sense)
            worst = max(worst, float(np.max(np.where(s == "<=", ax - r, 0.0), initial=0.0)))
            worst = max(worst, float(np.max(np.where(s == ">=", r - ax, 0.0), initial=0.0)))
            worst = max(worst, float(np.max(np.where(s == "=", np.abs(ax - r), 0.0), initial=0.0)))
        if self.n_cols:
            worst = max(worst, float(np.max(np.asarray(self.lb) - x, initial=0.0)))
            worst = max(worst, float(np.max(x - np.asarray(self.ub), initial=0.0)))
        return worst

    def copy(self) -> "LinearProgram":
        out = LinearProgram(self.name, self.sense)
        out.col_names = list(self.col_names)
        out.lb = list(self.lb)
        out.ub = list(self.ub)
        out.integer = list(self.integer)
        out.col_tags = [dict(t) for t in self.col_tags]
        out.row_names = list(self.row_names)
        out.row_cols = list(self.row_cols)
        out.row_vals = list(self.row_vals)
        out.row_sense = list(self.row_sense)
        out.rhs = list(self.rhs)
        out.row_tags = [dict(t) for t in self.row_tags]
        out.obj = dict(self.obj)
        out.obj_constant = self.obj_constant
        out._cols = dict(self._cols)
        out._rows = dict(self._rows)
        return out

    @property
    def is_mip(self) -> bool:
        return any(self.integer)


@dataclass
class SolveResult:
    status: str
    x: np.ndarray | None = None
    objective: float | None = None
    duals: np.ndarray | None = None
    reduced_costs: np.ndarray | None = None
    iterations: int = 0
    nodes: int = 0
    wall_time: float = 0.0
    gap: float | None = None
    bound: float | None = None     # best proven bound; equals objective for LPs and closed MIPs
    message: str = ""
    col_names: list = field(default_factory=list, repr=False)

    @property
    def optimal(self) -> bool:
        return self.status == Status.OPTIMAL

    def value(self, name: str) -> float:
        return float(self.x[self.col_names.index(name)])

    def as_dict(self) -> dict[str, float]:
        return {n: float(v) for n, v in zip(self.col_names, self.x)}


def _split_rows(problem: LinearProgram):
    """Return (A_ub, b_ub, A_eq, b_eq, ub_rows, ub_sign, eq_rows)."""
    a = problem.matrix()
    sense = np.asarray(problem.row_sense, dtype=object)
    rhs = np.asarray(problem.rhs, float)
    le = np.flatnonzero(sense == "<=")
    ge = np.flatnonzero(sense == ">=")
    eq = np.flatnonzero(sense == "=")
    ub_rows = np.concatenate([le, ge])
    sign = np.concatenate([np.ones(len(le)), -np.ones(len(ge))])
    a_ub = sp.diags(sign) @ a[ub_rows] if len(ub_rows) else None
    b_ub = sign * rhs[ub_rows] if len(ub_rows) else None
    a_eq = a[eq] if len(eq) else None
    b_eq = rhs[eq] if len(eq) else None
    return a_ub, b_ub, a_eq, b_eq, ub_rows, sign, eq


def solve_lp(problem: LinearProgram, tol: Tolerances = DEFAULT_TOL, time_limit: float | None = None) -> SolveResult:
    """Solve a continuous LP with dual simplex; duals are d(objective)/d(rhs)."""
    if problem.is_mip:
        raise ValueError("solve_lp called on a problem with integer columns")
    flip = -1.0 if problem.sense == "max" else 1.0
    c = flip * problem.objective_vector()
    a_ub, b_ub, a_eq, b_eq, ub_rows, sign, eq_rows = _split_rows(problem)
    bounds = np.column_stack([problem.lb, problem.ub]) if problem.n_cols else None
    options = {
        "primal_feasibility_tolerance": tol.feasibility,
        "dual_feasibility_tolerance": tol.optimality,
        "presolve": True,
    }
    if time_limit is not None:
        options["time_limit"] = time_limit
    t0 = time.perf_counter()
    res = linprog(c, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq, b_eq=b_eq, bounds=bounds,
                  method="highs-ds", options=options)
    wall = time.perf_counter() - t0
    out = SolveResult(status=Status.OPTIMAL, iterations=int(getattr(res, "nit", 0) or 0),
                      wall_time=wall, message=str(res.message), col_names=problem.col_names)
    if res.status == 2:
        out.status = Status.INFEASIBLE
        return out
    if res.status == 3:
        out.status = Status.UNBOUNDED
        return out
    if res.status == 1:
        out.status = Status.ITERATION_LIMIT
        return out
    if res.status != 0:
        raise NumericalFailure(f"LP {problem.name!r}: {res.message}")
    out.x = np.asarray(res.x, float)
    out.objective = flip * float(res.fun) + problem.obj_constant
    duals = np.zeros(problem.n_rows)
    if len(ub_rows):
        duals[ub_rows] = sign * np.asarray(res.ineqlin.marginals)
    if len(eq_rows):
        duals[eq_rows] = np.asarray(res.eqlin.marginals)
    out.duals = flip * duals
    out.reduced_costs = flip * (np.asarray(res.lower.marginals) + np.asarray(res.upper.marginals))
    return out


def solve_lp_arrays(c, a_ub, b_ub, lb=None, ub=None, tol: Tolerances = DEFAULT_TOL) -> SolveResult:
    """min c.x s.t. a_ub x <= b_ub, lb <= x <= ub (free by default), in matrix form.

    Used for the many small recourse solves where building a named problem
    would dominate the run time. Duals are d(objective)/d(b_ub), so <= 0.
    """
    n = len(c)
    lb = np.full(n, -INF) if lb is None else lb
    ub = np.full(n, INF) if ub is None else ub
    t0 = time.perf_counter()
    res = linprog(c, A_ub=a_ub, b_ub=b_ub, bounds=np.column_stack([lb, ub]), method="highs-ds",
                  options={"primal_feasibility_tolerance": tol.feasibility,
                           "dual_feasibility_tolerance": tol.optimality, "presolve": True})
    out = SolveResult(status=Status.OPTIMAL, iterations=int(getattr(res, "nit", 0) or 0),
                      wall_time=time.perf_counter() - t0, message=str(res.message))
    if res.status in (2, 3, 1):
        out.status = {2: Status.INFEASIBLE, 3: Status.UNBOUNDED, 1: Status.ITERATION_LIMIT}[res.status]
        return out
    if res.status != 0:
        raise NumericalFailure(f"LP: {res.message}")
    out.x = np.asarray(res.x, float)
    out.objective = float(res.fun)
    out.duals = np.asarray(res.ineqlin.marginals, float)
    return out


def solve_mip(problem: LinearProgram, gap: float | None = None, node_limit: int | None = None,
              time_limit: float | None = None, polish: bool = False,
              tol: Tolerances = DEFAULT_TOL) -> SolveResult:
    """Branch and bound via HiGHS.

    With ``polish`` the integer part of the incumbent is rounded and the
    continuous part re-solved as an LP; the returned result then carries duals
    of that fixed LP and exactly integral values.
    """
    flip = -1.0 if problem.sense == "max" else 1.0
    c = flip * problem.objective_vector()
    a = problem.matrix()
    sense = np.asarray(problem.row_sense, dtype=object)
    rhs = np.asarray(problem.rhs, float)
    lo = np.where(sense == "<=", -INF, rhs)
    hi = np.where(sense == ">=", INF, rhs)
    constraints = LinearConstraint(a, lo, hi) if problem.n_rows else None
    options = {
        "disp": False,
        "presolve": True,
        "mip_rel_gap": tol.mip_gap if gap is None else gap,
    }
    if node_limit is not None:
        options["node_limit"] = int(node_limit)
    if time_limit is not None:
        options["time_limit"] = float(time_limit)
    t0 = time.perf_counter()
    res = milp(c, integrality=np.asarray(problem.integer, dtype=int),
               bounds=Bounds(np.asarray(problem.lb), np.asarray(problem.ub)),
               constraints=constraints, options=options)
    wall = time.perf_counter() - t0
    nodes = int(getattr(res, "mip_node_count", 0) or 0)
    out = SolveResult(status=Status.OPTIMAL, nodes=nodes, wall_time=wall,
                      gap=getattr(res, "mip_gap", None), message=str(res.message),
                      col_names=problem.col_names)
    if res.status == 2:
        out.status = Status.INFEASIBLE
        return out
    if res.status == 3:
        out.status = Status.UNBOUNDED
        return out
    if res.status == 1:
        out.status = Status.ITERATION_LIMIT
        if res.x is None:
            return out
    elif res.status != 0:
        # HiGHS reports an unbounded relaxation of a MIP as "other"; make it explicit
        if res.x is None and "unbounded" in str(res.message).lower():
            out.status = Status.UNBOUNDED
            return out
        raise NumericalFailure(f"MIP {problem.name!r}: {res.message}")
    out.x = np.asarray(res.x, float)
    out.objective = flip * float(res.fun) + problem.obj_constant
    dual = getattr(res, "mip_dual_bound", None)
    out.bound = out.objective if dual is None or not np.isfinite(dual) else flip * float(dual) + problem.obj_constant
    if polish:
        fixed = fix_and_resolve(problem, out.x, tol=tol)
        fixed.status = out.status
        fixed.nodes = nodes
        fixed.gap = out.gap
        fixed.bound = out.bound
        fixed.wall_time += wall
        return fixed
    return out


def fix_integers(problem: LinearProgram, assignment) -> LinearProgram:
    """Copy of ``problem`` with every integer column pinned to ``assignment``."""
    if isinstance(assignment, dict):
        values = {problem.col(n): v for n, v in assignment.items()}
    else:
        arr = np.asarray(assignment, float)
        values = {j: arr[j] for j in range(problem.n_cols) if problem.integer[j]}
    fixed = problem.copy()
    for j in range(problem.n_cols):
        if not problem.integer[j]:
            continue
        if j not in values:
            raise KeyError(f"assignment misses integer column {problem.col_names[j]!r}")
        v = float(round(values[j]))
        fixed.lb[j] = fixed.ub[j] = v
        fixed.integer[j] = False
    return fixed


def fix_and_resolve(problem: LinearProgram, assignment, tol: Tolerances = DEFAULT_TOL) -> SolveResult:
    res = solve_lp(fix_integers(problem, assignment), tol=tol)
    if res.status != Status.OPTIMAL:
        raise InfeasibleFixing(f"{problem.name}: fixed-integer LP is {res.status}")
    return res


# -- interchange ----------------------------------------------------------

def _num(x: float) -> str:
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return np.format_float_positional(float(x), unique=True, trim="-")


def _terms(cols, vals, names) -> str:
    parts = []
    for j, a in zip(cols, vals):
        parts.append(("- " if a < 0 or (a == 0 and math.copysign(1, a) < 0) else "+ ") + _num(abs(a)) + " " + names[j])
    return " ".join(parts)


def write_lp(problem: LinearProgram) -> str:
    """Serialize to a line-oriented LP text (one row per line)."""
    for n in problem.col_names + problem.row_names:
        if not _NAME_RE.match(n):
            raise ValueError(f"name {n!r} is not LP-safe")
    names = problem.col_names
    lines = [f"\\ {problem.name}", "Maximize" if problem.sense == "max" else "Minimize"]
    obj_cols = sorted(problem.obj)
    obj = _terms(obj_cols, [problem.obj[j] for j in obj_cols], names)
    if problem.obj_constant:
        obj += (" - " if problem.obj_constant < 0 else " + ") + _num(abs(problem.obj_constant))
    lines.append(" obj: " + obj.strip())
    lines.append("Subject To")
    for i in range(problem.n_rows):
        body = _terms(problem.row_cols[i], problem.row_vals[i], names) or "0 " + (names[0] if names else "")
        lines.append(f" {problem.row_names[i]}: {body} {problem.row_sense[i]} {_num(problem.rhs[i])}")
    lines.append("Bounds")
    for j, n in enumerate(names):
        lo, hi = problem.lb[j], problem.ub[j]
        if lo == -INF and hi == INF:
            lines.append(f" {n} free")
        else:
            lines.append(f" {_num(lo)} <= {n} <= {_num(hi)}")
    ints = [n for j, n in enumerate(names) if problem.integer[j]]
    if ints:
        lines.append("General")
        lines.extend(" " + n for n in ints)
    lines.append("End")
    return "\n".join(lines) + "\n"


def _parse_terms(tokens: list[str], cols: dict[str, int]):
    coefs, const, k = {}, 0.0, 0
    while k < len(tokens):
        sign = 1.0
        if tokens[k] in "+-":
            sign = -1.0 if tokens[k] == "-" else 1.0
            k += 1
        val = float(tokens[k])
        k += 1
        if k < len(tokens) and tokens[k] not in "+-":
            coefs[cols[tokens[k]]] = coefs.get(cols[tokens[k]], 0.0) + sign * val
            k += 1
        else:
            const += sign * val
    return coefs, const


def read_lp(text: str) -> LinearProgram:
    """Inverse of :func:`write_lp`."""
    lines = [ln.strip() for ln in text.splitlines()]
    name = lines[0][1:].strip() if lines and lines[0].startswith("\\") else "model"
    sections: dict[str, list[str]] = {}
    current = None
    for ln in lines:
        if not ln or ln.startswith("\\"):
            continue
        if ln in ("Minimize", "Maximize", "Subject To", "Bounds", "General", "End"):
            current = ln
            sections.setdefault(ln, [])
            continue
        sections.setdefault(current, []).append(ln)
    sense = "max" if "Maximize" in sections else "min"
    prob = LinearProgram(name, sense)
    ints = set(sections.get("General", []))
    for ln in sections.get("Bounds", []):
        tok = ln.split()
        if len(tok) == 2 and tok[1] == "free":
            prob.add_var(tok[0], -INF, INF)
        else:
            prob.add_var(tok[2], float(tok[0]), float(tok[4]), integer=tok[2] in ints)
    for ln in sections.get("Minimize", sections.get("Maximize", [])):
        body = ln.split(":", 1)[1].split()
        coefs, const = _parse_terms(body, prob._cols)
        prob.obj = coefs
        prob.obj_constant = const
    for ln in sections.get("Subject To", []):
        rname, body = ln.split(":", 1)
        tok = body.split()
        sense_tok = tok[-2]
        coefs, _ = _parse_terms(tok[:-2], prob._cols)
        prob.add_row(coefs, sense_tok, float(tok[-1]), name=rname.strip())
    return prob


def write_solution(problem: LinearProgram, x) -> str:
    return "".join(f"{n}={_num(v)}\n" for n, v in zip(problem.col_names, np.asarray(x, float)))


def read_solution(text: str) -> dict[str, float]:
    out = {}
    for ln in text.splitlines():
        ln = ln.strip()
        if not ln or ln.startswith("#"):
            continue
        k, v = ln.split("=", 1)
        out[k.strip()] = float(v)
    return out
