"""Distributionally robust two-stage solve by Benders decomposition.

For each slot the worst-case expected recourse over the nested-shell
ambiguity set is

    min_eta  sum_m (P_m - P_{m-1}) * max_{sigma in C_m} [Q_t(x, sigma) - eta' sigma]

with Q_t(x, sigma) = min { b_t' y : C_t y <= d_t + D_t sigma - B_t x }. In the
master the shell maxima are carried by gamma variables whose tail sums
sum_{s >= m} gamma_s bound shell m, and the objective is sum_m P_m gamma_m.
Each shell maximum is a bilinear program; the subproblem linearizes it
with the recourse dual and big-M complementarity over the budget polytope.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .assembler import CompactModel
from .backend import LinearProgram, Status, solve_lp_arrays, solve_mip
from .errors import DomainError, IterationLimit, MasterInfeasible, NumericalFailure, RecourseInfeasible
from .uncertainty import AmbiguitySet

log = logging.getLogger(__name__)

GAMMA_FLOOR = 1e7


def split_sigma(sigma):
    sigma = np.asarray(sigma, float)
    if np.any(np.abs(sigma) > 1 + 1e-12):
        raise DomainError("sigma outside [-1, 1]")
    return np.maximum(sigma, 0.0), np.maximum(-sigma, 0.0)


@dataclass
class Recourse:
    value: float
    y: np.ndarray
    nu: np.ndarray


def solve_recourse(cm: CompactModel, t: int, x, sigma=None) -> Recourse:
    blk = cm.slots[t]
    r = cm.rhs(t, x, sigma)
    res = solve_lp_arrays(blk.b, blk.C, r)
    if res.status == Status.INFEASIBLE:
        raise RecourseInfeasible(f"recourse of slot {t + 1} infeasible", sigma=sigma, slot=t)
    if res.status != Status.OPTIMAL:
        raise NumericalFailure(f"recourse of slot {t + 1}: {res.status}")
    return Recourse(res.objective, res.x, np.maximum(-res.duals, 0.0))


def price_bound(cm: CompactModel, t: int) -> float:
    """Upper bound on any balance-row price of slot t (emergency purchase price)."""
    case = cm.model.case
    return case.kappa_up * float(case.tariff.price[t])


def eta_bounds(cm: CompactModel, t: int) -> np.ndarray:
    """|eta_i| <= L_i: the largest slope of Q in sigma_i. Clipping eta into
    this box never raises a shell maximum, so the box is exact."""
    D = abs(cm.slots[t].D).tocsc()
    col_max = np.array([D[:, i].max() if D[:, i].nnz else 0.0 for i in range(cm.dim)])
    # each equality row appears twice in <= form, the price acts once
    return col_max * price_bound(cm, t)


@dataclass
class SubproblemSolution:
    m: int
    t: int
    value: float
    sigma: np.ndarray
    nu: np.ndarray
    sigma1: np.ndarray = None
    sigma2: np.ndarray = None
    tau1: np.ndarray = None
    tau2: np.ndarray = None
    rho: float = 0.0
    milp_value: float = 0.0
    big_m: float = 0.0


def solve_subproblem(cm: CompactModel, x, eta, budget: float, t: int, m: int = 0, big_m: float | None = None,
                     polish: bool = True, method: str = "vertex") -> SubproblemSolution:
    """max over the shell {|sigma| <= 1, |sigma|_1 <= budget} of Q_t(x, sigma) - eta' sigma.

    ``method="kkt"`` dualizes the recourse and the shell together (complementarity
    by big-M binaries). ``method="vertex"`` picks a shell vertex with binaries and
    linearizes the products sigma_i * (D'nu + eta)_i exactly; same value, and
    much faster once many components are live. ``polish`` re-solves the recourse
    at sigma* for an exact value and dual."""
    dim = cm.dim
    eta = np.zeros(dim) if eta is None else np.asarray(eta, float)
    if budget <= 1e-12:
        rec = solve_recourse(cm, t, x, np.zeros(dim))
        return SubproblemSolution(m, t, rec.value, np.zeros(dim), rec.nu, np.zeros(dim), np.zeros(dim),
                                  np.zeros(dim), np.zeros(dim), 0.0, rec.value, 0.0)
    if method == "kkt":
        sol = _kkt_subproblem(cm, x, eta, budget, t, m, big_m)
    elif method == "vertex":
        sol = _vertex_subproblem(cm, x, eta, budget, t, m)
    else:
        raise ValueError(f"unknown subproblem method {method}")
    if polish:
        rec = solve_recourse(cm, t, x, sol.sigma)
        sol.value = rec.value - float(eta @ sol.sigma)
        sol.nu = rec.nu
    return sol


def _dual_block(lp: LinearProgram, blk, x):
    """Recourse dual variables nu >= 0 with C'nu = -b; objective -nu'(d - Bx)."""
    nrow, ny = blk.C.shape
    r0 = blk.d - blk.B @ x
    nu = [lp.add_var(f"nu{i}", obj=-r0[i]) for i in range(nrow)]
    CT = blk.C.T.tocsr()
    for j in range(ny):
        lo, hi = CT.indptr[j], CT.indptr[j + 1]
        lp.add_row({nu[k]: v for k, v in zip(CT.indices[lo:hi], CT.data[lo:hi])}, "=", -blk.b[j], name=f"dual{j}")
    return nu


def _solve_sp(lp: LinearProgram, t: int, m: int):
    res = solve_mip(lp, gap=1e-9)
    if res.status == Status.UNBOUNDED:
        raise NumericalFailure(f"subproblem t={t + 1} m={m + 1} unbounded: a recourse bound is missing")
    if res.status == Status.INFEASIBLE or res.x is None:
        raise RecourseInfeasible(f"subproblem t={t + 1} m={m + 1} {res.status}", slot=t)
    return res


def _vertex_subproblem(cm: CompactModel, x, eta, budget: float, t: int, m: int) -> SubproblemSolution:
    # the objective is convex in sigma, so a vertex of the shell attains the max:
    # k = floor(budget) components at +-1 and at most one at +-(budget - k)
    blk = cm.slots[t]
    dim = cm.dim
    G = eta_bounds(cm, t)
    live = np.nonzero(G)[0]
    G = G + np.abs(eta)              # |(D'nu + eta)_i| at any optimal nu
    k = int(np.floor(budget + 1e-12))
    frac = budget - k
    steps = [1.0, -1.0] + ([frac, -frac] if frac > 1e-12 else [])
    lp = LinearProgram(f"sp.t{t}.m{m}", sense="max")
    nu = _dual_block(lp, blk, x)
    DT_ = blk.D.T.tocsr()
    picks, units, parts = {}, [], []
    for i in live:
        lo, hi = DT_.indptr[i], DT_.indptr[i + 1]
        g = {nu[r]: v for r, v in zip(DT_.indices[lo:hi], DT_.data[lo:hi])}
        own = []
        for s in steps:
            z = lp.add_var(f"z{i}_{s:+.3f}", binary=True)
            # w = -s z (D'nu + eta)_i, exact for binary z while |D'nu + eta| <= G
            w = lp.add_var(f"w{i}_{s:+.3f}", lb=-np.inf, obj=1.0)
            lp.add_row({w: 1.0, **{c: s * v for c, v in g.items()}, z: abs(s) * G[i]}, "<=",
                       -s * eta[i] + abs(s) * G[i])
            lp.add_row({w: 1.0, z: -abs(s) * G[i]}, "<=", 0.0)
            own.append(z)
            picks[z] = (i, s)
            (units if abs(s) == 1.0 else parts).append(z)
        lp.add_row({z: 1.0 for z in own}, "<=", 1.0)
    if units:
        lp.add_row({z: 1.0 for z in units}, "<=", k, name="budget")
    if parts:
        lp.add_row({z: 1.0 for z in parts}, "<=", 1.0, name="remainder")
    res = _solve_sp(lp, t, m)
    sigma = np.zeros(dim)
    for z, (i, s) in picks.items():
        if res.x[z] > 0.5:
            sigma[i] += s
    sig1, sig2 = np.maximum(sigma, 0.0), np.maximum(-sigma, 0.0)
    return SubproblemSolution(m, t, res.objective, sigma, np.asarray(res.x[nu[0]:nu[0] + len(nu)]), sig1, sig2,
                              milp_value=res.objective)


def _kkt_subproblem(cm: CompactModel, x, eta, budget: float, t: int, m: int, big_m=None) -> SubproblemSolution:
    blk = cm.slots[t]
    dim = cm.dim
    L = eta_bounds(cm, t)
    # components whose deviation never reaches the balance rows cannot move the value
    live = np.nonzero(L)[0]
    if big_m is None:
        # |eta + D'nu| <= 2L per component, so 8L + 1 covers every row it enters
        M = 8.0 * np.maximum(L, np.abs(eta)) + 1.0
    else:
        M = np.full(dim, float(big_m))
    log.debug("sp t=%d m=%d big-M %s", t, m, np.round(M[live], 3).tolist())
    M_rho = float(M[live].max()) if len(live) else 1.0
    lp = LinearProgram(f"sp.t{t}.m{m}", sense="max")
    nu = _dual_block(lp, blk, x)
    nrow = len(nu)
    n = len(live)
    tau1 = [lp.add_var(f"tau1_{i}", obj=1.0) for i in live]
    tau2 = [lp.add_var(f"tau2_{i}", obj=1.0) for i in live]
    rho = lp.add_var("rho", obj=budget)
    s1 = [lp.add_var(f"s1_{i}", 0.0, 1.0) for i in live]
    s2 = [lp.add_var(f"s2_{i}", 0.0, 1.0) for i in live]
    e1 = [lp.add_var(f"eps1_{i}", binary=True) for i in live]
    e2 = [lp.add_var(f"eps2_{i}", binary=True) for i in live]
    i1 = [lp.add_var(f"iota1_{i}", binary=True) for i in live]
    i2 = [lp.add_var(f"iota2_{i}", binary=True) for i in live]
    zeta = lp.add_var("zeta", binary=True)
    DT_ = blk.D.T.tocsr()
    for k, i in enumerate(live):
        lo, hi = DT_.indptr[i], DT_.indptr[i + 1]
        dnu = {nu[r]: v for r, v in zip(DT_.indices[lo:hi], DT_.data[lo:hi])}
        # row1 = eta + D'nu + tau1 + rho in [0, M iota1]; row2 = -eta - D'nu + tau2 + rho in [0, M iota2]
        r1 = {**dnu, tau1[k]: 1.0, rho: 1.0}
        r2 = {**{c: -v for c, v in dnu.items()}, tau2[k]: 1.0, rho: 1.0}
        big = M[i] + M_rho
        lp.add_row(r1, ">=", -eta[i])
        lp.add_row({**r1, i1[k]: -big}, "<=", -eta[i])
        lp.add_row(r2, ">=", eta[i])
        lp.add_row({**r2, i2[k]: -big}, "<=", eta[i])
        lp.add_row({tau1[k]: 1.0, e1[k]: -M[i]}, "<=", 0.0)
        lp.add_row({tau2[k]: 1.0, e2[k]: -M[i]}, "<=", 0.0)
        lp.add_row({s1[k]: 1.0, e1[k]: -1.0}, ">=", 0.0)
        lp.add_row({s2[k]: 1.0, e2[k]: -1.0}, ">=", 0.0)
        lp.add_row({s1[k]: 1.0, i1[k]: 1.0}, "<=", 1.0)
        lp.add_row({s2[k]: 1.0, i2[k]: 1.0}, "<=", 1.0)
    total = {**{c: 1.0 for c in s1}, **{c: 1.0 for c in s2}}
    lp.add_row(total, "<=", budget, name="budget")
    lp.add_row({**total, zeta: -budget}, ">=", 0.0, name="budget_tight")
    lp.add_row({rho: 1.0, zeta: -M_rho}, "<=", 0.0)
    res = _solve_sp(lp, t, m)
    xs = res.x
    sig1, sig2, t1, t2 = np.zeros(dim), np.zeros(dim), np.zeros(dim), np.zeros(dim)
    if n:
        sig1[live] = np.clip(xs[s1[0]:s1[0] + n], 0.0, 1.0)
        sig2[live] = np.clip(xs[s2[0]:s2[0] + n], 0.0, 1.0)
        t1[live] = xs[tau1[0]:tau1[0] + n]
        t2[live] = xs[tau2[0]:tau2[0] + n]
    sigma = sig1 - sig2
    excess = np.abs(sigma).sum() - budget
    if excess > 0:
        sigma *= budget / np.abs(sigma).sum()
    return SubproblemSolution(m, t, res.objective, sigma, np.asarray(xs[nu[0]:nu[0] + nrow]), sig1, sig2,
                              t1, t2, float(xs[rho]), res.objective, M_rho)


@dataclass
class Cut:
    m: int
    t: int
    sigma: np.ndarray
    nu: np.ndarray
    coef_x: np.ndarray     # nu' B_t
    coef_eta: np.ndarray   # -sigma
    const: float           # -nu'(d_t + D_t sigma)

    def value(self, x, eta) -> float:
        return float(self.coef_x @ x + self.coef_eta @ eta + self.const)


def benders_cut(cm: CompactModel, sub: SubproblemSolution) -> Cut:
    """sum_{s >= m} gamma_s >= -eta' sigma* + nu*'(B x - d - D sigma*)."""
    blk = cm.slots[sub.t]
    coef_x = np.asarray(blk.B.T @ sub.nu).ravel()
    const = -float(sub.nu @ (blk.d + blk.D @ sub.sigma))
    return Cut(sub.m, sub.t, sub.sigma.copy(), sub.nu.copy(), coef_x, -sub.sigma.copy(), const)


@dataclass
class Master:
    lp: LinearProgram
    xcols: list
    eta: dict      # t -> list of cols
    gamma: dict    # (m, t) -> col
    M0: int
    n_cuts: int = 0
    scenarios: set = field(default_factory=set)

    def add_cut(self, cut: Cut):
        row = {}
        for k, v in enumerate(cut.coef_x):
            if v != 0.0:
                row[self.xcols[k]] = -v
        for i, v in enumerate(cut.coef_eta):
            if v != 0.0:
                row[self.eta[cut.t][i]] = -v
        for s in range(cut.m, self.M0):
            row[self.gamma[s, cut.t]] = row.get(self.gamma[s, cut.t], 0.0) + 1.0
        self.lp.add_row(row, ">=", cut.const, name=f"cut{self.n_cuts}.t{cut.t}.m{cut.m}", kind="cut")
        self.n_cuts += 1

    def add_scenario(self, cm: CompactModel, t: int, sigma, first: int) -> bool:
        """Exact recourse copy at sigma for shells first..M0-1: valid at every x,
        where a cut is only tight at the x it came from. False if already present."""
        key = (t, tuple(np.round(sigma, 9)))
        if key in self.scenarios:
            return False
        self.scenarios.add(key)
        cost = cm.add_recourse_copy(self.lp, self.xcols, t, sigma, f"sc{len(self.scenarios)}.t{t}")
        slope = {self.eta[t][i]: float(v) for i, v in enumerate(sigma) if v != 0.0}
        for m in range(first, self.M0):
            row = {self.gamma[s, t]: 1.0 for s in range(m, self.M0)}
            self.lp.add_row({**row, **slope, **{j: -v for j, v in cost.items()}}, ">=", 0.0,
                            name=f"sc{len(self.scenarios)}.t{t}.m{m}")
        return True


def build_master(cm: CompactModel, amb: AmbiguitySet, floor: float = GAMMA_FLOOR, nominal: bool = False) -> Master:
    lp, xcols = cm.master_template()
    eta, gamma = {}, {}
    for t in range(cm.T):
        L = eta_bounds(cm, t)
        eta[t] = [lp.add_var(f"eta.{i}.t{t}", -L[i], L[i]) for i in range(cm.dim)]
        for m in range(amb.M0):
            gamma[m, t] = lp.add_var(f"gamma.{m}.t{t}", -floor, np.inf, obj=float(amb.probabilities[t, m]))
    if nominal:
        # sigma = 0 lies in every shell, so each shell value is at least the nominal recourse
        for t in range(cm.T):
            cost = cm.add_recourse_copy(lp, xcols, t, np.zeros(cm.dim), f"nom.t{t}")
            for m in range(amb.M0):
                row = {gamma[s, t]: 1.0 for s in range(m, amb.M0)}
                lp.add_row({**row, **{j: -v for j, v in cost.items()}}, ">=", 0.0, name=f"nom.t{t}.m{m}")
    return Master(lp, xcols, eta, gamma, amb.M0)


@dataclass
class MasterSolution:
    x: np.ndarray
    eta: dict
    gamma: np.ndarray
    objective: float
    bound: float


def solve_master(master: Master, gap: float = 1e-9, time_limit: float | None = None) -> MasterSolution:
    res = solve_mip(master.lp, gap=gap, time_limit=time_limit)
    if res.status == Status.INFEASIBLE or res.x is None:
        raise MasterInfeasible(f"master problem {res.status}")
    x = res.x[master.xcols]
    x = np.where(np.asarray(master.lp.integer)[master.xcols], np.round(x), x)
    eta = {t: res.x[cols] for t, cols in master.eta.items()}
    gam = np.array([[res.x[master.gamma[m, t]] for m in range(master.M0)] for t in master.eta])
    return MasterSolution(x, eta, gam, res.objective, res.bound)


def worst_case_expectation(cm: CompactModel, amb: AmbiguitySet, x, eta, t: int, subs=None):
    """Shell-weighted worst case of slot t at (x, eta), plus the shell solutions."""
    subs = subs or [solve_subproblem(cm, x, eta, amb.budgets[t, m], t, m) for m in range(amb.M0)]
    inc = amb.increments()[t]
    return float(sum(inc[m] * subs[m].value for m in range(amb.M0))), subs


@dataclass
class BendersState:
    k: int = 0
    LB: float = -np.inf
    UB: float = np.inf
    cuts: list = field(default_factory=list)
    x: np.ndarray | None = None
    eta: dict | None = None
    tol: float = 1e-4
    trace: list = field(default_factory=list)   # (k, LB, UB, gap, shell values)
    converged: bool = False
    wall_time: float = 0.0

    @property
    def gap(self) -> float:
        if not np.isfinite(self.UB) or not np.isfinite(self.LB):
            return np.inf
        return (self.UB - self.LB) / max(abs(self.UB), 1e-9)


def preflight(cm: CompactModel, x):
    """Recourse must be feasible at every axis-extreme sigma of every slot."""
    for t in range(cm.T):
        for i in range(cm.dim):
            for s in (1.0, -1.0):
                sigma = np.zeros(cm.dim)
                sigma[i] = s
                solve_recourse(cm, t, x, sigma)


def _solve_shells(cm, amb, x, eta, threads, sp=None):
    inc = amb.increments()
    # a shell with zero probability mass has no weight in the objective
    jobs = [(t, m) for t in range(cm.T) for m in range(amb.M0) if inc[t, m] > 0]

    def one(job):
        t, m = job
        return solve_subproblem(cm, x, eta[t], amb.budgets[t, m], t, m, **(sp or {}))

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            subs = list(pool.map(one, jobs))
    else:
        subs = [one(j) for j in jobs]
    return sorted(subs, key=lambda s: (s.t, s.m))


def _nested(cut: Cut, M0: int) -> list[Cut]:
    """A point of shell m lies in every larger shell, so its cut holds there too."""
    return [cut] + [replace(cut, m=m) for m in range(cut.m + 1, M0)]


def axis_cuts(cm: CompactModel, amb: AmbiguitySet, x) -> list[Cut]:
    """Cuts at the points +-r e_i of every shell, one recourse LP per point.

    They show the master how each eta_i trades against its own direction
    before any subproblem has been solved there."""
    cuts = []
    for t in range(cm.T):
        live = np.nonzero(eta_bounds(cm, t))[0]
        for r in sorted({min(1.0, float(g)) for g in amb.budgets[t] if g > 0}):
            first = int(np.argmax(amb.budgets[t] >= r - 1e-12))
            for i in live:
                for sign in (1.0, -1.0):
                    sigma = np.zeros(cm.dim)
                    sigma[i] = sign * r
                    rec = solve_recourse(cm, t, x, sigma)
                    sub = SubproblemSolution(first, t, rec.value, sigma, rec.nu)
                    cuts += _nested(benders_cut(cm, sub), amb.M0)
    return cuts


def benders_loop(cm: CompactModel, amb: AmbiguitySet, tol: float = 1e-4, max_iters: int = 50, threads: int = 1,
                 raise_on_limit: bool = False, check_recourse: bool = True, x0=None,
                 master_gap: float | None = None, nominal: bool = True, columns: bool = True,
                 sp: dict | None = None) -> BendersState:
    """Multi-cut Benders over (t, m).

    ``x0`` seeds the cut pool with axis cuts and shells evaluated at eta = 0,
    and gives the first upper bound. ``nominal`` adds a recourse copy per slot
    at sigma = 0 to the master, so LB starts at the deterministic optimum;
    ``columns`` also adds an exact copy at every worst-case sigma the shells
    return. The master is solved to ``master_gap``, by default a tenth of the
    current gap but never below tol / 10; LB uses its proven bound.
    ``sp`` holds keyword options for solve_subproblem (method, big_m).
    """
    if amb.dim != cm.dim or amb.T != cm.T:
        raise ValueError("ambiguity set does not match the compact model")
    t0 = time.perf_counter()
    state = BendersState(tol=tol)
    master = build_master(cm, amb, nominal=nominal)
    inc = amb.increments()
    checked = not check_recourse
    if x0 is not None:
        x0 = np.asarray(x0, float)
        if check_recourse:
            preflight(cm, x0)
            checked = True
        zero = {t: np.zeros(cm.dim) for t in range(cm.T)}
        subs = _solve_shells(cm, amb, x0, zero, threads, sp)
        state.UB = float(cm.c @ x0 + cm.const) + sum(inc[s.t, s.m] * s.value for s in subs)
        state.x, state.eta = x0, zero
        seeds = axis_cuts(cm, amb, x0)
        for s in subs:
            seeds += _nested(benders_cut(cm, s), amb.M0)
        for cut in seeds:
            master.add_cut(cut)
        state.cuts += seeds
        log.info("benders warm start: UB=%.6f, %d cuts", state.UB, len(seeds))
    for k in range(1, max_iters + 1):
        state.k = k
        tm = time.perf_counter()
        gap = master_gap if master_gap is not None else max(tol / 10, min(1e-2, state.gap / 10))
        ms = solve_master(master, gap=gap)
        tm = time.perf_counter() - tm
        state.LB = max(state.LB, ms.bound)
        if not checked:
            preflight(cm, ms.x)
            checked = True
        ts = time.perf_counter()
        subs = _solve_shells(cm, amb, ms.x, ms.eta, threads, sp)
        ts = time.perf_counter() - ts
        ub = float(cm.c @ ms.x + cm.const)
        for s in subs:
            ub += inc[s.t, s.m] * s.value
            for cut in _nested(benders_cut(cm, s), amb.M0):
                master.add_cut(cut)
                state.cuts.append(cut)
            if columns:
                first = int(np.argmax(amb.budgets[s.t] >= np.abs(s.sigma).sum() - 1e-9))
                master.add_scenario(cm, s.t, s.sigma, first)
        if ub < state.UB:
            state.UB = ub
            state.x = ms.x
            state.eta = ms.eta
        state.trace.append((k, state.LB, state.UB, state.gap, [s.value for s in subs]))
        log.info("benders %d: LB=%.6f UB=%.6f gap=%.3g (master %.1f s, shells %.1f s)", k, state.LB, state.UB,
                 state.gap, tm, ts)
        if state.gap <= tol:
            state.converged = True
            break
    state.wall_time = time.perf_counter() - t0
    if not state.converged:
        if raise_on_limit:
            raise IterationLimit(f"Benders stopped after {max_iters} iterations, gap {state.gap:.3g}")
        log.warning("Benders hit the iteration limit with gap %.3g", state.gap)
    return state
