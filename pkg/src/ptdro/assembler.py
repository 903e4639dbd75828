"""Centralized equivalent of the charging game and its two-stage matrix form.

The joint minimization of system travel time and microgrid operating cost
has the traffic equilibrium rows and every grid block in one model; its
optimum is an equilibrium of the game between travellers and microgrid
operators. ``compactify`` then splits the columns into first-stage ``x`` and
per-slot recourse ``y_t`` and collects the rows as

    B_t x + C_t y_t <= d_t + D_t sigma_t
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .backend import LinearProgram, SolveResult, Status, fix_and_resolve, solve_mip
from .errors import DimensionMismatch, DualUnavailable, Infeasible, InfeasibleFixing, NonlinearResidue
from .grid import DT, GridBlock, GridTopology, MgSchedule, MicrogridSpec, Tariff, build_grid, decode_schedules, mg_costs
from .transport import (FlowPattern, PathSet, PwlBpr, TrafficBlock, TransportNetwork, decode_flows, linearize_bpr,
                        ue_constraints)


@dataclass
class Case:
    """Everything needed to build the scheduling model of one scenario."""

    topology: GridTopology
    mgs: list[MicrogridSpec]
    tariff: Tariff
    network: TransportNetwork | None = None
    pathsets: list[PathSet] = field(default_factory=list)
    H: int = 5
    K: int = 4
    kappa_up: float = 1.5
    kappa_dn: float = 0.5
    name: str = "case"
    queues: bool = False     # queueing delays on full links inside the joint model

    @property
    def T(self) -> int:
        return len(self.tariff.price)

    @property
    def slots(self) -> range:
        return range(self.T)

    @property
    def base(self) -> float:
        return self.network.base if self.network is not None else 100.0

    @property
    def dim(self) -> int:
        return 2 * len(self.mgs)

    def mg(self, name) -> MicrogridSpec:
        return next(m for m in self.mgs if m.name == name)

    def nominal_prices(self) -> dict:
        return {m.name: self.tariff.price for m in self.mgs}

    def pwl(self) -> PwlBpr | None:
        return linearize_bpr(self.network, self.H) if self.network is not None else None


@dataclass
class CentralModel:
    case: Case
    lp: LinearProgram
    grid: GridBlock
    traffic: TrafficBlock | None
    equilibrium: bool
    costs: dict
    constants: dict


@dataclass
class Solution:
    """Decoded optimum of a centralized (or compact) model."""

    objective: float
    x: np.ndarray
    flows: FlowPattern | None
    schedules: list[MgSchedule]
    line_flows: np.ndarray
    prices: dict | None = None
    result: SolveResult | None = None


def assemble_centralized(case: Case, equilibrium: bool = True, demand=None, fill_order: bool | None = None,
                         name: str = "central") -> CentralModel:
    """Joint model at nominal uncertainty; ``equilibrium=False`` drops the complementarity rows."""
    lp = LinearProgram(name)
    traffic = None
    charging = {}
    costs = {"traffic": {}}
    if case.network is not None and case.pathsets:
        for ps in case.pathsets:
            if len(ps.od.demand) not in (1, case.T):
                raise DimensionMismatch(f"O-D {ps.od.key}: demand profile length {len(ps.od.demand)} != {case.T}")
        buses = set(case.network.charging_buses)
        unknown = buses - {m.name for m in case.mgs}
        if unknown:
            raise DimensionMismatch(f"charging stations reference unknown microgrids {sorted(unknown)}")
        traffic = ue_constraints(lp, case.network, case.pathsets, case.slots, case.pwl(), case.nominal_prices(),
                                 case.tariff.e, case.tariff.omega, demand=demand, equilibrium=equilibrium,
                                 fill_order=equilibrium if fill_order is None else fill_order, queues=case.queues,
                                 stage="first")
        for c, a in traffic.time_cost.items():
            lp.add_obj(c, a)
            costs["traffic"][c] = a
        charging = {(b, t): traffic.xj[b, t] for b in buses for t in case.slots}
    grid = build_grid(lp, case.topology, case.mgs, case.slots, case.tariff, case.K, charging, case.base,
                      case.kappa_up, case.kappa_dn)
    costs.update(grid.costs)
    return CentralModel(case, lp, grid, traffic, equilibrium, costs, dict(grid.constants))


def pin_equilibrium(model: CentralModel, x, tol: float = 1e-7) -> int:
    """Fix the traffic binaries from one solved equilibrium, in place.

    Link flows of an equilibrium are unique (strictly increasing latency), so
    the fill-order and queue flags follow from any solved instance, and the
    path costs with them. Every path at minimum cost is left open and every
    other path closed, which admits all equilibria: path splits and the
    choice of charging station stay free. Returns the number of fixed columns.
    """
    blk = model.traffic
    if blk is None or not model.equilibrium:
        return 0
    lp = model.lp
    x = np.asarray(x, float)
    pinned = 0

    def fix(col, value):
        nonlocal pinned
        lp.lb[col] = lp.ub[col] = float(value)
        pinned += 1

    for col in blk.z.values():
        fix(col, round(x[col]))
    for (lid, t), col in blk.full.items():
        cap = model.case.network.link(lid).capacity
        fix(col, 1.0 if x[blk.xl[lid, t]] >= cap - tol else 0.0)
    for (key, p, t), col in blk.w.items():
        r = lp.row(f"ue_min.{key.replace('-', '_')}.{p}.t{t}")
        slack = float(lp.row_vals[r] @ x[lp.row_cols[r]]) - lp.rhs[r]   # path cost above the O-D minimum
        fix(col, 0.0 if slack <= 1e-8 else 1.0)
    return pinned


def charge_mw(case: Case, flows: FlowPattern | None) -> dict:
    T = case.T
    out = {m.name: np.zeros(T) for m in case.mgs}
    if flows is not None:
        for b, arr in flows.charging.items():
            out[b] = np.asarray(arr, float) * case.base * case.tariff.e / DT
    return out


def decode(model: CentralModel, x, objective: float, result: SolveResult | None = None,
           pv=None) -> Solution:
    case = model.case
    flows = None
    if model.traffic is not None:
        flows = decode_flows(case.network, case.pathsets, model.traffic, x, case.slots)
    sch = decode_schedules(model.grid, case.mgs, case.slots, x, charge_mw(case, flows), pv)
    lines = np.array([[x[model.grid.flow[i, t]] for t in case.slots] for i in range(len(case.topology.lines))])
    lines = lines.reshape(len(case.topology.lines), case.T)
    return Solution(objective, np.asarray(x, float), flows, sch, lines, result=result)


def extract_prices(model: CentralModel, result: SolveResult) -> dict:
    """Locational prices lambda[mg][t] = -dual of the MG bus balance row."""
    if result.duals is None:
        raise DualUnavailable("solution carries no duals; solve with integers fixed")
    out = {}
    for m in model.case.mgs:
        out[m.name] = np.array([-result.duals[model.grid.balance[m.bus, t]] for t in model.case.slots])
    return out


def solve_centralized(model: CentralModel, gap: float = 1e-6, time_limit: float | None = None) -> Solution:
    res = solve_mip(model.lp, gap=gap, time_limit=time_limit)
    if res.status != Status.OPTIMAL or res.x is None:
        raise Infeasible(f"{model.lp.name}: {res.status} ({res.message})")
    try:
        fixed = fix_and_resolve(model.lp, res.x)
    except InfeasibleFixing as exc:
        raise DualUnavailable(str(exc)) from exc
    sol = decode(model, fixed.x, fixed.objective, fixed)
    sol.prices = extract_prices(model, fixed)
    return sol


def traffic_cost(case: Case, flows: FlowPattern | None) -> float:
    """System travel-delay cost in dollars, from the linearized delay curves."""
    if flows is None or case.network is None:
        return 0.0
    pwl = case.pwl()
    total = 0.0
    for k in range(len(case.network.links)):
        for t in range(flows.link_flows.shape[1]):
            total += case.tariff.omega / 60.0 * case.base * pwl.total_time(k, flows.link_flows[k, t])
    return total


def cost_breakdown(case: Case, flows, schedules) -> dict:
    out = {"traffic": traffic_cost(case, flows), "dg": 0.0, "es": 0.0, "dr": 0.0, "grid": 0.0, "imbalance": 0.0}
    for s in schedules:
        for k, v in mg_costs(case.mg(s.name), s, case.tariff, case.K, case.slots, case.kappa_up,
                             case.kappa_dn).items():
            out[k] += v
    return out


def revenue(case: Case, schedule: MgSchedule) -> float:
    """Operating revenue of one microgrid (minus its total cost)."""
    return -sum(mg_costs(case.mg(schedule.name), schedule, case.tariff, case.K, case.slots, case.kappa_up,
                         case.kappa_dn).values())


def potential_value(case: Case, flows: FlowPattern | None, schedules: list[MgSchedule]) -> float:
    """Minus the travel-delay cost minus every microgrid's operating cost."""
    return -traffic_cost(case, flows) + sum(revenue(case, s) for s in schedules)


# -- two-stage form ---------------------------------------------------------

@dataclass
class SlotBlock:
    cols: np.ndarray          # model columns of y_t
    b: np.ndarray
    B: sp.csr_matrix
    C: sp.csr_matrix
    d: np.ndarray
    D: sp.csr_matrix
    origin: list              # per compact row: (model row or None, sign, label)


@dataclass
class CompactModel:
    model: CentralModel
    first: np.ndarray         # model columns of x
    c: np.ndarray
    const: float
    A: sp.csr_matrix
    h: np.ndarray
    x_lb: np.ndarray
    x_ub: np.ndarray
    x_int: np.ndarray
    slots: list[SlotBlock]
    dim: int
    e_de: np.ndarray          # (n_mg, T) charging-energy deviation, MW
    pv_de: np.ndarray         # (n_mg, T)
    first_rows: list = field(default_factory=list)

    @property
    def T(self) -> int:
        return len(self.slots)

    @property
    def n_x(self) -> int:
        return len(self.first)

    def x_names(self) -> list[str]:
        return [self.model.lp.col_names[j] for j in self.first]

    def master_template(self, name: str = "master") -> tuple[LinearProgram, list[int]]:
        """First-stage problem (min c.x s.t. original first-stage rows) and its x columns."""
        lp = self.model.lp
        m = LinearProgram(name)
        pos = {}
        for k, j in enumerate(self.first):
            pos[j] = m.add_var(lp.col_names[j], lp.lb[j], lp.ub[j], integer=lp.integer[j], obj=self.c[k],
                               **lp.col_tags[j])
        for r in self.first_rows:
            m.add_row({pos[j]: v for j, v in zip(lp.row_cols[r], lp.row_vals[r])}, lp.row_sense[r], lp.rhs[r],
                      name=lp.row_names[r])
        m.obj_constant = self.const
        return m, [pos[j] for j in self.first]

    def add_recourse_copy(self, lp: LinearProgram, xcols, t: int, sigma, prefix: str) -> dict:
        """Recourse variables of slot t at a fixed sigma, linked to ``xcols``;
        returns {column: b_j}, the copy's cost terms."""
        blk = self.slots[t]
        ycols = [lp.add_var(f"{prefix}.y{j}", -np.inf, np.inf) for j in range(blk.C.shape[1])]
        rhs = blk.d + blk.D @ np.asarray(sigma, float)
        Bc, Cc = blk.B.tocsr(), blk.C.tocsr()
        for r in range(len(rhs)):
            row = {xcols[j]: v for j, v in zip(Bc.indices[Bc.indptr[r]:Bc.indptr[r + 1]],
                                                Bc.data[Bc.indptr[r]:Bc.indptr[r + 1]])}
            for j, v in zip(Cc.indices[Cc.indptr[r]:Cc.indptr[r + 1]], Cc.data[Cc.indptr[r]:Cc.indptr[r + 1]]):
                row[ycols[j]] = row.get(ycols[j], 0.0) + v
            lp.add_row(row, "<=", rhs[r], name=f"{prefix}.r{r}")
        return {ycols[j]: blk.b[j] for j in range(len(ycols)) if blk.b[j] != 0}

    def rhs(self, t: int, x, sigma=None) -> np.ndarray:
        blk = self.slots[t]
        r = blk.d - blk.B @ x
        if sigma is not None:
            r = r + blk.D @ sigma
        return r

    def expand(self, x, ys) -> np.ndarray:
        """Full model column vector from x and the per-slot y blocks."""
        out = np.zeros(self.model.lp.n_cols)
        out[self.first] = x
        for blk, y in zip(self.slots, ys):
            out[blk.cols] = y
        return out


def uncertainty_rows(model: CentralModel, e_de, pv_de) -> dict:
    """Map balance-row index -> {sigma component: rhs coefficient}.

    sigma = (alpha_1..alpha_N, beta_1..beta_N): alpha raises the charging
    load by e_de, beta raises PV output by pv_de.
    """
    n = len(model.case.mgs)
    out = {}
    for i, m in enumerate(model.case.mgs):
        for t in model.case.slots:
            row = model.grid.balance[m.bus, t]
            out[row] = {i: -float(e_de[i, t]), n + i: float(pv_de[i, t])}
    return out


def compactify(model: CentralModel, e_de=None, pv_de=None) -> CompactModel:
    lp = model.lp
    case = model.case
    n = len(case.mgs)
    T = case.T
    e_de = np.zeros((n, T)) if e_de is None else np.asarray(e_de, float)
    pv_de = np.array([m.pv_de for m in case.mgs]) if pv_de is None else np.asarray(pv_de, float)
    for j in range(lp.n_cols):
        if lp.col_tags[j].get("nonlinear"):
            raise NonlinearResidue(f"column {lp.col_names[j]} carries an unlinearized term")
    stage = [lp.col_tags[j].get("stage") for j in range(lp.n_cols)]
    if any(s not in ("first", "second") for s in stage):
        bad = [lp.col_names[j] for j in range(lp.n_cols) if stage[j] not in ("first", "second")]
        raise DimensionMismatch(f"columns without a stage tag: {bad[:5]}")
    first = np.array([j for j in range(lp.n_cols) if stage[j] == "first"], dtype=int)
    second = {t: [] for t in case.slots}
    for j in range(lp.n_cols):
        if stage[j] == "second":
            second[lp.col_tags[j]["slot"]].append(j)
    xpos = {j: k for k, j in enumerate(first)}
    ypos = {t: {j: k for k, j in enumerate(cols)} for t, cols in second.items()}
    col_slot = {j: lp.col_tags[j]["slot"] for j in range(lp.n_cols) if stage[j] == "second"}
    unc = uncertainty_rows(model, e_de, pv_de)
    obj = lp.objective_vector()

    a_rows, a_cols, a_vals, h = [], [], [], []
    first_rows = []
    per_slot = {t: {"B": ([], [], []), "C": ([], [], []), "d": [], "D": ([], [], []), "origin": []} for t in case.slots}

    def emit(t, bx, cy, rhs, dsig, origin):
        s = per_slot[t]
        r = len(s["d"])
        for k, v in bx:
            s["B"][0].append(r), s["B"][1].append(k), s["B"][2].append(v)
        for k, v in cy:
            s["C"][0].append(r), s["C"][1].append(k), s["C"][2].append(v)
        for k, v in dsig:
            s["D"][0].append(r), s["D"][1].append(k), s["D"][2].append(v)
        s["d"].append(rhs)
        s["origin"].append(origin)

    for r in range(lp.n_rows):
        cols, vals = lp.row_cols[r], lp.row_vals[r]
        slots_here = {col_slot[j] for j in cols if j in col_slot}
        if len(slots_here) > 1:
            raise DimensionMismatch(f"row {lp.row_names[r]} couples recourse of several slots")
        signs = {"<=": [1.0], ">=": [-1.0], "=": [1.0, -1.0]}[lp.row_sense[r]]
        if not slots_here:
            if r in unc:
                raise DimensionMismatch(f"uncertain row {lp.row_names[r]} has no recourse columns")
            first_rows.append(r)
            for sg in signs:
                k = len(h)
                for j, v in zip(cols, vals):
                    a_rows.append(k), a_cols.append(xpos[j]), a_vals.append(sg * v)
                h.append(sg * lp.rhs[r])
            continue
        t = slots_here.pop()
        dsig = unc.get(r, {})
        for sg in signs:
            bx = [(xpos[j], sg * v) for j, v in zip(cols, vals) if j in xpos]
            cy = [(ypos[t][j], sg * v) for j, v in zip(cols, vals) if j not in xpos]
            emit(t, bx, cy, sg * lp.rhs[r], [(i, sg * v) for i, v in dsig.items() if v != 0.0],
                 (r, sg, lp.row_names[r]))
    for t in case.slots:
        for j in second[t]:
            k = ypos[t][j]
            if np.isfinite(lp.lb[j]):
                emit(t, [], [(k, -1.0)], -lp.lb[j], [], (None, -1.0, f"lb.{lp.col_names[j]}"))
            if np.isfinite(lp.ub[j]):
                emit(t, [], [(k, 1.0)], lp.ub[j], [], (None, 1.0, f"ub.{lp.col_names[j]}"))
    nx_ = len(first)
    blocks = []
    for t in case.slots:
        s = per_slot[t]
        m = len(s["d"])
        ny = len(second[t])
        blocks.append(SlotBlock(
            cols=np.array(second[t], dtype=int),
            b=obj[second[t]] if ny else np.zeros(0),
            B=sp.csr_matrix((s["B"][2], (s["B"][0], s["B"][1])), shape=(m, nx_)),
            C=sp.csr_matrix((s["C"][2], (s["C"][0], s["C"][1])), shape=(m, ny)),
            d=np.array(s["d"], float),
            D=sp.csr_matrix((s["D"][2], (s["D"][0], s["D"][1])), shape=(m, 2 * n)),
            origin=s["origin"]))
    A = sp.csr_matrix((a_vals, (a_rows, a_cols)), shape=(len(h), nx_))
    return CompactModel(model, first, obj[first], lp.obj_constant, A, np.array(h, float),
                        np.array([lp.lb[j] for j in first]), np.array([lp.ub[j] for j in first]),
                        np.array([lp.integer[j] for j in first], dtype=bool), blocks, 2 * n, e_de, pv_de,
                        first_rows)
