"""Distribution grid and microgrid constraint blocks.

Powers are in MW, energies in MWh, prices in $/MWh, angles in radians and
every slot lasts one hour. Blocks write into a shared ``LinearProgram`` and
tag each column with ``stage`` ("first" or "second") and ``slot`` so the
assembler can split the model into its two-stage form later.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import networkx as nx
import numpy as np

from .backend import LinearProgram
from .errors import InfeasibleSpec, ValidationFailure

DT = 1.0


@dataclass(frozen=True)
class Line:
    frm: int
    to: int
    b: float
    fmax: float


@dataclass
class GridTopology:
    buses: list[int]
    lines: list[Line]
    slack: int

    def __post_init__(self):
        if self.slack not in self.buses:
            raise ValidationFailure(f"slack bus {self.slack} is not a grid bus")
        g = nx.Graph()
        g.add_nodes_from(self.buses)
        for ln in self.lines:
            if ln.frm not in g or ln.to not in g:
                raise ValidationFailure(f"line {ln.frm}-{ln.to} references an unknown bus")
            if not ln.b > 0:
                raise ValidationFailure(f"line {ln.frm}-{ln.to}: susceptance must be positive")
            if not ln.fmax > 0:
                raise ValidationFailure(f"line {ln.frm}-{ln.to}: capacity must be positive")
            g.add_edge(ln.frm, ln.to)
        if not nx.is_connected(g):
            raise ValidationFailure("grid is not connected")


@dataclass(frozen=True)
class DGSpec:
    pmin: float
    pmax: float
    a: float
    b: float
    c: float = 0.0

    def cost(self, p):
        return self.a * np.square(p) + self.b * np.asarray(p) + self.c


@dataclass(frozen=True)
class ESSpec:
    price: float
    pmax: float
    emin: float
    emax: float
    e0: float
    eta_c: float = 0.95
    eta_d: float = 0.95


@dataclass
class DRSpec:
    price: float
    expected: np.ndarray
    pmin: np.ndarray
    pmax: np.ndarray
    total: float | None = None

    def __post_init__(self):
        self.expected = np.asarray(self.expected, float)
        self.pmin = np.broadcast_to(np.asarray(self.pmin, float), self.expected.shape).copy()
        self.pmax = np.broadcast_to(np.asarray(self.pmax, float), self.expected.shape).copy()
        if self.total is None:
            self.total = float(self.expected.sum() * DT)


@dataclass
class MicrogridSpec:
    name: int
    bus: int
    dg: DGSpec
    es: ESSpec
    dr: DRSpec
    pv_pr: np.ndarray
    pv_de: np.ndarray
    pg_max: float = 30.0

    def __post_init__(self):
        self.pv_pr = np.asarray(self.pv_pr, float)
        self.pv_de = np.broadcast_to(np.asarray(self.pv_de, float), self.pv_pr.shape).copy()
        problems = []
        if self.dg.pmin > self.dg.pmax:
            problems.append("DG minimum exceeds maximum")
        if not self.es.emin <= self.es.e0 <= self.es.emax:
            problems.append("initial stored energy outside its bounds")
        if not (0 < self.es.eta_c <= 1 and 0 < self.es.eta_d <= 1):
            problems.append("storage efficiencies must lie in (0, 1]")
        if np.any(self.pv_de < 0):
            problems.append("PV deviations must be non-negative")
        if np.any(self.dr.pmin > self.dr.pmax):
            problems.append("DR slot minimum exceeds maximum")
        elif not self.dr.pmin.sum() * DT - 1e-9 <= self.dr.total <= self.dr.pmax.sum() * DT + 1e-9:
            problems.append("DR daily energy outside the slot bounds")
        if problems:
            raise InfeasibleSpec(f"MG {self.name}: " + "; ".join(problems))


@dataclass
class Tariff:
    price: np.ndarray
    e: np.ndarray
    omega: float = 10.0
    # sales earn slightly less than purchases cost, so a free buy-and-resell wash is never chosen
    sell_margin: float = 1e-3

    def __post_init__(self):
        self.price = np.asarray(self.price, float)
        self.e = np.broadcast_to(np.asarray(self.e, float), self.price.shape).copy()
        if np.any(self.price < 0):
            raise ValidationFailure("grid prices must be non-negative")
        if np.any(self.e <= 0):
            raise ValidationFailure("charging energy per EV must be positive")
        if self.sell_margin < 0:
            raise ValidationFailure("sell margin must be non-negative")


@dataclass
class GridBlock:
    """Column maps of every emitted grid variable, keyed by (mg, t) unless noted."""

    buy: dict = field(default_factory=dict)
    sell: dict = field(default_factory=dict)
    u: dict = field(default_factory=dict)
    dg: dict = field(default_factory=dict)
    dg_seg: dict = field(default_factory=dict)   # (mg, k, t)
    esc: dict = field(default_factory=dict)
    esd: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    energy: dict = field(default_factory=dict)
    load: dict = field(default_factory=dict)
    load_up: dict = field(default_factory=dict)
    load_dn: dict = field(default_factory=dict)
    r_up: dict = field(default_factory=dict)
    r_dn: dict = field(default_factory=dict)
    theta: dict = field(default_factory=dict)    # (bus, t)
    flow: dict = field(default_factory=dict)     # (line index, t)
    balance: dict = field(default_factory=dict)  # (bus, t) -> row
    costs: dict = field(default_factory=dict)    # term -> {col: coef}
    constants: dict = field(default_factory=dict)
    binaries: list = field(default_factory=list)

    def add_cost(self, lp: LinearProgram, term: str, col: int, coef: float):
        lp.add_obj(col, coef)
        bucket = self.costs.setdefault(term, {})
        bucket[col] = bucket.get(col, 0.0) + coef

    def add_constant(self, lp: LinearProgram, term: str, value: float):
        lp.obj_constant += value
        self.constants[term] = self.constants.get(term, 0.0) + value


def grid_tie_block(lp, blk: GridBlock, mg: MicrogridSpec, slots, tariff: Tariff):
    """Buy/sell with the main grid; u=1 allows buying only, u=0 selling only."""
    for t in slots:
        key = (mg.name, t)
        blk.u[key] = lp.add_var(f"u.{mg.name}.t{t}", binary=True, stage="first", slot=t, kind="tie", mg=mg.name)
        blk.binaries.append(blk.u[key])
        blk.buy[key] = lp.add_var(f"buy.{mg.name}.t{t}", 0.0, mg.pg_max, stage="first", slot=t, kind="tie", mg=mg.name)
        blk.sell[key] = lp.add_var(f"sell.{mg.name}.t{t}", 0.0, mg.pg_max, stage="second", slot=t, kind="tie", mg=mg.name)
        lp.add_row({blk.buy[key]: 1.0, blk.u[key]: -mg.pg_max}, "<=", 0.0,
                   name=f"buy_on.{mg.name}.t{t}", slot=t, kind="tie", mg=mg.name)
        lp.add_row({blk.sell[key]: 1.0, blk.u[key]: mg.pg_max}, "<=", mg.pg_max,
                   name=f"sell_on.{mg.name}.t{t}", slot=t, kind="tie", mg=mg.name)
        blk.add_cost(lp, "grid", blk.buy[key], tariff.price[t] * DT)
        blk.add_cost(lp, "grid", blk.sell[key], -(tariff.price[t] - tariff.sell_margin) * DT)


def dg_chords(dg: DGSpec, K: int):
    """Segment width and chord slopes of the quadratic cost over [pmin, pmax]."""
    if K < 1:
        raise ValueError("need at least one DG segment")
    width = (dg.pmax - dg.pmin) / K
    pts = dg.pmin + width * np.arange(K + 1)
    cost = dg.cost(pts)
    slopes = np.diff(cost) / width if width > 0 else np.full(K, dg.b + 2 * dg.a * dg.pmin)
    return width, slopes


def dg_pwl_cost(dg: DGSpec, K: int, p) -> np.ndarray:
    width, slopes = dg_chords(dg, K)
    p = np.atleast_1d(np.asarray(p, float))
    seg = np.clip(p[:, None] - dg.pmin - width * np.arange(K), 0.0, width)
    return float(dg.cost(dg.pmin)) + seg @ slopes


def dg_block(lp, blk: GridBlock, mg: MicrogridSpec, slots, K: int = 4):
    width, slopes = dg_chords(mg.dg, K)
    for t in slots:
        key = (mg.name, t)
        blk.dg[key] = lp.add_var(f"dg.{mg.name}.t{t}", mg.dg.pmin, mg.dg.pmax, stage="second", slot=t,
                                 kind="dg", mg=mg.name)
        segs = []
        for k in range(K):
            c = lp.add_var(f"dgseg.{mg.name}.{k}.t{t}", 0.0, width, stage="second", slot=t, kind="dg", mg=mg.name)
            blk.dg_seg[mg.name, k, t] = c
            segs.append(c)
            blk.add_cost(lp, "dg", c, slopes[k] * DT)
        lp.add_row({blk.dg[key]: 1.0, **{c: -1.0 for c in segs}}, "=", mg.dg.pmin,
                   name=f"dg_sum.{mg.name}.t{t}", slot=t, kind="dg", mg=mg.name)
        blk.add_constant(lp, "dg", float(mg.dg.cost(mg.dg.pmin)) * DT)


def es_block(lp, blk: GridBlock, mg: MicrogridSpec, slots):
    es = mg.es
    if not es.emin <= es.e0 <= es.emax:
        raise InfeasibleSpec(f"MG {mg.name}: initial stored energy outside its bounds")
    slots = list(slots)
    prev = None
    for t in slots:
        key = (mg.name, t)
        blk.v[key] = lp.add_var(f"v.{mg.name}.t{t}", binary=True, stage="first", slot=t, kind="es", mg=mg.name)
        blk.binaries.append(blk.v[key])
        blk.esc[key] = lp.add_var(f"esc.{mg.name}.t{t}", 0.0, es.pmax, stage="first", slot=t, kind="es", mg=mg.name)
        blk.esd[key] = lp.add_var(f"esd.{mg.name}.t{t}", 0.0, es.pmax, stage="first", slot=t, kind="es", mg=mg.name)
        blk.energy[key] = lp.add_var(f"soc.{mg.name}.t{t}", es.emin, es.emax, stage="first", slot=t, kind="es",
                                     mg=mg.name)
        lp.add_row({blk.esc[key]: 1.0, blk.v[key]: -es.pmax}, "<=", 0.0,
                   name=f"es_ch.{mg.name}.t{t}", slot=t, kind="es", mg=mg.name)
        lp.add_row({blk.esd[key]: 1.0, blk.v[key]: es.pmax}, "<=", es.pmax,
                   name=f"es_dis.{mg.name}.t{t}", slot=t, kind="es", mg=mg.name)
        # E_t - E_{t-1} - eta_c pc dt + pd dt / eta_d = 0, with E_{-1} = E_0
        row = {blk.energy[key]: 1.0, blk.esc[key]: -es.eta_c * DT, blk.esd[key]: DT / es.eta_d}
        rhs = 0.0
        if prev is None:
            rhs = es.e0
        else:
            row[prev] = -1.0
        lp.add_row(row, "=", rhs, name=f"es_soc.{mg.name}.t{t}", kind="es", mg=mg.name)
        prev = blk.energy[key]
        blk.add_cost(lp, "es", blk.esc[key], es.price * es.eta_c * DT)
        blk.add_cost(lp, "es", blk.esd[key], es.price / es.eta_d * DT)
    lp.add_row({prev: 1.0}, "=", es.e0, name=f"es_cycle.{mg.name}", kind="es", mg=mg.name)


def dr_block(lp, blk: GridBlock, mg: MicrogridSpec, slots):
    dr = mg.dr
    slots = list(slots)
    if not dr.pmin[slots].sum() * DT - 1e-9 <= dr.total <= dr.pmax[slots].sum() * DT + 1e-9:
        raise InfeasibleSpec(f"MG {mg.name}: DR daily energy outside the slot bounds")
    for t in slots:
        key = (mg.name, t)
        blk.load[key] = lp.add_var(f"load.{mg.name}.t{t}", dr.pmin[t], dr.pmax[t], stage="first", slot=t,
                                   kind="dr", mg=mg.name)
        blk.load_up[key] = lp.add_var(f"ldu.{mg.name}.t{t}", stage="first", slot=t, kind="dr", mg=mg.name)
        blk.load_dn[key] = lp.add_var(f"ldd.{mg.name}.t{t}", stage="first", slot=t, kind="dr", mg=mg.name)
        lp.add_row({blk.load[key]: 1.0, blk.load_up[key]: 1.0, blk.load_dn[key]: -1.0}, "=", dr.expected[t],
                   name=f"dr_dev.{mg.name}.t{t}", slot=t, kind="dr", mg=mg.name)
        blk.add_cost(lp, "dr", blk.load_up[key], dr.price * DT)
        blk.add_cost(lp, "dr", blk.load_dn[key], dr.price * DT)
    lp.add_row({blk.load[mg.name, t]: DT for t in slots}, "=", dr.total, name=f"dr_total.{mg.name}",
               kind="dr", mg=mg.name)


def flow_block(lp, blk: GridBlock, topo: GridTopology, mgs: list[MicrogridSpec], slots, tariff: Tariff,
               charging=None, base: float = 100.0, kappa_up: float = 1.5, kappa_dn: float = 0.5):
    """DC flow, nodal balance and imbalance recourse.

    ``charging`` maps (mg, t) to the column of the EV count served by that
    MG's stations; each unit draws ``base * e_t / dt`` MW. Balance rows are
    written with net injections on the left:
    out - in - buy + sell - dg - esd + esc + load + charge - r_up + r_dn = pv.
    """
    charging = charging or {}
    by_bus = {mg.bus: mg for mg in mgs}
    if len(by_bus) != len(mgs):
        raise ValidationFailure("two microgrids share one bus")
    for t in slots:
        for b in topo.buses:
            if b != topo.slack:
                blk.theta[b, t] = lp.add_var(f"theta.{b}.t{t}", -np.inf, np.inf, stage="second", slot=t, kind="flow")
        for i, ln in enumerate(topo.lines):
            c = lp.add_var(f"pf.{ln.frm}_{ln.to}.t{t}", -ln.fmax, ln.fmax, stage="second", slot=t, kind="flow")
            blk.flow[i, t] = c
            row = {c: 1.0}
            if (ln.frm, t) in blk.theta:
                row[blk.theta[ln.frm, t]] = -ln.b
            if (ln.to, t) in blk.theta:
                row[blk.theta[ln.to, t]] = row.get(blk.theta[ln.to, t], 0.0) + ln.b
            lp.add_row(row, "=", 0.0, name=f"dcflow.{ln.frm}_{ln.to}.t{t}", slot=t, kind="flow")
        for b in topo.buses:
            row: dict[int, float] = {}
            for i, ln in enumerate(topo.lines):
                if ln.frm == b:
                    row[blk.flow[i, t]] = row.get(blk.flow[i, t], 0.0) + 1.0
                if ln.to == b:
                    row[blk.flow[i, t]] = row.get(blk.flow[i, t], 0.0) - 1.0
            rhs = 0.0
            mg = by_bus.get(b)
            tags = {}
            if mg is not None:
                key = (mg.name, t)
                blk.r_up[key] = lp.add_var(f"rup.{mg.name}.t{t}", stage="second", slot=t, kind="imbalance", mg=mg.name)
                blk.r_dn[key] = lp.add_var(f"rdn.{mg.name}.t{t}", stage="second", slot=t, kind="imbalance", mg=mg.name)
                blk.add_cost(lp, "imbalance", blk.r_up[key], kappa_up * tariff.price[t] * DT)
                blk.add_cost(lp, "imbalance", blk.r_dn[key], -kappa_dn * tariff.price[t] * DT)
                terms = [(blk.buy, -1.0), (blk.sell, 1.0), (blk.dg, -1.0), (blk.esd, -1.0), (blk.esc, 1.0),
                         (blk.load, 1.0), (blk.r_up, -1.0), (blk.r_dn, 1.0)]
                for cols, sign in terms:
                    if key in cols:
                        row[cols[key]] = row.get(cols[key], 0.0) + sign
                if key in charging:
                    row[charging[key]] = row.get(charging[key], 0.0) + base * tariff.e[t] / DT
                rhs = float(mg.pv_pr[t])
                tags = {"mg": mg.name}
            blk.balance[b, t] = lp.add_row(row, "=", rhs, name=f"balance.{b}.t{t}", slot=t, kind="balance",
                                           bus=b, **tags)


def build_grid(lp, topo: GridTopology, mgs: list[MicrogridSpec], slots, tariff: Tariff, K: int = 4,
               charging=None, base: float = 100.0, kappa_up: float = 1.5, kappa_dn: float = 0.5) -> GridBlock:
    blk = GridBlock()
    slots = list(slots)
    for mg in mgs:
        grid_tie_block(lp, blk, mg, slots, tariff)
        dg_block(lp, blk, mg, slots, K)
        es_block(lp, blk, mg, slots)
        dr_block(lp, blk, mg, slots)
    flow_block(lp, blk, topo, mgs, slots, tariff, charging, base, kappa_up, kappa_dn)
    return blk


@dataclass
class MgSchedule:
    """Decoded hourly schedule of one microgrid (arrays over slots)."""

    name: int
    bus: int
    buy: np.ndarray
    sell: np.ndarray
    u: np.ndarray
    dg: np.ndarray
    esc: np.ndarray
    esd: np.ndarray
    v: np.ndarray
    energy: np.ndarray
    load: np.ndarray
    load_up: np.ndarray
    load_dn: np.ndarray
    r_up: np.ndarray
    r_dn: np.ndarray
    charge: np.ndarray
    pv: np.ndarray


def decode_schedules(blk: GridBlock, mgs, slots, x, charge_mw=None, pv=None) -> list[MgSchedule]:
    slots = list(slots)
    out = []
    for mg in mgs:
        def col(d):
            return np.array([x[d[mg.name, t]] for t in slots])
        ch = np.zeros(len(slots)) if charge_mw is None else np.asarray(charge_mw[mg.name], float)
        pvv = mg.pv_pr[slots] if pv is None else np.asarray(pv[mg.name], float)
        out.append(MgSchedule(mg.name, mg.bus, col(blk.buy), col(blk.sell), np.round(col(blk.u)), col(blk.dg),
                              col(blk.esc), col(blk.esd), np.round(col(blk.v)), col(blk.energy), col(blk.load),
                              col(blk.load_up), col(blk.load_dn), col(blk.r_up), col(blk.r_dn), ch, pvv))
    return out


def mg_costs(mg: MicrogridSpec, sch: MgSchedule, tariff: Tariff, K: int, slots, kappa_up=1.5, kappa_dn=0.5) -> dict:
    """Per-term dollar costs of one schedule, recomputed from its own numbers."""
    lam = tariff.price[list(slots)]
    es = mg.es
    return {
        "dg": float(dg_pwl_cost(mg.dg, K, sch.dg).sum() * DT),
        "es": float(es.price * (es.eta_c * sch.esc + sch.esd / es.eta_d).sum() * DT),
        "dr": float(mg.dr.price * (sch.load_up + sch.load_dn).sum() * DT),
        "grid": float((lam * sch.buy - (lam - tariff.sell_margin) * sch.sell).sum() * DT),
        "imbalance": float((lam * (kappa_up * sch.r_up - kappa_dn * sch.r_dn)).sum() * DT),
    }


def balance_residual(topo: GridTopology, schedules: list[MgSchedule], flows: np.ndarray) -> float:
    """Largest nodal mismatch in MW; ``flows[i, t]`` follows the line order."""
    by_bus = {s.bus: s for s in schedules}
    worst = 0.0
    for t in range(flows.shape[1]):
        for b in topo.buses:
            net = sum(flows[i, t] for i, ln in enumerate(topo.lines) if ln.frm == b)
            net -= sum(flows[i, t] for i, ln in enumerate(topo.lines) if ln.to == b)
            s = by_bus.get(b)
            inj = 0.0
            if s is not None:
                inj = (s.buy[t] - s.sell[t] + s.pv[t] + s.dg[t] + s.esd[t] - s.esc[t] - s.load[t] - s.charge[t]
                       + s.r_up[t] - s.r_dn[t])
            worst = max(worst, abs(net - inj))
    return worst
