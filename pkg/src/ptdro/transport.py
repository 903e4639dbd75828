"""Road network, path enumeration, BPR latencies and user-equilibrium assignment.

Flows are in per-unit vehicles/hour (``base`` vehicles per p.u.), delays in
minutes and money in dollars. The equilibrium is encoded with big-M
complementarity rows over enumerated paths and a chord linearization of the
BPR congestion delay.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import networkx as nx
import numpy as np

from .backend import LinearProgram, Status, solve_mip
from .errors import BadBigM, DomainError, Infeasible, NoPath, ValidationFailure

BPR_ALPHA = 0.15
BPR_POWER = 4


class CapExceeded(UserWarning):
    """Path enumeration was truncated at the configured cap."""


@dataclass(frozen=True)
class Link:
    id: int
    tail: int
    head: int
    t0: float
    capacity: float
    bus: int | None = None


@dataclass
class TransportNetwork:
    nodes: list
    links: list[Link]
    base: float = 100.0

    def __post_init__(self):
        nodes = set(self.nodes)
        seen = set()
        for ln in self.links:
            if ln.id in seen:
                raise ValidationFailure(f"duplicate link id {ln.id}")
            seen.add(ln.id)
            if ln.tail not in nodes or ln.head not in nodes:
                raise ValidationFailure(f"link {ln.id} references an unknown node")
            if not ln.capacity > 0:
                raise ValidationFailure(f"link {ln.id}: capacity must be positive")
            if not ln.t0 > 0:
                raise ValidationFailure(f"link {ln.id}: free-speed time must be positive")
        self._pos = {ln.id: k for k, ln in enumerate(self.links)}

    def link(self, link_id: int) -> Link:
        return self.links[self._pos[link_id]]

    def index(self, link_id: int) -> int:
        return self._pos[link_id]

    @property
    def charging_buses(self) -> list[int]:
        return sorted({ln.bus for ln in self.links if ln.bus is not None})


@dataclass
class ODPair:
    origin: int
    destination: int
    demand: np.ndarray
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    def __post_init__(self):
        self.demand = np.atleast_1d(np.asarray(self.demand, float))
        self.lower = self.demand.copy() if self.lower is None else np.atleast_1d(np.asarray(self.lower, float))
        self.upper = self.demand.copy() if self.upper is None else np.atleast_1d(np.asarray(self.upper, float))
        if np.any(self.lower < 0) or np.any(self.lower > self.demand + 1e-12) or np.any(self.demand > self.upper + 1e-12):
            raise ValidationFailure(f"O-D {self.origin}-{self.destination}: demand outside its box")

    @property
    def key(self) -> str:
        return f"{self.origin}-{self.destination}"


@dataclass
class PathSet:
    od: ODPair
    paths: list[tuple[int, ...]]
    buses: list[tuple[int, ...]]
    truncated: bool = False

    def link_incidence(self, network: TransportNetwork) -> np.ndarray:
        """delta[l, p] over the network's link order."""
        out = np.zeros((len(network.links), len(self.paths)))
        for p, path in enumerate(self.paths):
            for lid in path:
                out[network.index(lid), p] = 1.0
        return out

    def bus_incidence(self, buses: list[int]) -> np.ndarray:
        out = np.zeros((len(buses), len(self.paths)))
        for p, bs in enumerate(self.buses):
            for b in bs:
                out[buses.index(b), p] = 1.0
        return out


@dataclass
class FlowPattern:
    """Path, link and charging flows, one column per slot."""

    path_flows: dict[str, np.ndarray]
    link_flows: np.ndarray
    charging: dict[int, np.ndarray]
    link_ids: list[int] = field(default_factory=list)
    objective: float = 0.0
    queue: np.ndarray | None = None  # minutes of queueing on saturated links, shaped like link_flows

    def link_flow(self, link_id: int) -> np.ndarray:
        return self.link_flows[self.link_ids.index(link_id)]


@dataclass
class PwlBpr:
    """Chord linearization of the congestion delay, per link.

    ``slopes[l, h]`` interpolates the delay (minutes per p.u.),
    ``tt_slopes[l, h]`` interpolates flow times delay (p.u.-minutes per p.u.).
    """

    H: int
    width: np.ndarray
    slopes: np.ndarray
    tt_slopes: np.ndarray

    def delay(self, k: int, x: float) -> float:
        return float(_chord_eval(self.slopes[k], self.width[k], x))

    def total_time(self, k: int, x: float) -> float:
        return float(_chord_eval(self.tt_slopes[k], self.width[k], x))

    def segments(self, k: int, x: float) -> np.ndarray:
        w = self.width[k]
        return np.clip(x - w * np.arange(self.H), 0.0, w)


def _chord_eval(slopes, width, x):
    seg = np.clip(x - width * np.arange(len(slopes)), 0.0, width)
    return seg @ slopes


def _check_flow(link: Link, flow: float, tol: float = 1e-9):
    if flow < -tol or flow > link.capacity * (1 + tol):
        raise DomainError(f"flow {flow} outside [0, {link.capacity}] on link {link.id}")


def bpr_latency(link: Link, flow: float) -> float:
    _check_flow(link, flow)
    return link.t0 * (1.0 + BPR_ALPHA * (flow / link.capacity) ** BPR_POWER)


def congestion_delay(link: Link, flow: float) -> float:
    _check_flow(link, flow)
    return BPR_ALPHA * link.t0 * (flow / link.capacity) ** BPR_POWER


def linearize_bpr(network: TransportNetwork, H: int) -> PwlBpr:
    if H < 1:
        raise ValueError("need at least one segment")
    L = len(network.links)
    width = np.array([ln.capacity / H for ln in network.links])
    slopes = np.zeros((L, H))
    tt = np.zeros((L, H))
    for k, ln in enumerate(network.links):
        pts = ln.capacity * np.arange(H + 1) / H
        d = np.array([BPR_ALPHA * ln.t0 * (p / ln.capacity) ** BPR_POWER for p in pts])
        slopes[k] = np.diff(d) / width[k]
        tt[k] = np.diff(pts * d) / width[k]
    return PwlBpr(H, width, slopes, tt)


def enumerate_paths(network: TransportNetwork, od: ODPair, cap: int = 16) -> PathSet:
    nodes = set(network.nodes)
    if od.origin == od.destination:
        raise ValidationFailure("origin equals destination")
    if od.origin not in nodes or od.destination not in nodes:
        raise ValidationFailure(f"O-D {od.key} references an unknown node")
    g = nx.MultiDiGraph()
    g.add_nodes_from(network.nodes)
    for ln in network.links:
        g.add_edge(ln.tail, ln.head, key=ln.id)
    found = []
    for edges in nx.all_simple_edge_paths(g, od.origin, od.destination):
        ids = tuple(k for _, _, k in edges)
        if any(network.link(i).bus is not None for i in ids):
            found.append(ids)
    if not found:
        raise NoPath(f"no charging-station path for O-D {od.key}")
    found.sort(key=lambda p: (sum(network.link(i).t0 for i in p), p))
    truncated = len(found) > cap
    if truncated:
        warnings.warn(f"O-D {od.key}: {len(found)} paths truncated to {cap}", CapExceeded, stacklevel=2)
        found = found[:cap]
    buses = [tuple(sorted({network.link(i).bus for i in p if network.link(i).bus is not None})) for p in found]
    return PathSet(od, found, buses, truncated)


def _price(prices, bus, t):
    v = prices[bus] if isinstance(prices, dict) else prices
    return float(np.atleast_1d(v)[t] if np.ndim(v) else v)


def charge_cost(buses, prices, e: float, t: int) -> float:
    """An EV charges once, at the cheapest station on its path."""
    return e * min(_price(prices, b, t) for b in buses)


def path_cost(network: TransportNetwork, paths: PathSet, flows: FlowPattern, prices, e, omega: float,
              p: int, t: int, pwl: PwlBpr | None = None) -> float:
    e_t = float(np.atleast_1d(e)[t] if np.ndim(e) else e)
    delay = 0.0
    for lid in paths.paths[p]:
        k = network.index(lid)
        x = float(flows.link_flows[k, t])
        delay += pwl.delay(k, x) if pwl is not None else congestion_delay(network.link(lid), min(x, network.link(lid).capacity))
        if flows.queue is not None:
            delay += float(flows.queue[k, t])
    return omega * delay / 60.0 + charge_cost(paths.buses[p], prices, e_t, t)


def wardrop_residual(network, pathsets, flows: FlowPattern, prices, e, omega, pwl=None) -> float:
    worst = 0.0
    T = flows.link_flows.shape[1]
    for ps in pathsets:
        f = flows.path_flows[ps.od.key]
        for t in range(T):
            costs = [path_cost(network, ps, flows, prices, e, omega, p, t, pwl) for p in range(len(ps.paths))]
            u = min(costs)
            for p, c in enumerate(costs):
                worst = max(worst, min(max(f[p, t], 0.0), c - u))
    if flows.queue is not None:
        # queueing is only admissible on a full link
        slack = np.array([ln.capacity for ln in network.links])[:, None] - flows.link_flows
        worst = max(worst, float(np.max(np.minimum(omega * flows.queue / 60.0, slack), initial=0.0)))
    return worst


@dataclass
class TrafficBlock:
    """Variable index maps of an emitted traffic block (keys carry the slot)."""

    f: dict = field(default_factory=dict)       # (od_key, p, t)
    w: dict = field(default_factory=dict)       # (od_key, p, t) binaries
    u: dict = field(default_factory=dict)       # (od_key, t)
    xl: dict = field(default_factory=dict)      # (link_id, t)
    dx: dict = field(default_factory=dict)      # (link_id, h, t)
    z: dict = field(default_factory=dict)       # (link_id, h, t) fill-order binaries
    tde: dict = field(default_factory=dict)     # (link_id, t)
    queue: dict = field(default_factory=dict)   # (link_id, t) queueing minutes, only with queues
    full: dict = field(default_factory=dict)    # (link_id, t) binaries, 1 when the link is at capacity
    xj: dict = field(default_factory=dict)      # (bus, t)
    time_cost: dict = field(default_factory=dict)  # column -> $ coefficient
    big_m: dict = field(default_factory=dict)   # (od_key, t) -> (M_flow, M_cost)
    binaries: list = field(default_factory=list)


def default_big_m(network, od: ODPair, t, prices, e, omega):
    e_t = float(np.atleast_1d(e)[t] if np.ndim(e) else e)
    lam = max(_price(prices, b, t) for b in network.charging_buses) if network.charging_buses else 0.0
    m_cost = omega * sum(BPR_ALPHA * ln.t0 for ln in network.links) / 60.0 + lam * e_t + 1.0
    m_flow = float(od.upper[t] if len(od.upper) > 1 else od.upper[0]) + 1.0
    return m_flow, m_cost


def _slot_value(arr, t):
    a = np.atleast_1d(arr)
    return float(a[t] if len(a) > 1 else a[0])


def ue_constraints(lp: LinearProgram, network: TransportNetwork, pathsets: list[PathSet], slots,
                   pwl: PwlBpr, prices, e, omega: float, demand=None, equilibrium: bool = True,
                   fill_order: bool = True, big_m=None, queues: bool = False, **tags) -> TrafficBlock:
    """Emit traffic rows for every slot in ``slots`` into ``lp``.

    ``demand`` maps O-D key to a per-slot array (defaults to nominal).
    ``prices`` parameterize the path costs in the complementarity rows.
    ``big_m`` overrides the propagated (M_flow, M_cost) pair when given.

    With ``queues`` each link also gets a queueing delay that may be positive
    only at capacity, so demand that saturates a cheap link still admits an
    equilibrium. It costs one binary per link and slot.
    """
    if big_m is not None and (np.ndim(big_m) == 0 and big_m <= 0 or np.ndim(big_m) and min(big_m) <= 0):
        raise BadBigM(f"big-M must be positive, got {big_m}")
    blk = TrafficBlock()
    buses = network.charging_buses
    H = pwl.H
    for t in slots:
        e_t = _slot_value(e, t)
        queues_here = equilibrium and queues
        if queues_here:
            m_base = max(default_big_m(network, ps.od, t, prices, e, omega)[1] for ps in pathsets) \
                if big_m is None else (big_m if np.ndim(big_m) == 0 else big_m[1])
            # generous: a queue never exceeds the spread of path costs
            q_max = 600.0 * m_base / omega if omega > 0 else 0.0
        for ln in network.links:
            lid = ln.id
            k = network.index(lid)
            blk.xl[lid, t] = lp.add_var(f"xl.{lid}.t{t}", 0.0, ln.capacity, slot=t, kind="link_flow", **tags)
            if queues_here:
                qc = lp.add_var(f"queue.{lid}.t{t}", 0.0, q_max, slot=t, kind="queue", **tags)
                sc = lp.add_var(f"full.{lid}.t{t}", binary=True, slot=t, kind="queue", **tags)
                blk.queue[lid, t], blk.full[lid, t] = qc, sc
                blk.binaries.append(sc)
                lp.add_row({qc: 1.0, sc: -q_max}, "<=", 0.0, name=f"queue_on.{lid}.t{t}", slot=t, kind="queue", **tags)
                lp.add_row({blk.xl[lid, t]: 1.0, sc: -ln.capacity}, ">=", 0.0,
                           name=f"queue_full.{lid}.t{t}", slot=t, kind="queue", **tags)
            blk.tde[lid, t] = lp.add_var(f"tde.{lid}.t{t}", 0.0, np.inf, slot=t, kind="delay", **tags)
            for h in range(H):
                c = lp.add_var(f"dx.{lid}.{h}.t{t}", 0.0, pwl.width[k], slot=t, kind="segment", **tags)
                blk.dx[lid, h, t] = c
                blk.time_cost[c] = omega / 60.0 * network.base * pwl.tt_slopes[k, h]
            lp.add_row({blk.xl[lid, t]: 1.0, **{blk.dx[lid, h, t]: -1.0 for h in range(H)}}, "=", 0.0,
                       name=f"pwl_sum.{lid}.t{t}", slot=t, kind="pwl_sum", **tags)
            lp.add_row({blk.tde[lid, t]: 1.0, **{blk.dx[lid, h, t]: -pwl.slopes[k, h] for h in range(H)}}, "=", 0.0,
                       name=f"pwl_delay.{lid}.t{t}", slot=t, kind="pwl_delay", **tags)
            if equilibrium and fill_order:
                for h in range(H - 1):
                    zc = lp.add_var(f"z.{lid}.{h}.t{t}", binary=True, slot=t, kind="fill_order", **tags)
                    blk.z[lid, h, t] = zc
                    blk.binaries.append(zc)
                    lp.add_row({blk.dx[lid, h, t]: 1.0, zc: -pwl.width[k]}, ">=", 0.0,
                               name=f"fill_lo.{lid}.{h}.t{t}", slot=t, kind="fill_order", **tags)
                    lp.add_row({blk.dx[lid, h + 1, t]: 1.0, zc: -pwl.width[k]}, "<=", 0.0,
                               name=f"fill_hi.{lid}.{h}.t{t}", slot=t, kind="fill_order", **tags)
        for b in buses:
            blk.xj[b, t] = lp.add_var(f"xj.{b}.t{t}", 0.0, np.inf, slot=t, kind="charging", **tags)
        link_terms: dict[int, dict] = {ln.id: {} for ln in network.links}
        total_f = {}
        bus_terms: dict[int, dict] = {b: {} for b in buses}
        for ps in pathsets:
            key = ps.od.key
            q = _slot_value(ps.od.demand if demand is None else demand[key], t)
            fs = []
            for p, path in enumerate(ps.paths):
                c = lp.add_var(f"f.{key.replace('-', '_')}.{p}.t{t}", 0.0, np.inf, slot=t, kind="path_flow", **tags)
                blk.f[key, p, t] = c
                fs.append(c)
                total_f[c] = -1.0
                for lid in path:
                    link_terms[lid][c] = -1.0
                for b in ps.buses[p]:
                    bus_terms[b][c] = -1.0
            lp.add_row({c: 1.0 for c in fs}, "=", q, name=f"demand.{key.replace('-', '_')}.t{t}",
                       slot=t, kind="demand", od=key, **tags)
            for p, c in enumerate(fs):
                lp.add_row({c: 1.0, **{blk.xj[b, t]: -1.0 for b in ps.buses[p]}}, "<=", 0.0,
                           name=f"charge_path.{key.replace('-', '_')}.{p}.t{t}", slot=t, kind="charge_path", **tags)
            if equilibrium:
                if big_m is None:
                    m_flow, m_cost = default_big_m(network, ps.od, t, prices, e, omega)
                    m_flow = max(m_flow, q + 1.0)
                else:
                    m_flow, m_cost = (big_m, big_m) if np.ndim(big_m) == 0 else big_m
                blk.big_m[key, t] = (m_flow, m_cost)
                u = lp.add_var(f"u_od.{key.replace('-', '_')}.t{t}", 0.0, np.inf, slot=t, kind="od_cost", **tags)
                blk.u[key, t] = u
                for p, c in enumerate(fs):
                    w = lp.add_var(f"w.{key.replace('-', '_')}.{p}.t{t}", binary=True, slot=t, kind="ue_binary", **tags)
                    blk.w[key, p, t] = w
                    blk.binaries.append(w)
                    chg = charge_cost(ps.buses[p], prices, e_t, t)
                    delay = {blk.tde[lid, t]: omega / 60.0 for lid in ps.paths[p]}
                    m_gap = m_cost
                    if queues_here:
                        delay.update({blk.queue[lid, t]: omega / 60.0 for lid in ps.paths[p]})
                        m_gap += omega / 60.0 * q_max * len(ps.paths[p])
                    lp.add_row({c: 1.0, w: m_flow}, "<=", m_flow,
                               name=f"ue_flow.{key.replace('-', '_')}.{p}.t{t}", slot=t, kind="ue", **tags)
                    lp.add_row({**delay, u: -1.0}, ">=", -chg,
                               name=f"ue_min.{key.replace('-', '_')}.{p}.t{t}", slot=t, kind="ue", **tags)
                    lp.add_row({**delay, u: -1.0, w: -m_gap}, "<=", -chg,
                               name=f"ue_gap.{key.replace('-', '_')}.{p}.t{t}", slot=t, kind="ue", **tags)
        for ln in network.links:
            lp.add_row({blk.xl[ln.id, t]: 1.0, **link_terms[ln.id]}, "=", 0.0,
                       name=f"link_agg.{ln.id}.t{t}", slot=t, kind="link_agg", **tags)
        if buses:
            lp.add_row({**{blk.xj[b, t]: 1.0 for b in buses}, **total_f}, "=", 0.0,
                       name=f"charge_total.t{t}", slot=t, kind="charge_total", **tags)
            for b in buses:
                lp.add_row({blk.xj[b, t]: 1.0, **bus_terms[b]}, "<=", 0.0,
                           name=f"charge_bus.{b}.t{t}", slot=t, kind="charge_bus", **tags)
    return blk


def decode_flows(network, pathsets, blk: TrafficBlock, x, slots) -> FlowPattern:
    slots = list(slots)
    T = len(slots)
    link_flows = np.zeros((len(network.links), T))
    for k, ln in enumerate(network.links):
        for i, t in enumerate(slots):
            link_flows[k, i] = x[blk.xl[ln.id, t]]
    path_flows = {}
    for ps in pathsets:
        arr = np.zeros((len(ps.paths), T))
        for p in range(len(ps.paths)):
            for i, t in enumerate(slots):
                arr[p, i] = x[blk.f[ps.od.key, p, t]]
        path_flows[ps.od.key] = arr
    charging = {b: np.array([x[blk.xj[b, t]] for t in slots]) for b in network.charging_buses}
    queue = None
    if blk.queue:
        queue = np.array([[x[blk.queue[ln.id, t]] for t in slots] for ln in network.links])
    return FlowPattern(path_flows, link_flows, charging, [ln.id for ln in network.links], queue=queue)


def solve_ue(network: TransportNetwork, pathsets: list[PathSet], prices, e, omega: float,
             H: int = 5, demand=None, slots=None, gap: float = 1e-9, queues: bool | None = None) -> FlowPattern:
    """Equilibrium assignment at fixed charging prices, slot by slot.

    Minimizes the linearized system travel-plus-charging cost over the
    equilibrium rows; the rows alone pin the link flows. With ``queues=None``
    a slot whose plain equilibrium is infeasible (a link must run full) is
    re-solved with queueing delays.
    """
    pwl = linearize_bpr(network, H)
    if slots is None:
        first = pathsets[0].od if demand is None else next(iter(demand.values()))
        n = len(first.demand) if demand is None else len(np.atleast_1d(first))
        slots = range(n)
    slots = list(slots)
    link_flows = np.zeros((len(network.links), len(slots)))
    path_flows = {ps.od.key: np.zeros((len(ps.paths), len(slots))) for ps in pathsets}
    charging = {b: np.zeros(len(slots)) for b in network.charging_buses}
    queue = np.zeros_like(link_flows)
    total = 0.0
    for i, t in enumerate(slots):
        for with_queues in ([False, True] if queues is None else [queues]):
            lp = LinearProgram(f"ue_t{t}")
            blk = ue_constraints(lp, network, pathsets, [t], pwl, prices, e, omega, demand=demand, queues=with_queues)
            for c, a in blk.time_cost.items():
                lp.add_obj(c, a)
            e_t = _slot_value(e, t)
            for b in network.charging_buses:
                lp.add_obj(blk.xj[b, t], _price(prices, b, t) * e_t * network.base)
            res = solve_mip(lp, gap=gap, polish=True)
            if res.status != Status.INFEASIBLE:
                break
        if res.status != Status.OPTIMAL:
            raise Infeasible(f"equilibrium assignment in slot {t} is {res.status}")
        fp = decode_flows(network, pathsets, blk, res.x, [t])
        link_flows[:, i] = fp.link_flows[:, 0]
        if fp.queue is not None:
            queue[:, i] = fp.queue[:, 0]
        for k in path_flows:
            path_flows[k][:, i] = fp.path_flows[k][:, 0]
        for b in charging:
            charging[b][i] = fp.charging[b][0]
        total += res.objective
    return FlowPattern(path_flows, link_flows, charging, [ln.id for ln in network.links], total, queue)
