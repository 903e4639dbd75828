"""Uncertainty sets: demand and PV boxes, charging-load boxes and nested shells.

The normalized deviation vector of one slot is
sigma = (alpha_1..alpha_N, beta_1..beta_N) where alpha_i scales the
charging-energy deviation of MG i and beta_i its PV deviation.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .errors import (BudgetOrder, DomainError, EmptyHistory, ProbabilityOrder, TerminalProbability,
                     ValidationFailure)
from .transport import ODPair, TransportNetwork, _price, solve_ue

log = logging.getLogger(__name__)


@dataclass
class BoxSet:
    keys: list
    lower: np.ndarray   # (len(keys), T)
    upper: np.ndarray

    def __post_init__(self):
        self.lower = np.atleast_2d(np.asarray(self.lower, float))
        self.upper = np.atleast_2d(np.asarray(self.upper, float))
        if self.lower.shape != self.upper.shape:
            raise ValidationFailure("box bounds differ in shape")
        if np.any(self.lower > self.upper + 1e-12):
            raise ValidationFailure("box lower bound above upper bound")

    def bounds(self, key):
        i = self.keys.index(key)
        return self.lower[i], self.upper[i]


def demand_box(od_pairs: list[ODPair], width: float) -> BoxSet:
    if not 0 <= width < 1:
        raise ValidationFailure(f"box width {width} outside [0, 1)")
    q = np.array([od.demand for od in od_pairs], float)
    return BoxSet([od.key for od in od_pairs], q * (1 - width), q * (1 + width))


def designated_charging(network: TransportNetwork, pathsets, path_flows: dict, prices, T: int) -> dict:
    """EV counts per station when every traveller charges at the cheapest
    station of its path, ties going to the first one met along the path."""
    out = {b: np.zeros(T) for b in network.charging_buses}
    for ps in pathsets:
        f = path_flows[ps.od.key]
        for p, path in enumerate(ps.paths):
            on_path = [network.link(i).bus for i in path if network.link(i).bus is not None]
            for t in range(T):
                best = min(on_path, key=lambda b: (_price(prices, b, t), on_path.index(b)))
                out[best][t] += f[p, t]
    return out


@dataclass
class LoadBoxes:
    path: dict          # od key -> (lower (P, T), upper (P, T))
    charging: BoxSet    # EV counts per station, p.u.
    energy: BoxSet      # charging energy per station, MWh
    nominal_energy: np.ndarray


def propagate_flow_box(network: TransportNetwork, pathsets, box: BoxSet, prices, e, omega: float, H: int = 5,
                       nominal=None) -> LoadBoxes:
    """Equilibria at the two demand extremes bound path flows, station counts and charging energy."""
    T = box.lower.shape[1]
    e = np.broadcast_to(np.asarray(e, float), (T,))
    hi = solve_ue(network, pathsets, prices, e, omega, H, demand={k: box.upper[i] for i, k in enumerate(box.keys)})
    lo = solve_ue(network, pathsets, prices, e, omega, H, demand={k: box.lower[i] for i, k in enumerate(box.keys)})
    if nominal is None:
        nominal = {ps.od.key: np.broadcast_to(ps.od.demand, (T,)) for ps in pathsets}
    mid = solve_ue(network, pathsets, prices, e, omega, H, demand=nominal)
    paths = {}
    for ps in pathsets:
        a, b = lo.path_flows[ps.od.key], hi.path_flows[ps.od.key]
        paths[ps.od.key] = (np.minimum(a, b), np.maximum(a, b))
    buses = network.charging_buses
    c_hi = designated_charging(network, pathsets, hi.path_flows, prices, T)
    c_lo = designated_charging(network, pathsets, lo.path_flows, prices, T)
    c_mid = designated_charging(network, pathsets, mid.path_flows, prices, T)
    upper = np.array([c_hi[b] for b in buses])
    lower = np.array([c_lo[b] for b in buses])
    if np.any(upper < lower - 1e-9):
        log.info("charging bounds inverted for stations %s; swapped",
                 [b for b, u, l in zip(buses, upper, lower) if np.any(u < l - 1e-9)])
    lo_c, hi_c = np.minimum(lower, upper), np.maximum(lower, upper)
    mid_c = np.array([c_mid[b] for b in buses])
    lo_c, hi_c = np.minimum(lo_c, mid_c), np.maximum(hi_c, mid_c)
    scale = network.base * e
    return LoadBoxes(paths, BoxSet(list(buses), lo_c, hi_c), BoxSet(list(buses), lo_c * scale, hi_c * scale),
                     mid_c * scale)


def deviations(predicted, lower, upper) -> np.ndarray:
    """Largest one-sided gap between the prediction and the box."""
    predicted = np.asarray(predicted, float)
    return np.maximum(np.maximum(np.asarray(upper, float) - predicted, predicted - np.asarray(lower, float)), 0.0)


@dataclass
class AmbiguitySet:
    budgets: np.ndarray        # (T, M0)
    probabilities: np.ndarray  # (T, M0)
    dim: int
    e_de: np.ndarray           # (n_mg, T) MW
    pv_de: np.ndarray          # (n_mg, T) MW

    @property
    def M0(self) -> int:
        return self.budgets.shape[1]

    @property
    def T(self) -> int:
        return self.budgets.shape[0]

    def increments(self) -> np.ndarray:
        """P_m - P_{m-1} with P_0 = 0."""
        return np.diff(np.concatenate([np.zeros((self.T, 1)), self.probabilities], axis=1), axis=1)

    def contains(self, t: int, m: int, sigma) -> bool:
        sigma = np.asarray(sigma, float)
        return bool(np.all(np.abs(sigma) <= 1 + 1e-12) and np.abs(sigma).sum() <= self.budgets[t, m] + 1e-9)


def default_budgets(dim: int, M0: int, T: int) -> np.ndarray:
    return np.tile(np.arange(1, M0 + 1) * dim / M0, (T, 1))


def build_ambiguity(e_de, pv_de, budgets=None, probabilities=None, M0: int | None = None) -> AmbiguitySet:
    e_de = np.atleast_2d(np.asarray(e_de, float))
    pv_de = np.atleast_2d(np.asarray(pv_de, float))
    if e_de.shape != pv_de.shape:
        raise ValidationFailure("charging and PV deviation tables differ in shape")
    if np.any(e_de < 0) or np.any(pv_de < 0):
        raise ValidationFailure("deviations must be non-negative")
    n, T = e_de.shape
    dim = 2 * n
    if budgets is None:
        if M0 is None:
            raise ValidationFailure("either budgets or a shell count is required")
        budgets = default_budgets(dim, M0, T)
    budgets = np.asarray(budgets, float)
    if budgets.ndim == 1:
        budgets = np.tile(budgets, (T, 1))
    M0 = budgets.shape[1]
    if probabilities is None:
        probabilities = np.tile(np.arange(1, M0 + 1) / M0, (T, 1))
    probabilities = np.asarray(probabilities, float)
    if probabilities.ndim == 1:
        probabilities = np.tile(probabilities, (T, 1))
    if budgets.shape != (T, M0) or probabilities.shape != (T, M0):
        raise ValidationFailure(f"budget/probability tables must be {T} x {M0}")
    if np.any(budgets < 0) or np.any(budgets > dim + 1e-12):
        raise BudgetOrder(f"budgets must lie in [0, {dim}]")
    all_zero = np.all(budgets == 0)
    if not all_zero and np.any(np.diff(budgets, axis=1) <= 0):
        raise BudgetOrder("budgets must increase strictly with the shell index")
    if np.any(probabilities < 0) or np.any(probabilities > 1):
        raise ProbabilityOrder("probabilities must lie in [0, 1]")
    if np.any(np.diff(probabilities, axis=1) < 0):
        raise ProbabilityOrder("probabilities must be non-decreasing with the shell index")
    if np.any(np.abs(probabilities[:, -1] - 1.0) > 1e-12):
        raise TerminalProbability("the outermost shell must carry probability 1")
    return AmbiguitySet(budgets, probabilities, dim, e_de, pv_de)


def estimate_probabilities(samples, budgets) -> np.ndarray:
    """Fraction of each slot's samples inside each shell; the last shell gets 1.

    ``samples[t]`` is an (S, dim) array of normalized deviations.
    """
    budgets = np.asarray(budgets, float)
    T, M0 = budgets.shape
    if len(samples) != T:
        raise EmptyHistory(f"history covers {len(samples)} slots, expected {T}")
    out = np.zeros((T, M0))
    for t in range(T):
        s = np.atleast_2d(np.asarray(samples[t], float))
        if s.size == 0:
            raise EmptyHistory(f"no history samples for slot {t + 1}")
        if np.any(np.abs(s) > 1 + 1e-12):
            raise DomainError(f"slot {t + 1}: normalized samples outside [-1, 1]")
        norms = np.abs(s).sum(axis=1)
        out[t] = [(norms <= g + 1e-12).mean() for g in budgets[t]]
    out = np.maximum.accumulate(out, axis=1)
    out[:, -1] = 1.0
    return out


def synthetic_history(rng: np.random.Generator, T: int, dim: int, days: int = 365, spread: float = 0.35):
    """Normalized deviations drawn from a clipped zero-mean normal, one list entry per slot."""
    return [np.clip(rng.normal(0.0, spread, size=(days, dim)), -1.0, 1.0) for _ in range(T)]


def read_history(path, mg_names, predicted_charge, predicted_pv, e_de, pv_de):
    """Normalize a CSV of realized values (columns day, slot, charge_<mg>, pv_<mg>).

    Slots in the file are 1-based. Components with zero deviation map to 0.
    """
    T = e_de.shape[1]
    rows = [[] for _ in range(T)]
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for rec in reader:
            t = int(rec["slot"]) - 1
            if not 0 <= t < T:
                raise ValidationFailure(f"history slot {t + 1} outside 1..{T}")
            alpha = [_norm(float(rec[f"charge_{m}"]) - predicted_charge[i, t], e_de[i, t]) for i, m in enumerate(mg_names)]
            beta = [_norm(float(rec[f"pv_{m}"]) - predicted_pv[i, t], pv_de[i, t]) for i, m in enumerate(mg_names)]
            rows[t].append(alpha + beta)
    return [np.array(r, float).reshape(-1, 2 * len(mg_names)) for r in rows]


def _norm(gap: float, dev: float) -> float:
    if dev <= 0:
        return 0.0
    return float(np.clip(gap / dev, -1.0, 1.0))

