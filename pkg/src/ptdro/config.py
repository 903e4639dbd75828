"""Scenario files: YAML parsing, validation, default materialization and case building.

A scenario is one YAML document with sections ``slots``, ``tariff``,
``transport`` (optional), ``grid``, ``ambiguity`` and ``run``. See
``data/desk.yaml`` for a compact annotated example. Loading fills in every
default, so dumping the result with :func:`echo` and loading it again gives
the same materialized document.
"""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .assembler import Case
from .errors import ConfigValidationError, ParseError
from .grid import DGSpec, DRSpec, ESSpec, GridTopology, Line, MicrogridSpec, Tariff
from .transport import Link, ODPair, TransportNetwork, enumerate_paths

DATA_DIR = Path(__file__).parent / "data"
ENV_DIR = "PTDRO_CONFIG_DIR"

RUN_DEFAULTS = {
    "mode": "dro",
    "tolerance": 1e-4,
    "max_iters": 50,
    "bpr_segments": 5,
    "dg_segments": 4,
    "seed": 7,
    "threads": 1,
    "big_m": "auto",
    "subproblem": "vertex",
    "queues": False,
}
AMBIGUITY_DEFAULTS = {
    "shells": 5,
    "budgets": "auto",
    "probabilities": "auto",
    "history": None,
    "history_days": 365,
    "history_spread": 0.35,
}
MODES = ("dro", "ro", "dm", "traditional", "tap-only")


@dataclass
class ScenarioConfig:
    data: dict
    path: Path | None = None

    @property
    def name(self) -> str:
        return self.data["name"]

    @property
    def run(self) -> dict:
        return self.data["run"]

    @property
    def ambiguity(self) -> dict:
        return self.data["ambiguity"]


def resolve_path(path) -> Path:
    """Plain paths as given; bare names are looked up in $PTDRO_CONFIG_DIR, then in the shipped data."""
    p = Path(path)
    if p.exists():
        return p
    candidates = []
    if os.environ.get(ENV_DIR):
        candidates.append(Path(os.environ[ENV_DIR]))
    candidates.append(DATA_DIR)
    for d in candidates:
        for name in (p.name, p.name + ".yaml"):
            if (d / name).exists():
                return d / name
    raise FileNotFoundError(f"config {path} not found")


def parse_text(text: str) -> dict:
    try:
        doc = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        line = exc.problem_mark.line + 1 if exc.problem_mark is not None else None
        raise ParseError(str(exc.problem or exc), line) from exc
    if not isinstance(doc, dict):
        raise ParseError("top level must be a mapping", 1)
    return doc


def load_config(path) -> ScenarioConfig:
    p = resolve_path(path)
    return ScenarioConfig(materialize(parse_text(p.read_text())), p)


def loads_config(text: str) -> ScenarioConfig:
    return ScenarioConfig(materialize(parse_text(text)))


def echo(cfg: ScenarioConfig) -> str:
    return yaml.safe_dump(cfg.data, sort_keys=False, default_flow_style=None, width=120)


def _num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _profile(value, T, where, problems, positive=False):
    """Scalar broadcast or a list of T numbers; returns a list of floats."""
    if _num(value):
        out = [float(value)] * T
    elif isinstance(value, list) and all(_num(v) for v in value):
        if len(value) != T:
            problems.append(f"{where}: expected {T} entries, got {len(value)}")
            return [0.0] * T
        out = [float(v) for v in value]
    else:
        problems.append(f"{where}: expected a number or a list of {T} numbers")
        return [0.0] * T
    if any(v < 0 for v in out):
        problems.append(f"{where}: values must be non-negative")
    if positive and any(v <= 0 for v in out):
        problems.append(f"{where}: values must be positive")
    return out


def _require(d, key, where, problems, kind=None):
    if not isinstance(d, dict) or key not in d:
        problems.append(f"{where}: missing field '{key}'")
        return None
    v = d[key]
    if kind == "num" and not _num(v):
        problems.append(f"{where}: field '{key}' must be a number")
        return None
    return v


def materialize(raw: dict) -> dict:
    """Validate ``raw`` and return it with every default filled in.

    Every violation is collected before raising, so one run reports all of them.
    """
    raw = copy.deepcopy(raw)
    problems: list[str] = []
    out: dict = {"name": str(raw.get("name", "scenario"))}
    T = raw.get("slots", 24)
    if not isinstance(T, int) or T < 1:
        problems.append("slots: must be a positive integer")
        T = 24
    out["slots"] = T

    tariff = raw.get("tariff") or {}
    price = _profile(_require(tariff, "price", "tariff", problems) or 0.0, T, "tariff.price", problems)
    out["tariff"] = {
        "price": price,
        "charge_energy": _profile(tariff.get("charge_energy", 0.015), T, "tariff.charge_energy", problems, True),
        "omega": float(tariff.get("omega", 10.0)),
        "sell_margin": float(tariff.get("sell_margin", 1e-3)),
    }

    mg_ids = set()
    grid = raw.get("grid")
    if not isinstance(grid, dict):
        problems.append("grid: section missing")
        grid = {}
    out["grid"] = _grid_section(grid, T, problems, mg_ids)

    tr = raw.get("transport")
    out["transport"] = None if tr is None else _transport_section(tr, T, problems, mg_ids)

    amb = {**AMBIGUITY_DEFAULTS, **(raw.get("ambiguity") or {})}
    if not isinstance(amb["shells"], int) or amb["shells"] < 1:
        problems.append("ambiguity.shells: must be a positive integer")
    for key in ("budgets", "probabilities"):
        v = amb[key]
        if not (v == "auto" or (key == "probabilities" and v == "history") or isinstance(v, list)):
            problems.append(f"ambiguity.{key}: 'auto' or a table")
    if amb["probabilities"] == "history" and not amb["history"]:
        problems.append("ambiguity.history: a file is required when probabilities = history")
    out["ambiguity"] = amb

    run = {**RUN_DEFAULTS, **(raw.get("run") or {})}
    if run["mode"] not in MODES:
        problems.append(f"run.mode: one of {', '.join(MODES)}")
    if not (_num(run["tolerance"]) and run["tolerance"] > 0):
        problems.append("run.tolerance: must be positive")
    for key in ("max_iters", "bpr_segments", "dg_segments", "threads"):
        if not isinstance(run[key], int) or run[key] < 1:
            problems.append(f"run.{key}: must be a positive integer")
    if run["subproblem"] not in ("vertex", "kkt"):
        problems.append("run.subproblem: vertex or kkt")
    if not (run["big_m"] == "auto" or (_num(run["big_m"]) and run["big_m"] > 0)):
        problems.append("run.big_m: 'auto' or a positive number")
    if not isinstance(run["queues"], bool):
        problems.append("run.queues: true or false")
    run["tolerance"] = float(run["tolerance"]) if _num(run["tolerance"]) else run["tolerance"]
    out["run"] = run

    unknown = set(raw) - {"name", "slots", "tariff", "grid", "transport", "ambiguity", "run"}
    for k in sorted(unknown):
        problems.append(f"unknown section '{k}'")
    if problems:
        raise ConfigValidationError(problems)
    return out


def _grid_section(grid, T, problems, mg_ids) -> dict:
    buses = grid.get("buses")
    if not (isinstance(buses, list) and buses):
        problems.append("grid.buses: non-empty list required")
        buses = []
    lines = []
    for i, ln in enumerate(grid.get("lines") or []):
        where = f"grid.lines[{i}]"
        rec = {}
        for key in ("from", "to"):
            v = _require(ln, key, where, problems)
            if v is not None and v not in buses:
                problems.append(f"{where}: bus {v} is not in grid.buses")
            rec[key] = v
        for key in ("b", "fmax"):
            v = _require(ln, key, where, problems, "num")
            if v is not None and v <= 0:
                problems.append(f"{where}: '{key}' must be positive")
            rec[key] = None if v is None else float(v)
        lines.append(rec)
    types = grid.get("device_types") or {}
    dg_types = types.get("dg") or {}
    es_types = types.get("es") or {}
    mgs = []
    for i, mg in enumerate(grid.get("microgrids") or []):
        where = f"grid.microgrids[{i}]"
        mid = _require(mg, "id", where, problems)
        bus = _require(mg, "bus", where, problems)
        if mid in mg_ids:
            problems.append(f"{where}: duplicate microgrid id {mid}")
        mg_ids.add(mid)
        if bus is not None and bus not in buses:
            problems.append(f"{where}: bus {bus} is not in grid.buses")
        dg = _device(mg.get("dg"), dg_types, ("pmin", "pmax", "a", "b"), {"c": 0.0}, f"{where}.dg", problems)
        es = _device(mg.get("es"), es_types, ("price", "pmax", "emin", "emax", "e0"), {"eta_c": 0.95, "eta_d": 0.95},
                     f"{where}.es", problems)
        pv = _profile(mg.get("pv", 0.0), T, f"{where}.pv", problems)
        pv_dev = mg.get("pv_dev", 0.15)
        if _num(pv_dev):
            pv_de = [float(pv_dev) * p for p in pv]
        else:
            pv_de = _profile(pv_dev, T, f"{where}.pv_dev", problems)
        dr = mg.get("dr") or {}
        expected = _profile(_require(dr, "expected", f"{where}.dr", problems) or 0.0, T, f"{where}.dr.expected",
                            problems)
        flex = dr.get("flex", 0.2)
        dmin = _profile(dr["min"], T, f"{where}.dr.min", problems) if "min" in dr else [(1 - flex) * v for v in expected]
        dmax = _profile(dr["max"], T, f"{where}.dr.max", problems) if "max" in dr else [(1 + flex) * v for v in expected]
        total = float(dr.get("total", sum(expected)))
        mgs.append({
            "id": mid, "bus": bus, "pg_max": float(mg.get("pg_max", 30.0)), "dg": dg, "es": es,
            "pv": pv, "pv_de": pv_de,
            "dr": {"price": float(dr.get("price", 50.0)), "expected": expected, "min": dmin, "max": dmax,
                   "total": total},
        })
    slack = grid.get("slack", mgs[0]["bus"] if mgs else None)
    if slack not in buses:
        problems.append(f"grid.slack: bus {slack} is not in grid.buses")
    return {"buses": buses, "slack": slack, "kappa_up": float(grid.get("kappa_up", 1.5)),
            "kappa_dn": float(grid.get("kappa_dn", 0.5)), "lines": lines, "microgrids": mgs}


def _device(spec, types, required, defaults, where, problems) -> dict:
    if isinstance(spec, str):
        if spec not in types:
            problems.append(f"{where}: unknown device type '{spec}'")
            return {}
        spec = types[spec]
    if not isinstance(spec, dict):
        problems.append(f"{where}: device type name or parameter mapping required")
        return {}
    out = {}
    for key in required:
        v = _require(spec, key, where, problems, "num")
        out[key] = None if v is None else float(v)
    for key, v in defaults.items():
        out[key] = float(spec.get(key, v))
    return out


def _transport_section(tr, T, problems, mg_ids) -> dict:
    nodes = tr.get("nodes")
    if not (isinstance(nodes, list) and nodes):
        problems.append("transport.nodes: non-empty list required")
        nodes = []
    links = []
    seen = set()
    for i, ln in enumerate(tr.get("links") or []):
        lid = ln.get("id", i + 1) if isinstance(ln, dict) else i + 1
        where = f"transport link {lid}"
        if lid in seen:
            problems.append(f"{where}: duplicate id")
        seen.add(lid)
        rec = {"id": lid}
        for key in ("tail", "head"):
            v = _require(ln, key, where, problems)
            if v is not None and v not in nodes:
                problems.append(f"{where}: node {v} is not in transport.nodes")
            rec[key] = v
        for key in ("t0", "capacity"):
            v = _require(ln, key, where, problems, "num")
            if v is not None and v <= 0:
                problems.append(f"{where}: '{key}' must be positive")
            rec[key] = None if v is None else float(v)
        mg = ln.get("mg") if isinstance(ln, dict) else None
        if mg is not None and mg not in mg_ids:
            problems.append(f"{where}: charging station references unknown microgrid {mg}")
        rec["mg"] = mg
        links.append(rec)
    width = tr.get("box_width", 0.1)
    if not (_num(width) and 0 <= width < 1):
        problems.append(f"transport.box_width: {width} outside [0, 1)")
    ods = []
    for i, od in enumerate(tr.get("od_pairs") or []):
        where = f"transport.od_pairs[{i}]"
        o = _require(od, "origin", where, problems)
        d = _require(od, "destination", where, problems)
        for v in (o, d):
            if v is not None and v not in nodes:
                problems.append(f"{where}: node {v} is not in transport.nodes")
        ods.append({"origin": o, "destination": d,
                    "demand": _profile(_require(od, "demand", where, problems) or 0.0, T, f"{where}.demand", problems)})
    cap = tr.get("path_cap", 16)
    if not isinstance(cap, int) or cap < 1:
        problems.append("transport.path_cap: must be a positive integer")
    return {"base": float(tr.get("base", 100.0)), "box_width": float(width) if _num(width) else width,
            "path_cap": cap, "nodes": nodes, "links": links, "od_pairs": ods}


def build_case(cfg: ScenarioConfig, bpr_segments: int | None = None, dg_segments: int | None = None) -> Case:
    d = cfg.data
    g = d["grid"]
    topo = GridTopology(g["buses"], [Line(ln["from"], ln["to"], ln["b"], ln["fmax"]) for ln in g["lines"]], g["slack"])
    mgs = []
    for m in g["microgrids"]:
        dr = m["dr"]
        mgs.append(MicrogridSpec(
            m["id"], m["bus"], DGSpec(**m["dg"]), ESSpec(**m["es"]),
            DRSpec(dr["price"], dr["expected"], dr["min"], dr["max"], dr["total"]),
            np.array(m["pv"]), np.array(m["pv_de"]), m["pg_max"]))
    tariff = Tariff(np.array(d["tariff"]["price"]), np.array(d["tariff"]["charge_energy"]), d["tariff"]["omega"],
                    d["tariff"]["sell_margin"])
    network, pathsets = None, []
    tr = d["transport"]
    if tr is not None:
        network = TransportNetwork(tr["nodes"], [Link(ln["id"], ln["tail"], ln["head"], ln["t0"], ln["capacity"],
                                                      ln["mg"]) for ln in tr["links"]], tr["base"])
        for od in tr["od_pairs"]:
            pair = ODPair(od["origin"], od["destination"], np.array(od["demand"]))
            pathsets.append(enumerate_paths(network, pair, tr["path_cap"]))
    run = d["run"]
    return Case(topo, mgs, tariff, network, pathsets,
                H=bpr_segments or run["bpr_segments"], K=dg_segments or run["dg_segments"],
                kappa_up=g["kappa_up"], kappa_dn=g["kappa_dn"], name=d["name"], queues=run["queues"])
