import csv
import json
import math

import pytest

from ptdro.config import load_config
from ptdro.pipeline import run
from ptdro.report import SCHEDULE_COLUMNS, TRACE_COLUMNS, emit_report, read_document, to_document, verify


@pytest.fixture(scope="module")
def dm_report():
    return run(load_config("desk"), "dm")


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def same_numbers(a, b):
    if isinstance(a, dict):
        return a.keys() == b.keys() and all(same_numbers(a[k], b[k]) for k in a)
    if isinstance(a, (list, tuple)):
        return len(a) == len(b) and all(same_numbers(x, y) for x, y in zip(a, b))
    if isinstance(a, float):
        return a == b or (math.isnan(a) and math.isnan(b))
    return a == b


def test_document_round_trip_is_bit_exact(dm_report, tmp_path):
    emit_report(dm_report, tmp_path)
    back = read_document(tmp_path)
    assert same_numbers(json.loads(json.dumps(to_document(dm_report))), back)
    assert back["objective"] == dm_report.objective
    assert back["schedules"][0]["energy"] == dm_report.schedules[0]["energy"]


def test_schedule_table_shape(dm_report, tmp_path, desk_case):
    emit_report(dm_report, tmp_path, formats=("csv",))
    table = rows(tmp_path / "schedule.csv")
    assert tuple(table[0]) == SCHEDULE_COLUMNS
    assert len(table) - 1 == len(desk_case.mgs) * desk_case.T
    for r in table[1:]:
        for cell in r[3:]:
            assert len(cell.split(".")[1]) == 6
    assert not (tmp_path / "report.json").exists()


def test_deterministic_run_has_header_only_trace(dm_report, tmp_path):
    emit_report(dm_report, tmp_path)
    assert rows(tmp_path / "trace.csv") == [list(TRACE_COLUMNS)]


def test_breakdown_table_sums_to_objective(dm_report, tmp_path):
    emit_report(dm_report, tmp_path)
    table = {r[0]: float(r[1]) for r in rows(tmp_path / "breakdown.csv")[1:]}
    total = table.pop("objective")
    assert sum(table.values()) == pytest.approx(total, abs=1e-5)


def test_link_and_path_tables(dm_report, tmp_path, desk_case):
    emit_report(dm_report, tmp_path)
    links = rows(tmp_path / "links.csv")
    assert len(links) - 1 == len(desk_case.network.links) * desk_case.T
    paths = rows(tmp_path / "paths.csv")
    assert len(paths) - 1 == sum(len(ps.paths) for ps in desk_case.pathsets) * desk_case.T


def test_verify_accepts_own_report_and_catches_edits(dm_report, tmp_path, desk_case):
    emit_report(dm_report, tmp_path)
    doc = read_document(tmp_path / "report.json")
    assert verify(doc, desk_case) == []
    doc["schedules"][0]["dg"][0] += 0.5     # off the minimum, so the cost moves
    issues = verify(doc, desk_case)
    assert any(i.startswith("dg") for i in issues)


def test_residuals_are_attached(dm_report):
    res = dm_report.residuals
    for key in ("balance", "soc_bounds", "soc_cycle", "exclusivity", "line_limits", "wardrop"):
        assert res[key] <= 1e-6


def test_kkt_subproblem_gives_the_same_dro_value():
    cfg = load_config("desk")
    a = run(cfg, "dro")
    cfg.run["subproblem"] = "kkt"
    cfg.run["big_m"] = 500.0
    b = run(cfg, "dro")
    assert math.isclose(a.objective, b.objective, rel_tol=1e-4)
