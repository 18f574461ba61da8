import math
import os

import pytest

from crackfield.config import parse_config
from crackfield.postproc import LevelRecord
from crackfield.studies import Check, StudyResult, amg_iteration_trend, report, run_study


def test_check_line():
    assert Check("rate", 1.75, ">= 1.7", True).line() == "PASS  rate: 1.75 (target >= 1.7)"
    assert Check("rate", 1.2, ">= 1.7", False).line().startswith("FAIL  rate")


def test_report_layout():
    res = StudyResult("demo")
    res.series["a"] = [LevelRecord(k, 100 * 2**k, 0.5 / 2**k, 0.25 / 2**k, 1.0 + 0.5**k, 0.1, 3, 4.5)
                       for k in range(3)]
    res.tables["t"] = [{"K": 5.0, "name": "x"}]
    res.metrics["slope"] = 1.0
    res.checks.append(Check("c", 1.0, "1", True))
    text = report(res)
    assert text.startswith("study: demo\nconverged: yes\n")
    for section in ("[a]", "[t]", "[metrics]", "[checks]"):
        assert section in text
    # differences 0.5, 0.25 give order 1 and limit 1
    assert "richardson: order=1.00 limit=1.000000e+00" in text
    assert res.passed


def test_report_names_failed_extrapolation():
    res = StudyResult("demo")
    res.series["flat"] = [LevelRecord(k, 10, 1.0, 1.0, 2.0, 0.0, 1, 1.0) for k in range(3)]
    assert "richardson: differences are zero" in report(res)


def test_unknown_study(tmp_path):
    with pytest.raises(ValueError, match="unknown study"):
        run_study("nope", parse_config(""), str(tmp_path))


def test_small_eps_study(tmp_path):
    cfg = parse_config("K = 5\nstudy.eps_list = 1.0, 0.5, 0.25\nstudy.eps_cycles = 0\n")
    res = run_study("eps_convergence", cfg, str(tmp_path), figures=False)
    assert res.converged
    rows = res.tables["eps"]
    assert [r["eps"] for r in rows] == [1.0, 0.5, 0.25]
    for eps, recs in zip([1.0, 0.5, 0.25], res.series.values()):
        assert math.isclose(recs[0].eps, eps)
    assert "slope" in res.metrics and len(res.checks) == 1
    assert os.path.exists(tmp_path / "eps_summary.csv")


def test_small_domain_study(tmp_path):
    cfg = parse_config("n0 = 10\ncycles = 2\nband_h = 0.5\nstudy.domains = 5\n")
    res = run_study("domain_study", cfg, str(tmp_path))
    assert res.converged
    recs = res.series["domain_K5"]
    assert len(recs) == 3
    assert all(b.eps == pytest.approx(a.eps / 2) for a, b in zip(recs, recs[1:]))
    assert res.checks[0].name.startswith("domain K=5")
    assert os.path.exists(tmp_path / "domain_errors.png")


def test_small_cod_study(tmp_path):
    cfg = parse_config("band_h = 0.5\nstudy.cod_cycles = 2\nstudy.cod_uniform_levels = 2\n")
    res = run_study("cod_study", cfg, str(tmp_path), figures=False)
    assert res.converged
    assert len(res.series["cod_adaptive"]) == 3 and len(res.series["cod_uniform"]) == 2
    assert res.metrics["dof_budget"] == res.series["cod_adaptive"][-1].dofs
    assert {r["series"] for r in res.tables["cod"]} == {"adaptive", "uniform"}
    assert len(res.checks) == 2


def test_small_sneddon3d(tmp_path):
    cfg = parse_config("dimension = 3\nsolver.preconditioner = amg\nstudy.n0_3d = 4\nstudy.resolutions = 4, 8\n"
                       "study.K3d = 5\n")
    res = run_study("sneddon3d", cfg, str(tmp_path), figures=False)
    assert res.converged
    assert [r["resolution"] for r in res.tables["sneddon3d"]] == [4, 8]


def test_amg_trend_small():
    pairs = amg_iteration_trend(parse_config(""), [1, 2])
    assert [d for d, _ in pairs] == [1323, 5043]
    assert all(0 < it < 60 for _, it in pairs)
