import os

import pytest

from crackfield import cli
from crackfield.postproc import read_study_csv

SMALL = "K = 5\nn0 = 10\nband_h = 0.5\n"


def _cfg(tmp_path, text, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_solve_writes_artifacts(tmp_path, capsys):
    out = tmp_path / "out"
    code = cli.main(["solve", "--config", _cfg(tmp_path, SMALL), "--out", str(out), "--threads", "1"])
    assert code == cli.EXIT_OK
    names = set(os.listdir(out))
    assert {"summary.txt", "solve.csv", "cod_profile.csv", "solution.vtk", "tcv.png", "cod_profile.png"} <= names
    summary = (out / "summary.txt").read_text()
    assert "converged: yes" in summary and "[cod_profile]" in summary
    recs = read_study_csv(str(out / "solve.csv"))
    assert len(recs) == 1 and recs[0].tcv > 0
    assert "wrote" in capsys.readouterr().out


def test_zero_pressure_gives_zero_volume(tmp_path):
    out = tmp_path / "out"
    code = cli.main(["solve", "--config", _cfg(tmp_path, SMALL + "material.p = 0\nvtk = false\n"),
                     "--out", str(out), "--no-figures"])
    assert code == cli.EXIT_OK
    rec = read_study_csv(str(out / "solve.csv"))[0]
    assert rec.tcv == 0.0


def test_config_error_exit(tmp_path, capsys):
    code = cli.main(["solve", "--config", _cfg(tmp_path, "material.nu = 0.7\n"), "--out", str(tmp_path / "o")])
    assert code == cli.EXIT_CONFIG
    err = capsys.readouterr().err
    assert "line 1" in err and "material.nu" in err
    assert not (tmp_path / "o").exists()


def test_bad_thread_count(tmp_path):
    code = cli.main(["solve", "--config", _cfg(tmp_path, SMALL), "--threads", "0"])
    assert code == cli.EXIT_CONFIG


def test_missing_config_is_io_error(tmp_path, capsys):
    code = cli.main(["solve", "--config", str(tmp_path / "nope.cfg")])
    assert code == cli.EXIT_IO
    assert "cannot read config" in capsys.readouterr().err


def test_unwritable_output_is_io_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code = cli.main(["solve", "--config", _cfg(tmp_path, SMALL), "--out", str(blocker / "sub"), "--no-figures"])
    assert code == cli.EXIT_IO


def test_nonconvergence_exit(tmp_path):
    text = SMALL + "solver.newton_max = 1\nvtk = false\n"
    code = cli.main(["solve", "--config", _cfg(tmp_path, text), "--out", str(tmp_path / "o"), "--no-figures"])
    assert code == cli.EXIT_NONCONVERGED
    # partial results are still written
    assert (tmp_path / "o" / "summary.txt").exists()


def test_dump_matrices(tmp_path):
    out = tmp_path / "out"
    code = cli.main(["solve", "--config", _cfg(tmp_path, SMALL + "vtk = false\n"), "--out", str(out),
                     "--dump-matrices", "--no-figures"])
    assert code == cli.EXIT_OK
    mats = [f for f in os.listdir(out / "matrices") if f.endswith(".mtx")]
    assert mats
    head = (out / "matrices" / sorted(mats)[0]).read_text().splitlines()[0]
    assert head.startswith("%%MatrixMarket matrix coordinate real")


def test_runs_are_deterministic(tmp_path):
    texts = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert cli.main(["solve", "--config", _cfg(tmp_path, SMALL), "--out", str(out)]) == cli.EXIT_OK
        texts.append({f: (out / f).read_bytes() for f in sorted(os.listdir(out))})
    assert texts[0].keys() == texts[1].keys()
    for f in texts[0]:
        assert texts[0][f] == texts[1][f], f


def test_unknown_command_rejected():
    with pytest.raises(SystemExit) as info:
        cli.main(["explode", "--config", "x"])
    assert info.value.code == 2
