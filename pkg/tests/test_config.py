import pytest

from crackfield.config import ConfigError, RunConfig, dump_config, load_config, parse_config


def test_defaults_validate():
    cfg = parse_config("")
    assert cfg == RunConfig()
    assert cfg.solver.preconditioner == "exact"
    assert cfg.study.resolutions == (16, 32, 64, 128)


def test_values_and_comments():
    cfg = parse_config(
        "# header\n"
        "dimension = 3   # trailing\n"
        "K = 7.5\n"
        "vtk = no\n"
        "material.p = 2e-3\n"
        "solver.preconditioner = amg\n"
        "study.eps_list = 0.4; 0.2, 0.1\n"
    )
    assert cfg.dimension == 3 and cfg.K == 7.5 and cfg.vtk is False
    assert cfg.material.p == 2e-3
    assert cfg.solver.preconditioner == "amg"
    assert cfg.study.eps_list == (0.4, 0.2, 0.1)


def test_round_trip():
    cfg = parse_config("K = 12.25\nmaterial.nu = 0.3\nstudy.domains = 5, 10\nsolver.damping = true\n")
    again = parse_config(dump_config(cfg))
    assert again == cfg
    assert dump_config(again) == dump_config(cfg)


@pytest.mark.parametrize(
    "text, line, fragment",
    [
        ("K = 5\nK = 6\n", 2, "duplicate key K"),
        ("K = 5\n\nfoo = 1\n", 3, "unknown key"),
        ("bogus.x = 1\n", 1, "unknown section"),
        ("material.bogus = 1\n", 1, "unknown key"),
        ("n0 = ten\n", 1, "invalid value"),
        ("K = inf\n", 1, "invalid value"),
        ("just words\n", 1, "expected 'key = value'"),
        ("# c\nmaterial.nu = 0.7\n", 2, "material.nu"),
        ("solver.amg_smoother = ilu\n", 1, "solver.amg_smoother"),
        ("study.resolutions = 16, 48\n", 1, "double"),
    ],
)
def test_errors_carry_line_numbers(text, line, fragment):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.line == line
    assert fragment in str(info.value)
    assert str(info.value).startswith(f"line {line}:")


def test_cross_field_error_without_line():
    cfg = RunConfig()
    cfg.adapt.theta = 2.0
    with pytest.raises(ConfigError, match="adapt.theta"):
        cfg.validate()


def test_conversion_to_model_objects():
    cfg = parse_config("eps_mode = fixed\neps_fixed = 0.25\nsolver.amg_sweeps = 2\n")
    mat = cfg.material_model()
    assert mat.eps_mode == "fixed" and mat.eps_fixed == 0.25
    opt = cfg.solver_options()
    assert opt.amg_options()["sweeps"] == 2
    assert cfg.policy().theta == cfg.adapt.theta


def test_load_config(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("K = 9\n")
    assert load_config(str(p)).K == 9.0
    with pytest.raises(OSError, match="cannot read config"):
        load_config(str(tmp_path / "missing.cfg"))


def test_shipped_configs_parse():
    import glob
    import os

    root = os.path.join(os.path.dirname(__file__), "..", "configs")
    paths = sorted(glob.glob(os.path.join(root, "*.cfg")))
    assert len(paths) == 5
    for p in paths:
        load_config(p)
