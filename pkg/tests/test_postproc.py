import numpy as np
import pytest

from crackfield.adapt import seed_state
from crackfield.fem import build_dof_map, interpolate
from crackfield.mesh import DomainSpec, create_mesh, uniform_refine
from crackfield.model import Material
from crackfield.postproc import (
    CSV_HEADER, CodProfile, LevelRecord, compute_cod, compute_tcv, default_stations, read_study_csv,
    write_study_csv, write_vtk,
)
from crackfield.solver import solve_loading_sequence

from conftest import graded_mesh


@pytest.fixture(scope="module")
def solved():
    mesh = create_mesh(DomainSpec(2, 5.0, 10))
    uniform_refine(mesh, 2)
    dm = build_dof_map(mesh)
    mat = Material()
    state, reps = solve_loading_sequence(seed_state(mesh, dm, mat), mat, mesh)
    assert all(r.converged for r in reps)
    return mesh, dm, state


def test_tcv_of_linear_fields_is_exact(mesh2d):
    dm = build_dof_map(mesh2d)
    vec = interpolate(mesh2d, dm, u=lambda x: np.array([0.0, 0.3]), phi=lambda x: 2.0 * x[:, 1] - x[:, 0])
    # u . grad(phi) = 0.6 everywhere on (-2, 2)^2
    assert compute_tcv(mesh2d, dm, vec, signed=True) == pytest.approx(0.6 * 16.0, rel=1e-13)
    vec.u[:] *= -1
    assert compute_tcv(mesh2d, dm, vec) == pytest.approx(0.6 * 16.0, rel=1e-13)


def test_tcv_is_additive_over_cells(solved):
    mesh, dm, state = solved
    rows = np.arange(len(dm.cells))
    left, right = rows[rows % 3 == 0], rows[rows % 3 != 0]
    whole = compute_tcv(mesh, dm, state.vec, signed=True)
    parts = compute_tcv(mesh, dm, state.vec, left, signed=True) + compute_tcv(mesh, dm, state.vec, right,
                                                                             signed=True)
    assert parts == pytest.approx(whole, rel=1e-12)


def test_cod_integrates_to_tcv(solved):
    mesh, dm, state = solved
    st = np.linspace(-3.0, 3.0, 241)
    prof = compute_cod(mesh, dm, state.vec, stations=st)
    line = np.trapezoid(prof.openings, st)
    assert line == pytest.approx(compute_tcv(mesh, dm, state.vec), rel=0.02)


def test_cod_profile_shape(solved):
    mesh, dm, state = solved
    prof = compute_cod(mesh, dm, state.vec)
    assert np.array_equal(prof.stations, default_stations())
    center = prof.at(0.0)
    assert center > 0
    # symmetric mesh and load give a symmetric profile, largest at the center
    assert np.allclose(prof.openings, prof.openings[::-1], rtol=1e-6, atol=1e-12)
    assert np.argmax(prof.openings) == len(prof.stations) // 2
    assert prof.at(1.5) < 0.5 * center
    trace = compute_cod(mesh, dm, state.vec, stations=[0.0], method="displacement_trace")
    assert trace.openings[0] > 0
    with pytest.raises(ValueError):
        compute_cod(mesh, dm, state.vec, stations=[6.0])
    with pytest.raises(ValueError):
        compute_cod(mesh, dm, state.vec, method="other")


def test_cod_profile_interpolates():
    prof = CodProfile(np.array([0.0, 1.0]), np.array([2.0, 4.0]))
    assert prof.at(0.25) == pytest.approx(2.5)


def _read_vtk(path):
    lines = open(path).read().splitlines()
    assert lines[0] == "# vtk DataFile Version 3.0"
    assert lines[2:4] == ["ASCII", "DATASET UNSTRUCTURED_GRID"]
    n = int(lines[4].split()[1])
    pts = np.array([[float(v) for v in l.split()] for l in lines[5 : 5 + n]])
    return lines, pts


@pytest.mark.parametrize("dim", [2, 3])
def test_vtk_layout_and_round_trip(tmp_path, dim):
    mesh = graded_mesh(dim, n0=2, rounds=1)
    dm = build_dof_map(mesh)
    rng = np.random.default_rng(0)
    phi = rng.uniform(size=dm.n_vertices)
    path = write_vtk(str(tmp_path / "a.vtk"), mesh, dm, {"u": rng.normal(size=(dm.n_vertices, dim)), "phi": phi},
                     cell_fields={"level": mesh.level[dm.cells]})
    lines, pts = _read_vtk(path)
    assert np.array_equal(pts[:, :dim], dm.coords)
    nc = len(dm.cells)
    cells_at = lines.index(next(l for l in lines if l.startswith("CELLS")))
    assert lines[cells_at] == f"CELLS {nc} {nc * (2**dim + 1)}"
    types = lines[cells_at + nc + 2 : cells_at + 2 * nc + 2]
    assert set(types) == {"9" if dim == 2 else "12"}
    start = lines.index("SCALARS phi double 1") + 2
    back = np.array([float(v) for v in lines[start : start + dm.n_vertices]])
    assert np.array_equal(back, phi)
    assert f"CELL_DATA {nc}" in lines


def test_vtk_quad_is_counterclockwise(tmp_path):
    mesh = create_mesh(DomainSpec(2, 1.0, 1))
    dm = build_dof_map(mesh)
    lines, pts = _read_vtk(write_vtk(str(tmp_path / "q.vtk"), mesh, dm, {}))
    conn = [int(v) for v in lines[lines.index("CELLS 1 5") + 1].split()[1:]]
    p = pts[conn, :2]
    area = 0.5 * sum(p[i, 0] * p[(i + 1) % 4, 1] - p[(i + 1) % 4, 0] * p[i, 1] for i in range(4))
    assert area == pytest.approx(4.0)


def test_vtk_is_deterministic(tmp_path, solved):
    mesh, dm, state = solved
    a = write_vtk(str(tmp_path / "a.vtk"), mesh, dm, {"u": state.u, "phi": state.phi})
    b = write_vtk(str(tmp_path / "b.vtk"), mesh, dm, {"u": state.u, "phi": state.phi})
    assert open(a, "rb").read() == open(b, "rb").read()


def test_vtk_reports_unwritable_path(tmp_path, mesh2d):
    dm = build_dof_map(mesh2d)
    with pytest.raises(OSError):
        write_vtk(str(tmp_path / "missing" / "x.vtk"), mesh2d, dm, {})


def test_study_csv_round_trip(tmp_path):
    recs = [LevelRecord(k, 100 * 4**k, 0.5 / 2**k, 0.25 / 2**k, 6e-3 * (1 + 0.1 / 2**k), 0.1 / 2**k, 5 + k, 1.5)
            for k in (2, 0, 1)]
    path = write_study_csv(str(tmp_path / "s.csv"), recs)
    assert open(path).readline().strip().split(",") == CSV_HEADER
    back = read_study_csv(path)
    assert [r.level for r in back] == [0, 1, 2]
    for got, want in zip(back, sorted(recs, key=lambda r: r.level)):
        assert (got.level, got.dofs, got.newton_iters) == (want.level, want.dofs, want.newton_iters)
        assert np.allclose([got.eps, got.h_min, got.tcv, got.tcv_rel_err, got.gmres_mean],
                           [want.eps, want.h_min, want.tcv, want.tcv_rel_err, want.gmres_mean], rtol=1e-12, atol=0)
    with pytest.raises(ValueError):
        write_study_csv(str(tmp_path / "e.csv"), [])


@pytest.mark.parametrize("dim", [2, 3])
def test_cod_of_linear_fields_is_exact(dim):
    mesh = graded_mesh(dim, n0=2, rounds=1)
    dm = build_dof_map(mesh)
    c = np.zeros(dim)
    c[-1] = 0.4
    vec = interpolate(mesh, dm, u=lambda x: c, phi=lambda x: x[:, -1])
    # u . grad(phi) = 0.4 along every normal line of length 2K = 4
    prof = compute_cod(mesh, dm, vec, stations=[-2.0, -1.0, -0.3, 0.0, 0.77, 2.0])
    assert np.allclose(prof.openings, 1.6, rtol=1e-13)
