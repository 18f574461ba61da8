import numpy as np
import pytest
import scipy.io
import scipy.sparse as sp

from crackfield.fem import build_constraints, build_dof_map
from crackfield.linsolve import (
    BlockPreconditioner, BlockSystem, build_amg, dump_matrices, gmres, rigid_body_modes,
)
from crackfield.mesh import DomainSpec, create_mesh, refine
from crackfield.model import Assembler, FractureState, Material, assemble_jacobian, initial_crack
from crackfield.fem import zeros


def _sneddon_system(seed):
    """Random constrained Jacobian on a small crack mesh (N < 500)."""
    rng = np.random.default_rng(seed)
    mesh = create_mesh(DomainSpec(2, 2.0, 6))
    refine(mesh, rng.choice(mesh.active_ids, 3, replace=False))
    dm = build_dof_map(mesh)
    mat = Material()
    phi, phi_old = initial_crack(mesh, dm, mat)
    vec = zeros(dm)
    vec.values[: dm.n_u] = rng.normal(scale=1e-3, size=dm.n_u)
    vec.phi[:] = np.clip(phi + rng.uniform(0, 0.2, dm.n_phi), 0, 1)
    state = FractureState(dm, vec, phi_old)
    verts = np.flatnonzero(rng.uniform(size=dm.n_phi) < 0.2)
    cs = build_constraints(mesh, dm, active_set=(dm.n_u + verts, phi_old[verts]))
    S = assemble_jacobian(mesh, dm, cs, mat, state, phi_old, mat.epsilon(mesh), mat.kappa(mesh))
    return S, dm


@pytest.mark.parametrize("seed", range(20))
def test_gmres_exact_blocks_match_dense_solve(seed):
    S, dm = _sneddon_system(seed)
    assert S.shape[0] <= 500
    b = np.random.default_rng(seed).normal(size=S.shape[0])
    P = BlockPreconditioner.build(S, "exact")
    sol = gmres(S, b, P, rtol=1e-8)
    ref = np.linalg.solve(S.to_dense(), b)
    assert sol.converged
    assert np.linalg.norm(sol.x - ref) <= 1e-8 * np.linalg.norm(ref)


def test_gmres_unpreconditioned_and_restarted():
    rng = np.random.default_rng(0)
    A = sp.random(60, 60, density=0.1, random_state=1) + 10 * sp.identity(60)
    b = rng.normal(size=60)
    sol = gmres(A.tocsr(), b, rtol=1e-10, restart=5, max_iter=500)
    assert sol.converged
    assert np.linalg.norm(A @ sol.x - b) <= 1e-10 * np.linalg.norm(b) * 1.01
    zero = gmres(A.tocsr(), np.zeros(60))
    assert zero.iterations == 0 and zero.converged
    with pytest.raises(ValueError):
        gmres(A.tocsr(), b, rtol=0.0)


def test_gmres_stops_when_target_is_unattainable():
    # crack rows carry the kappa stiffness floor, so 1e-14 is out of reach
    S, _ = _sneddon_system(2)
    b = np.random.default_rng(2).normal(size=S.shape[0])
    sol = gmres(S, b, BlockPreconditioner.build(S, "exact"), rtol=1e-14, max_iter=1000)
    assert not sol.converged
    assert sol.stagnated and sol.iterations < 1000


def _laplacian_chain(n):
    return sp.diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1], format="csr")


def test_amg_preconditions_a_laplacian_chain():
    A = _laplacian_chain(64)
    h = build_amg(A)
    b = np.random.default_rng(0).normal(size=64)
    sol = gmres(A, b, h.vcycle, rtol=1e-8)
    assert sol.converged and sol.iterations <= 25
    assert np.allclose(sol.x, np.linalg.solve(A.toarray(), b), rtol=1e-6, atol=1e-8 * np.abs(sol.x).max())


def test_amg_on_diagonal_is_one_exact_level():
    d = np.linspace(1, 4, 50)
    h = build_amg(sp.diags(d, format="csr"))
    assert h.n_levels == 1
    r = np.arange(50.0)
    assert np.allclose(h.vcycle(r), r / d)


@pytest.mark.parametrize("opts", [{}, {"smoother": "sgs", "sweeps": 2, "prolongation": "energy"}])
def test_vcycle_is_linear(opts):
    S, dm = _sneddon_system(3)
    h = build_amg(S.Muu, near_nullspace=rigid_body_modes(dm.coords), max_coarse=20, **opts)
    rng = np.random.default_rng(1)
    r, s = rng.normal(size=S.n_u), rng.normal(size=S.n_u)
    lhs = h.vcycle(2.5 * r - 0.7 * s)
    rhs = 2.5 * h.vcycle(r) - 0.7 * h.vcycle(s)
    assert np.linalg.norm(lhs - rhs) <= 1e-12 * np.linalg.norm(lhs)


def test_amg_option_validation():
    A = _laplacian_chain(10)
    with pytest.raises(ValueError):
        build_amg(A, smoother="chebyshev")
    with pytest.raises(ValueError):
        build_amg(A, prolongation="classical")
    with pytest.raises(ValueError):
        build_amg(A, sweeps=0)


def test_rigid_body_modes_span_elastic_kernel():
    mesh = create_mesh(DomainSpec(2, 1.0, 4))
    dm = build_dof_map(mesh)
    mat = Material()
    vec = zeros(dm)
    vec.phi[:] = 1.0
    Muu, _, _, _ = Assembler(dm, mat).jacobian(vec, np.ones(dm.n_phi), 0.5, 1e-8)
    B = rigid_body_modes(dm.coords)
    assert B.shape == (dm.n_u, 3)
    assert np.max(np.abs(Muu @ B)) <= 1e-12
    assert rigid_body_modes(np.zeros((5, 3))).shape == (15, 6)


def test_preconditioner_kinds_and_reuse():
    S, dm = _sneddon_system(1)
    b = np.random.default_rng(2).normal(size=S.shape[0])
    for kind in ("exact", "amg", "diagonal"):
        P = BlockPreconditioner.build(S, kind, coords=dm.coords)
        sol = gmres(S, b, P, rtol=1e-8, max_iter=2000)
        assert sol.converged, kind
    exact = BlockPreconditioner.build(S, "exact")
    again = BlockPreconditioner.build(S, "exact", reuse_u=exact)
    assert again.apply_u is exact.apply_u
    with pytest.raises(ValueError):
        BlockPreconditioner.build(S, "amg", reuse_u=exact)
    with pytest.raises(ValueError):
        BlockPreconditioner.build(S, "ilu")


def test_block_system_matvec_matches_sparse():
    S, _ = _sneddon_system(4)
    x = np.random.default_rng(0).normal(size=S.shape[0])
    assert np.allclose(S.matvec(x), S.to_sparse() @ x)
    with_up = BlockSystem(S.Muu, S.Mpu, S.Mpp, Mup=S.Mpu.T.tocsr())
    assert np.allclose(with_up.matvec(x), with_up.to_sparse() @ x)


def test_dump_matrices_round_trip(tmp_path):
    S, _ = _sneddon_system(5)
    paths = dump_matrices(S, str(tmp_path / "m"), prefix="t")
    assert len(paths) == 3
    back = scipy.io.mmread(paths[0])
    assert abs(sp.csr_matrix(back) - S.Muu).max() == 0.0
