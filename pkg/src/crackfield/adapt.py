"""Crack-band refinement plus a displacement gradient-jump estimator, and the
solve/estimate/mark/refine loop built on them."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .fem import DofMap, build_dof_map, face_quadrature, shape_gradients, transfer
from .mesh import Mesh, active_faces, refine
from .model import Assembler, FractureState, Material, initial_crack, slit_cells
from .solver import NewtonReport, SolverOptions, solve_loading_sequence

log = logging.getLogger(__name__)

__all__ = [
    "RefinementPolicy",
    "EstimatorField",
    "CycleResult",
    "jump_estimator",
    "mark_cells",
    "band_violations",
    "prerefine_band",
    "seed_state",
    "adaptive_cycle",
]


@dataclass
class RefinementPolicy:
    band_threshold: float = 0.8
    h_target: float = np.inf
    theta: float = 0.3
    max_level: int = 14
    estimator: bool = True

    def __post_init__(self):
        if not 0.0 < self.band_threshold < 1.0:
            raise ValueError("band_threshold must lie in (0, 1)")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")
        if not self.h_target > 0:
            raise ValueError("h_target must be positive")


@dataclass
class EstimatorField:
    cells: np.ndarray  # active cell ids, aligned with eta
    eta: np.ndarray

    def __post_init__(self):
        if len(self.cells) != len(self.eta):
            raise ValueError("cells and eta must have the same length")
        if not np.all(np.isfinite(self.eta)) or np.any(self.eta < 0):
            raise ValueError("indicators must be finite and nonnegative")

    @classmethod
    def zeros(cls, dofmap: DofMap) -> "EstimatorField":
        return cls(dofmap.cells.copy(), np.zeros(len(dofmap.cells)))

    @property
    def total(self) -> float:
        return float(np.sqrt(np.sum(self.eta**2)))


def _grad_u_at(dofmap: DofMap, rows: np.ndarray, xi: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Displacement gradients (n, q, d, d) at local points xi (n, q, d)."""
    h = dofmap.cell_edge[rows]
    G = shape_gradients(xi) / h[:, None, None, None]
    ue = u[dofmap.topology.cell_vertices[rows]]
    return np.einsum("nqaj,nak->nqkj", G, ue)


def jump_estimator(mesh: Mesh, dofmap: DofMap, u: np.ndarray) -> EstimatorField:
    """eta_c^2 = sum over interior faces of (h_F/2) int_F |[grad u . n]|^2,
    each face shared equally by its two cells."""
    d = dofmap.dim
    u = np.asarray(u, dtype=float).reshape(dofmap.n_vertices, d)
    faces = active_faces(mesh)
    inner = faces.neighbor >= 0
    cell, face, nb = faces.cell[inner], faces.face[inner], faces.neighbor[inner]
    cells = dofmap.cells
    rc = np.searchsorted(cells, cell)
    rn = np.searchsorted(cells, nb)
    eta2 = np.zeros(len(cells))
    for f in range(2 * d):
        sel = np.flatnonzero(face == f)
        if not len(sel):
            continue
        axis = f // 2
        q = face_quadrature(d, f, 2)
        a, b = rc[sel], rn[sel]
        hc = dofmap.cell_edge[a]
        xi_c = np.broadcast_to(q.points, (len(sel),) + q.points.shape)
        phys = dofmap.cell_anchor[a][:, None, :] + hc[:, None, None] * xi_c
        xi_n = (phys - dofmap.cell_anchor[b][:, None, :]) / dofmap.cell_edge[b][:, None, None]
        xi_n = np.clip(xi_n, 0.0, 1.0)
        jump = _grad_u_at(dofmap, a, xi_c, u)[..., axis] - _grad_u_at(dofmap, b, xi_n, u)[..., axis]
        integral = np.einsum("q,nq->n", q.weights, np.sum(jump**2, axis=-1)) * hc ** (d - 1)
        contrib = 0.5 * (0.5 * hc) * integral
        eta2 += np.bincount(a, contrib, minlength=len(cells))
        eta2 += np.bincount(b, contrib, minlength=len(cells))
    return EstimatorField(cells.copy(), np.sqrt(eta2))


def _min_nodal_phi(dofmap: DofMap, phi: np.ndarray) -> np.ndarray:
    return phi[dofmap.topology.cell_vertices].min(axis=1)


def band_violations(mesh: Mesh, dofmap: DofMap, phi: np.ndarray, policy: RefinementPolicy) -> np.ndarray:
    """Active cells inside the band whose edge still exceeds the target."""
    band = _min_nodal_phi(dofmap, phi) < policy.band_threshold
    coarse = dofmap.cell_edge > policy.h_target * (1 + 1e-12)
    return dofmap.cells[band & coarse]


def mark_cells(mesh: Mesh, dofmap: DofMap, phi: np.ndarray, eta: EstimatorField | None,
               policy: RefinementPolicy) -> np.ndarray:
    """Band cells above the target edge plus the smallest set of top-eta cells
    carrying a fraction theta of the total squared indicator."""
    marked = set(band_violations(mesh, dofmap, phi, policy).tolist())
    if policy.estimator and eta is not None and policy.theta > 0:
        e2 = eta.eta**2
        total = e2.sum()
        if total > 0:
            order = np.argsort(-e2, kind="stable")
            csum = np.cumsum(e2[order])
            n = int(np.searchsorted(csum, policy.theta * total * (1 - 1e-12))) + 1
            marked.update(eta.cells[order[:n]].tolist())
    out = np.array(sorted(marked), dtype=np.int64)
    if len(out):
        out = out[mesh.level[out] < policy.max_level]
    return out


def prerefine_band(mesh: Mesh, material: Material, h_target: float, max_level: int = 14) -> Mesh:
    """Refine the cells meeting the slit until their edge is at most h_target."""
    while True:
        cells = slit_cells(mesh, material.l0)
        coarse = cells[(mesh.edge(cells) > h_target * (1 + 1e-12)) & (mesh.level[cells] < max_level)]
        if not len(coarse):
            return mesh
        refine(mesh, coarse)


def seed_state(mesh: Mesh, dofmap: DofMap, material: Material, u: np.ndarray | None = None) -> FractureState:
    """Fresh state holding the slit seed in phi and phi_old."""
    from .fem import zeros

    phi, phi_old = initial_crack(mesh, dofmap, material)
    vec = zeros(dofmap)
    vec.phi[:] = phi
    if u is not None:
        vec.u[:] = u
    return FractureState(dofmap, vec, phi_old)


@dataclass
class CycleResult:
    level: int
    dofmap: DofMap
    state: FractureState
    eps: float
    kappa: float
    h_min: float
    reports: list[NewtonReport]
    converged: bool
    estimator: EstimatorField | None = None
    seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def newton_iters(self) -> int:
        return sum(r.iterations for r in self.reports)

    @property
    def gmres_mean(self) -> float:
        its = [g for r in self.reports for g in r.gmres_iters]
        return float(np.mean(its)) if its else 0.0


def _refine_and_reseed(mesh, dm, vec, marked, pol, material):
    """Refine ``marked``, then keep refining until the transferred band is
    saturated; returns the new dof map and a re-seeded state."""
    old_dm, old_vec = dm, vec
    while len(marked):
        refine(mesh, marked)
        dm_new = build_dof_map(mesh)
        vec_new = transfer(old_dm, old_vec, dm_new)
        marked = band_violations(mesh, dm_new, vec_new.phi, pol)
        marked = marked[mesh.level[marked] < pol.max_level]
        old_dm, old_vec = dm_new, vec_new
    return old_dm, seed_state(mesh, old_dm, material, u=old_vec.u)


def adaptive_cycle(
    mesh: Mesh,
    material: Material,
    policy: RefinementPolicy,
    cycles: int,
    options: SolverOptions | None = None,
    callback: Callable[[CycleResult], None] | None = None,
    max_corrections: int = 6,
) -> list[CycleResult]:
    """Solve on ``mesh``, then ``cycles`` times estimate, mark, refine,
    transfer, re-seed and solve again.

    Every level is corrected until saturated: while solved band cells
    (``phi < band_threshold``) are coarser than the band target, they are
    refined and the level is solved again.  The band target starts at the
    finest edge of the initial mesh and halves every cycle, so in tied mode
    epsilon follows it down; in fixed mode epsilon stays put and the band
    is resolved ever more finely.  Stops at the first non-converged level.
    """
    opt = options or SolverOptions()
    if cycles < 0:
        raise ValueError("cycles must be nonnegative")
    dm = build_dof_map(mesh)
    state = seed_state(mesh, dm, material)
    results: list[CycleResult] = []
    pol = RefinementPolicy(policy.band_threshold, min(policy.h_target, mesh.h_min()), policy.theta,
                           policy.max_level, policy.estimator)
    for level in range(cycles + 1):
        t0 = time.perf_counter()
        corrections = 0
        while True:
            eps, kappa = material.epsilon(mesh), material.kappa(mesh)
            asm = Assembler(dm, material)
            state, reports = solve_loading_sequence(state, material, mesh, options=opt, eps=eps, kappa=kappa,
                                                    assembler=asm)
            ok = bool(reports) and all(r.converged for r in reports)
            if not ok or corrections >= max_corrections:
                break
            viol = band_violations(mesh, dm, state.phi, pol)
            viol = viol[mesh.level[viol] < pol.max_level]
            if not len(viol):
                break
            corrections += 1
            log.info("level %d: band correction %d refines %d cells", level, corrections, len(viol))
            dm, state = _refine_and_reseed(mesh, dm, state.vec, viol, pol, material)
        res = CycleResult(level, dm, state, eps, kappa, mesh.h_min(), reports, ok,
                          extra={"corrections": corrections, "h_target": pol.h_target})
        log.info("level %d: dofs=%d eps=%.4g h_min=%.4g converged=%s", level, dm.n_dofs, eps, res.h_min, ok)
        if ok and level < cycles:
            pol = RefinementPolicy(pol.band_threshold, pol.h_target / 2, pol.theta, pol.max_level, pol.estimator)
            eta = jump_estimator(mesh, dm, state.u) if pol.estimator else None
            res.estimator = eta
            marked = mark_cells(mesh, dm, state.phi, eta, pol)
            dm, state = _refine_and_reseed(mesh, dm, state.vec, marked, pol, material)
        res.seconds = time.perf_counter() - t0
        results.append(res)
        if callback:
            callback(res)
        if not ok:
            break
    return results
