"""Pressurized phase-field fracture: material law, residual and Jacobian.

Residual of the displacement equation, per test function ``w``::

    (((1 - kappa) phi_ex^2 + kappa) sigma(u), e(w)) + (phi_ex^2 p, div w)

and of the phase-field equation, per test function ``psi``::

    (1 - kappa)(phi sigma(u):e(u), psi) + 2 (phi p div u, psi)
    + Gc (-(1/eps)(1 - phi, psi) + eps (grad phi, grad psi))

``phi_ex`` is the time-extrapolated phase field; it is frozen during the
Newton iteration, so the Jacobian has no u-phi block.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Literal

import numpy as np
import scipy.sparse as sp

from .fem import (
    ConstraintSet,
    DofMap,
    FieldVector,
    cell_quadrature,
    shape_gradients,
    shape_values,
)
from .linsolve import BlockSystem, assemble_pattern
from .mesh import Mesh

__all__ = [
    "Material",
    "FractureState",
    "Assembler",
    "sigma",
    "extrapolate_phi",
    "assemble_residual",
    "assemble_jacobian",
    "initial_crack",
    "slit_cells",
]

_CHUNK = 8192


@dataclass(frozen=True)
class Material:
    """Physical and regularization parameters (defaults: Sneddon benchmark)."""

    E: float = 1.0
    nu: float = 0.2
    G_c: float = 1.0
    p: float = 1e-3
    l0: float = 1.0
    kappa_factor: float = 1e-12
    eps_mode: Literal["tied", "fixed"] = "tied"
    c_eps: float = 2.0
    eps_fixed: float = 0.5
    eps_h: Literal["diameter", "edge"] = "diameter"
    pressure_coupling: Literal["extrapolated", "current"] = "extrapolated"

    def __post_init__(self):
        if not self.E > 0:
            raise ValueError("E must be positive")
        if not 0.0 <= self.nu < 0.5:
            raise ValueError("Poisson ratio must lie in [0, 0.5)")
        if not self.G_c > 0 or not self.l0 > 0 or not self.kappa_factor > 0:
            raise ValueError("G_c, l0 and kappa_factor must be positive")
        if self.eps_mode not in ("tied", "fixed"):
            raise ValueError(f"unknown eps_mode {self.eps_mode!r}")
        if self.eps_h not in ("diameter", "edge"):
            raise ValueError(f"unknown eps_h {self.eps_h!r}")
        if self.pressure_coupling not in ("extrapolated", "current"):
            raise ValueError(f"unknown pressure_coupling {self.pressure_coupling!r}")
        if not self.c_eps > 0 or not self.eps_fixed > 0:
            raise ValueError("c_eps and eps_fixed must be positive")

    @property
    def mu(self) -> float:
        return self.E / (2.0 * (1.0 + self.nu))

    @property
    def lam(self) -> float:
        return self.E * self.nu / ((1.0 + self.nu) * (1.0 - 2.0 * self.nu))

    def h_of(self, mesh: Mesh) -> float:
        """Mesh size entering ``eps = c_eps h`` (finest active cell)."""
        h = mesh.h_min()
        return h * np.sqrt(mesh.dim) if self.eps_h == "diameter" else h

    def epsilon(self, mesh: Mesh) -> float:
        if self.eps_mode == "fixed":
            return self.eps_fixed
        return self.c_eps * self.h_of(mesh)

    def kappa(self, mesh: Mesh) -> float:
        return self.kappa_factor * mesh.h_min()

    def with_(self, **kw) -> "Material":
        return replace(self, **kw)


def sigma(grad_u: np.ndarray, mu: float, lam: float) -> np.ndarray:
    """Linear elastic stress for (..., d, d) displacement gradients."""
    grad_u = np.asarray(grad_u, dtype=float)
    e = 0.5 * (grad_u + np.swapaxes(grad_u, -1, -2))
    tr = np.trace(e, axis1=-2, axis2=-1)
    eye = np.eye(grad_u.shape[-1])
    return 2.0 * mu * e + lam * tr[..., None, None] * eye


@dataclass
class FractureState:
    """Nodal solution plus the irreversibility/extrapolation history."""

    dofmap: DofMap
    vec: FieldVector
    phi_old: np.ndarray
    phi_prev2: np.ndarray | None = None
    step: int = 0
    dt: list[float] = field(default_factory=list)

    @property
    def u(self) -> np.ndarray:
        return self.vec.u

    @property
    def phi(self) -> np.ndarray:
        return self.vec.phi

    def copy(self) -> "FractureState":
        return FractureState(
            self.dofmap,
            self.vec.copy(),
            self.phi_old.copy(),
            None if self.phi_prev2 is None else self.phi_prev2.copy(),
            self.step,
            list(self.dt),
        )


def extrapolate_phi(state: FractureState) -> np.ndarray:
    """Linear-in-time extrapolation, clipped to [0, 1]; needs two past steps."""
    if state.step <= 2 or state.phi_prev2 is None:
        return state.phi_old.copy()
    if len(state.dt) >= 2 and not np.isclose(state.dt[-1], state.dt[-2]):
        r = state.dt[-1] / state.dt[-2]
        ex = state.phi_old + r * (state.phi_old - state.phi_prev2)
    else:
        ex = 2.0 * state.phi_old - state.phi_prev2
    return np.clip(ex, 0.0, 1.0)


def _einsum(*args):
    # BLAS-backed contraction order; plain einsum loops in C per element
    return np.einsum(*args, optimize=True)


class Assembler:
    """Cell-vectorized Q1 assembly on one dof map.

    Element tables only depend on the reference cell; physical cells enter
    through their edge length.
    """

    def __init__(self, dofmap: DofMap, material: Material):
        self.dofmap = dofmap
        self.material = material
        d = dofmap.dim
        self.dim = d
        q = cell_quadrature(d)
        self.w = q.weights
        self.N = shape_values(q.points)  # (nq, nv)
        self.dN = shape_gradients(q.points)  # (nq, nv, d)
        nv = 2**d
        self.nv = nv
        mu, lam = material.mu, material.lam
        eye = np.eye(d)
        dN = self.dN
        # elasticity kernel per quadrature point, (nq, nv*d, nv*d)
        K = (
            mu * _einsum("kl,qaj,qbj->qakbl", eye, dN, dN)
            + mu * _einsum("qal,qbk->qakbl", dN, dN)
            + lam * _einsum("qak,qbl->qakbl", dN, dN)
        )
        self.Kq = K.reshape(len(self.w), nv * d, nv * d) * self.w[:, None, None]
        self.Mq = _einsum("qa,qb->qab", self.N, self.N) * self.w[:, None, None]
        self.Lref = _einsum("q,qaj,qbj->ab", self.w, dN, dN)

    @cached_property
    def pattern(self):
        return assemble_pattern(self.dofmap.mesh, self.dofmap)

    # ------------------------------------------------------------------
    def _chunks(self):
        n = len(self.dofmap.cells)
        for lo in range(0, n, _CHUNK):
            yield slice(lo, min(n, lo + _CHUNK))

    def _fields(self, sl, vec: FieldVector, phi_ex: np.ndarray):
        dm = self.dofmap
        cv = dm.topology.cell_vertices[sl]
        h = dm.cell_edge[sl]
        ue = vec.u[cv]  # (c, nv, d)
        pe = vec.phi[cv]
        xe = phi_ex[cv]
        gu = _einsum("cak,qaj->cqkj", ue, self.dN) / h[:, None, None, None]
        gp = _einsum("ca,qaj->cqj", pe, self.dN) / h[:, None, None]
        ph = pe @ self.N.T  # (c, nq)
        px = xe @ self.N.T
        return h, gu, gp, ph, px

    def residual(self, vec: FieldVector, phi_ex: np.ndarray, eps: float, kappa: float) -> np.ndarray:
        m = self.material
        d = self.dim
        dm = self.dofmap
        p = m.p
        Fu = np.zeros(dm.n_u)
        Fp = np.zeros(dm.n_phi)
        for sl in self._chunks():
            h, gu, gp, ph, px = self._fields(sl, vec, phi_ex)
            s = sigma(gu, m.mu, m.lam)
            divu = np.trace(gu, axis1=-2, axis2=-1)
            se = _einsum("cqkj,cqkj->cq", s, gu)
            g = (1.0 - kappa) * px**2 + kappa
            pp = (px if m.pressure_coupling == "extrapolated" else ph) ** 2 * p
            hd1 = h ** (d - 1)
            # displacement test functions
            tu = g[..., None, None] * s + pp[..., None, None] * np.eye(d)
            fu = _einsum("q,cqkj,qaj->cak", self.w, tu, self.dN) * hd1[:, None, None]
            # phase-field test functions
            rho = (1.0 - kappa) * ph * se + 2.0 * ph * p * divu - m.G_c / eps * (1.0 - ph)
            fp = _einsum("q,cq,qa->ca", self.w, rho, self.N) * (h**d)[:, None]
            fp += m.G_c * eps * _einsum("q,cqj,qaj->ca", self.w, gp, self.dN) * hd1[:, None]
            Fu += np.bincount(dm.cell_u_dofs[sl].ravel(), fu.ravel(), dm.n_u)
            Fp += np.bincount(dm.cell_phi_dofs[sl].ravel(), fp.ravel(), dm.n_phi)
        return np.concatenate([Fu, Fp])

    def jacobian(self, vec: FieldVector, phi_ex: np.ndarray, eps: float, kappa: float):
        """Raw (unconstrained) blocks M_uu, M_phiu, M_phiphi and optional M_uphi."""
        m = self.material
        d = self.dim
        p = m.p
        pat = self.pattern
        duu = np.zeros(pat.uu.nnz)
        dpu = np.zeros(pat.pu.nnz)
        dpp = np.zeros(pat.pp.nnz)
        dup = np.zeros(pat.pu.nnz) if m.pressure_coupling == "current" else None
        for sl in self._chunks():
            h, gu, gp, ph, px = self._fields(sl, vec, phi_ex)
            s = sigma(gu, m.mu, m.lam)
            divu = np.trace(gu, axis1=-2, axis2=-1)
            se = _einsum("cqkj,cqkj->cq", s, gu)
            g = (1.0 - kappa) * px**2 + kappa
            hd2 = h ** (d - 2)
            hd1 = h ** (d - 1)
            kuu = _einsum("cq,qij->cij", g, self.Kq) * hd2[:, None, None]
            # d/du of the phase residual: 2(1-kappa) phi sigma(u):e(du) + 2 phi p div du
            S = 2.0 * (1.0 - kappa) * ph[..., None, None] * s
            S = S + (2.0 * p * ph)[..., None, None] * np.eye(d)
            G = _einsum("cqlj,qbj->cqbl", S, self.dN)
            kpu = _einsum("q,qa,cqbl->cabl", self.w, self.N, G) * hd1[:, None, None, None]
            coef = (1.0 - kappa) * se + 2.0 * p * divu + m.G_c / eps
            kpp = _einsum("cq,qab->cab", coef, self.Mq) * (h**d)[:, None, None]
            kpp += (m.G_c * eps) * self.Lref[None] * hd2[:, None, None]
            duu += np.bincount(pat.uu_map[sl].ravel(), kuu.ravel(), pat.uu.nnz)
            dpu += np.bincount(pat.pu_map[sl].ravel(), kpu.ravel(), pat.pu.nnz)
            dpp += np.bincount(pat.pp_map[sl].ravel(), kpp.ravel(), pat.pp.nnz)
            if dup is not None:
                # d/dphi of (phi^2 p, div w): 2 phi p div w dphi, stored transposed
                kup = _einsum("q,cq,qa,qbl->cabl", self.w, 2.0 * p * ph, self.N, self.dN)
                dup += np.bincount(pat.pu_map[sl].ravel(), (kup * hd1[:, None, None, None]).ravel(), pat.pu.nnz)
        Muu = pat.uu.with_data(duu)
        Mpu = pat.pu.with_data(dpu)
        Mpp = pat.pp.with_data(dpp)
        Mup = None if dup is None else pat.pu.with_data(dup).T.tocsr()
        return Muu, Mpu, Mpp, Mup


def assemble_residual(mesh, dofmap, constraints, material, state, phi_ex, eps=None, kappa=None,
                      assembler: Assembler | None = None, condense: bool = True):
    """Residual ``(F_u, F_phi)``; constrained rows zeroed when ``condense``."""
    asm = assembler or Assembler(dofmap, material)
    eps = material.epsilon(mesh) if eps is None else eps
    kappa = material.kappa(mesh) if kappa is None else kappa
    F = asm.residual(state.vec, phi_ex, eps, kappa)
    if condense and constraints is not None:
        F = constraints.condense_vector(F)
    return F


def assemble_jacobian(mesh, dofmap, constraints, material, state, phi_ex, eps=None, kappa=None,
                      assembler: Assembler | None = None, rhs: np.ndarray | None = None) -> BlockSystem:
    """Jacobian blocks, condensed against ``constraints`` when given."""
    asm = assembler or Assembler(dofmap, material)
    eps = material.epsilon(mesh) if eps is None else eps
    kappa = material.kappa(mesh) if kappa is None else kappa
    Muu, Mpu, Mpp, Mup = asm.jacobian(state.vec, phi_ex, eps, kappa)
    system = BlockSystem(Muu, Mpu, Mpp, rhs=rhs, Mup=Mup)
    if constraints is not None:
        system = system.condensed(constraints)
    return system


# ----------------------------------------------------------------------
# initial crack
# ----------------------------------------------------------------------
def slit_cells(mesh: Mesh, l0: float, cells: np.ndarray | None = None) -> np.ndarray:
    """Active cells whose closure meets the slit (segment/disk in the last
    coordinate plane through the origin)."""
    cells = mesh.active_ids if cells is None else cells
    lo = mesh.anchor(cells)
    hi = lo + mesh.edge(cells)[:, None]
    d = mesh.dim
    tol = 1e-12 * mesh.spec.half_width
    touches_plane = (lo[:, -1] <= tol) & (hi[:, -1] >= -tol)
    # distance from the origin to the box projected on the crack plane
    near = np.clip(0.0, lo[:, : d - 1], hi[:, : d - 1])
    r = np.linalg.norm(near, axis=1)
    return cells[touches_plane & (r <= l0 + tol)]


def crack_band_width(mesh: Mesh, l0: float) -> float:
    cells = slit_cells(mesh, l0)
    if len(cells) == 0:
        raise ValueError("no cells touch the slit")
    return float(mesh.edge(cells).min())


def crack_mask(coords: np.ndarray, l0: float, h_band: float) -> np.ndarray:
    d = coords.shape[1]
    tol = 1e-9 * h_band
    r = np.linalg.norm(coords[:, : d - 1], axis=1)
    return (r <= l0 + tol) & (np.abs(coords[:, -1]) <= h_band + tol)


def initial_crack(mesh: Mesh, dofmap: DofMap, material: Material) -> tuple[np.ndarray, np.ndarray]:
    """Nodal seed: 0 on the slit slab of half-width one band cell, 1 elsewhere."""
    h_band = crack_band_width(mesh, material.l0)
    inside = crack_mask(dofmap.coords, material.l0, h_band)
    on_plane = inside & (np.abs(dofmap.coords[:, -1]) <= 1e-9 * h_band)
    if not on_plane.any():
        raise ValueError("slit not resolved: no vertex layer inside the crack band")
    phi = np.where(inside, 0.0, 1.0)
    return phi, phi.copy()
