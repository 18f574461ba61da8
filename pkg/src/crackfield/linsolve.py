"""Sparse block systems, restarted GMRES and block-diagonal preconditioners.

The Newton operator has the lower block-triangular form::

    [ M_uu    0     ] [du  ]   [F_u  ]
    [ M_pu    M_pp  ] [dphi] = [F_phi]

and is preconditioned on the right by ``diag(~M_uu^-1, ~M_pp^-1)``.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import Callable, Literal, NamedTuple

import numpy as np
import scipy.io
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)

__all__ = [
    "CsrMatrix",
    "Pattern",
    "BlockPattern",
    "BlockSystem",
    "AmgHierarchy",
    "BlockPreconditioner",
    "GmresResult",
    "assemble_pattern",
    "gmres",
    "build_amg",
    "apply_preconditioner",
    "rigid_body_modes",
    "dump_matrices",
]

CsrMatrix = sp.csr_matrix


@dataclass(frozen=True)
class Pattern:
    indptr: np.ndarray
    indices: np.ndarray
    shape: tuple[int, int]

    @property
    def nnz(self) -> int:
        return len(self.indices)

    def with_data(self, data: np.ndarray) -> sp.csr_matrix:
        return sp.csr_matrix((data, self.indices, self.indptr), shape=self.shape)

    def pairs(self) -> set[tuple[int, int]]:
        rows = np.repeat(np.arange(self.shape[0]), np.diff(self.indptr))
        return set(zip(rows.tolist(), self.indices.tolist()))


def _pattern(rows: np.ndarray, cols: np.ndarray, shape) -> tuple[Pattern, np.ndarray]:
    """CSR pattern of (rows, cols) plus the scatter map entry -> data slot."""
    n_cols = shape[1]
    key = rows.astype(np.int64).ravel() * n_cols + cols.astype(np.int64).ravel()
    uniq, inv = np.unique(key, return_inverse=True)
    r = uniq // n_cols
    indptr = np.zeros(shape[0] + 1, dtype=np.int64)
    np.cumsum(np.bincount(r, minlength=shape[0]), out=indptr[1:])
    dtype = np.int32 if len(uniq) < 2**31 else np.int64
    pat = Pattern(indptr, (uniq % n_cols).astype(dtype), tuple(shape))
    return pat, inv.astype(dtype).reshape(rows.shape)


@dataclass(frozen=True)
class BlockPattern:
    uu: Pattern
    pu: Pattern
    pp: Pattern
    uu_map: np.ndarray
    pu_map: np.ndarray
    pp_map: np.ndarray

    def condensed(self, constraints) -> tuple[Pattern, Pattern, Pattern]:
        """Patterns of ``C^T A C`` plus the constrained diagonals."""
        out = []
        for pat, (Cr, Cc, diag) in (
            (self.uu, (constraints.C_u, constraints.C_u, True)),
            (self.pu, (constraints.C_phi, constraints.C_u, False)),
            (self.pp, (constraints.C_phi, constraints.C_phi, True)),
        ):
            A = pat.with_data(np.ones(pat.nnz))
            B = (Cr.T.astype(bool).astype(float) @ A @ Cc.astype(bool).astype(float)).tocsr()
            if diag:
                B = (B + sp.identity(B.shape[0], format="csr")).tocsr()
            B.sort_indices()
            out.append(Pattern(B.indptr, B.indices, B.shape))
        return tuple(out)


def assemble_pattern(mesh, dofmap, constraints=None):
    """Element-coupling sparsity of the three blocks.

    Without constraints returns a ``BlockPattern`` whose maps scatter
    element matrices into CSR data; with constraints returns the condensed
    patterns ``(uu, pu, pp)``.
    """
    cu = dofmap.cell_u_dofs
    cp = dofmap.cell_phi_dofs
    nu, npf = dofmap.n_u, dofmap.n_phi
    nc, lu = cu.shape
    lp = cp.shape[1]
    uu, uu_map = _pattern(
        np.broadcast_to(cu[:, :, None], (nc, lu, lu)), np.broadcast_to(cu[:, None, :], (nc, lu, lu)), (nu, nu)
    )
    pu, pu_map = _pattern(
        np.broadcast_to(cp[:, :, None], (nc, lp, lu)), np.broadcast_to(cu[:, None, :], (nc, lp, lu)), (npf, nu)
    )
    pp, pp_map = _pattern(
        np.broadcast_to(cp[:, :, None], (nc, lp, lp)), np.broadcast_to(cp[:, None, :], (nc, lp, lp)), (npf, npf)
    )
    bp = BlockPattern(uu, pu, pp, uu_map, pu_map, pp_map)
    if constraints is not None:
        return bp.condensed(constraints)
    return bp


def _condense(A: sp.csr_matrix, Cr: sp.csr_matrix, Cc: sp.csr_matrix, mask: np.ndarray | None):
    B = (Cr.T @ A @ Cc).tocsr()
    if mask is not None and mask.any():
        diag = A.diagonal()[mask]
        pos = np.abs(diag[diag > 0])
        fallback = np.mean(np.abs(A.diagonal())) if A.nnz else 1.0
        if len(pos):
            fallback = float(np.mean(pos))
        diag = np.where(diag > 0, diag, fallback)
        D = np.zeros(A.shape[0])
        D[mask] = diag
        B = (B + sp.diags(D)).tocsr()
    B.sort_indices()
    return B


@dataclass
class BlockSystem:
    """2x2 lower block-triangular operator (the u-phi block is absent unless
    the current phase field drives the pressure term)."""

    Muu: sp.csr_matrix
    Mpu: sp.csr_matrix
    Mpp: sp.csr_matrix
    rhs: np.ndarray | None = None
    Mup: sp.csr_matrix | None = None

    @property
    def n_u(self) -> int:
        return self.Muu.shape[0]

    @property
    def n_phi(self) -> int:
        return self.Mpp.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        n = self.n_u + self.n_phi
        return (n, n)

    def matvec(self, x: np.ndarray) -> np.ndarray:
        nu = self.n_u
        xu, xp = x[:nu], x[nu:]
        yu = self.Muu @ xu
        if self.Mup is not None:
            yu = yu + self.Mup @ xp
        return np.concatenate([yu, self.Mpu @ xu + self.Mpp @ xp])

    __matmul__ = matvec

    def to_sparse(self) -> sp.csr_matrix:
        up = self.Mup if self.Mup is not None else None
        return sp.bmat([[self.Muu, up], [self.Mpu, self.Mpp]], format="csr")

    def to_dense(self) -> np.ndarray:
        return self.to_sparse().toarray()

    def condensed(self, constraints) -> "BlockSystem":
        cs = constraints
        nu = cs.n_u
        mu_mask = cs.constrained[:nu]
        mp_mask = cs.constrained[nu:]
        rhs = None if self.rhs is None else cs.condense_vector(self.rhs)
        Mup = None if self.Mup is None else _condense(self.Mup, cs.C_u, cs.C_phi, None)
        return BlockSystem(
            _condense(self.Muu, cs.C_u, cs.C_u, mu_mask),
            _condense(self.Mpu, cs.C_phi, cs.C_u, None),
            _condense(self.Mpp, cs.C_phi, cs.C_phi, mp_mask),
            rhs,
            Mup,
        )


# ----------------------------------------------------------------------
# algebraic multigrid
# ----------------------------------------------------------------------
def rigid_body_modes(coords: np.ndarray) -> np.ndarray:
    """Near-nullspace of vertex-interleaved elasticity: translations and
    infinitesimal rotations."""
    V, d = coords.shape
    x = coords - coords.mean(axis=0)
    modes = []
    for k in range(d):
        m = np.zeros((V, d))
        m[:, k] = 1.0
        modes.append(m.ravel())
    for i, j in ([(0, 1)] if d == 2 else [(0, 1), (1, 2), (0, 2)]):
        m = np.zeros((V, d))
        m[:, i] = -x[:, j]
        m[:, j] = x[:, i]
        modes.append(m.ravel())
    return np.stack(modes, axis=1)


@dataclass
class AmgHierarchy:
    """Smoothed-aggregation hierarchy applied as one V-cycle from zero."""

    solver: object
    A: sp.csr_matrix

    @property
    def levels(self):
        return self.solver.levels

    @property
    def n_levels(self) -> int:
        return len(self.solver.levels)

    def vcycle(self, r: np.ndarray) -> np.ndarray:
        x = np.zeros_like(r)
        return self.solver.solve(r, x0=x, maxiter=1, cycle="V", tol=1e-300)


def build_amg(
    A: sp.csr_matrix,
    *,
    strength: float = 0.02,
    omega: float = 2.0 / 3.0,
    prolongation_omega: float = 2.0 / 3.0,
    near_nullspace: np.ndarray | None = None,
    max_coarse: int = 300,
    max_levels: int = 20,
    smoother: str = "jacobi",
    sweeps: int = 1,
    prolongation: str = "jacobi",
) -> AmgHierarchy:
    """Smoothed aggregation with a direct coarsest solve.

    Defaults: damped-Jacobi 1+1 smoothing and Jacobi-smoothed prolongation.
    ``smoother="sgs"`` uses symmetric Gauss-Seidel (still a symmetric, fixed
    operator) and ``prolongation="energy"`` energy-minimizing prolongation.
    """
    import pyamg

    if smoother not in ("jacobi", "sgs"):
        raise ValueError(f"unknown smoother {smoother!r}")
    if prolongation not in ("jacobi", "energy"):
        raise ValueError(f"unknown prolongation {prolongation!r}")
    if sweeps < 1:
        raise ValueError("sweeps must be at least 1")
    A = sp.csr_matrix(A)
    if smoother == "jacobi":
        relax = ("jacobi", {"omega": omega, "iterations": sweeps, "withrho": False})
    else:
        relax = ("gauss_seidel", {"sweep": "symmetric", "iterations": sweeps})
    if prolongation == "jacobi":
        psmooth = ("jacobi", {"omega": prolongation_omega})
    else:
        psmooth = ("energy", {"krylov": "cg", "maxiter": 2})
    ml = pyamg.smoothed_aggregation_solver(
        A,
        B=near_nullspace,
        strength=("symmetric", {"theta": strength}),
        aggregate="standard",
        smooth=psmooth,
        presmoother=relax,
        postsmoother=relax,
        max_coarse=max_coarse,
        max_levels=max_levels,
        coarse_solver="splu",
        keep=False,
    )
    return AmgHierarchy(ml, A)


# ----------------------------------------------------------------------
# preconditioner
# ----------------------------------------------------------------------
PrecKind = Literal["exact", "amg", "diagonal"]


def _splu(A: sp.spmatrix):
    # both diagonal blocks are symmetric; a symmetric ordering halves the fill
    return spla.splu(A.tocsc(), permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                     options={"SymmetricMode": True})


@dataclass
class BlockPreconditioner:
    kind: PrecKind
    n_u: int
    apply_u: Callable[[np.ndarray], np.ndarray]
    apply_phi: Callable[[np.ndarray], np.ndarray]
    info: dict = field(default_factory=dict)

    @classmethod
    def build(cls, system: BlockSystem, kind: PrecKind = "exact", coords: np.ndarray | None = None,
              reuse_u: "BlockPreconditioner | None" = None, **amg_options) -> "BlockPreconditioner":
        """Block preconditioner; ``reuse_u`` keeps the displacement block of
        an earlier preconditioner (valid while M_uu is unchanged)."""
        if reuse_u is not None and (reuse_u.kind != kind or reuse_u.n_u != system.n_u):
            raise ValueError("cannot reuse a displacement block of another kind or size")
        if kind == "exact":
            apply_u = reuse_u.apply_u if reuse_u else _splu(system.Muu).solve
            return cls(kind, system.n_u, apply_u, _splu(system.Mpp).solve)
        if kind == "diagonal":
            du = 1.0 / system.Muu.diagonal()
            dp = 1.0 / system.Mpp.diagonal()
            return cls(kind, system.n_u, reuse_u.apply_u if reuse_u else (lambda r: du * r), lambda r: dp * r)
        if kind == "amg":
            info = dict(reuse_u.info) if reuse_u else {}
            if reuse_u:
                apply_u = reuse_u.apply_u
            else:
                B = rigid_body_modes(coords) if coords is not None else None
                hu = build_amg(system.Muu, near_nullspace=B, **amg_options)
                apply_u = hu.vcycle
                info["levels_u"] = hu.n_levels
            hp = build_amg(system.Mpp, **amg_options)
            info["levels_phi"] = hp.n_levels
            return cls(kind, system.n_u, apply_u, hp.vcycle, info)
        raise ValueError(f"unknown preconditioner kind {kind!r}")

    def __call__(self, r: np.ndarray) -> np.ndarray:
        return apply_preconditioner(self, r)


def apply_preconditioner(prec: BlockPreconditioner, r: np.ndarray) -> np.ndarray:
    nu = prec.n_u
    return np.concatenate([prec.apply_u(r[:nu]), prec.apply_phi(r[nu:])])


# ----------------------------------------------------------------------
# GMRES
# ----------------------------------------------------------------------
class GmresResult(NamedTuple):
    x: np.ndarray
    iterations: int
    converged: bool
    residuals: list[float]
    breakdown: bool = False
    stagnated: bool = False


def gmres(
    op,
    rhs: np.ndarray,
    prec: Callable[[np.ndarray], np.ndarray] | None = None,
    rtol: float = 1e-8,
    max_iter: int = 1000,
    restart: int = 100,
    x0: np.ndarray | None = None,
) -> GmresResult:
    """Right-preconditioned restarted GMRES (modified Gram-Schmidt, Givens).

    With right preconditioning the Arnoldi residual is the true residual
    ``||rhs - A x||``, so convergence is judged against ``rtol * ||rhs||``.
    A restart cycle that fails to lower the true residual ends the solve
    (``stagnated``): the target lies below attainable precision.
    """
    if not 0.0 < rtol < 1.0:
        raise ValueError("rtol must lie in (0, 1)")
    matvec = op.matvec if hasattr(op, "matvec") else (lambda v: op @ v)
    M = prec if prec is not None else (lambda v: v)
    b = np.asarray(rhs, dtype=float)
    n = len(b)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return GmresResult(np.zeros(n), 0, True, [0.0])
    target = rtol * bnorm
    r = b - matvec(x) if x0 is not None else b.copy()
    beta = np.linalg.norm(r)
    residuals = [beta]
    total = 0
    breakdown = False
    stagnated = False
    while beta > target and total < max_iter:
        beta_start = beta
        m = min(restart, max_iter - total)
        Vb = np.zeros((m + 1, n))
        Z = np.zeros((m, n))
        Hm = np.zeros((m + 1, m))
        cs = np.zeros(m)
        sn = np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        Vb[0] = r / beta
        k_used = 0
        for k in range(m):
            Z[k] = M(Vb[k])
            w = matvec(Z[k])
            for i in range(k + 1):
                Hm[i, k] = np.dot(w, Vb[i])
                w -= Hm[i, k] * Vb[i]
            hnext = np.linalg.norm(w)
            Hm[k + 1, k] = hnext
            for i in range(k):
                t = cs[i] * Hm[i, k] + sn[i] * Hm[i + 1, k]
                Hm[i + 1, k] = -sn[i] * Hm[i, k] + cs[i] * Hm[i + 1, k]
                Hm[i, k] = t
            denom = np.hypot(Hm[k, k], Hm[k + 1, k])
            total += 1
            k_used = k + 1
            if denom == 0.0:
                breakdown = True
                k_used = k
                break
            cs[k] = Hm[k, k] / denom
            sn[k] = Hm[k + 1, k] / denom
            Hm[k, k] = denom
            Hm[k + 1, k] = 0.0
            g[k + 1] = -sn[k] * g[k]
            g[k] = cs[k] * g[k]
            residuals.append(abs(g[k + 1]))
            # hnext == 0: the Krylov space is invariant, the solve is exact
            if abs(g[k + 1]) <= target or hnext <= 1e-14 * denom:
                break
            Vb[k + 1] = w / hnext
        if k_used:
            y = scipy.linalg.solve_triangular(Hm[:k_used, :k_used], g[:k_used])
            x = x + y @ Z[:k_used]
        r = b - matvec(x)
        beta = np.linalg.norm(r)
        if breakdown:
            log.warning("GMRES breakdown after %d iterations (residual %.3e)", total, beta)
            break
        if beta > target and beta >= 0.99 * beta_start:
            stagnated = True
            log.warning("GMRES stagnated after %d iterations (residual %.3e, target %.3e)", total, beta, target)
            break
    return GmresResult(x, total, bool(beta <= target * (1 + 1e-8)), residuals, breakdown, stagnated)


def dump_matrices(system: BlockSystem, directory: str, prefix: str = "jacobian") -> list[str]:
    """Write the blocks in Matrix Market coordinate format."""
    os.makedirs(directory, exist_ok=True)
    paths = []
    for name, A in (("uu", system.Muu), ("pu", system.Mpu), ("pp", system.Mpp)):
        path = os.path.join(directory, f"{prefix}_{name}.mtx")
        scipy.io.mmwrite(path, A)
        paths.append(path)
    return paths
