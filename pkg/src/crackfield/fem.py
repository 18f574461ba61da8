"""Q1 elements on the adaptive forest: quadrature, DoF numbering, constraints.

Global DoF layout is ``[u (vertex-interleaved, d per vertex) | phi]``:
``u`` component ``k`` of vertex ``v`` is ``d*v + k`` and the phase field of
vertex ``v`` is ``N_u + v``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Mapping, NamedTuple

import numpy as np
import scipy.sparse as sp

from .mesh import Mesh, Topology, corner_offsets

__all__ = [
    "Quadrature",
    "cell_quadrature",
    "face_quadrature",
    "shape_values",
    "shape_gradients",
    "DofMap",
    "ConstraintSet",
    "FieldVector",
    "PointValues",
    "build_dof_map",
    "build_constraints",
    "interpolate",
    "evaluate",
    "transfer",
]

_GAUSS2 = (np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)]), np.array([0.5, 0.5]))


class Quadrature(NamedTuple):
    points: np.ndarray  # (nq, dim) on the reference cell [0, 1]^dim
    weights: np.ndarray  # (nq,), sums to 1


def gauss_1d(n: int) -> tuple[np.ndarray, np.ndarray]:
    if n == 2:
        return _GAUSS2
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def tensor_quadrature(dim: int, n: int = 2) -> Quadrature:
    x, w = gauss_1d(n)
    grids = np.meshgrid(*[x] * dim, indexing="ij")
    wgrids = np.meshgrid(*[w] * dim, indexing="ij")
    # x fastest, matching the corner order
    pts = np.stack([g.T.ravel() for g in grids], axis=1)
    wts = np.prod(np.stack([g.T.ravel() for g in wgrids], axis=1), axis=1)
    return Quadrature(pts, wts)


def cell_quadrature(dim: int) -> Quadrature:
    return tensor_quadrature(dim, 2)


def face_quadrature(dim: int, face: int, n: int = 2) -> Quadrature:
    """Gauss rule on one face of the reference cell, embedded in dim coords."""
    axis, side = divmod(face, 2)
    q = tensor_quadrature(dim - 1, n)
    pts = np.insert(q.points, axis, float(side), axis=1)
    return Quadrature(pts, q.weights)


def shape_values(xi: np.ndarray) -> np.ndarray:
    """Q1 shape values, (..., 2^d) for reference points (..., d)."""
    xi = np.asarray(xi, dtype=float)
    dim = xi.shape[-1]
    off = corner_offsets(dim)
    f = np.where(off == 1, xi[..., None, :], 1.0 - xi[..., None, :])
    return np.prod(f, axis=-1)


def shape_gradients(xi: np.ndarray) -> np.ndarray:
    """Reference gradients, (..., 2^d, d)."""
    xi = np.asarray(xi, dtype=float)
    dim = xi.shape[-1]
    off = corner_offsets(dim)
    f = np.where(off == 1, xi[..., None, :], 1.0 - xi[..., None, :])
    df = np.where(off == 1, 1.0, -1.0) * np.ones_like(f)
    out = np.empty(f.shape)
    for k in range(dim):
        parts = [df[..., k] if j == k else f[..., j] for j in range(dim)]
        out[..., k] = np.prod(np.stack(parts, axis=-1), axis=-1)
    return out


@dataclass
class DofMap:
    mesh: Mesh
    topology: Topology
    revision: int
    active_mask: np.ndarray

    @property
    def dim(self) -> int:
        return self.mesh.dim

    @property
    def n_vertices(self) -> int:
        return self.topology.n_vertices

    @property
    def n_u(self) -> int:
        return self.dim * self.n_vertices

    @property
    def n_phi(self) -> int:
        return self.n_vertices

    @property
    def n_dofs(self) -> int:
        return self.n_u + self.n_phi

    @property
    def cells(self) -> np.ndarray:
        return self.topology.cells

    @property
    def coords(self) -> np.ndarray:
        return self.topology.coords

    def u_dof(self, vertex, comp) -> np.ndarray:
        return self.dim * np.asarray(vertex) + comp

    def phi_dof(self, vertex) -> np.ndarray:
        return self.n_u + np.asarray(vertex)

    @cached_property
    def cell_u_dofs(self) -> np.ndarray:
        cv = self.topology.cell_vertices
        d = self.dim
        return (d * cv[:, :, None] + np.arange(d)).reshape(len(cv), -1)

    @cached_property
    def cell_phi_dofs(self) -> np.ndarray:
        return self.topology.cell_vertices

    @cached_property
    def cell_edge(self) -> np.ndarray:
        return self.mesh.edge(self.cells)

    @cached_property
    def cell_anchor(self) -> np.ndarray:
        return self.mesh.anchor(self.cells)

    @cached_property
    def boundary_vertices(self) -> np.ndarray:
        K = self.mesh.spec.half_width
        c = self.coords
        return np.flatnonzero(np.any(np.isclose(np.abs(c), K, rtol=0, atol=1e-12 * K), axis=1))

    @cached_property
    def hanging(self) -> tuple[sp.csr_matrix, np.ndarray]:
        """Closed vertex interpolation matrix and the hanging vertex list."""
        return _hanging_matrix(self)

    def locate(self, points: np.ndarray) -> np.ndarray:
        """Row index into ``cells`` of the cell containing each point."""
        cid = self.mesh.locate(points, active=self.active_mask)
        return np.searchsorted(self.cells, cid)


def build_dof_map(mesh: Mesh) -> DofMap:
    return DofMap(mesh, mesh.topology, mesh.revision, mesh.active.copy())


def _hanging_matrix(dofmap: DofMap) -> tuple[sp.csr_matrix, np.ndarray]:
    """Vertex-level interpolation matrix H (closed) and the hanging vertices."""
    mesh = dofmap.mesh
    topo = dofmap.topology
    d = mesh.dim
    V = topo.n_vertices
    cells = topo.cells
    lev = mesh.level[cells]
    can = lev < mesh.lmax
    pattern = np.stack(
        np.meshgrid(*[np.arange(3)] * d, indexing="ij"), axis=-1
    ).reshape(-1, d)
    n_half = (pattern == 1).sum(axis=1)
    pattern = pattern[(n_half > 0) & (n_half < d)]
    off = corner_offsets(d)
    rows, cols, vals, levs = [], [], [], []
    half = np.zeros(len(cells), dtype=np.int64)
    half[can] = 1 << (mesh.lmax - lev[can] - 1)
    base = mesh.index[cells] << (mesh.lmax - lev)[:, None]
    idx_c = np.flatnonzero(can)
    for pat in pattern:
        pts = base[idx_c] + pat[None, :] * half[idx_c, None]
        v = topo.find_vertices(pts)
        hit = v >= 0
        if not hit.any():
            continue
        c_rows = idx_c[hit]
        ok = np.all((pat[None, :] == 1) | (off * 2 == pat[None, :]), axis=1)
        masters = topo.cell_vertices[c_rows][:, ok]
        w = 0.5 ** (pat == 1).sum()
        rows.append(np.repeat(v[hit], ok.sum()))
        cols.append(masters.ravel())
        vals.append(np.full(masters.size, w))
        levs.append(np.repeat(lev[c_rows], ok.sum()))
    if not rows:
        return sp.identity(V, format="csr"), np.empty(0, dtype=np.int64)
    rows, cols, vals, levs = map(np.concatenate, (rows, cols, vals, levs))
    # one constraint per vertex: take the one from the coarsest cell
    order = np.lexsort((levs, rows))
    rows, cols, vals, levs = rows[order], cols[order], vals[order], levs[order]
    first_lev = np.full(V, np.iinfo(np.int64).max)
    np.minimum.at(first_lev, rows, levs)
    keep = levs == first_lev[rows]
    rows, cols, vals, levs = rows[keep], cols[keep], vals[keep], levs[keep]
    # several coarsest cells may repeat the same constraint
    key = rows * V + cols
    _, uniq = np.unique(key, return_index=True)
    cnt = np.bincount(rows[uniq], minlength=V)
    hanging = np.flatnonzero(cnt)
    free = np.setdiff1d(np.arange(V), hanging)
    H = sp.csr_matrix(
        (
            np.concatenate([vals[uniq], np.ones(len(free))]),
            (np.concatenate([rows[uniq], free]), np.concatenate([cols[uniq], free])),
        ),
        shape=(V, V),
    )
    for _ in range(16):
        if H[:, hanging].nnz == 0:
            break
        H = (H @ H).tocsr()
    else:  # pragma: no cover - guarded by mesh balance
        raise RuntimeError("hanging-node constraints did not close")
    H.eliminate_zeros()
    return H, hanging


@dataclass
class ConstraintSet:
    """Affine constraints ``x = C x + g`` for the block-ordered DoF vector.

    ``C_u``/``C_phi`` act on the block slices; constrained DoFs have zero
    columns in ``C`` and their rows hold the master weights (empty for
    Dirichlet/active rows).  ``constrained`` is a boolean mask over all DoFs.
    """

    n_u: int
    n_phi: int
    C_u: sp.csr_matrix
    C_phi: sp.csr_matrix
    g: np.ndarray
    constrained: np.ndarray
    hanging: np.ndarray  # mask, hanging DoFs (not fixed)
    fixed: np.ndarray  # mask, Dirichlet or active-set DoFs
    conflicts: int = 0

    @property
    def n_dofs(self) -> int:
        return self.n_u + self.n_phi

    def __len__(self) -> int:
        return int(self.constrained.sum())

    def lines(self) -> dict[int, tuple[list[tuple[int, float]], float]]:
        """Explicit {dof: ([(master, weight), ...], inhomogeneity)} view."""
        out = {}
        for C, off in ((self.C_u, 0), (self.C_phi, self.n_u)):
            C = C.tocsr()
            for i in np.flatnonzero(self.constrained[off : off + C.shape[0]]):
                lo, hi = C.indptr[i], C.indptr[i + 1]
                entries = [(int(j) + off, float(w)) for j, w in zip(C.indices[lo:hi], C.data[lo:hi])]
                out[int(i) + off] = (entries, float(self.g[off + i]))
        return out

    def distribute(self, x: np.ndarray) -> np.ndarray:
        """Overwrite constrained entries so that ``x = C x + g`` holds."""
        x = np.array(x, dtype=float, copy=True)
        nu = self.n_u
        x[:nu] = self.C_u @ x[:nu] + self.g[:nu]
        x[nu:] = self.C_phi @ x[nu:] + self.g[nu:]
        return x

    def condense_vector(self, r: np.ndarray) -> np.ndarray:
        """``C^T r``: folds slave entries onto masters, zeroes constrained rows."""
        nu = self.n_u
        return np.concatenate([self.C_u.T @ r[:nu], self.C_phi.T @ r[nu:]])

    def fold_hanging(self, r: np.ndarray) -> np.ndarray:
        """Fold hanging rows onto masters but keep fixed rows untouched."""
        out = self.condense_vector(r)
        out[self.fixed] = r[self.fixed]
        return out

    def homogeneous(self) -> "ConstraintSet":
        return ConstraintSet(
            self.n_u, self.n_phi, self.C_u, self.C_phi, np.zeros_like(self.g),
            self.constrained, self.hanging, self.fixed, self.conflicts,
        )


def _block_constraints(H: sp.csr_matrix, fixed: np.ndarray) -> sp.csr_matrix:
    """Drop fixed columns and rows from a closed interpolation matrix."""
    keep = sp.diags((~fixed).astype(float))
    return (keep @ H @ keep).tocsr()


def build_constraints(
    mesh: Mesh,
    dofmap: DofMap,
    dirichlet: bool | Callable[[np.ndarray], np.ndarray] = True,
    active_set: Mapping[int, float] | tuple[np.ndarray, np.ndarray] | None = None,
) -> ConstraintSet:
    """Hanging-node, homogeneous Dirichlet (u on the outer boundary) and
    active-set (phi fixed to a target) constraints in closed form.

    ``dirichlet`` may be a predicate on vertex coordinates selecting the
    vertices whose displacements are fixed to zero.
    """
    if dofmap.revision != mesh.revision or dofmap.mesh is not mesh:
        raise ValueError("dof map was built for a different mesh revision")
    d = dofmap.dim
    V = dofmap.n_vertices
    H, hanging_v = dofmap.hanging
    hv = np.zeros(V, dtype=bool)
    hv[hanging_v] = True

    if dirichlet is True:
        bv = dofmap.boundary_vertices
    elif dirichlet is False or dirichlet is None:
        bv = np.empty(0, dtype=np.int64)
    else:
        bv = np.flatnonzero(dirichlet(dofmap.coords))
    fixed_u = np.zeros(dofmap.n_u, dtype=bool)
    fixed_u[(d * bv[:, None] + np.arange(d)).ravel()] = True
    conflicts = int(hv[bv].sum()) * d

    fixed_phi = np.zeros(V, dtype=bool)
    g = np.zeros(dofmap.n_dofs)
    if active_set is not None:
        if isinstance(active_set, tuple):
            dofs, targets = (np.asarray(a) for a in active_set)
        else:
            dofs = np.fromiter(active_set.keys(), dtype=np.int64, count=len(active_set))
            targets = np.fromiter(active_set.values(), dtype=float, count=len(active_set))
        dofs = dofs.astype(np.int64)
        verts = dofs - dofmap.n_u
        if len(verts) and (verts.min() < 0 or verts.max() >= V):
            raise ValueError("active set must contain phase-field DoFs only")
        if hv[verts].any():
            conflicts += int(hv[verts].sum())
        fixed_phi[verts] = True
        g[dofs] = targets

    Hu = sp.kron(H, sp.identity(d), format="csr")
    C_u = _block_constraints(Hu, fixed_u)
    C_phi = _block_constraints(H, fixed_phi)
    hang_u = np.repeat(hv, d) & ~fixed_u
    hang_phi = hv & ~fixed_phi
    # fixed masters of a hanging DoF enter through the inhomogeneity
    nu = dofmap.n_u
    g[:nu] += sp.diags(hang_u.astype(float)) @ Hu @ (g[:nu] * fixed_u)
    g[nu:] += sp.diags(hang_phi.astype(float)) @ H @ (g[nu:] * fixed_phi)
    fixed = np.concatenate([fixed_u, fixed_phi])
    hanging = np.concatenate([hang_u, hang_phi])
    cs = ConstraintSet(
        dofmap.n_u, V, C_u, C_phi, g, fixed | hanging, hanging, fixed, conflicts
    )
    return cs


@dataclass
class FieldVector:
    values: np.ndarray
    revision: int
    dim: int = field(default=2)

    @property
    def n_vertices(self) -> int:
        return len(self.values) // (self.dim + 1)

    @property
    def u(self) -> np.ndarray:
        """(V, d) view of the displacement block."""
        return self.values[: self.dim * self.n_vertices].reshape(-1, self.dim)

    @property
    def phi(self) -> np.ndarray:
        return self.values[self.dim * self.n_vertices :]

    def copy(self) -> "FieldVector":
        return FieldVector(self.values.copy(), self.revision, self.dim)


def zeros(dofmap: DofMap) -> FieldVector:
    return FieldVector(np.zeros(dofmap.n_dofs), dofmap.revision, dofmap.dim)


def interpolate(
    mesh: Mesh,
    dofmap: DofMap,
    u: Callable[[np.ndarray], np.ndarray] | None = None,
    phi: Callable[[np.ndarray], np.ndarray] | float | None = None,
) -> FieldVector:
    """Nodal interpolation; each callable receives the (V, d) vertex coords."""
    vec = zeros(dofmap)
    x = dofmap.coords
    if u is not None:
        vec.u[:] = np.broadcast_to(u(x), (len(x), dofmap.dim))
    if phi is not None:
        vec.phi[:] = phi(x) if callable(phi) else phi
    return vec


class PointValues(NamedTuple):
    u: np.ndarray
    phi: np.ndarray
    grad_phi: np.ndarray
    grad_u: np.ndarray


def _cell_local(dofmap: DofMap, points: np.ndarray):
    rows = dofmap.locate(points)
    h = dofmap.cell_edge[rows]
    xi = (points - dofmap.cell_anchor[rows]) / h[:, None]
    return rows, np.clip(xi, 0.0, 1.0), h


def evaluate(mesh: Mesh, dofmap: DofMap, vec: FieldVector, x: np.ndarray) -> PointValues:
    """Q1 values and gradients at points; scalar point gives unbatched output."""
    pts = np.asarray(x, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if vec.revision != dofmap.revision:
        raise ValueError("field vector does not belong to this dof map")
    rows, xi, h = _cell_local(dofmap, pts)
    N = shape_values(xi)
    G = shape_gradients(xi) / h[:, None, None]
    cv = dofmap.topology.cell_vertices[rows]
    ue = vec.u[cv]  # (n, 2^d, d)
    pe = vec.phi[cv]
    out = PointValues(
        np.einsum("na,nak->nk", N, ue),
        np.einsum("na,na->n", N, pe),
        np.einsum("naj,na->nj", G, pe),
        np.einsum("naj,nak->nkj", G, ue),
    )
    if single:
        return PointValues(*(a[0] for a in out))
    return out


def transfer(old: DofMap, vec: FieldVector, new: DofMap) -> FieldVector:
    """Interpolate an old-mesh field at the vertices of a refined mesh."""
    n_old = len(old.active_mask)
    if old.mesh is not new.mesh or new.revision < old.revision:
        raise ValueError("meshes are unrelated")
    # refinement only deactivates cells, it never re-activates ancestors
    if np.any(new.active_mask[:n_old] & ~old.active_mask):
        raise ValueError("new mesh is not a refinement of the old mesh")
    vals = evaluate(old.mesh, old, vec, new.coords)
    out = zeros(new)
    out.u[:] = vals.u
    out.phi[:] = vals.phi
    return out
