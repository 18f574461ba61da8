"""Adaptive forest of axis-aligned quadrilaterals / hexahedra on (-K, K)^d.

Cells are addressed by ``(level, integer index)``; a cell at level ``l`` with
index ``i`` covers ``[-K + i h_l, -K + (i + 1) h_l]`` per axis with
``h_l = 2K / (n0 2^l)``.  Refinement is isotropic and face 2:1 balanced.
Cell ids are stable: children are appended, nothing is ever deleted.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Iterator, NamedTuple

import numpy as np

__all__ = [
    "DomainSpec",
    "Mesh",
    "Faces",
    "Topology",
    "create_mesh",
    "refine",
    "uniform_refine",
    "active_faces",
]

_IDX_BITS = 20
_VTX_BITS = 21
_MAX_LEVEL = 15


@dataclass(frozen=True)
class DomainSpec:
    dim: int = 2
    half_width: float = 20.0
    n0: int = 8

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError(f"dimension must be 2 or 3, got {self.dim}")
        if not self.half_width > 0:
            raise ValueError(f"half width must be positive, got {self.half_width}")
        if int(self.n0) != self.n0 or self.n0 < 1:
            raise ValueError(f"n0 must be a positive integer, got {self.n0}")

    @property
    def coarse_edge(self) -> float:
        return 2.0 * self.half_width / self.n0


class Faces(NamedTuple):
    """Flat face table; ``neighbor == -1`` marks a boundary face.

    ``relative`` is ``level(neighbor) - level(cell)`` (0 or -1; faces are
    always reported from the finer side).
    """

    cell: np.ndarray
    face: np.ndarray
    neighbor: np.ndarray
    relative: np.ndarray

    def __iter__(self) -> Iterator:  # type: ignore[override]
        return iter(zip(self.cell, self.face, self.neighbor, self.relative))

    @property
    def boundary(self) -> np.ndarray:
        return self.neighbor < 0


@dataclass(frozen=True)
class Topology:
    """Vertex numbering of the active cells.

    ``cell_vertices[c, a]`` uses lexicographic corner order (x fastest).
    ``vertex_int`` holds vertex coordinates in units of the finest
    representable edge; ``vertex_keys`` is sorted, so vertex numbers follow
    lexicographic (z, y, x) order.
    """

    cells: np.ndarray
    cell_vertices: np.ndarray
    vertex_int: np.ndarray
    vertex_keys: np.ndarray
    coords: np.ndarray

    @property
    def n_vertices(self) -> int:
        return len(self.vertex_keys)

    def find_vertices(self, int_points: np.ndarray) -> np.ndarray:
        """Vertex numbers for integer points, -1 where no vertex exists."""
        keys = _vertex_key(int_points)
        pos = np.searchsorted(self.vertex_keys, keys)
        pos = np.minimum(pos, len(self.vertex_keys) - 1)
        return np.where(self.vertex_keys[pos] == keys, pos, -1)


def _cell_key(level, idx):
    level = np.asarray(level, dtype=np.int64)
    idx = np.asarray(idx, dtype=np.int64)
    key = level << 60
    for k in range(idx.shape[-1]):
        key = key | (idx[..., k] << (_IDX_BITS * (2 - k)))
    return key


def _vertex_key(int_points):
    p = np.asarray(int_points, dtype=np.int64)
    key = np.zeros(p.shape[:-1], dtype=np.int64)
    # z most significant so sorted keys give x-fastest numbering
    for k in range(p.shape[-1]):
        key = key | (p[..., k] << (_VTX_BITS * k))
    return key


def corner_offsets(dim: int) -> np.ndarray:
    """(2^d, d) array of 0/1 corner offsets, x fastest."""
    c = np.arange(2**dim)
    return np.stack([(c >> k) & 1 for k in range(dim)], axis=1)


class Mesh:
    """Forest of quadtree/octree cells with a 2:1 face balance."""

    def __init__(self, spec: DomainSpec):
        self.spec = spec
        self.dim = spec.dim
        d = spec.dim
        # finest level still representable in the packed vertex keys
        self.lmax = min(_MAX_LEVEL, _IDX_BITS - (spec.n0 - 1).bit_length())
        c = np.arange(spec.n0**d)
        grid = np.stack([(c // spec.n0**k) % spec.n0 for k in range(d)], axis=1)
        n = len(grid)
        self.level = np.zeros(n, dtype=np.int64)
        self.index = grid.astype(np.int64)
        self.parent = np.full(n, -1, dtype=np.int64)
        self.first_child = np.full(n, -1, dtype=np.int64)
        self.active = np.ones(n, dtype=bool)
        self.revision = 0
        self._reset_lookup()

    # ------------------------------------------------------------------
    # bookkeeping
    # ------------------------------------------------------------------
    def _reset_lookup(self):
        self._keys = _cell_key(self.level, self.index)
        self._order = np.argsort(self._keys, kind="stable")
        self._sorted_keys = self._keys[self._order]
        self.__dict__.pop("topology", None)
        self.__dict__.pop("active_ids", None)

    def _find(self, level, idx) -> np.ndarray:
        """Cell ids for (level, idx) pairs, -1 if that cell does not exist."""
        n = self.spec.n0 << np.asarray(level, dtype=np.int64)
        inside = np.all((idx >= 0) & (idx < n[..., None]), axis=-1)
        keys = _cell_key(level, np.where(inside[..., None], idx, 0))
        pos = np.searchsorted(self._sorted_keys, keys)
        pos = np.minimum(pos, len(self._sorted_keys) - 1)
        hit = (self._sorted_keys[pos] == keys) & inside
        return np.where(hit, self._order[pos], -1)

    @property
    def n_cells(self) -> int:
        return len(self.level)

    @cached_property
    def active_ids(self) -> np.ndarray:
        return np.flatnonzero(self.active)

    @property
    def n_active(self) -> int:
        return len(self.active_ids)

    def edge(self, cells=None) -> np.ndarray:
        lev = self.level if cells is None else self.level[cells]
        return self.spec.coarse_edge / (2.0**lev)

    def anchor(self, cells=None) -> np.ndarray:
        idx = self.index if cells is None else self.index[cells]
        return -self.spec.half_width + idx * self.edge(cells)[..., None]

    def center(self, cells=None) -> np.ndarray:
        return self.anchor(cells) + 0.5 * self.edge(cells)[..., None]

    def diameter(self, cells=None) -> np.ndarray:
        return np.sqrt(self.dim) * self.edge(cells)

    def h_min(self) -> float:
        return float(self.edge(self.active_ids).min())

    def measure(self, cells=None) -> np.ndarray:
        return self.edge(cells) ** self.dim

    def max_level(self) -> int:
        return int(self.level[self.active_ids].max())

    # ------------------------------------------------------------------
    # neighbors
    # ------------------------------------------------------------------
    def face_neighbor_leaf(self, cells: np.ndarray, face: int) -> np.ndarray:
        """Active cell across ``face`` of each cell at equal or coarser level.

        Returns -1 on the domain boundary and -2 where the same-level
        neighbor exists but is itself refined (finer neighbors).
        """
        cells = np.asarray(cells, dtype=np.int64)
        axis, side = divmod(face, 2)
        lev = self.level[cells].copy()
        idx = self.index[cells].copy()
        idx[:, axis] += 1 if side else -1
        n = self.spec.n0 << lev
        out = np.full(len(cells), -1, dtype=np.int64)
        todo = (idx[:, axis] >= 0) & (idx[:, axis] < n)
        first = True
        while todo.any():
            hit = self._find(lev[todo], idx[todo])
            sel = np.flatnonzero(todo)
            found = hit >= 0
            is_active = np.zeros_like(found)
            is_active[found] = self.active[hit[found]]
            if first:
                out[sel[found & ~is_active]] = -2
            out[sel[found & is_active]] = hit[found & is_active]
            todo[sel[found]] = False
            # go one level up for the remaining ones
            lev[todo] -= 1
            idx[todo] >>= 1
            todo &= lev >= 0
            first = False
        return out

    # ------------------------------------------------------------------
    # topology
    # ------------------------------------------------------------------
    @cached_property
    def topology(self) -> Topology:
        cells = self.active_ids
        d = self.dim
        off = corner_offsets(d)
        shift = (self.lmax - self.level[cells])[:, None, None]
        pts = (self.index[cells][:, None, :] + off[None, :, :]) << shift
        keys = _vertex_key(pts)
        vkeys, inv = np.unique(keys.ravel(), return_inverse=True)
        cell_vertices = inv.reshape(len(cells), 2**d)
        vint = np.stack(
            [(vkeys >> (_VTX_BITS * k)) & ((1 << _VTX_BITS) - 1) for k in range(d)],
            axis=1,
        )
        unit = self.spec.coarse_edge / 2.0**self.lmax
        coords = -self.spec.half_width + vint * unit
        return Topology(cells, cell_vertices, vint, vkeys, coords)

    def int_unit(self) -> float:
        return self.spec.coarse_edge / 2.0**self.lmax

    # ------------------------------------------------------------------
    # point location
    # ------------------------------------------------------------------
    def locate(self, points: np.ndarray, active: np.ndarray | None = None,
               tol: float = 1e-10) -> np.ndarray:
        """Active cell containing each point; ties go to the smallest id.

        ``active`` selects an earlier snapshot of the active flags.
        """
        if active is None:
            active = self.active
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        K = self.spec.half_width
        if np.any(np.abs(pts) > K * (1 + 1e-12)):
            raise ValueError("point outside the domain")
        d = self.dim
        best = np.full(len(pts), np.iinfo(np.int64).max)
        levels = np.unique(self.level[np.flatnonzero(active)])
        for lev in levels:
            h = self.spec.coarse_edge / 2.0**lev
            t = (pts + K) / h
            lo = np.floor(t - tol).astype(np.int64)
            hi = np.floor(t + tol).astype(np.int64)
            for combo in corner_offsets(d):
                idx = np.where(combo[None, :] == 1, lo, hi)
                cid = self._find(np.full(len(pts), lev), idx)
                ok = cid >= 0
                ok[ok] = cid[ok] < len(active)
                ok[ok] = active[cid[ok]]
                best = np.where(ok & (cid < best), cid, best)
        if np.any(best == np.iinfo(np.int64).max):
            raise ValueError("point could not be located")
        return best


def create_mesh(spec: DomainSpec) -> Mesh:
    return Mesh(spec)


def _balance_closure(mesh: Mesh, marked: np.ndarray) -> np.ndarray:
    flags = np.zeros(mesh.n_cells, dtype=bool)
    flags[marked] = True
    frontier = np.asarray(marked, dtype=np.int64)
    while len(frontier):
        new = []
        for face in range(2 * mesh.dim):
            nb = mesh.face_neighbor_leaf(frontier, face)
            ok = nb >= 0
            coarser = np.zeros_like(ok)
            coarser[ok] = mesh.level[nb[ok]] < mesh.level[frontier[ok]]
            cand = nb[coarser]
            cand = cand[~flags[cand]]
            if len(cand):
                cand = np.unique(cand)
                flags[cand] = True
                new.append(cand)
        frontier = np.concatenate(new) if new else np.empty(0, dtype=np.int64)
    return np.flatnonzero(flags)


def refine(mesh: Mesh, marked: Iterable[int]) -> Mesh:
    """Split marked cells into 2^d children, closing the 2:1 face balance."""
    marked = np.unique(np.fromiter(marked, dtype=np.int64))
    if len(marked) == 0:
        return mesh
    if marked.min() < 0 or marked.max() >= mesh.n_cells:
        raise KeyError("unknown cell id in marked set")
    if not mesh.active[marked].all():
        raise KeyError("marked cells must be active")
    if mesh.level[marked].max() >= mesh.lmax:
        raise ValueError(f"cannot refine beyond level {mesh.lmax}")
    cells = _balance_closure(mesh, marked)
    d = mesh.dim
    nc = 2**d
    off = corner_offsets(d)
    start = mesh.n_cells
    child_ids = start + np.arange(len(cells) * nc).reshape(len(cells), nc)
    child_index = (2 * mesh.index[cells])[:, None, :] + off[None]
    mesh.level = np.concatenate([mesh.level, np.repeat(mesh.level[cells] + 1, nc)])
    mesh.index = np.concatenate([mesh.index, child_index.reshape(-1, d)])
    mesh.parent = np.concatenate([mesh.parent, np.repeat(cells, nc)])
    mesh.first_child = np.concatenate(
        [mesh.first_child, np.full(len(cells) * nc, -1, dtype=np.int64)]
    )
    mesh.first_child[cells] = child_ids[:, 0]
    mesh.active = np.concatenate([mesh.active, np.ones(len(cells) * nc, dtype=bool)])
    mesh.active[cells] = False
    mesh.revision += 1
    mesh._reset_lookup()
    return mesh


def uniform_refine(mesh: Mesh, times: int = 1) -> Mesh:
    if times < 0:
        raise ValueError("times must be nonnegative")
    for _ in range(times):
        refine(mesh, mesh.active_ids)
    return mesh


def active_faces(mesh: Mesh) -> Faces:
    """Every interior face once (from the finer side) plus all boundary faces."""
    cells = mesh.active_ids
    out_c, out_f, out_n, out_r = [], [], [], []
    for face in range(2 * mesh.dim):
        nb = mesh.face_neighbor_leaf(cells, face)
        bnd = nb == -1
        interior = nb >= 0
        same = np.zeros_like(interior)
        same[interior] = mesh.level[nb[interior]] == mesh.level[cells[interior]]
        # same-level faces are reported once from the low side
        keep = bnd | (interior & ~same) | (same & (face % 2 == 1))
        c = cells[keep]
        n = np.where(bnd[keep], -1, nb[keep])
        rel = np.where(n >= 0, mesh.level[np.maximum(n, 0)] - mesh.level[c], 0)
        out_c.append(c)
        out_f.append(np.full(len(c), face))
        out_n.append(n)
        out_r.append(rel)
    cat = np.concatenate
    c, f, n, r = cat(out_c), cat(out_f), cat(out_n), cat(out_r)
    order = np.lexsort((f, c))
    return Faces(c[order], f[order], n[order], r[order])
