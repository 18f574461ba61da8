"""Crack functionals and file output (legacy VTK, study CSV)."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from .fem import DofMap, FieldVector, cell_quadrature, gauss_1d, shape_gradients, shape_values
from .mesh import Mesh

log = logging.getLogger(__name__)

__all__ = [
    "CodProfile",
    "LevelRecord",
    "compute_tcv",
    "compute_cod",
    "default_stations",
    "write_vtk",
    "write_study_csv",
    "read_study_csv",
    "CSV_HEADER",
]

CSV_HEADER = ["level", "dofs", "eps", "h_min", "tcv", "tcv_rel_err", "newton_iters", "gmres_mean"]


@dataclass
class CodProfile:
    stations: np.ndarray
    openings: np.ndarray

    def at(self, x: float) -> float:
        return float(np.interp(x, self.stations, self.openings))


@dataclass
class LevelRecord:
    level: int
    dofs: int
    eps: float
    h_min: float
    tcv: float
    tcv_rel_err: float
    newton_iters: int
    gmres_mean: float
    cod: CodProfile | None = field(default=None, compare=False)
    extra: dict = field(default_factory=dict, compare=False)

    def row(self) -> list[str]:
        return [
            str(self.level),
            str(self.dofs),
            f"{self.eps:.12e}",
            f"{self.h_min:.12e}",
            f"{self.tcv:.12e}",
            f"{self.tcv_rel_err:.12e}",
            str(self.newton_iters),
            f"{self.gmres_mean:.12e}",
        ]


def _cell_integrand_sum(dofmap: DofMap, vec: FieldVector, cells: np.ndarray | None = None) -> np.ndarray:
    """Per-cell integral of u . grad(phi) by 2-point Gauss."""
    d = dofmap.dim
    q = cell_quadrature(d)
    N = shape_values(q.points)
    dN = shape_gradients(q.points)
    rows = slice(None) if cells is None else cells
    cv = dofmap.topology.cell_vertices[rows]
    h = dofmap.cell_edge[rows]
    uq = np.einsum("qa,cak->cqk", N, vec.u[cv])
    gq = np.einsum("qaj,ca->cqj", dN, vec.phi[cv]) / h[:, None, None]
    return np.einsum("q,cq->c", q.weights, np.einsum("cqk,cqk->cq", uq, gq)) * h**d


def compute_tcv(mesh: Mesh, dofmap: DofMap, vec: FieldVector, cells: np.ndarray | None = None,
                signed: bool = False) -> float:
    """Total crack volume ``int u . grad(phi)``; magnitude unless ``signed``."""
    raw = float(_cell_integrand_sum(dofmap, vec, cells).sum())
    log.debug("signed TCV %.12e", raw)
    return raw if signed else abs(raw)


def default_stations() -> np.ndarray:
    return np.round(np.arange(-1.5, 1.5 + 1e-9, 0.05), 10)


def _line_integral(dofmap, vec, rows, target, lo, cv, xg, wg) -> float:
    """int u . grad(phi) along the normal line through ``target`` in ``rows``."""
    hr = dofmap.cell_edge[rows]
    n_gauss = len(xg)
    xi_in = np.clip((target[None, :] - lo[rows]) / hr[:, None], 0.0, 1.0)
    xi = np.concatenate(
        [np.repeat(xi_in[:, None, :], n_gauss, axis=1), np.broadcast_to(xg[None, :, None], (len(rows), n_gauss, 1))],
        axis=2,
    )
    N = shape_values(xi)  # (c, g, nv)
    G = shape_gradients(xi) / hr[:, None, None, None]
    uq = np.einsum("cga,cak->cgk", N, vec.u[cv[rows]])
    gq = np.einsum("cgaj,ca->cgj", G, vec.phi[cv[rows]])
    return float(np.sum(np.einsum("cgk,cgk->cg", uq, gq) * wg[None, :] * hr[:, None]))


def compute_cod(mesh: Mesh, dofmap: DofMap, vec: FieldVector, stations=None, n_gauss: int = 4,
                method: str = "line_integral") -> CodProfile:
    """Crack opening along lines normal to the crack plane.

    ``line_integral`` integrates ``u . grad(phi)`` along the normal line through
    each station (2d: vertical line ``x = x_s``; 3d: z-line through
    ``(x_s, 0)``); ``displacement_trace`` returns ``u_n(+0) - u_n(-0)`` sampled
    at the crack plane.
    """
    st = default_stations() if stations is None else np.asarray(stations, dtype=float)
    K = mesh.spec.half_width
    if np.any(np.abs(st) > K):
        raise ValueError("COD station outside the domain")
    d = dofmap.dim
    if method == "displacement_trace":
        from .fem import evaluate

        h = mesh.h_min()
        pts_p = np.zeros((len(st), d))
        pts_p[:, 0] = st
        pts_m = pts_p.copy()
        pts_p[:, -1] = 0.5 * h
        pts_m[:, -1] = -0.5 * h
        up = evaluate(mesh, dofmap, vec, pts_p).u[:, -1]
        um = evaluate(mesh, dofmap, vec, pts_m).u[:, -1]
        return CodProfile(st, up - um)
    if method != "line_integral":
        raise ValueError(f"unknown COD method {method!r}")
    xg, wg = gauss_1d(n_gauss)
    anchor = dofmap.cell_anchor
    h = dofmap.cell_edge
    lo = anchor[:, : d - 1]
    hi = lo + h[:, None]
    cv = dofmap.topology.cell_vertices
    tol = 1e-12 * K
    # a line on a cell face sees a jump in grad(phi); average the one-sided
    # limits, each side selected half-open so every cell layer counts once
    sides = [np.array([(m >> k) & 1 for k in range(d - 1)], dtype=bool) for m in range(2 ** (d - 1))]
    out = np.zeros(len(st))
    for i, xs in enumerate(st):
        target = np.zeros(d - 1)
        target[0] = xs
        total = 0.0
        for upper in sides:
            from_low = (lo <= target + tol) & ((target < hi - tol) | (hi >= K - tol))
            from_high = (target <= hi + tol) & ((lo < target - tol) | (lo <= -K + tol))
            rows = np.flatnonzero(np.all(np.where(upper, from_high, from_low), axis=1))
            total += _line_integral(dofmap, vec, rows, target, lo, cv, xg, wg)
        out[i] = total / len(sides)
    return CodProfile(st, np.abs(out))


# ----------------------------------------------------------------------
# writers
# ----------------------------------------------------------------------
_VTK_QUAD = (0, 1, 3, 2)
_VTK_HEX = (0, 1, 3, 2, 4, 5, 7, 6)


def _fmt(a: np.ndarray) -> str:
    return " ".join(f"{v:.17g}" for v in np.ravel(a))


def write_vtk(path: str, mesh: Mesh, dofmap: DofMap, fields: dict[str, np.ndarray],
              cell_fields: dict[str, np.ndarray] | None = None, title: str = "crackfield") -> str:
    """Legacy ASCII unstructured grid; vector fields are (V, d), scalars (V,)."""
    d = dofmap.dim
    pts = np.zeros((dofmap.n_vertices, 3))
    pts[:, :d] = dofmap.coords
    order = _VTK_QUAD if d == 2 else _VTK_HEX
    conn = dofmap.topology.cell_vertices[:, order]
    nc, nv = conn.shape
    ctype = 9 if d == 2 else 12
    buf = io.StringIO()
    buf.write("# vtk DataFile Version 3.0\n")
    buf.write(f"{title}\nASCII\nDATASET UNSTRUCTURED_GRID\n")
    buf.write(f"POINTS {len(pts)} double\n")
    for p in pts:
        buf.write(_fmt(p) + "\n")
    buf.write(f"CELLS {nc} {nc * (nv + 1)}\n")
    for c in conn:
        buf.write(f"{nv} " + " ".join(map(str, c)) + "\n")
    buf.write(f"CELL_TYPES {nc}\n")
    buf.write("\n".join([str(ctype)] * nc) + "\n")
    if fields:
        buf.write(f"POINT_DATA {len(pts)}\n")
        for name, arr in fields.items():
            arr = np.asarray(arr, dtype=float)
            if arr.ndim == 2:
                vec = np.zeros((len(arr), 3))
                vec[:, : arr.shape[1]] = arr
                buf.write(f"VECTORS {name} double\n")
                for v in vec:
                    buf.write(_fmt(v) + "\n")
            else:
                buf.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                buf.write("\n".join(f"{v:.17g}" for v in arr) + "\n")
    if cell_fields:
        buf.write(f"CELL_DATA {nc}\n")
        for name, arr in cell_fields.items():
            buf.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
            buf.write("\n".join(f"{v:.17g}" for v in np.asarray(arr, dtype=float)) + "\n")
    try:
        with open(path, "w", encoding="ascii", newline="\n") as fh:
            fh.write(buf.getvalue())
    except OSError as exc:
        raise OSError(f"cannot write VTK file {path}: {exc}") from exc
    return path


def write_study_csv(path: str, records) -> str:
    records = sorted(records, key=lambda r: r.level)
    if not records:
        raise ValueError("no records to write")
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for r in records:
                w.writerow(r.row())
    except OSError as exc:
        raise OSError(f"cannot write CSV file {path}: {exc}") from exc
    return path


def read_study_csv(path: str) -> list[LevelRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(
                LevelRecord(
                    int(row["level"]), int(row["dofs"]), float(row["eps"]), float(row["h_min"]),
                    float(row["tcv"]), float(row["tcv_rel_err"]), int(row["newton_iters"]),
                    float(row["gmres_mean"]),
                )
            )
    return out
