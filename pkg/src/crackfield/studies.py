"""The benchmark experiments: single solve, epsilon convergence, domain size,
COD convergence and the 3d table.  Each returns a ``StudyResult`` and writes
CSV files, a text summary and figures into its output directory."""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .adapt import CycleResult, RefinementPolicy, adaptive_cycle, prerefine_band
from .config import RunConfig
from .mesh import DomainSpec, Mesh, create_mesh, uniform_refine
from .model import Material
from .postproc import LevelRecord, compute_cod, compute_tcv, write_study_csv, write_vtk
from .reference import ReferenceError_, SneddonParams, fit_rate, richardson, tcv_exact

log = logging.getLogger(__name__)

__all__ = [
    "STUDIES",
    "Check",
    "StudyResult",
    "DOMAIN_TARGETS",
    "TARGET_3D_ERRORS",
    "run_study",
    "report",
    "level_records",
    "amg_iteration_trend",
]

STUDIES = ("solve", "eps_convergence", "domain_study", "cod_study", "sneddon3d")

# benchmark targets: percent TCV error of the extrapolated value per half width
DOMAIN_TARGETS = {5.0: 5.6, 10.0: 1.5, 20.0: 0.5, 40.0: 0.1}
# percent TCV error of the 3d tied-epsilon runs per resolution 10 l0 / h
TARGET_3D_ERRORS = {16: 586.67, 32: 292.14, 64: 98.22, 128: 34.98}
TARGET_3D_TCV = {16: 3.5158e-02, 32: 2.0078e-02, 64: 1.0149e-02, 128: 6.9110e-03}


@dataclass
class Check:
    name: str
    value: float
    target: str
    passed: bool

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.value:.6g} (target {self.target})"


@dataclass
class StudyResult:
    kind: str
    series: dict[str, list[LevelRecord]] = field(default_factory=dict)
    metrics: dict[str, float] = field(default_factory=dict)
    tables: dict[str, list[dict]] = field(default_factory=dict)
    checks: list[Check] = field(default_factory=list)
    converged: bool = True
    files: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


# ----------------------------------------------------------------------
# helpers
# ----------------------------------------------------------------------
def _initial_mesh(dim: int, K: float, n0: int, pre_refinements: int, material: Material,
                  band_h: float, max_level: int) -> Mesh:
    mesh = create_mesh(DomainSpec(dim, K, n0))
    if pre_refinements:
        uniform_refine(mesh, pre_refinements)
    prerefine_band(mesh, material, band_h, max_level)
    return mesh


def _band_edge_for_eps(material: Material, dim: int) -> float:
    # largest edge whose mesh size satisfies eps = c_eps * h
    h = material.eps_fixed / material.c_eps
    return h / math.sqrt(dim) if material.eps_h == "diameter" else h


def level_records(results: list[CycleResult], material: Material, dim: int,
                  cod_method: str = "line_integral") -> list[LevelRecord]:
    exact = tcv_exact(SneddonParams.from_material(material, dim))
    out = []
    for r in results:
        mesh = r.dofmap.mesh
        tcv = compute_tcv(mesh, r.dofmap, r.state.vec)
        cod0 = compute_cod(mesh, r.dofmap, r.state.vec, stations=[0.0], method=cod_method).openings[0]
        rel = abs(tcv - exact) / exact if exact > 0 else float("nan")
        rec = LevelRecord(r.level, r.dofmap.n_dofs, r.eps, r.h_min, tcv, rel, r.newton_iters, r.gmres_mean)
        rec.extra.update(
            cod0=float(cod0), seconds=r.seconds, converged=r.converged,
            h_eff=r.dofmap.n_dofs ** (-1.0 / dim), **r.extra,
        )
        out.append(rec)
    return out


def _run_adaptive(mesh: Mesh, material: Material, cfg: RunConfig, cycles: int, dump: str | None,
                  cod_method: str) -> tuple[list[LevelRecord], list[CycleResult]]:
    results = adaptive_cycle(mesh, material, cfg.policy(), cycles, cfg.solver_options(dump))
    return level_records(results, material, mesh.dim, cod_method), results


def _write(res: StudyResult, out: str, name: str, records: list[LevelRecord]) -> None:
    if records:
        res.files.append(write_study_csv(os.path.join(out, f"{name}.csv"), records))


def _write_table(res: StudyResult, out: str, name: str, rows: list[dict]) -> None:
    import csv

    if not rows:
        return
    path = os.path.join(out, f"{name}.csv")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.12e}" if isinstance(v, float) else v) for k, v in row.items()})
    res.files.append(path)


def _converged(records: list[LevelRecord], expected: int) -> bool:
    return len(records) == expected and all(r.extra.get("converged", True) for r in records)


# ----------------------------------------------------------------------
# studies
# ----------------------------------------------------------------------
def _solve(cfg: RunConfig, out: str, dump: str | None) -> StudyResult:
    res = StudyResult("solve")
    mat = cfg.material_model()
    band = cfg.band_h if cfg.eps_mode == "tied" else min(cfg.band_h, _band_edge_for_eps(mat, cfg.dimension))
    mesh = _initial_mesh(cfg.dimension, cfg.K, cfg.n0, cfg.pre_refinements, mat, band, cfg.adapt.max_level)
    recs, results = _run_adaptive(mesh, mat, cfg, 0, dump, cfg.study.cod_method)
    res.series["solve"] = recs
    res.converged = _converged(recs, 1)
    _write(res, out, "solve", recs)
    last = results[-1]
    if cfg.dimension == 2:
        prof = compute_cod(mesh, last.dofmap, last.state.vec, method=cfg.study.cod_method)
        recs[-1].cod = prof
        res.tables["cod_profile"] = [{"x": float(x), "cod": float(c)} for x, c in zip(prof.stations, prof.openings)]
        _write_table(res, out, "cod_profile", res.tables["cod_profile"])
    if cfg.vtk:
        dm, st = last.dofmap, last.state
        res.files.append(write_vtk(
            os.path.join(out, "solution.vtk"), mesh, dm,
            {"u": st.u, "phi": st.phi, "phi_old": st.phi_old},
        ))
    res.metrics.update(tcv=recs[-1].tcv, tcv_rel_err=recs[-1].tcv_rel_err, cod0=recs[-1].extra["cod0"],
                       dofs=recs[-1].dofs)
    return res


def _eps_convergence(cfg: RunConfig, out: str, dump: str | None) -> StudyResult:
    res = StudyResult("eps_convergence")
    st = cfg.study
    dim = cfg.dimension
    rows = []
    for eps in st.eps_list:
        mat = cfg.material_model().with_(eps_mode="fixed", eps_fixed=eps)
        mesh = _initial_mesh(dim, cfg.K, cfg.n0, cfg.pre_refinements, mat, _band_edge_for_eps(mat, dim),
                             cfg.adapt.max_level)
        recs, _ = _run_adaptive(mesh, mat, cfg, st.eps_cycles, dump, st.cod_method)
        name = f"eps_{eps:g}"
        res.series[name] = recs
        _write(res, out, name, recs)
        if not _converged(recs, st.eps_cycles + 1):
            res.converged = False
            break
        last = recs[-1]
        rows.append({"eps": float(eps), "dofs": last.dofs, "h_min": last.h_min, "tcv": last.tcv})
    res.tables["eps"] = rows
    if res.converged and len(rows) >= 3:
        eps = np.array([r["eps"] for r in rows])
        tcv = np.array([r["tcv"] for r in rows])
        ratio = eps[-2] / eps[-1]
        try:
            fit = richardson(tcv, ratio)
            for r in rows:
                r["err"] = abs(r["tcv"] - fit.limit)
            slope = fit_rate((r["eps"], r["err"]) for r in rows)
            res.metrics.update(tcv_star=float(fit.limit), richardson_order=fit.order, slope=slope)
            res.checks.append(Check("eps slope of |TCV(eps) - TCV*|", slope, "[0.7, 1.3]", 0.7 <= slope <= 1.3))
        except ReferenceError_ as exc:
            res.metrics["error"] = float("nan")
            res.checks.append(Check(f"eps slope ({exc})", float("nan"), "[0.7, 1.3]", False))
    _write_table(res, out, "eps_summary", rows)
    return res


def _domain_study(cfg: RunConfig, out: str, dump: str | None) -> StudyResult:
    res = StudyResult("domain_study")
    st = cfg.study
    mat = cfg.material_model().with_(eps_mode="tied")
    exact = tcv_exact(SneddonParams.from_material(mat, cfg.dimension))
    rows = []
    for K in st.domains:
        mesh = _initial_mesh(cfg.dimension, K, cfg.n0, cfg.pre_refinements, mat, cfg.band_h, cfg.adapt.max_level)
        recs, _ = _run_adaptive(mesh, mat, cfg, cfg.cycles, dump, st.cod_method)
        name = f"domain_K{K:g}"
        res.series[name] = recs
        _write(res, out, name, recs)
        if not _converged(recs, cfg.cycles + 1):
            res.converged = False
            break
        row = {"K": float(K), "dofs": recs[-1].dofs, "tcv_last": recs[-1].tcv}
        try:
            fit = richardson([r.tcv for r in recs])
            err = 100.0 * abs(fit.limit - exact) / exact
            row.update(tcv_extrapolated=float(fit.limit), order=fit.order, error_pct=err)
        except ReferenceError_ as exc:
            log.warning("K=%g: %s", K, exc)
            err = float("nan")
            row.update(tcv_extrapolated=float("nan"), order=float("nan"), error_pct=err)
        target = DOMAIN_TARGETS.get(float(K))
        if target is not None:
            row["target_pct"] = target
            res.checks.append(Check(f"domain K={K:g} extrapolated error %", err, f"{target} +- 1.0",
                                    bool(abs(err - target) <= 1.0)))
        rows.append(row)
    res.tables["domains"] = rows
    _write_table(res, out, "domain_summary", rows)
    return res


def _cod_rates(recs: list[LevelRecord]) -> dict:
    cod = np.array([r.extra["cod0"] for r in recs])
    fit = richardson(cod)
    err = np.abs(cod - fit.limit)
    rate = fit_rate(zip([r.extra["h_eff"] for r in recs], err))
    return {"reference": float(fit.limit), "order_hmin": fit.order, "rate": rate, "errors": err}


def _cod_study(cfg: RunConfig, out: str, dump: str | None) -> StudyResult:
    res = StudyResult("cod_study")
    st = cfg.study
    dim = cfg.dimension
    mat = cfg.material_model().with_(eps_mode="tied")
    mesh = _initial_mesh(dim, st.cod_K, cfg.n0, cfg.pre_refinements, mat, cfg.band_h, cfg.adapt.max_level)
    adaptive, _ = _run_adaptive(mesh, mat, cfg, st.cod_cycles, dump, st.cod_method)
    res.series["cod_adaptive"] = adaptive
    _write(res, out, "cod_adaptive", adaptive)
    if not _converged(adaptive, st.cod_cycles + 1):
        res.converged = False
        return res
    uniform = []
    budget = adaptive[-1].dofs
    opt = cfg.solver_options(dump)
    for k in range(1, st.cod_uniform_levels + 1):
        mesh = create_mesh(DomainSpec(dim, st.cod_K, cfg.n0))
        uniform_refine(mesh, k + cfg.pre_refinements)
        pol = replace(cfg.policy(), estimator=False)
        results = adaptive_cycle(mesh, mat, pol, 0, opt, max_corrections=0)
        rec = level_records(results, mat, dim, st.cod_method)[0]
        rec.level = k
        uniform.append(rec)
        if not rec.extra["converged"]:
            res.converged = False
            break
    res.series["cod_uniform"] = uniform
    _write(res, out, "cod_uniform", uniform)
    if not res.converged:
        return res
    rows = []
    for name, recs in (("adaptive", adaptive), ("uniform", uniform)):
        try:
            r = _cod_rates(recs)
        except ReferenceError_ as exc:
            log.warning("%s COD sequence: %s", name, exc)
            r = {"reference": float("nan"), "order_hmin": float("nan"), "rate": float("nan"),
                 "errors": np.full(len(recs), np.nan)}
        res.metrics[f"{name}_rate"] = r["rate"]
        res.metrics[f"{name}_reference"] = r["reference"]
        for rec, e in zip(recs, r["errors"]):
            rows.append({"series": name, "level": rec.level, "dofs": rec.dofs, "cod0": rec.extra["cod0"],
                         "error": float(e)})
    res.tables["cod"] = rows
    _write_table(res, out, "cod_summary", rows)
    a, u = res.metrics["adaptive_rate"], res.metrics["uniform_rate"]
    res.metrics["dof_budget"] = budget
    res.checks.append(Check("adaptive COD(0) rate in h_eff = N^(-1/2)", a, ">= 1.7", bool(a >= 1.7)))
    res.checks.append(Check("uniform COD(0) rate below adaptive", u, f"< {a:.4g}", bool(u < a)))
    return res


def _sneddon3d(cfg: RunConfig, out: str, dump: str | None) -> StudyResult:
    res = StudyResult("sneddon3d")
    st = cfg.study
    mat = cfg.material_model().with_(eps_mode="tied")
    resolutions = list(st.resolutions)
    width = 2.0 * st.K3d
    h0 = width / resolutions[0]
    mesh = _initial_mesh(3, st.K3d, st.n0_3d, 0, mat, h0, cfg.adapt.max_level)
    cycles = len(resolutions) - 1
    records: list[LevelRecord] = []

    def on_level(r: CycleResult):
        rec = level_records([r], mat, 3, st.cod_method)[0]
        records.append(rec)
        log.info("3d level %d: dofs=%d tcv=%.6e", r.level, rec.dofs, rec.tcv)

    adaptive_cycle(mesh, mat, cfg.policy(), cycles, cfg.solver_options(dump), callback=on_level)
    res.series["sneddon3d"] = records
    _write(res, out, "sneddon3d", records)
    res.converged = _converged(records, cycles + 1)
    rows = []
    for res_k, rec in zip(resolutions, records):
        err = 100.0 * rec.tcv_rel_err
        rows.append({"resolution": res_k, "dofs": rec.dofs, "eps": rec.eps, "tcv": rec.tcv, "error_pct": err,
                     "target_pct": TARGET_3D_ERRORS.get(res_k, float("nan"))})
    res.tables["sneddon3d"] = rows
    _write_table(res, out, "sneddon3d_table", rows)
    errs = [r["error_pct"] for r in rows]
    if len(errs) >= 2:
        mono = all(b < a for a, b in zip(errs, errs[1:]))
        res.checks.append(Check("3d errors decrease monotonically", float(mono), "1", mono))
    for r in rows:
        t = r["target_pct"]
        if math.isfinite(t):
            ratio = r["error_pct"] / t
            res.checks.append(Check(f"3d error ratio at 10l0/h={r['resolution']}", ratio, "[1/1.5, 1.5]",
                                    bool(1 / 1.5 <= ratio <= 1.5)))
    return res


def amg_iteration_trend(cfg: RunConfig, levels: range | list[int], K: float = 5.0) -> list[tuple[int, int]]:
    """GMRES iterations of the first Newton step with the AMG block
    preconditioner on globally refined 2d meshes; returns (dofs, iterations)."""
    from .fem import build_constraints, build_dof_map
    from .linsolve import BlockPreconditioner, gmres
    from .model import Assembler, assemble_jacobian, extrapolate_phi
    from .adapt import seed_state

    mat = cfg.material_model().with_(eps_mode="tied")
    opt = cfg.solver_options()
    out = []
    for k in levels:
        mesh = create_mesh(DomainSpec(2, K, cfg.n0))
        uniform_refine(mesh, k)
        dm = build_dof_map(mesh)
        state = seed_state(mesh, dm, mat)
        eps, kappa = mat.epsilon(mesh), mat.kappa(mesh)
        # at the first iterate the multiplier is zero, so A is the seeded crack
        verts = np.flatnonzero(state.phi_old == 0.0)
        cs = build_constraints(mesh, dm, active_set=(dm.n_u + verts, state.phi_old[verts]))
        asm = Assembler(dm, mat)
        phi_ex = extrapolate_phi(state)
        F = cs.condense_vector(asm.residual(state.vec, phi_ex, eps, kappa))
        system = assemble_jacobian(mesh, dm, cs, mat, state, phi_ex, eps, kappa, assembler=asm)
        prec = BlockPreconditioner.build(system, "amg", coords=dm.coords, **opt.amg_options())
        sol = gmres(system, -F, prec, rtol=opt.gmres_rtol, max_iter=opt.gmres_max, restart=opt.gmres_restart)
        if not sol.converged:
            raise RuntimeError(f"GMRES did not converge on level {k}")
        log.info("AMG trend level %d: dofs=%d iterations=%d", k, dm.n_dofs, sol.iterations)
        out.append((dm.n_dofs, sol.iterations))
    return out


_RUNNERS = {
    "solve": _solve,
    "eps_convergence": _eps_convergence,
    "domain_study": _domain_study,
    "cod_study": _cod_study,
    "sneddon3d": _sneddon3d,
}


def run_study(kind: str, cfg: RunConfig, out: str | None = None, dump_matrices: bool = False,
              figures: bool = True) -> StudyResult:
    """Run one experiment and write its artifacts below ``out``."""
    cfg.validate()
    if kind not in _RUNNERS:
        raise ValueError(f"unknown study {kind!r}; expected one of {', '.join(STUDIES)}")
    out = out or cfg.output
    os.makedirs(out, exist_ok=True)
    dump = os.path.join(out, "matrices") if dump_matrices else None
    if dump:
        os.makedirs(dump, exist_ok=True)
    res = _RUNNERS[kind](cfg, out, dump)
    text = report(res)
    path = os.path.join(out, "summary.txt")
    with open(path, "w") as fh:
        fh.write(text)
    res.files.append(path)
    if figures:
        from .plotting import plot_study

        res.files.extend(plot_study(res, out))
    return res


# ----------------------------------------------------------------------
# report
# ----------------------------------------------------------------------
def report(res: StudyResult) -> str:
    """Per-level tables, fitted rates and pass/fail lines."""
    lines = [f"study: {res.kind}", f"converged: {'yes' if res.converged else 'no'}", ""]
    for name, recs in res.series.items():
        lines.append(f"[{name}]")
        lines.append(f"{'level':>5} {'dofs':>9} {'eps':>11} {'h_min':>11} {'tcv':>13} {'rel_err':>10} "
                     f"{'newton':>6} {'gmres':>6}")
        for r in recs:
            lines.append(f"{r.level:5d} {r.dofs:9d} {r.eps:11.4e} {r.h_min:11.4e} {r.tcv:13.6e} "
                         f"{r.tcv_rel_err:10.3e} {r.newton_iters:6d} {r.gmres_mean:6.2f}")
        tcv = [r.tcv for r in recs]
        if len(tcv) >= 3:
            try:
                fit = richardson(tcv)
                lines.append(f"richardson: order={fit.order:.2f} limit={fit.limit:.6e}")
            except ReferenceError_ as exc:
                lines.append(f"richardson: {exc}")
        lines.append("")
    for name, rows in res.tables.items():
        if not rows:
            continue
        lines.append(f"[{name}]")
        keys = list(rows[0])
        lines.append(" ".join(f"{k:>14}" for k in keys))
        for row in rows:
            lines.append(" ".join(
                f"{row.get(k, ''):>14.6g}" if isinstance(row.get(k), float) else f"{row.get(k, '')!s:>14}"
                for k in keys
            ))
        lines.append("")
    if res.metrics:
        lines.append("[metrics]")
        for k, v in res.metrics.items():
            lines.append(f"{k} = {v:.6g}" if isinstance(v, (int, float)) else f"{k} = {v}")
        lines.append("")
    if res.checks:
        lines.append("[checks]")
        lines.extend(c.line() for c in res.checks)
        lines.append("")
    return "\n".join(lines)
