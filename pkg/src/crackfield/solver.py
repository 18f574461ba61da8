"""Semi-smooth Newton with a primal-dual active set for ``phi <= phi_old``.

Each iteration updates the active set from the nodal multiplier estimate
``lambda = -F_phi``, fixes active phase-field DoFs to ``phi_old``, and takes
a full Newton step on the remaining equality system.  DoFs whose membership
keeps flipping are pinned for the rest of the loading step.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .fem import ConstraintSet, build_constraints
from .linsolve import BlockPreconditioner, dump_matrices, gmres
from .model import Assembler, FractureState, Material, assemble_jacobian, extrapolate_phi

log = logging.getLogger(__name__)

__all__ = [
    "SolverOptions",
    "ActiveSetState",
    "NewtonReport",
    "SolverError",
    "detect_cycles",
    "newton_active_set_step",
    "solve_loading_sequence",
]


class SolverError(RuntimeError):
    pass


@dataclass
class SolverOptions:
    newton_tol: float = 1e-8
    newton_abs: float = 1e-11
    newton_max: int = 50
    gmres_rtol: float = 1e-8
    gmres_restart: int = 100
    gmres_max: int = 1000
    preconditioner: str = "exact"
    c_factor: float = 100.0
    cycle_window: int = 8
    cycle_toggles: int = 3
    damping: bool = False
    freeze_preconditioner: bool = False
    loading_steps: int = 2
    dump_matrices: str | None = None
    amg_strength: float = 0.02
    amg_omega: float = 2.0 / 3.0
    amg_smoother: str = "jacobi"
    amg_sweeps: int = 1
    amg_prolongation: str = "jacobi"
    initial_multiplier: str = "zero"

    def amg_options(self) -> dict:
        return {"strength": self.amg_strength, "omega": self.amg_omega, "smoother": self.amg_smoother,
                "sweeps": self.amg_sweeps, "prolongation": self.amg_prolongation}


@dataclass
class ActiveSetState:
    active: np.ndarray
    history: list[np.ndarray]
    permanent: np.ndarray
    c: float
    window: int = 8

    @classmethod
    def empty(cls, n: int, c: float, window: int = 8) -> "ActiveSetState":
        return cls(np.zeros(n, bool), [], np.zeros(n, bool), c, window)

    def push(self, active: np.ndarray) -> None:
        self.history.append(active.copy())
        if len(self.history) > self.window:
            self.history.pop(0)


@dataclass
class NewtonReport:
    step: int = 0
    residuals: list[float] = field(default_factory=list)
    active_sizes: list[int] = field(default_factory=list)
    changes: list[int] = field(default_factory=list)
    gmres_iters: list[int] = field(default_factory=list)
    converged: bool = False
    feasibility: float = np.inf
    complementarity: float = np.inf
    active: np.ndarray | None = None

    @property
    def iterations(self) -> int:
        return len(self.gmres_iters)

    @property
    def gmres_mean(self) -> float:
        return float(np.mean(self.gmres_iters)) if self.gmres_iters else 0.0

    def lines(self) -> list[str]:
        out = []
        for k, (r, a, c) in enumerate(zip(self.residuals, self.active_sizes, self.changes)):
            g = self.gmres_iters[k] if k < len(self.gmres_iters) else 0
            out.append(f"newton step={self.step} it={k} res={r:.6e} active={a} changed={c} gmres={g}")
        return out


def detect_cycles(history, window: int = 8, toggles: int = 3) -> np.ndarray:
    """Indices whose membership flipped at least ``toggles`` times within the
    last ``window`` snapshots."""
    hist = list(history)[-window:]
    if len(hist) < 2:
        return np.empty(0, dtype=np.int64)
    H = np.asarray(hist, dtype=bool)
    flips = np.count_nonzero(H[1:] != H[:-1], axis=0)
    return np.flatnonzero(flips >= toggles)


def newton_active_set_step(
    state: FractureState,
    material: Material,
    mesh,
    options: SolverOptions | None = None,
    eps: float | None = None,
    kappa: float | None = None,
    assembler: Assembler | None = None,
    base: ConstraintSet | None = None,
) -> tuple[FractureState, NewtonReport]:
    """One loading step of the combined Newton / active-set iteration."""
    opt = options or SolverOptions()
    dm = state.dofmap
    asm = assembler or Assembler(dm, material)
    eps = material.epsilon(mesh) if eps is None else eps
    kappa = material.kappa(mesh) if kappa is None else kappa
    phi_ex = extrapolate_phi(state)
    base = base or build_constraints(mesh, dm, dirichlet=True)
    nu = dm.n_u
    V = dm.n_phi
    hanging_v = base.hanging[nu:]
    c = opt.c_factor * material.G_c / eps
    aset = ActiveSetState.empty(V, c, opt.cycle_window)
    report = NewtonReport(step=state.step)

    x = base.distribute(state.vec.values)
    state.vec.values[:] = x
    r0 = None
    prev_active = None
    prec = None
    for it in range(opt.newton_max + 1):
        F_full = asm.residual(state.vec, phi_ex, eps, kappa)
        if it == 0 and opt.initial_multiplier == "zero":
            # the residual of an unsolved iterate is no multiplier estimate
            lam = np.zeros(V)
        else:
            lam = -base.condense_vector(F_full)[nu:]
        crit = c * (state.phi - state.phi_old) + lam
        active = ((crit > 0) | aset.permanent) & ~hanging_v
        changed = int(np.count_nonzero(active != prev_active)) if prev_active is not None else int(active.sum())
        aset.push(active)
        aset.active = active
        verts = np.flatnonzero(active)
        cs = build_constraints(mesh, dm, dirichlet=True, active_set=(nu + verts, state.phi_old[verts]))
        if changed:
            state.vec.values[:] = cs.distribute(state.vec.values)
            F_full = asm.residual(state.vec, phi_ex, eps, kappa)
        F = cs.condense_vector(F_full)
        res = float(np.linalg.norm(F))
        if r0 is None:
            r0 = res
        report.residuals.append(res)
        report.active_sizes.append(int(active.sum()))
        report.changes.append(changed)
        if prev_active is not None and changed == 0 and res <= max(opt.newton_tol * r0, opt.newton_abs):
            report.converged = True
            break
        if it == 0 and opt.initial_multiplier == "zero" and res <= opt.newton_abs:
            # already a solution: zero multiplier, feasible start
            report.converged = True
            break
        if it == opt.newton_max:
            break
        system = assemble_jacobian(mesh, dm, cs, material, state, phi_ex, eps, kappa, assembler=asm)
        if opt.dump_matrices:
            dump_matrices(system, opt.dump_matrices, prefix=f"step{state.step}_it{it}")
        if prec is None or not opt.freeze_preconditioner:
            # M_uu only sees the frozen extrapolation, so its block survives
            keep_u = prec if (prec is not None and material.pressure_coupling == "extrapolated") else None
            prec = BlockPreconditioner.build(
                system, opt.preconditioner, coords=dm.coords, reuse_u=keep_u,
                **(opt.amg_options() if opt.preconditioner == "amg" else {}),
            )
        sol = gmres(system, -F, prec, rtol=opt.gmres_rtol, max_iter=opt.gmres_max, restart=opt.gmres_restart)
        report.gmres_iters.append(sol.iterations)
        if not sol.converged:
            raise SolverError(
                f"GMRES did not converge in {sol.iterations} iterations (step {state.step}, it {it})"
            )
        step = 1.0
        x_old = state.vec.values.copy()
        state.vec.values[:] = cs.distribute(x_old + sol.x)
        if opt.damping:
            for _ in range(4):
                r_new = np.linalg.norm(cs.condense_vector(asm.residual(state.vec, phi_ex, eps, kappa)))
                if r_new <= 10.0 * res:
                    break
                step *= 0.5
                state.vec.values[:] = cs.distribute(x_old + step * sol.x)
        pinned = detect_cycles(aset.history, opt.cycle_window, opt.cycle_toggles)
        if len(pinned):
            aset.permanent[pinned] = True
        prev_active = active
        log.debug(report.lines()[-1])

    for line in report.lines():
        log.info(line)
    viol = state.phi - state.phi_old
    report.feasibility = float(viol.max()) if len(viol) else 0.0
    lam = -base.condense_vector(asm.residual(state.vec, phi_ex, eps, kappa))[nu:]
    report.complementarity = float(lam[aset.active].min()) if aset.active.any() else 0.0
    report.active = aset.active
    return state, report


def advance_history(state: FractureState, dt: float = 1.0) -> FractureState:
    state.phi_prev2 = state.phi_old.copy()
    state.phi_old = state.phi.copy()
    state.step += 1
    state.dt.append(dt)
    return state


def solve_loading_sequence(
    state: FractureState,
    material: Material,
    mesh,
    n_max: int | None = None,
    options: SolverOptions | None = None,
    eps: float | None = None,
    kappa: float | None = None,
    assembler: Assembler | None = None,
) -> tuple[FractureState, list[NewtonReport]]:
    """Quasi-static loading steps at constant load; stops at the first
    non-converged step."""
    opt = options or SolverOptions()
    n_max = opt.loading_steps if n_max is None else n_max
    if n_max < 1:
        raise ValueError("n_max must be at least 1")
    asm = assembler or Assembler(state.dofmap, material)
    base = build_constraints(mesh, state.dofmap, dirichlet=True)
    reports = []
    for _ in range(n_max):
        advance_history(state)
        try:
            state, rep = newton_active_set_step(state, material, mesh, opt, eps, kappa, asm, base)
        except SolverError as exc:
            log.warning("loading step %d failed: %s", state.step, exc)
            rep = NewtonReport(step=state.step, converged=False)
            reports.append(rep)
            break
        reports.append(rep)
        if not rep.converged:
            log.warning("loading step %d did not converge", state.step)
            break
    return state, reports
