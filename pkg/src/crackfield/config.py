"""Run configuration: flat ``key = value`` text with dotted sections.

Example::

    dimension = 2
    K = 20            # half width of the square domain
    material.p = 1e-3
    solver.preconditioner = amg
    study.eps_list = 0.5, 0.25, 0.125, 0.0625
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, fields
from typing import Any, get_type_hints

from .adapt import RefinementPolicy
from .model import Material
from .solver import SolverOptions

__all__ = [
    "ConfigError",
    "MaterialConfig",
    "SolverConfig",
    "AdaptConfig",
    "StudyConfig",
    "RunConfig",
    "parse_config",
    "dump_config",
    "load_config",
]


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class MaterialConfig:
    E: float = 1.0
    nu: float = 0.2
    G_c: float = 1.0
    p: float = 1e-3
    l0: float = 1.0
    kappa_factor: float = 1e-12
    pressure_coupling: str = "extrapolated"


@dataclass
class SolverConfig:
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
    loading_steps: int = 2
    initial_multiplier: str = "zero"
    amg_strength: float = 0.02
    amg_omega: float = 2.0 / 3.0
    amg_smoother: str = "jacobi"
    amg_sweeps: int = 1
    amg_prolongation: str = "jacobi"


@dataclass
class AdaptConfig:
    band_threshold: float = 0.8
    theta: float = 0.3
    max_level: int = 14
    estimator: bool = True


@dataclass
class StudyConfig:
    eps_list: tuple[float, ...] = (0.5, 0.25, 0.125, 0.0625)
    eps_cycles: int = 2
    domains: tuple[float, ...] = (5.0, 10.0, 20.0)
    cod_K: float = 5.0
    cod_cycles: int = 8
    cod_uniform_levels: int = 4
    cod_method: str = "line_integral"
    K3d: float = 5.0
    n0_3d: int = 16
    resolutions: tuple[int, ...] = (16, 32, 64, 128)


@dataclass
class RunConfig:
    dimension: int = 2
    K: float = 20.0
    n0: int = 10
    pre_refinements: int = 0
    band_h: float = 0.25
    cycles: int = 5
    eps_mode: str = "tied"
    c_eps: float = 2.0
    eps_fixed: float = 0.5
    eps_h: str = "diameter"
    output: str = "results"
    deterministic: bool = True
    threads: int = 1
    vtk: bool = True
    material: MaterialConfig = field(default_factory=MaterialConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    study: StudyConfig = field(default_factory=StudyConfig)

    # ------------------------------------------------------------------
    def validate(self) -> "RunConfig":
        m, s, a, st = self.material, self.solver, self.adapt, self.study
        checks = [
            (self.dimension in (2, 3), "dimension must be 2 or 3"),
            (self.K > 0, "K must be positive"),
            (self.n0 >= 1, "n0 must be at least 1"),
            (self.pre_refinements >= 0, "pre_refinements must be nonnegative"),
            (self.band_h > 0, "band_h must be positive"),
            (self.cycles >= 0, "cycles must be nonnegative"),
            (self.eps_mode in ("tied", "fixed"), "eps_mode must be tied or fixed"),
            (self.c_eps > 0, "c_eps must be positive"),
            (self.eps_fixed > 0, "eps_fixed must be positive"),
            (self.eps_h in ("diameter", "edge"), "eps_h must be diameter or edge"),
            (self.threads >= 1, "threads must be at least 1"),
            (m.E > 0, "material.E must be positive"),
            (0.0 <= m.nu < 0.5, "material.nu must lie in [0, 0.5)"),
            (m.G_c > 0, "material.G_c must be positive"),
            (m.p >= 0, "material.p must be nonnegative"),
            (m.l0 > 0, "material.l0 must be positive"),
            (0 < m.kappa_factor < 1, "material.kappa_factor must lie in (0, 1)"),
            (m.pressure_coupling in ("extrapolated", "current"),
             "material.pressure_coupling must be extrapolated or current"),
            (s.newton_tol > 0 and s.newton_abs > 0, "newton tolerances must be positive"),
            (s.newton_max >= 1, "solver.newton_max must be at least 1"),
            (0 < s.gmres_rtol < 1, "solver.gmres_rtol must lie in (0, 1)"),
            (s.gmres_restart >= 1 and s.gmres_max >= 1, "GMRES sizes must be positive"),
            (s.preconditioner in ("exact", "amg", "diagonal"),
             "solver.preconditioner must be exact, amg or diagonal"),
            (s.c_factor > 0, "solver.c_factor must be positive"),
            (s.cycle_window >= 2 and s.cycle_toggles >= 1, "invalid cycle detector settings"),
            (s.loading_steps >= 1, "solver.loading_steps must be at least 1"),
            (s.initial_multiplier in ("zero", "residual"),
             "solver.initial_multiplier must be zero or residual"),
            (0 <= s.amg_strength < 1, "solver.amg_strength must lie in [0, 1)"),
            (0 < s.amg_omega < 2, "solver.amg_omega must lie in (0, 2)"),
            (s.amg_smoother in ("jacobi", "sgs"), "solver.amg_smoother must be jacobi or sgs"),
            (s.amg_sweeps >= 1, "solver.amg_sweeps must be at least 1"),
            (s.amg_prolongation in ("jacobi", "energy"), "solver.amg_prolongation must be jacobi or energy"),
            (0 < a.band_threshold < 1, "adapt.band_threshold must lie in (0, 1)"),
            (0 <= a.theta <= 1, "adapt.theta must lie in [0, 1]"),
            (a.max_level >= 0, "adapt.max_level must be nonnegative"),
            (len(st.eps_list) >= 1 and all(e > 0 for e in st.eps_list), "study.eps_list must hold positive values"),
            (st.eps_cycles >= 0 and st.cod_cycles >= 0, "study cycle counts must be nonnegative"),
            (len(st.domains) >= 1 and all(k > 0 for k in st.domains), "study.domains must hold positive values"),
            (st.cod_K > 0 and st.K3d > 0, "study domain sizes must be positive"),
            (st.cod_uniform_levels >= 1, "study.cod_uniform_levels must be at least 1"),
            (st.cod_method in ("line_integral", "displacement_trace"),
             "study.cod_method must be line_integral or displacement_trace"),
            (st.n0_3d >= 1, "study.n0_3d must be at least 1"),
            (len(st.resolutions) >= 1 and all(r > 0 for r in st.resolutions), "study.resolutions must be positive"),
            (all(b == 2 * a for a, b in zip(st.resolutions, st.resolutions[1:])),
             "study.resolutions must double from entry to entry"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self

    def material_model(self, dimension: int | None = None) -> Material:
        m = self.material
        return Material(
            E=m.E, nu=m.nu, G_c=m.G_c, p=m.p, l0=m.l0, kappa_factor=m.kappa_factor,
            eps_mode=self.eps_mode, c_eps=self.c_eps, eps_fixed=self.eps_fixed, eps_h=self.eps_h,
            pressure_coupling=m.pressure_coupling,
        )

    def solver_options(self, dump_matrices: str | None = None) -> SolverOptions:
        return SolverOptions(**dataclasses.asdict(self.solver), dump_matrices=dump_matrices)

    def policy(self) -> RefinementPolicy:
        a = self.adapt
        return RefinementPolicy(a.band_threshold, math.inf, a.theta, a.max_level, a.estimator)


_SECTIONS = {"material": MaterialConfig, "solver": SolverConfig, "adapt": AdaptConfig, "study": StudyConfig}


def _convert(raw: str, typ: Any, key: str, line: int):
    text = raw.strip()
    try:
        if typ is bool:
            low = text.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError
        if typ is int:
            return int(text)
        if typ is float:
            v = float(text)
            if not math.isfinite(v):
                raise ValueError
            return v
        if typ is str:
            if not text:
                raise ValueError
            return text
        if typ == tuple[float, ...] or typ == tuple[int, ...]:
            item = float if typ == tuple[float, ...] else int
            parts = [t for t in text.replace(";", ",").split(",") if t.strip()]
            if not parts:
                raise ValueError
            return tuple(item(t) for t in parts)
    except ValueError:
        raise ConfigError(f"invalid value {text!r} for {key} ({getattr(typ, '__name__', typ)})", line) from None
    raise ConfigError(f"unsupported type for {key}", line)  # pragma: no cover


def parse_config(text: str) -> RunConfig:
    cfg = RunConfig()
    top_types = get_type_hints(RunConfig)
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0].strip()
        if not body:
            continue
        key, sep, value = body.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        if key in seen:
            raise ConfigError(f"duplicate key {key} (first set on line {seen[key]})", lineno)
        seen[key] = lineno
        section, dot, name = key.partition(".")
        if dot:
            if section not in _SECTIONS:
                raise ConfigError(f"unknown section {section!r}", lineno)
            target = getattr(cfg, section)
            types = get_type_hints(_SECTIONS[section])
            if name not in types:
                raise ConfigError(f"unknown key {key!r}", lineno)
            setattr(target, name, _convert(value, types[name], key, lineno))
        else:
            if key not in top_types or key in _SECTIONS:
                raise ConfigError(f"unknown key {key!r}", lineno)
            setattr(cfg, key, _convert(value, top_types[key], key, lineno))
    try:
        return cfg.validate()
    except ConfigError as exc:
        # point at the offending line when the message names a set key
        for key, ln in seen.items():
            if str(exc).startswith(key + " "):
                raise ConfigError(str(exc), ln) from None
        raise


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(_format(x) for x in v)
    return str(v)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        if f.name in _SECTIONS:
            continue
        lines.append(f"{f.name} = {_format(getattr(cfg, f.name))}")
    for sec in _SECTIONS:
        obj = getattr(cfg, sec)
        for f in fields(obj):
            lines.append(f"{sec}.{f.name} = {_format(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def load_config(path: str) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
