"""Closed-form Sneddon values, Richardson extrapolation and rate fits."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "SneddonParams",
    "RateFit",
    "ReferenceError_",
    "tcv_exact",
    "cod_exact",
    "richardson",
    "fit_rate",
    "domain_error_table",
]


class ReferenceError_(ValueError):
    """Degenerate input to an extrapolation or fit."""


@dataclass(frozen=True)
class SneddonParams:
    p: float = 1e-3
    l0: float = 1.0
    E: float = 1.0
    nu: float = 0.2
    d: int = 2

    def __post_init__(self):
        if not self.E > 0:
            raise ValueError("E must be positive")
        if not 0.0 <= self.nu < 0.5:
            raise ValueError("nu must lie in [0, 0.5)")
        if not self.l0 > 0:
            raise ValueError("l0 must be positive")
        if self.d not in (2, 3):
            raise ValueError("d must be 2 or 3")

    @classmethod
    def from_material(cls, material, d: int) -> "SneddonParams":
        return cls(material.p, material.l0, material.E, material.nu, d)


@dataclass(frozen=True)
class RateFit:
    values: tuple[float, ...]
    order: float
    limit: float
    ratio: float = 2.0


def tcv_exact(params: SneddonParams) -> float:
    """Total crack volume of a pressurized slit (2d) or penny crack (3d)."""
    p, l0, E, nu = params.p, params.l0, params.E, params.nu
    if params.d == 2:
        return 2.0 * math.pi * p * l0**2 * (1.0 - nu**2) / E
    return 16.0 * p * l0**3 * (1.0 - nu**2) / (3.0 * E)


def cod_exact(params: SneddonParams, rho) -> np.ndarray | float:
    """Normal displacement of one crack face at in-plane radius ``rho`` (half
    the full opening); zero beyond the tip."""
    c = 2.0 if params.d == 2 else 4.0 / math.pi
    rho = np.asarray(rho, dtype=float)
    if np.any(rho < 0):
        raise ValueError("rho must be nonnegative")
    s = np.clip(1.0 - (rho / params.l0) ** 2, 0.0, None)
    out = c * params.p * params.l0 * (1.0 - params.nu**2) / params.E * np.sqrt(s)
    return float(out) if out.ndim == 0 else out


def richardson(values: Sequence[float], ratio: float = 2.0) -> RateFit:
    """Order and limit from the last three members of a geometric refinement
    sequence."""
    v = np.asarray(values, dtype=float)
    if len(v) < 3:
        raise ReferenceError_("Richardson extrapolation needs at least three values")
    a, b, c = v[-3:]
    d1, d2 = a - b, b - c
    if d1 == 0.0 or d2 == 0.0 or d1 / d2 <= 0.0:
        raise ReferenceError_("differences are zero or change sign; order undefined")
    q = math.log(d1 / d2) / math.log(ratio)
    limit = c + (c - b) / (ratio**q - 1.0)
    return RateFit(tuple(v), q, limit, ratio)


def fit_rate(pairs: Iterable[tuple[float, float]]) -> float:
    """Least-squares slope of log(error) against log(parameter)."""
    arr = np.asarray([(h, e) for h, e in pairs if h > 0 and e > 0], dtype=float)
    if len(arr) < 2:
        raise ReferenceError_("need at least two positive (parameter, error) pairs")
    x, y = np.log(arr[:, 0]), np.log(arr[:, 1])
    slope, _ = np.polyfit(x, y, 1)
    return float(slope)


def domain_error_table(extrapolated: dict[float, float], params: SneddonParams) -> dict[float, float]:
    """Percent error of each domain's extrapolated TCV against the exact value."""
    exact = tcv_exact(params)
    return {K: 100.0 * abs(v - exact) / exact for K, v in extrapolated.items()}
