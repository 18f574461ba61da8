"""Figures written next to a study's CSV files (PNG, non-interactive)."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .reference import SneddonParams, cod_exact  # noqa: E402

__all__ = ["plot_study"]


def _save(fig, out: str, name: str) -> str:
    path = os.path.join(out, name)
    fig.tight_layout()
    # fixed metadata keeps the files byte-stable between identical runs
    fig.savefig(path, dpi=110, metadata={"Software": None})
    plt.close(fig)
    return path


def _tcv_levels(res, out: str, name: str, title: str) -> str:
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, recs in res.series.items():
        if recs:
            ax.semilogx([r.dofs for r in recs], [r.tcv for r in recs], "o-", label=label)
    ax.set_xlabel("DoFs")
    ax.set_ylabel("TCV")
    ax.set_title(title)
    ax.legend(fontsize=8)
    ax.grid(True, which="both", alpha=0.3)
    return _save(fig, out, name)


def _solve(res, out):
    files = [_tcv_levels(res, out, "tcv.png", "single solve")]
    rows = res.tables.get("cod_profile")
    if rows:
        x = np.array([r["x"] for r in rows])
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(x, [r["cod"] for r in rows], "o", ms=3, label="computed")
        xs = np.linspace(x.min(), x.max(), 301)
        # the line integral measures the full opening, twice the face displacement
        ax.plot(xs, 2 * cod_exact(SneddonParams(), np.abs(xs)), "-", label="closed form (full opening)")
        ax.set_xlabel("x")
        ax.set_ylabel("COD")
        ax.legend(fontsize=8)
        ax.grid(True, alpha=0.3)
        files.append(_save(fig, out, "cod_profile.png"))
    return files


def _eps(res, out):
    files = [_tcv_levels(res, out, "tcv_levels.png", "fixed-epsilon refinement")]
    rows = [r for r in res.tables.get("eps", []) if "err" in r]
    if rows:
        eps = np.array([r["eps"] for r in rows])
        err = np.array([r["err"] for r in rows])
        fig, ax = plt.subplots(figsize=(5, 4))
        ax.loglog(eps, err, "o-", label=f"slope {res.metrics.get('slope', float('nan')):.2f}")
        ax.loglog(eps, err[0] * eps / eps[0], "k--", lw=0.8, label="linear")
        ax.set_xlabel("epsilon")
        ax.set_ylabel("|TCV(eps) - TCV*|")
        ax.legend(fontsize=8)
        ax.grid(True, which="both", alpha=0.3)
        files.append(_save(fig, out, "eps_convergence.png"))
    return files


def _domain(res, out):
    files = [_tcv_levels(res, out, "tcv_levels.png", "domain size")]
    rows = res.tables.get("domains", [])
    if rows:
        fig, ax = plt.subplots(figsize=(5, 4))
        K = [r["K"] for r in rows]
        ax.semilogy(K, [r["error_pct"] for r in rows], "o-", label="computed")
        tk = [r["K"] for r in rows if "target_pct" in r]
        ax.semilogy(tk, [r["target_pct"] for r in rows if "target_pct" in r], "s--", label="target")
        ax.set_xlabel("half width K")
        ax.set_ylabel("extrapolated TCV error [%]")
        ax.legend(fontsize=8)
        ax.grid(True, which="both", alpha=0.3)
        files.append(_save(fig, out, "domain_errors.png"))
    return files


def _cod(res, out):
    rows = res.tables.get("cod", [])
    if not rows:
        return []
    fig, ax = plt.subplots(figsize=(5, 4))
    for series in ("adaptive", "uniform"):
        pts = [(r["dofs"], r["error"]) for r in rows if r["series"] == series and r["error"] > 0]
        if pts:
            d, e = np.array(pts).T
            rate = res.metrics.get(f"{series}_rate", float("nan"))
            ax.loglog(d, e, "o-", label=f"{series} (rate {rate:.2f} in N^-1/2)")
    ax.set_xlabel("DoFs")
    ax.set_ylabel("|COD(0) - COD*|")
    ax.legend(fontsize=8)
    ax.grid(True, which="both", alpha=0.3)
    return [_save(fig, out, "cod_convergence.png")]


def _sneddon3d(res, out):
    rows = res.tables.get("sneddon3d", [])
    if not rows:
        return []
    fig, ax = plt.subplots(figsize=(5, 4))
    r = [row["resolution"] for row in rows]
    ax.loglog(r, [row["error_pct"] for row in rows], "o-", label="computed")
    ax.loglog(r, [row["target_pct"] for row in rows], "s--", label="target")
    ax.set_xlabel("10 l0 / h")
    ax.set_ylabel("TCV error [%]")
    ax.legend(fontsize=8)
    ax.grid(True, which="both", alpha=0.3)
    return [_save(fig, out, "sneddon3d_errors.png")]


_PLOTS = {
    "solve": _solve,
    "eps_convergence": _eps,
    "domain_study": _domain,
    "cod_study": _cod,
    "sneddon3d": _sneddon3d,
}


def plot_study(res, out: str) -> list[str]:
    """Render the figures of one study into ``out``; returns their paths."""
    return _PLOTS[res.kind](res, out)
