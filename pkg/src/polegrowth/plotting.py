"""Matplotlib figures for CLI reports, written next to the CSV outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no timestamps or version strings, so reruns give identical files
_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_META)
    plt.close(fig)
    return path


def size_histogram(snapshots, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for snap in snapshots:
        if len(snap.sizes):
            ax.hist(np.log(snap.sizes), bins=30, histtype="step", label=f"t = {snap.t:g}")
    ax.set_xlabel("log size")
    ax.set_ylabel("cells")
    ax.legend(frameon=False)
    return _save(fig, Path(path))


def tagged_path(path_obj, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    t = np.linspace(0.0, path_obj.t_max, 400)
    ax.semilogy(t, path_obj.chi(t))
    for s in path_obj.event_times:
        ax.axvline(s, color="0.8", lw=0.6)
    ax.set_xlabel("t")
    ax.set_ylabel("tagged size")
    return _save(fig, Path(path))


def z_scores(rows, path, limit: float = 3.0) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    names = [r.phi_id for r in rows]
    z = [float(np.clip(r.z_score, -10, 10)) for r in rows]
    ax.bar(range(len(z)), z, color=["C0" if abs(v) <= limit else "C3" for v in z])
    ax.axhline(limit, color="k", lw=0.7, ls="--")
    ax.axhline(-limit, color="k", lw=0.7, ls="--")
    ax.set_xticks(range(len(z)), names, rotation=45, ha="right")
    ax.set_ylabel("z")
    return _save(fig, Path(path))


def counting(rows, path) -> Path:
    fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3.5))
    h = np.array([r.h for r in rows])
    a.errorbar(h, [r.p1_over_h for r in rows], yerr=[3 * r.p1_se for r in rows], fmt="o")
    a.axhline(rows[0].mean_b, color="k", lw=0.7)
    a.set_xscale("log")
    a.set_xlabel("h")
    a.set_ylabel("P1 / h")
    b.errorbar(h, [r.p2_over_h2 for r in rows], yerr=[3 * r.p2_se for r in rows], fmt="o")
    b.set_xscale("log")
    b.set_xlabel("h")
    b.set_ylabel("P2 / h^2")
    return _save(fig, Path(path))


def density_vs_histogram(grid_x: Sequence[np.ndarray], exact: Sequence[np.ndarray], draws, path) -> Path:
    """Per daughter type: exact density curve over a normalised histogram of draws."""
    fig, axes = plt.subplots(1, len(grid_x), figsize=(4 * len(grid_x), 3.5), squeeze=False)
    for q, ax in enumerate(axes[0]):
        ax.hist(draws[q], bins=100, density=True, alpha=0.4)
        ax.plot(grid_x[q], exact[q], color="k", lw=1)
        ax.set_xlabel(f"daughter size, type {q}")
    return _save(fig, Path(path))


def invariant(measure, path, recon=None, truth=None) -> Path:
    n = 2 if recon is not None else 1
    fig, axes = plt.subplots(1, n, figsize=(4.5 * n, 3.5), squeeze=False)
    ax = axes[0][0]
    e = measure.edges
    ax.stairs(measure.density(), e)
    ax.set_xlabel("birth size")
    ax.set_ylabel("density")
    if recon is not None:
        ax = axes[0][1]
        ax.plot(recon.y, recon.b, "o", ms=3, label="reconstructed")
        if truth is not None:
            ax.plot(recon.y, truth(recon.y), "k", lw=1, label="B")
        ax.set_xlabel("y")
        ax.legend(frameon=False)
    return _save(fig, Path(path))


def pde_marginals(measures, path, reference=None) -> Path:
    """Size marginal (summed over rate and type) of grid measures on a log axis."""
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    for m in measures:
        ax.plot(m.grid.z_centers, m.mass.sum(axis=(0, 1)), label=f"solver t = {m.t:.3g}")
    if reference is not None:
        ax.plot(reference.grid.z_centers, reference.mass.sum(axis=(0, 1)), ".", ms=2, color="k",
                label=f"Monte Carlo t = {reference.t:.3g}")
    ax.set_xlabel("log size")
    ax.set_ylabel("mass per cell")
    ax.legend(frameon=False, fontsize=8)
    return _save(fig, Path(path))


def rate_estimate(est, path, truth=None) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(est.y, est.b_hat, label="estimate")
    if truth is not None:
        ax.plot(est.y, truth(est.y), "k--", lw=1, label="B")
    if est.thresholded.any():
        ax.plot(est.y[est.thresholded], est.b_hat[est.thresholded], "x", color="C3", label="thresholded")
    ax.set_xlabel("y")
    ax.legend(frameon=False)
    return _save(fig, Path(path))


def risk(study, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    n = np.array([r.n for r in study.rows], dtype=float)
    ax.errorbar(n, [r.risk for r in study.rows], yerr=[r.se for r in study.rows], fmt="o")
    ax.plot(n, np.exp(study.intercept) * n**study.slope, "k--", lw=1, label=f"slope {study.slope:.3f}")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("n")
    ax.set_ylabel("relative L2 risk")
    ax.legend(frameon=False)
    return _save(fig, Path(path))
