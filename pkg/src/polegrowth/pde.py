"""Mean empirical measure and the growth-fragmentation equation.

The mean measure ``n(t, dx, dv, i)`` of living cells (size, growth rate,
type) satisfies, for test functions ``phi``,

    d/dt <n, phi> = <n, x v d_x phi> - <n, B phi>
                    + <n, B(x) sum_i' int phi(theta_i' x, v', i') rho_i'(v, dv')>,

one daughter of each type per division. In log-size ``z = ln x`` the growth
term is transport at constant speed ``v``, which the solver discretises with
first-order upwinding on a uniform ``z`` grid. Division is applied by
operator splitting: the mass leaving bin ``k`` is redistributed to the bins
around ``z_k + ln theta_i'`` with weights that conserve both mass and
biomass, and spread over rate nodes with the lumped kernels.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from polegrowth.model import ModelParams
from polegrowth.simulator import PopulationEnsemble, RootLaw, simulate_population

CFL_SAFETY = 0.9
OUTFLOW_TOLERANCE = 1e-3


class GridOverflowError(RuntimeError):
    """Too much mass left the size grid through its upper boundary."""


@dataclass(frozen=True)
class GridSpec:
    """Uniform log-size grid on ``[x_lo, x_hi]`` with ``n_x`` cells and a set of rate nodes."""

    x_lo: float
    x_hi: float
    n_x: int
    v_nodes: tuple[float, ...]

    def __post_init__(self):
        if not 0 < self.x_lo < self.x_hi:
            raise ValueError("grid needs 0 < x_lo < x_hi")
        if self.n_x < 2:
            raise ValueError("grid needs at least two size cells")
        if len(self.v_nodes) < 1 or any(v <= 0 for v in self.v_nodes):
            raise ValueError("grid needs positive rate nodes")
        if any(b <= a for a, b in zip(self.v_nodes, self.v_nodes[1:])):
            raise ValueError("rate nodes must be strictly increasing")

    @property
    def dz(self) -> float:
        return math.log(self.x_hi / self.x_lo) / self.n_x

    @property
    def z_edges(self) -> np.ndarray:
        return np.linspace(math.log(self.x_lo), math.log(self.x_hi), self.n_x + 1)

    @property
    def z_centers(self) -> np.ndarray:
        e = self.z_edges
        return 0.5 * (e[1:] + e[:-1])

    @property
    def x_centers(self) -> np.ndarray:
        return np.exp(self.z_centers)

    @property
    def nodes(self) -> np.ndarray:
        return np.asarray(self.v_nodes, dtype=float)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (2, len(self.v_nodes), self.n_x)

    def refined(self, factor: int = 2) -> "GridSpec":
        return GridSpec(self.x_lo, self.x_hi, self.n_x * factor, self.v_nodes)

    def size_bin(self, x) -> np.ndarray:
        """Bin index of sizes ``x``; -1 below the grid, ``n_x`` above."""
        k = np.floor((np.log(x) - math.log(self.x_lo)) / self.dz).astype(np.int64)
        return np.clip(k, -1, self.n_x)

    def rate_node(self, v) -> np.ndarray:
        return np.abs(np.asarray(v, dtype=float)[..., None] - self.nodes).argmin(axis=-1)

    def max_dt(self, e_max: float) -> float:
        return CFL_SAFETY * self.dz / e_max


@dataclass
class GridMeasure:
    """Nonnegative masses on ``(type, rate node, log-size cell)`` at time ``t``."""

    grid: GridSpec
    mass: np.ndarray
    t: float
    se: np.ndarray | None = None
    outside: float = 0.0

    @property
    def total(self) -> float:
        return float(self.mass.sum())

    def pair(self, phi: Callable) -> float:
        """``<n, phi>`` with ``phi(x, v, type)`` evaluated at cell centres."""
        return float((self.mass * _on_grid(self.grid, phi)).sum())

    def by_type_size(self) -> np.ndarray:
        return self.mass.sum(axis=1)

    def l1_distance(self, other: "GridMeasure") -> float:
        if self.mass.shape != other.mass.shape:
            raise ValueError("measures live on different grids")
        return float(np.abs(self.mass - other.mass).sum())


def _on_grid(grid: GridSpec, phi: Callable) -> np.ndarray:
    x = grid.x_centers[None, None, :]
    v = grid.nodes[None, :, None]
    q = np.arange(2)[:, None, None]
    return np.broadcast_to(phi(x, v, q), grid.shape)


def initial_measure(grid: GridSpec, roots: RootLaw) -> GridMeasure:
    """Cell masses of the ancestor law."""
    mass = np.zeros(grid.shape)
    cdf = roots.log_size_cdf(grid.z_edges)
    j = int(grid.rate_node(roots.v0))
    if not math.isclose(grid.nodes[j], roots.v0, rel_tol=0, abs_tol=1e-12):
        raise ValueError(f"root rate {roots.v0} is not a rate node")
    mass[roots.p0, j] = np.diff(cdf)
    return GridMeasure(grid, mass, 0.0, outside=float(1.0 - mass.sum()))


# ---------------------------------------------------------------------------
# Empirical mean measure
# ---------------------------------------------------------------------------


def bin_ensemble(ensemble: PopulationEnsemble, grid: GridSpec) -> list[GridMeasure]:
    """Average binned living-cell counts, with per-cell standard errors."""
    n_rep = ensemble.n_rep
    ncell = 2 * len(grid.v_nodes) * grid.n_x
    out = []
    for cells in ensemble.alive:
        k = grid.size_bin(cells.size)
        inside = (k >= 0) & (k < grid.n_x)
        j = grid.rate_node(cells.rate)
        flat = (cells.type * len(grid.v_nodes) + j) * grid.n_x + k
        key = cells.rep[inside] * ncell + flat[inside]
        uniq, cnt = np.unique(key, return_counts=True)
        cell = uniq % ncell
        s1 = np.bincount(cell, weights=cnt, minlength=ncell)
        s2 = np.bincount(cell, weights=cnt.astype(float) ** 2, minlength=ncell)
        mean = s1 / n_rep
        var = np.maximum(s2 / n_rep - mean**2, 0.0) * n_rep / max(n_rep - 1, 1)
        out.append(GridMeasure(
            grid,
            mean.reshape(grid.shape),
            cells.t,
            np.sqrt(var / n_rep).reshape(grid.shape),
            outside=float(np.count_nonzero(~inside) / n_rep),
        ))
    return out


def empirical_mean_measure(
    params: ModelParams,
    roots: RootLaw,
    times: Sequence[float],
    n_rep: int,
    grid: GridSpec,
    seed: int,
    n_cap: int = 100_000,
    threads: int = 1,
) -> tuple[list[GridMeasure], PopulationEnsemble]:
    """Monte Carlo mean measure of living cells at each of ``times``.

    Returns the binned measures and the raw ensemble (kept for exact
    functionals such as :func:`weak_residual`).
    """
    ens = simulate_population(params, roots, times, n_rep, seed, n_cap=n_cap, threads=threads)
    return bin_ensemble(ens, grid), ens


# ---------------------------------------------------------------------------
# Solver
# ---------------------------------------------------------------------------


@dataclass
class Timeline:
    measures: list[GridMeasure]
    dt: float
    outflow: float = 0.0
    underflow: float = 0.0

    @property
    def times(self) -> np.ndarray:
        return np.array([m.t for m in self.measures])

    def at(self, t: float) -> GridMeasure:
        k = int(np.argmin(np.abs(self.times - t)))
        if not math.isclose(self.measures[k].t, t, rel_tol=1e-9, abs_tol=1e-12):
            raise KeyError(f"no recorded measure at t={t}")
        return self.measures[k]

    def to_csv(self, target=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "type", "v_node", "log_x_bin", "mass"])
        for m in self.measures:
            for i, j, k in zip(*np.nonzero(m.mass)):
                w.writerow([repr(float(m.t)), int(i), repr(float(m.grid.nodes[j])), int(k),
                            repr(float(m.mass[i, j, k]))])
        text = buf.getvalue()
        if target is not None:
            Path(target).write_text(text)
        return text


@dataclass(frozen=True)
class _Remap:
    shift: int
    w_lo: float


def _remap(grid: GridSpec, theta: float) -> _Remap:
    """Split of a daughter at ``theta * x_k`` between the two enclosing cells.

    The weights keep both mass and first moment in ``x``.
    """
    s = math.log(theta) / grid.dz
    m = math.floor(s)
    f = s - m
    e = math.exp(grid.dz)
    w_lo = (e - math.exp(f * grid.dz)) / (e - 1.0)
    return _Remap(m, w_lo)


def _shift_add(target: np.ndarray, src: np.ndarray, shift: int) -> float:
    """``target[..., k + shift] += src[..., k]``; return the mass that falls off the grid."""
    n = src.shape[-1]
    if shift >= 0:
        target[..., shift:] += src[..., : n - shift] if shift else src
        return float(src[..., n - shift:].sum()) if shift else 0.0
    target[..., : n + shift] += src[..., -shift:]
    return float(src[..., :-shift].sum())


def solve_gf_equation(
    params: ModelParams,
    init: GridMeasure,
    t_max: float,
    dt: float | None = None,
    record_times: Sequence[float] | None = None,
    record_all: bool = False,
) -> Timeline:
    """Explicit finite-volume solution of the growth-fragmentation equation.

    ``dt`` defaults to the stability bound ``0.9 * dz / max(v_nodes)`` and is shrunk
    so that ``t_max`` is a whole number of steps. Raises
    :class:`GridOverflowError` if more than 1e-3 of the mass leaves through
    ``x_hi``.
    """
    grid = init.grid
    if np.any(init.mass < 0):
        raise ValueError("initial measure must be nonnegative")
    bound = grid.max_dt(float(grid.nodes.max()))
    if dt is None:
        dt = bound
    if dt > bound * (1 + 1e-12):
        raise ValueError(f"dt={dt} violates the CFL bound {bound:.6g} (0.9 dz / max rate node)")
    if grid.nodes.max() > params.e_max * (1 + 1e-12):
        raise ValueError("rate nodes exceed e_max")
    n_steps = max(1, math.ceil(t_max / dt - 1e-9))
    dt = t_max / n_steps
    if record_all:
        record = set(range(n_steps + 1))
    else:
        times = [t_max] if record_times is None else list(record_times)
        record = {int(round(t / dt)) for t in times} | {0}
    courant = grid.nodes * dt / grid.dz
    keep = np.exp(-params.B(grid.x_centers) * dt)
    mix = [params.kernels[i].lumped(grid.nodes) for i in (0, 1)]
    remaps = [_remap(grid, th) if th > 0 else None for th in params.theta]
    n = init.mass.copy()
    total0 = max(init.total, 1e-300)
    outflow = underflow = 0.0
    measures = [GridMeasure(grid, n.copy(), 0.0)] if 0 in record else []
    for step in range(1, n_steps + 1):
        out = courant[None, :, None] * n
        n = n - out
        n[..., 1:] += out[..., :-1]
        outflow += float(out[..., -1].sum())
        lost = n * (1.0 - keep)
        n = n - lost
        dividing = lost.sum(axis=0)
        for i in (0, 1):
            rm = remaps[i]
            if rm is None:
                continue
            daughters = mix[i].T @ dividing
            underflow += _shift_add(n[i], rm.w_lo * daughters, rm.shift)
            spill = _shift_add(n[i], (1.0 - rm.w_lo) * daughters, rm.shift + 1)
            if rm.shift + 1 > 0:
                outflow += spill
            else:
                underflow += spill
        if outflow > OUTFLOW_TOLERANCE * total0:
            raise GridOverflowError(
                f"{outflow:.3g} of mass left the grid above x_hi={grid.x_hi} by t={step * dt:.4g}"
            )
        if step in record:
            measures.append(GridMeasure(grid, n.copy(), step * dt))
    return Timeline(measures, dt, outflow, underflow)


# ---------------------------------------------------------------------------
# Weak form
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TestFunction:
    """``phi(x, v, type)`` with an optional analytic ``d phi / dx``."""

    name: str
    f: Callable
    dfdx: Callable | None = None

    def __call__(self, x, v, q):
        return self.f(x, v, q)

    def derivative(self, x, v, q):
        if self.dfdx is not None:
            return self.dfdx(x, v, q)
        h = 1e-6 * x
        return (self.f(x + h, v, q) - self.f(x - h, v, q)) / (2 * h)


def _bump(u):
    u = np.asarray(u, dtype=float)
    out = np.zeros(u.shape)
    m = np.abs(u) < 1.0
    out[m] = np.exp(1.0 - 1.0 / (1.0 - u[m] ** 2))
    return out


def _dbump(u):
    u = np.asarray(u, dtype=float)
    out = np.zeros(u.shape)
    m = np.abs(u) < 1.0
    inner = 1.0 - u[m] ** 2
    out[m] = np.exp(1.0 - 1.0 / inner) * (-2.0 * u[m]) / inner**2
    return out


def log_bump(center: float, width: float, name: str | None = None, type_filter: int | None = None) -> TestFunction:
    """Smooth bump in ``ln x`` supported on ``|ln(x/center)| < width``."""

    def sel(q):
        return 1.0 if type_filter is None else (q == type_filter)

    def f(x, v, q):
        return _bump(np.log(x / center) / width) * sel(q)

    def dfdx(x, v, q):
        return _dbump(np.log(x / center) / width) / (width * x) * sel(q)

    return TestFunction(name or f"bump_{center:g}_{width:g}", f, dfdx)


def pde_battery(center: float = 1.0) -> list[TestFunction]:
    """Count, biomass, type-aware and compactly supported test functions."""
    return [
        TestFunction("one", lambda x, v, q: np.ones_like(x * v * (q + 1.0)), lambda x, v, q: np.zeros_like(x * v * (q + 1.0))),
        TestFunction("size", lambda x, v, q: x * np.ones_like(v * (q + 1.0)), lambda x, v, q: np.ones_like(x * v * (q + 1.0))),
        TestFunction("size_if_new", lambda x, v, q: x * (q == 1) * np.ones_like(v), lambda x, v, q: (q == 1) * np.ones_like(x * v)),
        TestFunction("rate_size", lambda x, v, q: v * x * np.ones_like(q + 1.0), lambda x, v, q: v * np.ones_like(x * (q + 1.0))),
        log_bump(center, 0.8, "bump"),
        log_bump(center * 0.6, 0.5, "bump_new", type_filter=1),
        log_bump(center * 1e6, 0.5, "far_bump"),
    ]


def dual_rhs_values(params: ModelParams, phis: Sequence[TestFunction], x, v, q) -> list[np.ndarray]:
    """Integrand of the weak-form right-hand side at cells ``(x, v, q)``, one array per ``phi``."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    b = params.B(x)
    quads = []
    for i in (0, 1):
        if params.theta[i] > 0:
            pts, w = params.kernels[i].quadrature(v)
            quads.append((i, (params.theta[i] * x)[..., None], pts, w))
    out = []
    for phi in phis:
        gain = sum((w * phi(xs, pts, i)).sum(axis=-1) for i, xs, pts, w in quads)
        out.append(x * v * phi.derivative(x, v, q) - b * phi(x, v, q) + b * gain)
    return out


@dataclass
class WeakResidual:
    """Residuals of the weak form per test function and time interval."""

    names: list[str]
    times: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray
    se: np.ndarray | None
    scale: np.ndarray
    # relative error floor for quadrature and rounding, used when the
    # per-replicate residual is nearly deterministic
    floor: float = 1e-8

    @property
    def residual(self) -> np.ndarray:
        return self.lhs - self.rhs

    @property
    def normalized(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.abs(self.residual) / self.scale[:, None]
        return np.where(self.scale[:, None] > 0, r, 0.0)

    @property
    def max_normalized(self) -> float:
        return float(self.normalized.max())

    @property
    def z(self) -> np.ndarray:
        if self.se is None:
            raise ValueError("solver residuals carry no standard errors")
        err = np.sqrt(self.se**2 + (self.floor * self.scale[:, None]) ** 2)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = self.residual / err
        return np.where(err > 0, z, 0.0)

    def row(self, name: str) -> np.ndarray:
        return self.residual[self.names.index(name)]


def quadrature_times(t_grid: Sequence[float], order: int = 3) -> np.ndarray:
    """``t_grid`` plus the Gauss-Legendre nodes of each interval, sorted."""
    t_grid = np.asarray(t_grid, dtype=float)
    if np.any(np.diff(t_grid) <= 0):
        raise ValueError("t_grid must be strictly increasing")
    z, _ = np.polynomial.legendre.leggauss(order)
    a, b = t_grid[:-1, None], t_grid[1:, None]
    inner = 0.5 * (b - a) * z + 0.5 * (a + b)
    return np.unique(np.concatenate([t_grid, inner.ravel()]))


def weak_residual(source: Timeline, params: ModelParams, phis: Sequence[TestFunction]) -> WeakResidual:
    """Weak-form residual along a solver timeline.

    On each recorded interval the time difference of ``<n, phi>`` is compared
    with the trapezoidal average of the right-hand side at its two ends, all
    functionals taken at cell centres.
    """
    if not isinstance(source, Timeline):
        raise TypeError("weak_residual needs a solver Timeline; use empirical_weak_residual for ensembles")
    times = source.times
    vals = np.empty((len(phis), len(times)))
    rhs = np.empty_like(vals)
    for k, m in enumerate(source.measures):
        g = m.grid
        x = g.x_centers[None, None, :]
        v = g.nodes[None, :, None]
        q = np.arange(2)[:, None, None]
        for a, (phi, r) in enumerate(zip(phis, dual_rhs_values(params, phis, x, v, q))):
            vals[a, k] = m.pair(phi)
            rhs[a, k] = float((m.mass * np.broadcast_to(r, g.shape)).sum())
    lhs = np.diff(vals, axis=1) / np.diff(times)
    mid = 0.5 * (rhs[:, 1:] + rhs[:, :-1])
    scale = np.abs(vals).max(axis=1) + np.abs(rhs).max(axis=1)
    return WeakResidual([p.name for p in phis], times, lhs, mid, None, scale)


def empirical_weak_residual(
    ensemble: PopulationEnsemble,
    params: ModelParams,
    phis: Sequence[TestFunction],
    t_grid: Sequence[float],
    order: int = 3,
) -> WeakResidual:
    """Weak-form residual of a Monte Carlo ensemble, per replicate.

    The ensemble must hold snapshots at ``quadrature_times(t_grid, order)``.
    Functionals use the exact cells of each replicate; the right-hand side is
    integrated over each interval of ``t_grid`` by Gauss-Legendre quadrature,
    so time-discretisation bias is negligible next to the Monte Carlo error.
    Standard errors come from the spread of per-replicate residuals.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    times = np.asarray(ensemble.times, dtype=float)

    def index(t):
        k = int(np.argmin(np.abs(times - t)))
        if abs(times[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"ensemble has no snapshot at t={t}")
        return k

    n_rep = ensemble.n_rep
    need = quadrature_times(t_grid, order)
    per_val = {}
    per_rhs = {}
    for t in need:
        cells = ensemble.alive[index(t)]
        vals = [cells.per_replicate(phi(cells.size, cells.rate, cells.type), n_rep) for phi in phis]
        rhs = [cells.per_replicate(r, n_rep)
               for r in dual_rhs_values(params, phis, cells.size, cells.rate, cells.type)]
        per_val[float(t)] = np.array(vals)
        per_rhs[float(t)] = np.array(rhs)

    z, w = np.polynomial.legendre.leggauss(order)
    n_int = len(t_grid) - 1
    lhs = np.empty((len(phis), n_int))
    rhs_mean = np.empty_like(lhs)
    se = np.empty_like(lhs)
    for k in range(n_int):
        a, b = t_grid[k], t_grid[k + 1]
        nodes = 0.5 * (b - a) * z + 0.5 * (a + b)
        key = lambda t: float(need[np.argmin(np.abs(need - t))])  # noqa: E731
        d = (per_val[key(b)] - per_val[key(a)]) / (b - a)
        r = sum(0.5 * wj * per_rhs[key(tj)] for wj, tj in zip(w, nodes))
        lhs[:, k] = d.mean(axis=1)
        rhs_mean[:, k] = r.mean(axis=1)
        se[:, k] = (d - r).std(axis=1, ddof=1) / math.sqrt(n_rep)
    all_vals = np.array([v.mean(axis=1) for v in per_val.values()])
    all_rhs = np.array([v.mean(axis=1) for v in per_rhs.values()])
    scale = np.abs(all_vals).max(axis=0) + np.abs(all_rhs).max(axis=0)
    return WeakResidual([p.name for p in phis], t_grid, lhs, rhs_mean, se, scale)


def grid_for(params: ModelParams, roots: RootLaw, x_lo: float, x_hi: float, n_x: int, n_v: int = 1) -> GridSpec:
    """Grid whose rate nodes are exact for the model's kernels and the root rate."""
    nodes = params.kernels.default_nodes(n_v, extra=(roots.v0,))
    return GridSpec(x_lo, x_hi, n_x, tuple(float(v) for v in nodes))
