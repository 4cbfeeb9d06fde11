"""Tagged lineage and the many-to-one identity.

The tagged lineage follows one cell and, at each division, moves to the
old-pole daughter with probability ``theta0`` and to the new-pole daughter
with probability ``theta1``. Along it the size satisfies

    chi(t) = x * exp(Vbar(t)) * theta0**C_old(t) * theta1**C_new(t),

where ``Vbar`` is the growth rate accumulated since time 0 and ``C_old``,
``C_new`` count the divisions into each type. The many-to-one identity
equates expectations of ``phi(chi, V, Vbar)`` along the lineage with the
population sum of ``xi * exp(-taubar) / x * phi(xi, tau, taubar)``.
"""

from __future__ import annotations

import csv
import inspect
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from polegrowth.model import ModelParams, invert_hazard
from polegrowth.simulator import (
    STREAM_TAGGED,
    RootLaw,
    _validate_root,
    simulate_population,
    stream,
)


@dataclass(frozen=True)
class TaggedPath:
    """Trajectory of the tagged lineage on ``[0, t_max]``.

    Segment ``k`` (``k = 0`` is the ancestor) starts at ``starts[k]`` with size
    ``sizes[k]``, rate ``rates[k]``, type ``types[k]`` and accumulated rate
    ``accum[k]``; ``event_times = starts[1:]``.
    """

    starts: np.ndarray
    sizes: np.ndarray
    rates: np.ndarray
    types: np.ndarray
    accum: np.ndarray
    t_max: float

    @property
    def x0(self) -> float:
        return float(self.sizes[0])

    @property
    def event_times(self) -> np.ndarray:
        return self.starts[1:]

    @property
    def label(self) -> str:
        return "".join(str(int(p)) for p in self.types[1:])

    def _segment(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < 0) or np.any(t > self.t_max):
            raise ValueError("time outside the simulated window")
        return np.searchsorted(self.starts, t, side="right") - 1

    def counts(self, t):
        """``(C_t, C_t^o, C_t^n)``."""
        k = self._segment(t)
        new = np.cumsum(np.concatenate([[0], self.types[1:] == 1]))
        return k, k - new[k], new[k]

    def chi(self, t):
        k = self._segment(t)
        return self.sizes[k] * np.exp(self.rates[k] * (np.asarray(t) - self.starts[k]))

    def rate(self, t):
        return self.rates[self._segment(t)]

    def accumulated(self, t):
        k = self._segment(t)
        return self.accum[k] + self.rates[k] * (np.asarray(t) - self.starts[k])

    def type(self, t):
        return self.types[self._segment(t)]

    def represented_chi(self, t, theta0: float):
        """Right-hand side of the size representation at ``t``."""
        _, c_old, c_new = self.counts(t)
        return self.x0 * np.exp(self.accumulated(t)) * theta0**c_old * (1.0 - theta0) ** c_new

    def to_csv(self, target=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time", "size", "rate", "type", "accum", "C", "C_old", "C_new"])
        new = 0
        for k in range(len(self.starts)):
            if k > 0 and self.types[k] == 1:
                new += 1
            w.writerow([repr(float(self.starts[k])), repr(float(self.sizes[k])),
                        repr(float(self.rates[k])), int(self.types[k]),
                        repr(float(self.accum[k])), k, k - new, new])
        text = buf.getvalue()
        if target is not None:
            Path(target).write_text(text)
        return text


def sample_tagged_path(
    params: ModelParams, x0: float, v0: float, p0: int, t_max: float, seed: int
) -> TaggedPath:
    """Simulate the tagged lineage alone up to ``t_max``."""
    _validate_root(params, x0, v0, p0)
    rng = stream(seed, STREAM_TAGGED)
    theta = params.theta
    starts, sizes, rates, types, accum = [0.0], [float(x0)], [float(v0)], [int(p0)], [0.0]
    while True:
        e = rng.standard_exponential()
        zeta = float(invert_hazard(params.B, sizes[-1], rates[-1], e))
        d = starts[-1] + zeta
        if d > t_max:
            break
        q = 0 if rng.random() < params.theta0 else 1
        starts.append(d)
        sizes.append(theta[q] * sizes[-1] * math.exp(rates[-1] * zeta))
        accum.append(accum[-1] + rates[-1] * zeta)
        rates.append(float(params.kernels[q].sample(np.asarray(rates[-1]), rng)))
        types.append(q)
    return TaggedPath(
        np.array(starts), np.array(sizes), np.array(rates), np.array(types), np.array(accum), t_max
    )


@dataclass
class TaggedState:
    """Tagged-lineage state at one time across many independent paths."""

    t: float
    chi: np.ndarray
    rate: np.ndarray
    accum: np.ndarray
    type: np.ndarray
    count: np.ndarray
    count_old: np.ndarray
    count_new: np.ndarray


def _tagged_batch(params, roots, times, n, seed, batch):
    rng = stream(seed, STREAM_TAGGED, batch + 1)
    x0, v0, p0 = roots.sample(n, rng)
    theta0, theta1 = params.theta
    idx = np.arange(n)
    xi, b, tau, q, acc = x0, np.zeros(n), v0, p0.astype(int), np.zeros(n)
    c_old = np.zeros(n, dtype=np.int64)
    c_new = np.zeros(n, dtype=np.int64)
    t_end = times[-1]
    cols = {k: [np.empty(n) for _ in times] for k in ("chi", "rate", "accum")}
    ints = {k: [np.zeros(n, dtype=np.int64) for _ in times] for k in ("type", "old", "new")}
    while len(idx):
        e = rng.standard_exponential(len(idx))
        zeta = invert_hazard(params.B, xi, tau, e)
        d = b + zeta
        for j, t in enumerate(times):
            sel = (b <= t) & (t < d)
            if np.any(sel):
                where = idx[sel]
                age = t - b[sel]
                cols["chi"][j][where] = xi[sel] * np.exp(tau[sel] * age)
                cols["rate"][j][where] = tau[sel]
                cols["accum"][j][where] = acc[sel] + tau[sel] * age
                ints["type"][j][where] = q[sel]
                ints["old"][j][where] = c_old[sel]
                ints["new"][j][where] = c_new[sel]
        go = d <= t_end
        if not np.any(go):
            break
        idx, xi, b, tau, zeta, d = idx[go], xi[go], b[go], tau[go], zeta[go], d[go]
        acc, c_old, c_new = acc[go], c_old[go], c_new[go]
        new_q = (rng.random(len(idx)) >= theta0).astype(int)
        size = xi * np.exp(tau * zeta)
        xi = np.where(new_q == 0, theta0 * size, theta1 * size)
        acc = acc + tau * zeta
        c_old = c_old + (new_q == 0)
        c_new = c_new + (new_q == 1)
        tau = params.kernels.sample(new_q, tau, rng)
        q = new_q
        b = d
    return cols, ints


def tagged_states(
    params: ModelParams,
    roots: RootLaw,
    times: Sequence[float],
    n: int,
    seed: int,
    threads: int = 1,
    batch_size: int = 65536,
) -> list[TaggedState]:
    """State of ``n`` independent tagged lineages at each of ``times``."""
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if np.any(np.diff(times) < 0) or np.any(times < 0):
        raise ValueError("times must be nonnegative and sorted")
    starts = list(range(0, n, batch_size))

    def run(i):
        return _tagged_batch(params, roots, times, min(batch_size, n - starts[i]), seed, i)

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, range(len(starts))))
    else:
        parts = [run(i) for i in range(len(starts))]
    out = []
    for j, t in enumerate(times):
        cat = lambda group, key: np.concatenate([p[group][key][j] for p in parts])  # noqa: E731
        old = np.concatenate([p[1]["old"][j] for p in parts])
        new = np.concatenate([p[1]["new"][j] for p in parts])
        out.append(TaggedState(
            float(t), cat(0, "chi"), cat(0, "rate"), cat(0, "accum"),
            np.concatenate([p[1]["type"][j] for p in parts]), old + new, old, new,
        ))
    return out


# ---------------------------------------------------------------------------
# Test functions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Phi:
    """Nonnegative test function of ``(size, rate, accumulated rate[, type])``."""

    name: str
    func: Callable

    @property
    def typed(self) -> bool:
        return len(inspect.signature(self.func).parameters) == 4

    def __call__(self, size, rate, accum, typ=None):
        if self.typed:
            return self.func(size, rate, accum, typ)
        return self.func(size, rate, accum)


def _bump(u):
    return np.where(np.abs(u) < 1.0, np.exp(1.0 - 1.0 / np.maximum(1.0 - u * u, 1e-300)), 0.0)


def phi_battery() -> list[Phi]:
    """Constants, projections, products, compact bumps, and type-aware variants."""
    return [
        Phi("one", lambda s, v, a: np.ones_like(s)),
        Phi("size", lambda s, v, a: s),
        Phi("rate", lambda s, v, a: v),
        Phi("accum", lambda s, v, a: a),
        Phi("size_rate", lambda s, v, a: s * v),
        Phi("size_exp_neg_accum", lambda s, v, a: s * np.exp(-a)),
        Phi("bump_size", lambda s, v, a: _bump((s - 1.0) / 0.75)),
        Phi("bump_size_accum", lambda s, v, a: _bump((s - 1.0) / 0.75) * _bump((a - 1.0) / 1.0)),
        Phi("type_new", lambda s, v, a, q: (q == 1).astype(float)),
        Phi("size_if_old", lambda s, v, a, q: s * (q == 0)),
        Phi("bump_size_if_new", lambda s, v, a, q: _bump((s - 0.8) / 0.6) * (q == 1)),
    ]


# ---------------------------------------------------------------------------
# Checks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManyToOneRow:
    phi_id: str
    t: float
    lhs: float
    lhs_se: float
    rhs: float
    rhs_se: float

    @property
    def combined_se(self) -> float:
        return math.hypot(self.lhs_se, self.rhs_se)

    @property
    def z_score(self) -> float:
        diff = self.lhs - self.rhs
        # both estimators exact (zero variance): compare at round-off level
        if self.combined_se == 0.0:
            return 0.0 if abs(diff) <= 1e-12 * max(1.0, abs(self.lhs)) else math.inf
        return diff / self.combined_se


def _mean_se(values: np.ndarray) -> tuple[float, float]:
    n = len(values)
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0


def many_to_one_check(
    params: ModelParams,
    x: float,
    t: float,
    phis: Sequence[Phi],
    n_rep: int,
    seed: int,
    v0: float | None = None,
    p0: int = 0,
    n_cap: int = 100_000,
    threads: int = 1,
) -> list[ManyToOneRow]:
    """Estimate both sides of the many-to-one identity for every test function.

    The lineage side uses ``n_rep`` tagged paths; the population side uses
    ``n_rep`` independent full trees weighted by ``xi * exp(-taubar) / x``.
    """
    if v0 is None:
        v0 = 0.5 * (params.e_min + params.e_max)
    _validate_root(params, x, v0, p0)
    roots = RootLaw(x, v0, p0)
    lineage = tagged_states(params, roots, [t], n_rep, seed, threads=threads)[0]
    pop = simulate_population(params, roots, [t], n_rep, seed, n_cap=n_cap, threads=threads)
    cells = pop.alive[0]
    weight = cells.size * np.exp(-cells.accum) / x
    rows = []
    for phi in phis:
        lhs, lhs_se = _mean_se(np.asarray(phi(lineage.chi, lineage.rate, lineage.accum, lineage.type), float))
        vals = weight * phi(cells.size, cells.rate, cells.accum, cells.type)
        rhs, rhs_se = _mean_se(cells.per_replicate(vals, n_rep))
        rows.append(ManyToOneRow(phi.name, float(t), lhs, lhs_se, rhs, rhs_se))
    return rows


def many_to_one_csv(rows: Sequence[ManyToOneRow], target=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["phi_id", "t", "lhs", "lhs_se", "rhs", "rhs_se", "z_score"])
    for r in rows:
        w.writerow([r.phi_id, repr(r.t), repr(r.lhs), repr(r.lhs_se), repr(r.rhs),
                    repr(r.rhs_se), repr(float(r.z_score))])
    text = buf.getvalue()
    if target is not None:
        Path(target).write_text(text)
    return text


@dataclass(frozen=True)
class CountingRow:
    h: float
    p1_over_h: float
    p1_se: float
    p2_over_h2: float
    p2_se: float
    mean_b: float
    mean_b_se: float


def division_counting_check(
    params: ModelParams,
    x: float,
    t: float,
    h_grid: Sequence[float],
    n_rep: int,
    seed: int,
    v0: float | None = None,
    p0: int = 0,
    threads: int = 1,
) -> list[CountingRow]:
    """Probabilities of one and of two or more tagged divisions in ``(t, t + h]``.

    Reported normalised by ``h`` and ``h**2``, alongside ``E[B(chi(t))]``.
    """
    h_grid = np.asarray(h_grid, dtype=float)
    if np.any(h_grid <= 0):
        raise ValueError("h values must be positive")
    if v0 is None:
        v0 = 0.5 * (params.e_min + params.e_max)
    _validate_root(params, x, v0, p0)
    hs = np.sort(h_grid)
    states = tagged_states(params, RootLaw(x, v0, p0), np.concatenate([[t], t + hs]), n_rep, seed,
                           threads=threads)
    base = states[0]
    mean_b, mean_b_se = _mean_se(params.B(base.chi))
    by_h = {}
    for h, st in zip(hs, states[1:]):
        jumps = st.count - base.count
        p1 = np.mean(jumps == 1)
        p2 = np.mean(jumps >= 2)
        by_h[h] = CountingRow(
            float(h),
            float(p1 / h),
            float(math.sqrt(p1 * (1 - p1) / n_rep) / h),
            float(p2 / h**2),
            float(math.sqrt(p2 * (1 - p2) / n_rep) / h**2),
            mean_b,
            mean_b_se,
        )
    return [by_h[h] for h in h_grid]


def counting_csv(rows: Sequence[CountingRow], target=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["h", "p1_over_h", "p1_se", "p2_over_h2", "p2_se", "mean_b", "mean_b_se"])
    for r in rows:
        w.writerow([repr(r.h), repr(r.p1_over_h), repr(r.p1_se), repr(r.p2_over_h2),
                    repr(r.p2_se), repr(r.mean_b), repr(r.mean_b_se)])
    text = buf.getvalue()
    if target is not None:
        Path(target).write_text(text)
    return text


@dataclass(frozen=True)
class CountingVerdict:
    within_envelope: list[bool]
    slope: float
    max_slope: float

    @property
    def passed(self) -> bool:
        return all(self.within_envelope) and self.slope <= self.max_slope


def counting_verdict(rows: Sequence[CountingRow], kappa: float = 1.0, max_slope: float = 0.3) -> CountingVerdict:
    """Check ``P1/h`` against ``E B(chi_t)`` and the trend of ``P2/h^2``.

    ``P1/h`` must lie within ``3 SE + kappa h`` of the target. The trend is
    the least-squares slope of ``log(P2/h^2)`` against ``log(1/h)``, so a
    positive slope means growth as ``h`` shrinks.
    """
    within = [
        abs(r.p1_over_h - r.mean_b) <= 3 * math.hypot(r.p1_se, r.mean_b_se) + kappa * r.h
        for r in rows
    ]
    hs = np.array([r.h for r in rows])
    p2 = np.array([r.p2_over_h2 for r in rows])
    if np.any(p2 <= 0):
        raise ValueError("no double divisions observed at some h; increase n_rep")
    slope = float(np.polyfit(-np.log(hs), np.log(p2), 1)[0])
    return CountingVerdict(within, slope, max_slope)
