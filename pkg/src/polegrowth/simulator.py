"""Genealogical tree simulation and population snapshots.

Cells are labelled by binary strings (Ulam-Harris): ``label + "0"`` is the
old-pole daughter, ``label + "1"`` the new-pole daughter, and the root is the
empty string. :func:`simulate_tree` draws every random quantity of a cell from
a stream keyed by ``(seed, label)``, so a tree does not depend on the order in
which cells are expanded.

For Monte Carlo ensembles (thousands of trees) :func:`simulate_population`
advances all replicates of a batch generation by generation with vectorised
draws; batches have a fixed size and their own stream, so the result is the
same for any number of worker threads.
"""

from __future__ import annotations

import csv
import heapq
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from polegrowth.model import ModelParams, invert_hazard

# first spawn-key entry, one per consumer of randomness
STREAM_TREE = 1
STREAM_ENSEMBLE = 2
STREAM_TAGGED = 3
STREAM_CHAIN = 4
STREAM_MISC = 5


class TruncationError(RuntimeError):
    """Raised when a query needs cells beyond the population cap."""


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for ``(seed, *key)``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(key)))


def label_key(label: str) -> int:
    return int("1" + label, 2)


# ---------------------------------------------------------------------------
# Single trees
# ---------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class CellRecord:
    """One cell: birth size ``xi``, birth time ``b``, lifetime ``zeta`` (``None``
    when still alive at the horizon), growth rate ``tau``, pole type ``p`` and
    inherited fraction ``theta``."""

    label: str
    parent: str | None
    xi: float
    b: float
    zeta: float | None
    tau: float
    p: int
    theta: float

    @property
    def d(self) -> float:
        return math.inf if self.zeta is None else self.b + self.zeta

    @property
    def generation(self) -> int:
        return len(self.label)

    @property
    def division_size(self) -> float:
        if self.zeta is None:
            raise ValueError(f"cell {self.label!r} has not divided")
        return self.xi * math.exp(self.tau * self.zeta)

    def size_at(self, t: float) -> float:
        return self.xi * math.exp(self.tau * (t - self.b))


@dataclass(frozen=True)
class PopulationSnapshot:
    """Cells alive at time ``t``: sizes, growth rates and types."""

    t: float
    sizes: np.ndarray
    rates: np.ndarray
    types: np.ndarray
    labels: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.sizes)

    def rows(self):
        for s, v, p in zip(self.sizes, self.rates, self.types):
            yield (self.t, float(s), float(v), int(p))


@dataclass
class Genealogy:
    """A finite realisation of the genealogical tree."""

    cells: dict[str, CellRecord]
    t_max: float
    n_cap: int
    truncated: bool
    seed: int
    valid_until: float

    @property
    def root(self) -> CellRecord:
        return self.cells[""]

    def __len__(self) -> int:
        return len(self.cells)

    def children(self, label: str) -> tuple[CellRecord, CellRecord] | None:
        kids = self.cells.get(label + "0"), self.cells.get(label + "1")
        return None if kids[0] is None else kids

    def frontier(self) -> list[CellRecord]:
        """Cells that died before the horizon but were not expanded (cap reached)."""
        return [
            c for c in self.cells.values()
            if c.zeta is not None and c.label + "0" not in self.cells
        ]

    def n_divisions(self, t: float) -> int:
        return sum(1 for c in self.cells.values() if c.d <= t and c.label + "0" in self.cells)

    def snapshot(self, t: float) -> PopulationSnapshot:
        return snapshot(self, t)

    def sorted_cells(self) -> list[CellRecord]:
        return sorted(self.cells.values(), key=lambda c: (len(c.label), c.label))

    def to_csv(self, target=None) -> str:
        """Write ``label, parent, xi, b, zeta, tau, p, theta`` rows; return the text."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["label", "parent", "xi", "b", "zeta", "tau", "p", "theta"])
        for c in self.sorted_cells():
            w.writerow([
                c.label,
                "" if c.parent is None else c.parent,
                repr(c.xi),
                repr(c.b),
                "" if c.zeta is None else repr(c.zeta),
                repr(c.tau),
                c.p,
                repr(c.theta),
            ])
        text = buf.getvalue()
        if target is not None:
            Path(target).write_text(text)
        return text


def sample_lifetime(B, x: float, v: float, rng) -> float:
    """Lifetime of a cell born with size ``x`` and rate ``v``.

    Draws a unit exponential ``E`` and returns the age at which the cumulative
    hazard reaches ``E``.
    """
    if not x > 0:
        raise ValueError("birth size must be positive")
    if not v > 0:
        raise ValueError("growth rate must be positive")
    e = rng.standard_exponential()
    while e == 0.0:
        e = rng.standard_exponential()
    return float(invert_hazard(B, x, v, e))


def _validate_root(params: ModelParams, x0, v0, p0):
    if not x0 > 0:
        raise ValueError(f"root size must be positive, got {x0}")
    if not params.kernels.contains(v0):
        raise ValueError(f"root rate {v0} outside [{params.e_min}, {params.e_max}]")
    if p0 not in (0, 1):
        raise ValueError(f"root type must be 0 or 1, got {p0}")


def simulate_tree(
    params: ModelParams,
    root: tuple[float, float, int],
    t_max: float,
    n_cap: int,
    seed: int,
) -> Genealogy:
    """Grow one genealogical tree up to ``t_max``.

    Cells are expanded in order of division time. Expansion stops when a
    further division would push the number of living cells above ``n_cap``;
    the returned genealogy is then flagged ``truncated`` and is only valid
    strictly before the earliest unexpanded division.
    """
    x0, v0, p0 = float(root[0]), float(root[1]), int(root[2])
    _validate_root(params, x0, v0, p0)
    if not t_max > 0:
        raise ValueError("t_max must be positive")
    if n_cap < 1:
        raise ValueError("n_cap must be at least 1")
    if params.theta0 >= 1.0:
        raise ValueError("full trees need theta0 < 1 (new-pole daughters would have size 0)")
    B = params.B
    theta = params.theta

    def make_cell(label, parent, xi, b, tau_parent, p):
        rng = stream(seed, STREAM_TREE, label_key(label))
        if parent is None:
            tau = v0
        else:
            tau = float(params.kernels[p].sample(np.asarray(tau_parent), rng))
        zeta = sample_lifetime(B, xi, tau, rng)
        return CellRecord(label, parent, xi, b, zeta, tau, p, theta[p] if parent is not None else 1.0)

    cells: dict[str, CellRecord] = {}
    heap: list[tuple[float, str]] = []

    def add(cell: CellRecord):
        if cell.b + cell.zeta <= t_max:
            cells[cell.label] = cell
            heapq.heappush(heap, (cell.b + cell.zeta, cell.label))
        else:
            cells[cell.label] = CellRecord(
                cell.label, cell.parent, cell.xi, cell.b, None, cell.tau, cell.p, cell.theta
            )

    add(make_cell("", None, x0, 0.0, None, p0))
    alive = 1
    truncated = False
    valid_until = t_max
    while heap:
        d, label = heap[0]
        if alive + 1 > n_cap:
            truncated = True
            valid_until = d
            break
        heapq.heappop(heap)
        mother = cells[label]
        size = mother.division_size
        for p in (0, 1):
            add(make_cell(label + str(p), label, theta[p] * size, d, mother.tau, p))
        alive += 1
    return Genealogy(cells, t_max, n_cap, truncated, seed, valid_until)


def snapshot(genealogy: Genealogy, t: float) -> PopulationSnapshot:
    """Cells alive at time ``t`` (``b_u <= t < b_u + zeta_u``) with their current sizes."""
    if t < 0 or t > genealogy.t_max:
        raise ValueError(f"snapshot time {t} outside [0, {genealogy.t_max}]")
    if genealogy.truncated and t >= genealogy.valid_until:
        raise TruncationError(
            f"snapshot at t={t} needs cells beyond the truncation frontier "
            f"(tree valid for t < {genealogy.valid_until})"
        )
    alive = [c for c in genealogy.sorted_cells() if c.b <= t < c.d]
    return PopulationSnapshot(
        t,
        np.array([c.size_at(t) for c in alive]),
        np.array([c.tau for c in alive]),
        np.array([c.p for c in alive], dtype=int),
        tuple(c.label for c in alive),
    )


def snapshots_to_csv(snaps: Iterable[PopulationSnapshot], target=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "size", "rate", "type"])
    for snap in snaps:
        for t, s, v, p in snap.rows():
            w.writerow([repr(float(t)), repr(s), repr(v), p])
    text = buf.getvalue()
    if target is not None:
        Path(target).write_text(text)
    return text


# ---------------------------------------------------------------------------
# Ensembles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RootLaw:
    """Law of the ancestor: size ``x0 * exp(log_sigma * N(0,1))``, rate ``v0``, type ``p0``."""

    x0: float
    v0: float
    p0: int = 0
    log_sigma: float = 0.0

    def sample(self, n: int, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if self.log_sigma > 0:
            x = self.x0 * np.exp(self.log_sigma * rng.standard_normal(n))
        else:
            x = np.full(n, float(self.x0))
        return x, np.full(n, float(self.v0)), np.full(n, int(self.p0))

    def log_size_cdf(self, z):
        """CDF of the root log-size (a step function for a Dirac root)."""
        from scipy.special import ndtr

        z = np.asarray(z, dtype=float)
        if self.log_sigma > 0:
            return ndtr((z - math.log(self.x0)) / self.log_sigma)
        return (z >= math.log(self.x0)).astype(float)


@dataclass
class AliveCells:
    """Cells alive at one observation time, pooled over replicates."""

    t: float
    rep: np.ndarray
    size: np.ndarray
    rate: np.ndarray
    type: np.ndarray
    accum: np.ndarray
    n_old: np.ndarray
    n_new: np.ndarray

    def per_replicate(self, values, n_rep: int) -> np.ndarray:
        return np.bincount(self.rep, weights=values, minlength=n_rep)


@dataclass
class PopulationEnsemble:
    """Independent population realisations observed at a list of times."""

    times: np.ndarray
    n_rep: int
    alive: list[AliveCells]
    divisions: np.ndarray  # (n_times, n_rep): divisions completed at or before t
    root_sizes: np.ndarray
    root_rates: np.ndarray

    def counts(self, j: int) -> np.ndarray:
        return np.bincount(self.alive[j].rep, minlength=self.n_rep)


def _simulate_batch(params, roots: RootLaw, times, t_end, reps, n_cap, seed, batch):
    rng = stream(seed, STREAM_ENSEMBLE, batch)
    n = len(reps)
    x0, v0, p0 = roots.sample(n, rng)
    if np.any(x0 <= 0) or not params.kernels.contains(v0):
        raise ValueError("root law produced an invalid ancestor")
    theta0, theta1 = params.theta
    rep = reps.copy()
    xi, b, tau, p = x0, np.zeros(n), v0, p0
    acc = np.zeros(n)
    n_old = np.zeros(n, dtype=np.int64)
    n_new = np.zeros(n, dtype=np.int64)
    local = rep - reps[0]
    divs = np.zeros((len(times), n), dtype=np.int64)
    out = [[] for _ in times]
    while len(xi):
        e = rng.standard_exponential(len(xi))
        zeta = invert_hazard(params.B, xi, tau, e)
        d = b + zeta
        for j, t in enumerate(times):
            sel = (b <= t) & (t < d)
            if np.any(sel):
                age = t - b[sel]
                out[j].append((
                    rep[sel],
                    xi[sel] * np.exp(tau[sel] * age),
                    tau[sel],
                    p[sel],
                    acc[sel] + tau[sel] * age,
                    n_old[sel],
                    n_new[sel],
                ))
            np.add.at(divs[j], local[d <= t], 1)
        split = d <= t_end
        if not np.any(split):
            break
        if np.any(divs[-1] + 1 > n_cap):
            raise TruncationError(
                f"a replicate exceeded the population cap n_cap={n_cap} before t={t_end}"
            )
        m = np.flatnonzero(split)
        size = xi[m] * np.exp(tau[m] * zeta[m])
        k = len(m)
        new_types = np.concatenate([np.zeros(k, dtype=int), np.ones(k, dtype=int)])
        parent_tau = np.concatenate([tau[m], tau[m]])
        rep = np.concatenate([rep[m], rep[m]])
        local = np.concatenate([local[m], local[m]])
        xi = np.concatenate([theta0 * size, theta1 * size])
        b = np.concatenate([d[m], d[m]])
        acc = np.concatenate([acc[m] + tau[m] * zeta[m]] * 2)
        n_old = np.concatenate([n_old[m] + 1, n_old[m]])
        n_new = np.concatenate([n_new[m], n_new[m] + 1])
        tau = params.kernels.sample(new_types, parent_tau, rng)
        p = new_types
    slices = []
    for j in range(len(times)):
        if out[j]:
            cols = [np.concatenate(c) for c in zip(*out[j])]
        else:
            cols = [np.empty(0, dtype=int), *[np.empty(0)] * 4, np.empty(0, dtype=int), np.empty(0, dtype=int)]
        slices.append(cols)
    return slices, divs, x0, v0


def simulate_population(
    params: ModelParams,
    roots: RootLaw,
    times: Sequence[float],
    n_rep: int,
    seed: int,
    n_cap: int = 100_000,
    threads: int = 1,
    batch_size: int = 4096,
) -> PopulationEnsemble:
    """Simulate ``n_rep`` independent populations and record the living cells at ``times``."""
    if params.theta0 >= 1.0:
        raise ValueError("full trees need theta0 < 1")
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if np.any(times < 0) or np.any(np.diff(times) < 0):
        raise ValueError("observation times must be nonnegative and sorted")
    t_end = float(times[-1])
    starts = list(range(0, n_rep, batch_size))

    def run(i):
        lo = starts[i]
        reps = np.arange(lo, min(lo + batch_size, n_rep))
        return _simulate_batch(params, roots, times, t_end, reps, n_cap, seed, i)

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, range(len(starts))))
    else:
        results = [run(i) for i in range(len(starts))]
    alive = []
    for j, t in enumerate(times):
        cols = [np.concatenate([r[0][j][c] for r in results]) for c in range(7)]
        alive.append(AliveCells(float(t), cols[0].astype(np.int64), cols[1], cols[2],
                                cols[3].astype(int), cols[4], cols[5].astype(np.int64),
                                cols[6].astype(np.int64)))
    divisions = np.concatenate([r[1] for r in results], axis=1)
    return PopulationEnsemble(
        times,
        n_rep,
        alive,
        divisions,
        np.concatenate([r[2] for r in results]),
        np.concatenate([r[3] for r in results]),
    )
