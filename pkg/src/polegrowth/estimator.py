"""Kernel estimator of the division rate from mother/daughter pairs.

For symmetric division, the rate at size ``y`` is estimated by

    B_hat(y) = (y / 2) * mean K_h(xi_u - y/2)
               / max(mean (1 / tau_parent) 1{xi_parent <= y, xi_u >= y/2}, varpi)

where ``xi_u`` is the birth size of a daughter, ``xi_parent`` that of its
mother and ``tau_parent`` the mother's growth rate. Bandwidth and threshold
follow ``h = c0 n^(-1/(2s+1))`` and ``varpi = 1 / log n`` unless given.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from polegrowth.model import ModelParams, ParameterError
from polegrowth.simulator import STREAM_MISC
from polegrowth.transition import ChainSample, simulate_chain

_BASES: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "rectangular": lambda u: np.full(np.shape(u), 0.5),
    "triangular": lambda u: 1.0 - np.abs(u),
    "epanechnikov": lambda u: 0.75 * (1.0 - u * u),
}

MOMENT_TOL = 1e-10
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(48)


def _moment(f: Callable, k: int, radius: float) -> float:
    """``int u^k f(u) du`` over ``[-radius, radius]``, one Gauss-Legendre rule per half.

    Exact for the piecewise polynomial kernels built here up to degree 95.
    """
    total = 0.0
    for a, b in ((-radius, 0.0), (0.0, radius)):
        u = 0.5 * (b - a) * _GL_NODES + 0.5 * (a + b)
        total += 0.5 * (b - a) * float(np.sum(_GL_WEIGHTS * u**k * f(u)))
    return total


@dataclass(frozen=True)
class SmoothingKernel:
    """Compactly supported kernel on ``[-radius, radius]`` with vanishing moments up to ``n0``.

    ``coeffs`` are the coefficients of the even correcting polynomial in
    ``u**2`` (``(1,)`` for the plain base shape).
    """

    shape: str
    n0: int
    coeffs: tuple[float, ...] = (1.0,)
    radius: float = 1.0

    def __call__(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float) / self.radius
        inside = np.abs(u) <= 1.0
        poly = np.polynomial.polynomial.polyval(u * u, self.coeffs)
        return np.where(inside, _BASES[self.shape](u) * poly, 0.0) / self.radius

    def scaled(self, u, h: float) -> np.ndarray:
        """``K_h(u) = K(u / h) / h``."""
        return self(np.asarray(u) / h) / h

    def moment(self, k: int) -> float:
        return _moment(self, k, self.radius)

    @property
    def nonnegative(self) -> bool:
        return len(self.coeffs) == 1


def make_kernel(shape: str = "epanechnikov", n0: int = 1) -> SmoothingKernel:
    """Kernel of order ``n0`` built on a symmetric base shape.

    For ``n0 >= 2`` the base is multiplied by an even polynomial chosen so
    that moments ``2, 4, ..`` up to ``n0`` vanish. All moments are checked by
    quadrature before returning.
    """
    shape = shape.lower()
    if shape not in _BASES:
        raise ParameterError(f"unknown kernel shape {shape!r}; choose from {sorted(_BASES)}")
    if n0 < 1:
        raise ParameterError("kernel order n0 must be at least 1")
    m = n0 // 2
    base = _BASES[shape]

    def base_moment(k):
        return _moment(base, k, 1.0)

    if m == 0:
        coeffs = (1.0 / base_moment(0),)
    else:
        mat = np.array([[base_moment(2 * (j + l)) for l in range(m + 1)] for j in range(m + 1)])
        rhs = np.zeros(m + 1)
        rhs[0] = 1.0
        try:
            sol = np.linalg.solve(mat, rhs)
        except np.linalg.LinAlgError as exc:
            raise ParameterError(f"moment system for {shape} of order {n0} is singular") from exc
        coeffs = tuple(float(c) for c in sol)
    kern = SmoothingKernel(shape, n0, coeffs)
    for k in range(n0 + 1):
        target = 1.0 if k == 0 else 0.0
        if abs(kern.moment(k) - target) > MOMENT_TOL:
            raise ParameterError(f"{shape} kernel of order {n0} fails moment {k}")
    return kern


def bandwidth_schedule(n: int, s: float, c0: float) -> tuple[float, float]:
    """Return ``(h, varpi) = (c0 n^(-1/(2s+1)), 1 / log n)``."""
    if n < 2 or s <= 0 or c0 <= 0:
        raise ParameterError("schedule needs n >= 2, s > 0 and c0 > 0")
    return c0 * n ** (-1.0 / (2.0 * s + 1.0)), 1.0 / math.log(n)


@dataclass(frozen=True)
class EstimationConfig:
    """Evaluation grid, bandwidth and threshold.

    Either ``h`` or the pair ``(c0, s)`` fixes the bandwidth; ``varpi=None``
    selects ``1 / log n``. ``constants`` holds the smoothness-class
    parameters (``r``, ``m``, ``ell``, ``L``, ``lam``) for the record; only
    ``r`` is used, to check that the grid starts at or above ``r / 2``.
    """

    y_grid: tuple[float, ...]
    h: float | None = None
    c0: float | None = None
    s: float = 2.0
    varpi: float | None = None
    constants: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        y = np.asarray(self.y_grid, dtype=float)
        if y.ndim != 1 or len(y) < 2 or np.any(np.diff(y) <= 0) or y[0] <= 0:
            raise ParameterError("y grid must be positive and strictly increasing")
        if self.h is None and self.c0 is None:
            raise ParameterError("give a bandwidth h or a schedule constant c0")
        if self.h is not None and not self.h > 0:
            raise ParameterError("bandwidth h must be positive")
        if self.c0 is not None and not self.c0 > 0:
            raise ParameterError("c0 must be positive")
        if not self.s > 0:
            raise ParameterError("smoothness s must be positive")
        if self.varpi is not None and not self.varpi > 0:
            raise ParameterError("threshold varpi must be positive")
        r = self.constants.get("r")
        if r is not None and y[0] < r / 2:
            raise ParameterError(f"grid starts at {y[0]} below r/2 = {r / 2}")

    @classmethod
    def on_interval(cls, lo: float, hi: float, n_points: int = 81, **kw) -> "EstimationConfig":
        return cls(tuple(np.linspace(lo, hi, n_points)), **kw)

    @property
    def y(self) -> np.ndarray:
        return np.asarray(self.y_grid, dtype=float)

    def resolve(self, n: int) -> tuple[float, float]:
        """Bandwidth and threshold for a sample of size ``n``."""
        if n < 2:
            raise ParameterError("need at least two observations")
        h = self.h if self.h is not None else bandwidth_schedule(n, self.s, self.c0)[0]
        varpi = self.varpi if self.varpi is not None else 1.0 / math.log(n)
        return h, varpi

    def with_c0(self, c0: float) -> "EstimationConfig":
        return EstimationConfig(self.y_grid, None, c0, self.s, self.varpi, dict(self.constants))


@dataclass(frozen=True)
class Observations:
    xi_parent: np.ndarray
    xi_child: np.ndarray
    tau_parent: np.ndarray

    def __post_init__(self):
        n = len(self.xi_parent)
        if n == 0:
            raise ParameterError("no observations")
        if len(self.xi_child) != n or len(self.tau_parent) != n:
            raise ParameterError("observation columns differ in length")
        if np.any(np.asarray(self.tau_parent) <= 0):
            raise ParameterError("growth rates must be positive")

    def __len__(self) -> int:
        return len(self.xi_parent)

    @classmethod
    def from_chain(cls, sample: ChainSample) -> "Observations":
        return cls(sample.xi_parent, sample.xi_child, sample.tau_parent)

    @classmethod
    def from_csv(cls, path) -> "Observations":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        try:
            cols = {k: np.array([float(r[k]) for r in rows]) for k in ("xi_parent", "xi_child", "tau_parent")}
        except KeyError as exc:
            raise ParameterError(f"observation CSV lacks column {exc}") from exc
        return cls(cols["xi_parent"], cols["xi_child"], cols["tau_parent"])

    def to_csv(self, target=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["xi_parent", "xi_child", "tau_parent"])
        for row in zip(self.xi_parent, self.xi_child, self.tau_parent):
            w.writerow([repr(float(c)) for c in row])
        text = buf.getvalue()
        if target is not None:
            Path(target).write_text(text)
        return text


@dataclass
class RateEstimate:
    y: np.ndarray
    b_hat: np.ndarray
    numerator: np.ndarray
    denominator: np.ndarray
    thresholded: np.ndarray
    clipped: np.ndarray
    h: float
    varpi: float

    def to_csv(self, target=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["y", "b_hat", "thresholded", "clipped"])
        for y, b, t, c in zip(self.y, self.b_hat, self.thresholded, self.clipped):
            w.writerow([repr(float(y)), repr(float(b)), int(t), int(c)])
        text = buf.getvalue()
        if target is not None:
            Path(target).write_text(text)
        return text

    def relative_l2(self, truth: Callable) -> float:
        return relative_l2(self.y, self.b_hat, truth(self.y))


def relative_l2(y, estimate, truth) -> float:
    """``||estimate - truth|| / ||truth||`` in L2 over the grid (trapezoid rule)."""
    num = np.trapezoid((np.asarray(estimate) - truth) ** 2, y)
    den = np.trapezoid(np.asarray(truth) ** 2, y)
    return math.sqrt(num / den)


def require_symmetric(params: ModelParams) -> None:
    """Refuse parameter sets outside the symmetric single-kernel setting."""
    if params.theta0 != 0.5:
        raise ParameterError(f"the estimator needs symmetric division, got theta0={params.theta0}")
    k0, k1 = params.kernels.rho0, params.kernels.rho1
    if type(k0) is not type(k1) or k0.to_config() != k1.to_config():
        raise ParameterError("the estimator needs the same rate kernel for both daughter types")


def estimate_division_rate(
    obs: Observations,
    config: EstimationConfig,
    kernel: SmoothingKernel | None = None,
    params: ModelParams | None = None,
    chunk: int = 32,
) -> RateEstimate:
    """Evaluate the kernel estimator on ``config.y_grid``.

    ``params``, when given, is checked for symmetry. A point is flagged
    ``thresholded`` when its raw denominator is below ``varpi`` and
    ``clipped`` when a signed kernel drives the estimate below zero.
    """
    if params is not None:
        require_symmetric(params)
    kernel = kernel or make_kernel("epanechnikov", 1)
    n = len(obs)
    h, varpi = config.resolve(n)
    y = config.y
    xp = np.asarray(obs.xi_parent, dtype=float)
    xc = np.asarray(obs.xi_child, dtype=float)
    inv_tau = 1.0 / np.asarray(obs.tau_parent, dtype=float)
    num = np.empty(len(y))
    den = np.empty(len(y))
    for a in range(0, len(y), chunk):
        yy = y[a:a + chunk, None]
        num[a:a + chunk] = kernel.scaled(xc - yy / 2, h).mean(axis=1)
        den[a:a + chunk] = (inv_tau * ((xp <= yy) & (xc >= yy / 2))).mean(axis=1)
    thresholded = den < varpi
    raw = (y / 2) * num / np.maximum(den, varpi)
    clipped = raw < 0
    return RateEstimate(y, np.where(clipped, 0.0, raw), num, den, thresholded, clipped, h, varpi)


# ---------------------------------------------------------------------------
# Risk study
# ---------------------------------------------------------------------------


def _rep_seed(seed: int, n: int, rep: int) -> int:
    ss = np.random.SeedSequence(int(seed), spawn_key=(STREAM_MISC, int(n), int(rep)))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def stationary_observations(
    params: ModelParams, n: int, seed: int, burn_in: int = 100, per_chain: int = 200,
) -> Observations:
    """``n`` mother/daughter pairs from independent chains run past ``burn_in``."""
    n_chains = max(1, -(-n // per_chain))
    steps = n_chains * (per_chain + burn_in)
    sample = simulate_chain(params, steps, burn_in, seed, n_chains=n_chains)
    return Observations(sample.xi_parent[:n], sample.xi_child[:n], sample.tau_parent[:n])


@dataclass
class RiskRow:
    n: int
    risk: float
    se: float
    errors: np.ndarray


@dataclass
class RiskStudy:
    rows: list[RiskRow]
    slope: float
    intercept: float

    def to_csv(self, target=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n", "risk", "se"])
        for r in self.rows:
            w.writerow([r.n, repr(r.risk), repr(r.se)])
        text = buf.getvalue()
        if target is not None:
            Path(target).write_text(text)
        return text


def risk_study(
    params: ModelParams,
    B_true: Callable,
    n_list: Sequence[int],
    n_mc: int,
    config: EstimationConfig,
    seed: int,
    kernel: SmoothingKernel | None = None,
    threads: int = 1,
) -> RiskStudy:
    """Root-mean-square relative L2 error per sample size, and its log-log slope.

    Each repetition draws a fresh stationary sample from its own stream, so
    results do not depend on ``threads``. The standard error of the RMS risk
    uses the delta method.
    """
    require_symmetric(params)
    n_list = [int(n) for n in n_list]
    if any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ParameterError("n_list must be increasing")
    if n_mc < 2:
        raise ParameterError("n_mc must be at least 2")
    kernel = kernel or make_kernel("epanechnikov", 1)
    truth = B_true(config.y)

    def one(job):
        n, rep = job
        obs = stationary_observations(params, n, _rep_seed(seed, n, rep))
        est = estimate_division_rate(obs, config, kernel)
        return relative_l2(config.y, est.b_hat, truth)

    jobs = [(n, r) for n in n_list for r in range(n_mc)]
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            errs = list(pool.map(one, jobs))
    else:
        errs = [one(j) for j in jobs]
    errs = np.array(errs).reshape(len(n_list), n_mc)
    rows = []
    for n, e in zip(n_list, errs):
        ms = float(np.mean(e**2))
        risk = math.sqrt(ms)
        se_ms = float(np.std(e**2, ddof=1)) / math.sqrt(n_mc)
        rows.append(RiskRow(n, risk, se_ms / (2 * risk) if risk > 0 else 0.0, e))
    slope, intercept = np.polyfit(np.log([r.n for r in rows]), np.log([r.risk for r in rows]), 1)
    return RiskStudy(rows, float(slope), float(intercept))


def calibrate_c0(
    params: ModelParams,
    B_true: Callable,
    n_pilot: int,
    c0_grid: Sequence[float],
    config: EstimationConfig,
    seed: int,
    kernel: SmoothingKernel | None = None,
) -> tuple[float, list[float]]:
    """Pick the schedule constant with the smallest error on one pilot sample.

    Meant to be run once; the result is then frozen in the configuration.
    """
    obs = stationary_observations(params, n_pilot, _rep_seed(seed, n_pilot, 0))
    truth = B_true(config.y)
    errs = [relative_l2(config.y, estimate_division_rate(obs, config.with_c0(c), kernel, params).b_hat, truth)
            for c in c0_grid]
    return float(c0_grid[int(np.argmin(errs))]), errs
