"""One-step genealogical transitions and the invariant measure of the birth-size chain.

Given a mother born with size ``x`` and growth rate ``v``, her size at division
has hazard ``B(y) / (v y)`` per unit size on ``[x, inf)``. Following one
daughter, chosen with the type probabilities ``theta``, gives the joint law of
the daughter's birth size ``x'`` and type ``i'``:

    theta_i' * B(x'/theta_i') / (v x') * 1{x' >= x theta_i'}
             * exp(-(H(x'/theta_i') - H(x)) / v),

with ``H`` the integrated hazard per unit log-size. It sums to one over
``i'`` and integrates to one in ``x'``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import integrate

from polegrowth.model import ModelParams, ParameterError, TruncatedGaussianKernel, invert_hazard
from polegrowth.simulator import STREAM_CHAIN, stream


@dataclass(frozen=True)
class TransitionObservation:
    """Mother birth size, rate and type together with one daughter's."""

    xi_parent: float
    tau_parent: float
    type_parent: int
    xi_child: float
    tau_child: float
    type_child: int


def transition_density(params: ModelParams, x, i, v, x_child, i_child, v_child=None):
    """Density in ``x_child`` of the daughter's birth size and type.

    With ``v_child`` given, the daughter-rate density of ``rho_i'`` is
    multiplied in (only for kernels that have a density). The mother's type
    ``i`` does not enter: the division law depends on size and rate only.
    """
    if not (np.all(np.asarray(x) > 0) and np.all(np.asarray(v) > 0)):
        raise ValueError("transition_density needs x > 0 and v > 0")
    if i not in (0, 1) or i_child not in (0, 1):
        raise ValueError("types must be 0 or 1")
    theta = params.theta[i_child]
    x_child = np.asarray(x_child, dtype=float)
    if theta == 0.0:
        return np.zeros_like(x_child)
    y = x_child / theta
    support = y >= x
    y_safe = np.where(support, y, x)
    surv = np.exp(-(params.B.log_integral(y_safe) - params.B.log_integral(x)) / v)
    with np.errstate(divide="ignore", invalid="ignore"):
        dens = np.where(support, theta * params.B(y_safe) / (v * np.where(x_child > 0, x_child, 1.0)) * surv, 0.0)
    if v_child is not None:
        rho = params.kernels[i_child]
        if not isinstance(rho, TruncatedGaussianKernel):
            raise ParameterError("joint density needs a growth-rate kernel with a density")
        dens = dens * rho.density(v, v_child)
    return dens


def transition_cdf(params: ModelParams, x, v, z, i_child):
    """``P(x' <= z, i' = i_child)`` for a mother born at ``(x, v)``."""
    theta = params.theta[i_child]
    z = np.asarray(z, dtype=float)
    y = np.maximum(z / theta, x) if theta > 0 else np.full(z.shape, float(x))
    return theta * -np.expm1(-(params.B.log_integral(y) - params.B.log_integral(x)) / v)


def transition_mass(params: ModelParams, x, i, v) -> float:
    """``sum_i' int density dx'`` by adaptive quadrature (should equal 1)."""
    total = 0.0
    for j in (0, 1):
        theta = params.theta[j]
        if theta == 0.0:
            continue
        lo = x * theta
        val, _ = integrate.quad(
            lambda u: float(transition_density(params, x, i, v, u, j)),
            lo, np.inf, epsabs=1e-13, epsrel=1e-11, limit=500,
        )
        total += val
    return total


def sample_transitions(params: ModelParams, x, i, v, rng):
    """Vectorised one-step transitions. Returns arrays ``(xi_child, tau_child, type_child)``."""
    x, v = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(v, dtype=float))
    e = rng.standard_exponential(x.shape)
    zeta = invert_hazard(params.B, x, v, e)
    size = x * np.exp(v * zeta)
    q = (rng.random(x.shape) >= params.theta0).astype(int)
    theta = np.where(q == 0, params.theta0, params.theta1)
    tau = params.kernels.sample(q, v, rng)
    return theta * size, tau, q


def sample_transition(params: ModelParams, x: float, i: int, v: float, rng) -> TransitionObservation:
    """Simulate one lifetime of a mother born at ``(x, i, v)`` and follow one daughter."""
    if not x > 0 or not params.kernels.contains(v):
        raise ValueError("invalid mother state")
    xc, tc, qc = sample_transitions(params, np.asarray([x]), i, np.asarray([v]), rng)
    return TransitionObservation(float(x), float(v), int(i), float(xc[0]), float(tc[0]), int(qc[0]))


def histogram_l1(
    params: ModelParams, x: float, v: float, xs, qs, bins: int = 200, sub: int = 16,
    upper_quantile: float = 0.999,
) -> float:
    """L1 distance between the transition density and a normalised histogram of draws.

    Per type, bins span ``[x theta, q]`` with ``q`` the ``upper_quantile`` of
    the draws; ``int |f - f_hat|`` is evaluated on ``sub`` midpoints per bin
    and the tail beyond ``q`` contributes ``|P_true - P_hat|``.
    """
    xs = np.asarray(xs, dtype=float)
    qs = np.asarray(qs)
    n = len(xs)
    total = 0.0
    for j in (0, 1):
        theta = params.theta[j]
        if theta == 0.0:
            total += np.count_nonzero(qs == j) / n
            continue
        sel = xs[qs == j]
        lo = x * theta
        top = float(np.quantile(sel, upper_quantile)) if len(sel) else lo * 2
        hi = max(top, lo * (1 + 1e-9))
        edges = np.linspace(lo, hi, bins + 1)
        counts, _ = np.histogram(sel, edges)
        emp_tail = np.count_nonzero(sel > hi) / n
        width = edges[1] - edges[0]
        f_hat = counts / (n * width)
        offs = (np.arange(sub) + 0.5) / sub
        pts = edges[:-1, None] + width * offs[None, :]
        f = transition_density(params, x, 0, v, pts, j)
        total += np.abs(f - f_hat[:, None]).mean(axis=1).sum() * width
        total += abs(theta - float(transition_cdf(params, x, v, hi, j)) - emp_tail)
    return float(total)


# ---------------------------------------------------------------------------
# Stationary chain
# ---------------------------------------------------------------------------


@dataclass
class ChainSample:
    """Retained mother/daughter pairs of the birth-size chain after burn-in."""

    xi_parent: np.ndarray
    tau_parent: np.ndarray
    type_parent: np.ndarray
    xi_child: np.ndarray
    tau_child: np.ndarray
    type_child: np.ndarray

    def __len__(self) -> int:
        return len(self.xi_parent)

    def to_csv(self, target=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["xi_parent", "tau_parent", "type_parent", "xi_child", "tau_child", "type_child"])
        for row in zip(self.xi_parent, self.tau_parent, self.type_parent,
                       self.xi_child, self.tau_child, self.type_child):
            w.writerow([repr(float(row[0])), repr(float(row[1])), int(row[2]),
                        repr(float(row[3])), repr(float(row[4])), int(row[5])])
        text = buf.getvalue()
        if target is not None:
            Path(target).write_text(text)
        return text


@dataclass
class EmpiricalMeasure1D:
    """Histogram of a measure on size (optionally split by rate)."""

    edges: np.ndarray
    weights: np.ndarray
    rate_edges: np.ndarray | None = None
    sample: ChainSample | None = None

    @property
    def mass(self) -> float:
        return float(self.weights.sum())

    @property
    def size_marginal(self) -> np.ndarray:
        return self.weights if self.weights.ndim == 1 else self.weights.sum(axis=1)

    def density(self) -> np.ndarray:
        return self.size_marginal / (self.mass * np.diff(self.edges))

    def to_csv(self, target=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "mass"])
        for lo, hi, m in zip(self.edges[:-1], self.edges[1:], self.size_marginal):
            w.writerow([repr(float(lo)), repr(float(hi)), repr(float(m))])
        text = buf.getvalue()
        if target is not None:
            Path(target).write_text(text)
        return text


def simulate_chain(
    params: ModelParams,
    n_steps: int,
    burn_in: int,
    seed: int,
    n_chains: int = 1,
    x_init: float = 1.0,
    v_init: float | None = None,
    p_init: int = 0,
) -> ChainSample:
    """Run ``n_chains`` independent copies of the birth-size chain.

    ``n_steps`` transitions are shared evenly between the chains; the first
    ``burn_in`` of each chain are discarded.
    """
    per_chain = -(-n_steps // n_chains)
    if burn_in < 0 or burn_in >= per_chain:
        raise ValueError(
            f"burn_in={burn_in} leaves no retained steps out of {per_chain} per chain"
        )
    if v_init is None:
        v_init = 0.5 * (params.e_min + params.e_max)
    rng = stream(seed, STREAM_CHAIN)
    x = np.full(n_chains, float(x_init))
    v = np.full(n_chains, float(v_init))
    q = np.full(n_chains, int(p_init))
    keep = per_chain - burn_in
    out = {k: np.empty((keep, n_chains)) for k in ("xp", "tp", "xc", "tc")}
    qp = np.empty((keep, n_chains), dtype=int)
    qc = np.empty((keep, n_chains), dtype=int)
    for step in range(per_chain):
        xn, vn, qn = sample_transitions(params, x, q, v, rng)
        r = step - burn_in
        if r >= 0:
            out["xp"][r], out["tp"][r], qp[r] = x, v, q
            out["xc"][r], out["tc"][r], qc[r] = xn, vn, qn
        x, v, q = xn, vn, qn
    flat = lambda a: a.T.reshape(-1)  # noqa: E731  chain-major order
    return ChainSample(flat(out["xp"]), flat(out["tp"]), flat(qp), flat(out["xc"]), flat(out["tc"]), flat(qc))


def invariant_measure_estimate(
    params: ModelParams,
    n_steps: int,
    burn_in: int,
    seed: int,
    n_chains: int = 1000,
    bins: int = 100,
    edges=None,
    rate_bins: int | None = None,
) -> EmpiricalMeasure1D:
    """Occupation measure of the birth-size chain, as a normalised histogram.

    The retained pairs are attached as ``.sample`` for downstream use.
    """
    chain = simulate_chain(params, n_steps, burn_in, seed, n_chains=n_chains)
    if edges is None:
        edges = np.linspace(chain.xi_parent.min(), chain.xi_parent.max() * (1 + 1e-12), bins + 1)
    edges = np.asarray(edges, dtype=float)
    n = len(chain)
    if rate_bins:
        rate_edges = np.linspace(params.e_min, params.e_max * (1 + 1e-12), rate_bins + 1)
        w, _, _ = np.histogram2d(np.clip(chain.xi_parent, edges[0], edges[-1] * (1 - 1e-15)),
                                 chain.tau_parent, [edges, rate_edges])
        return EmpiricalMeasure1D(edges, w / n, rate_edges, chain)
    w, _ = np.histogram(np.clip(chain.xi_parent, edges[0], edges[-1] * (1 - 1e-15)), edges)
    return EmpiricalMeasure1D(edges, w / n, None, chain)


def pushforward_l1(params: ModelParams, measure: EmpiricalMeasure1D, seed: int) -> float:
    """L1 distance between the histogram of the chain states and of their one-step images."""
    s = measure.sample
    if s is None:
        raise ValueError("measure carries no chain sample")
    rng = stream(seed, STREAM_CHAIN, 1)
    x1, _, _ = sample_transitions(params, s.xi_parent, s.type_parent, s.tau_parent, rng)
    e = measure.edges
    clip = lambda a: np.clip(a, e[0], e[-1] * (1 - 1e-15))  # noqa: E731
    h0, _ = np.histogram(clip(s.xi_parent), e)
    h1, _ = np.histogram(clip(x1), e)
    return float(np.abs(h0 - h1).sum() / len(s))


def histogram_l1_between(a: EmpiricalMeasure1D, b: EmpiricalMeasure1D) -> float:
    if not np.array_equal(a.edges, b.edges):
        raise ValueError("histograms must share bin edges")
    return float(np.abs(a.size_marginal / a.mass - b.size_marginal / b.mass).sum())


@dataclass
class Reconstruction:
    y: np.ndarray
    b: np.ndarray
    flagged: np.ndarray
    numerator: np.ndarray
    denominator: np.ndarray


def reconstruct_B_from_invariant(
    params: ModelParams, sample: ChainSample, y_grid, bins: int = 100, edges=None
) -> Reconstruction:
    """Plug-in inversion of the invariant-measure representation (symmetric division).

    ``B(y) = (y/2) nu(y/2) / E[(1/tau_parent) 1{xi_parent <= y, xi_child >= y/2}]``
    with ``nu`` the histogram density of daughter birth sizes. Grid points with a
    zero denominator are returned as NaN and flagged.
    """
    if not params.symmetric:
        raise ParameterError("reconstruction is only derived for symmetric division (theta0 = 1/2)")
    y = np.asarray(y_grid, dtype=float)
    xc = sample.xi_child
    if edges is None:
        edges = np.linspace(xc.min(), xc.max() * (1 + 1e-12), bins + 1)
    counts, _ = np.histogram(xc, edges)
    dens = counts / (len(xc) * np.diff(edges))
    k = np.searchsorted(edges, y / 2, side="right") - 1
    inside = (k >= 0) & (k < len(dens))
    nu = np.where(inside, dens[np.clip(k, 0, len(dens) - 1)], 0.0)
    inv_tau = 1.0 / sample.tau_parent
    den = _indicator_means(sample.xi_parent, sample.xi_child, inv_tau, y)
    flagged = den <= 0
    with np.errstate(divide="ignore", invalid="ignore"):
        b = np.where(flagged, np.nan, 0.5 * y * nu / den)
    return Reconstruction(y, b, flagged, 0.5 * y * nu, den)


def _indicator_means(xp, xc, weights, y, chunk: int = 16):
    """``mean(weights * 1{xp <= y, xc >= y/2})`` for each ``y``."""
    out = np.empty(len(y))
    for lo in range(0, len(y), chunk):
        yy = y[lo:lo + chunk, None]
        hit = (xp[None, :] <= yy) & (xc[None, :] >= yy / 2)
        out[lo:lo + chunk] = (hit * weights[None, :]).mean(axis=1)
    return out
