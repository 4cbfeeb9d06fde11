"""Model parameters: division rates, growth-rate kernels and hazard primitives.

A cell born with size ``x`` and growth rate ``v`` has size ``x * exp(v * s)``
at age ``s`` and divides with hazard ``B(x * exp(v * s))``. Every quantity the
simulator and the density code need is expressed through the integrated
hazard per unit log-size,

    H(y) = int_0^y B(s) / s ds,

since the cumulative hazard over an age interval is ``(H(x e^{vt}) - H(x)) / v``.
Both shipped families of ``B`` have ``H`` in closed form, which makes lifetime
sampling an explicit inversion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import integrate
from scipy.special import ndtr
from scipy.stats import truncnorm

_SQRT_2PI = math.sqrt(2.0 * math.pi)


class ParameterError(ValueError):
    """Raised when model parameters violate their constraints."""


# ---------------------------------------------------------------------------
# Division rate
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DivisionRate:
    """Size-dependent division hazard ``B``.

    Two families are available: ``power`` (``B(x) = c * x**gamma``) and
    ``table`` (piecewise linear through sorted knots, extrapolated linearly past
    the last knot). Use :func:`make_division_rate` to build validated instances.
    """

    family: str
    c: float = 1.0
    gamma: float = 1.0
    knots_x: tuple[float, ...] = ()
    knots_b: tuple[float, ...] = ()
    _slopes: np.ndarray = field(init=False, repr=False, compare=False)
    _intercepts: np.ndarray = field(init=False, repr=False, compare=False)
    _h_knots: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.family == "power":
            empty = np.empty(0)
            object.__setattr__(self, "_slopes", empty)
            object.__setattr__(self, "_intercepts", empty)
            object.__setattr__(self, "_h_knots", empty)
            return
        xs = np.asarray(self.knots_x, dtype=float)
        bs = np.asarray(self.knots_b, dtype=float)
        slopes = np.diff(bs) / np.diff(xs)
        # the tail segment reuses the last interior slope
        slopes = np.append(slopes, slopes[-1])
        intercepts = bs - slopes * xs
        h = np.zeros(len(xs))
        for k in range(len(xs) - 1):
            h[k + 1] = h[k] + _segment_integral(intercepts[k], slopes[k], xs[k], xs[k + 1])
        object.__setattr__(self, "_slopes", slopes)
        object.__setattr__(self, "_intercepts", intercepts)
        object.__setattr__(self, "_h_knots", h)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.family == "power":
            return self.c * np.power(np.maximum(x, 0.0), self.gamma)
        xs = np.asarray(self.knots_x)
        inside = np.interp(x, xs, self.knots_b)
        tail = self._intercepts[-1] + self._slopes[-1] * x
        out = np.where(x > xs[-1], tail, inside)
        return np.where(x <= 0.0, 0.0, out)

    @property
    def tail_slope(self) -> float:
        return float(self._slopes[-1]) if self.family == "table" else float("inf")

    def log_integral(self, y):
        """Return ``H(y) = int_0^y B(s)/s ds``."""
        y = np.asarray(y, dtype=float)
        if self.family == "power":
            return self.c * np.power(y, self.gamma) / self.gamma
        xs = np.asarray(self.knots_x)
        k = np.clip(np.searchsorted(xs, y, side="right") - 1, 0, len(xs) - 1)
        return self._h_knots[k] + _segment_integral(
            self._intercepts[k], self._slopes[k], xs[k], y
        )

    def inverse_log_integral(self, h):
        """Return the smallest ``y`` with ``H(y) = h`` (``h >= 0``)."""
        h = np.asarray(h, dtype=float)
        if self.family == "power":
            return np.power(self.gamma * h / self.c, 1.0 / self.gamma)
        xs = np.asarray(self.knots_x)
        k = np.clip(np.searchsorted(self._h_knots, h, side="right") - 1, 0, len(xs) - 1)
        a = self._intercepts[k]
        b = self._slopes[k]
        x_k = xs[k]
        rem = h - self._h_knots[k]
        last = len(xs) - 1
        upper = np.where(
            k < last,
            xs[np.minimum(k + 1, last)],
            2.0 * xs[last] + 2.0 * rem / self._slopes[-1] + 1.0,
        )
        return _invert_segment(a, b, x_k, rem, upper)

    def to_config(self) -> dict[str, str]:
        if self.family == "power":
            return {"b.family": "power", "b.c": repr(self.c), "b.gamma": repr(self.gamma)}
        knots = ", ".join(f"{x!r}:{b!r}" for x, b in zip(self.knots_x, self.knots_b))
        return {"b.family": "table", "b.knots": knots}


def _segment_integral(a, b, x0, y):
    """``int_{x0}^{y} (a + b s)/s ds`` with the convention ``a = 0`` when ``x0 = 0``."""
    a = np.asarray(a, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    y = np.asarray(y, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_term = np.where(a != 0.0, a * np.log(y / np.where(x0 > 0, x0, 1.0)), 0.0)
    return log_term + b * (y - x0)


def _invert_segment(a, b, x0, rem, upper, iters: int = 200):
    """Solve ``a ln(y/x0) + b (y - x0) = rem`` for ``y`` in ``[x0, upper]``."""
    a, b, x0, rem, upper = np.broadcast_arrays(
        *(np.asarray(v, dtype=float) for v in (a, b, x0, rem, upper))
    )
    out = np.empty(a.shape)
    linear = a == 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        out[linear] = x0[linear] + rem[linear] / b[linear]
    pure_log = (~linear) & (b == 0.0)
    out[pure_log] = x0[pure_log] * np.exp(rem[pure_log] / a[pure_log])
    general = ~(linear | pure_log)
    if np.any(general):
        lo = x0[general].copy()
        hi = upper[general].copy()
        aa, bb, xx, rr = a[general], b[general], x0[general], rem[general]
        for _ in range(iters):
            mid = 0.5 * (lo + hi)
            above = aa * np.log(mid / xx) + bb * (mid - xx) >= rr
            hi = np.where(above, mid, hi)
            lo = np.where(above, lo, mid)
            if np.all(hi - lo <= 1e-15 * hi):
                break
        out[general] = 0.5 * (lo + hi)
    return out


def make_division_rate(family: str, params: Mapping[str, object]) -> DivisionRate:
    """Build a validated :class:`DivisionRate`.

    ``power`` expects ``c`` and ``gamma``; ``table`` expects ``knots``, a
    sequence of ``(x, B)`` pairs sorted by ``x``. A table that does not start at
    ``x = 0`` gets a ``(0, 0)`` knot prepended.
    """
    if family == "power":
        c = float(params["c"])
        gamma = float(params["gamma"])
        if not c > 0:
            raise ParameterError(f"power division rate needs c > 0, got {c}")
        if not gamma > 0:
            raise ParameterError(f"power division rate needs gamma > 0, got {gamma}")
        return DivisionRate("power", c=c, gamma=gamma)
    if family == "table":
        knots = [(float(x), float(b)) for x, b in params["knots"]]
        if len(knots) < 2:
            raise ParameterError("table division rate needs at least two knots")
        xs = [x for x, _ in knots]
        bs = [b for _, b in knots]
        if any(x < 0 for x in xs):
            raise ParameterError("table knots must lie in [0, inf)")
        if any(x1 <= x0 for x0, x1 in zip(xs, xs[1:])):
            raise ParameterError("table knots must be strictly increasing")
        if any(b < 0 for b in bs):
            raise ParameterError("table values B_k must be nonnegative")
        if xs[0] == 0.0 and bs[0] != 0.0:
            raise ParameterError("division rate must vanish at 0")
        if xs[0] > 0.0:
            xs.insert(0, 0.0)
            bs.insert(0, 0.0)
        if not (bs[-1] - bs[-2]) / (xs[-1] - xs[-2]) > 0:
            raise ParameterError(
                "table extrapolation slope must be > 0 so that int^inf B(x)/x dx diverges"
            )
        return DivisionRate("table", knots_x=tuple(xs), knots_b=tuple(bs))
    raise ParameterError(f"unknown division rate family {family!r}")


def cumulative_hazard(B: DivisionRate, x, v, t, method: str = "auto"):
    """Cumulative division hazard ``int_0^t B(x exp(v s)) ds``.

    ``method="quad"`` forces adaptive quadrature (relative tolerance 1e-10,
    scalar inputs only); the default uses the closed form of the family.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any(x <= 0) or np.any(v <= 0):
        raise ValueError("cumulative_hazard needs x > 0 and v > 0")
    if np.any(t < 0):
        raise ValueError("cumulative_hazard needs t >= 0")
    if method == "quad":
        xs, vs, ts = float(x), float(v), float(t)
        if ts == 0.0:
            return 0.0
        breaks = [np.log(k / xs) / vs for k in B.knots_x if k > xs]
        breaks = [s for s in breaks if 0 < s < ts]
        val, _ = integrate.quad(
            lambda s: float(B(xs * np.exp(vs * s))),
            0.0,
            ts,
            epsrel=1e-10,
            epsabs=0.0,
            limit=500,
            points=breaks or None,
        )
        return val
    if B.family == "power":
        g = B.gamma
        return B.c * np.power(x, g) * np.expm1(g * v * t) / (g * v)
    return (B.log_integral(x * np.exp(v * t)) - B.log_integral(x)) / v


def invert_hazard(B: DivisionRate, x, v, e):
    """Age at which the cumulative hazard of a cell born at ``(x, v)`` reaches ``e``."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    e = np.asarray(e, dtype=float)
    if B.family == "power":
        g = B.gamma
        return np.log1p(g * v * e / (B.c * np.power(x, g))) / (g * v)
    y = B.inverse_log_integral(B.log_integral(x) + v * e)
    return np.maximum(np.log(y / x) / v, 0.0)


# ---------------------------------------------------------------------------
# Growth-rate kernels
# ---------------------------------------------------------------------------


def _expect(kernel, v, f: Callable) -> np.ndarray:
    """``E[f(V') | v]``; ``f`` maps child rates laid out on a trailing axis."""
    pts, w = kernel.quadrature(v)
    return (w * f(pts)).sum(axis=-1)


class PointMassKernel:
    """Degenerate kernel: the child rate is always ``value``."""

    family = "point"

    def __init__(self, value: float):
        self.value = float(value)

    def sample(self, v, rng):
        return np.full(np.shape(v), self.value)

    def lumped(self, nodes: np.ndarray) -> np.ndarray:
        nodes = np.asarray(nodes, dtype=float)
        hit = np.flatnonzero(np.isclose(nodes, self.value, rtol=0, atol=1e-12))
        if len(hit) == 0:
            raise ParameterError(f"rate node set {nodes} misses point mass {self.value}")
        mat = np.zeros((len(nodes), len(nodes)))
        mat[:, hit[0]] = 1.0
        return mat

    def quadrature(self, v):
        v = np.asarray(v, dtype=float)
        return np.array([self.value]), np.ones(v.shape + (1,))

    def expect(self, v, f: Callable) -> np.ndarray:
        return _expect(self, v, f)

    def nodes(self) -> tuple[float, ...]:
        return (self.value,)

    def to_config(self, suffix: str = "") -> dict[str, str]:
        return {f"kernel.value{suffix}": repr(self.value)}


class GridKernel:
    """Row-stochastic transition matrix between the nodes of a uniform grid."""

    family = "grid"

    def __init__(self, nodes: Sequence[float], matrix):
        self.grid = np.asarray(nodes, dtype=float)
        self.matrix = np.asarray(matrix, dtype=float)
        n = len(self.grid)
        if self.matrix.shape != (n, n):
            raise ParameterError("grid kernel matrix must be square over the node set")
        if np.any(self.matrix < 0) or not np.allclose(self.matrix.sum(axis=1), 1.0, atol=1e-12):
            raise ParameterError("grid kernel rows must be probability vectors")
        self._cdf = np.cumsum(self.matrix, axis=1)
        self._cdf[:, -1] = 1.0

    def _row(self, v):
        v = np.asarray(v, dtype=float)
        return np.abs(v[..., None] - self.grid).argmin(axis=-1)

    def sample(self, v, rng):
        rows = self._row(v)
        u = rng.random(np.shape(rows))
        idx = (self._cdf[rows] <= u[..., None]).sum(axis=-1)
        return self.grid[np.minimum(idx, len(self.grid) - 1)]

    def lumped(self, nodes: np.ndarray) -> np.ndarray:
        if len(nodes) != len(self.grid) or not np.allclose(nodes, self.grid):
            raise ParameterError("grid kernel needs the solver rate nodes to equal its grid")
        return self.matrix.copy()

    def quadrature(self, v):
        return self.grid, self.matrix[self._row(v)]

    def expect(self, v, f: Callable) -> np.ndarray:
        return _expect(self, v, f)

    def nodes(self) -> tuple[float, ...]:
        return tuple(self.grid)

    def to_config(self, suffix: str = "") -> dict[str, str]:
        rows = "; ".join(" ".join(repr(p) for p in row) for row in self.matrix)
        return {f"kernel.n_nodes{suffix}": str(len(self.grid)), f"kernel.matrix{suffix}": rows}


class TruncatedGaussianKernel:
    """Gaussian around ``mean_a + mean_b * v`` truncated to ``[lo, hi]`` and renormalised."""

    family = "gaussian"

    def __init__(self, sigma: float, lo: float, hi: float, mean_a: float = 0.0, mean_b: float = 1.0):
        if not sigma > 0:
            raise ParameterError("truncated Gaussian kernel needs sigma > 0")
        self.sigma = float(sigma)
        self.lo = float(lo)
        self.hi = float(hi)
        self.mean_a = float(mean_a)
        self.mean_b = float(mean_b)

    def _standardised(self, v):
        m = self.mean_a + self.mean_b * np.asarray(v, dtype=float)
        return m, (self.lo - m) / self.sigma, (self.hi - m) / self.sigma

    def sample(self, v, rng):
        m, a, b = self._standardised(v)
        u = rng.random(np.shape(m))
        out = truncnorm.ppf(u, a, b, loc=m, scale=self.sigma)
        return np.clip(out, self.lo, self.hi)

    def density(self, v, v_new):
        m, a, b = self._standardised(v)
        mass = ndtr(b) - ndtr(a)
        u = (v_new - m) / self.sigma
        inside = (v_new >= self.lo) & (v_new <= self.hi)
        return np.where(inside, np.exp(-0.5 * u * u) / (_SQRT_2PI * self.sigma * mass), 0.0)

    def lumped(self, nodes: np.ndarray) -> np.ndarray:
        nodes = np.asarray(nodes, dtype=float)
        cuts = np.concatenate([[self.lo], 0.5 * (nodes[1:] + nodes[:-1]), [self.hi]])
        m, a, b = self._standardised(nodes)
        cdf = truncnorm.cdf(cuts[None, :], a[:, None], b[:, None], loc=m[:, None], scale=self.sigma)
        mat = np.clip(np.diff(cdf, axis=1), 0.0, None)
        return mat / mat.sum(axis=1, keepdims=True)

    def quadrature(self, v, order: int = 64):
        v = np.asarray(v, dtype=float)
        z, w = np.polynomial.legendre.leggauss(order)
        pts = 0.5 * (self.hi - self.lo) * z + 0.5 * (self.hi + self.lo)
        w = 0.5 * (self.hi - self.lo) * w
        return pts, self.density(v[..., None], pts) * w

    def expect(self, v, f: Callable) -> np.ndarray:
        return _expect(self, v, f)

    def nodes(self) -> tuple[float, ...]:
        return ()

    def to_config(self, suffix: str = "") -> dict[str, str]:
        return {
            f"kernel.sigma{suffix}": repr(self.sigma),
            f"kernel.mean_a{suffix}": repr(self.mean_a),
            f"kernel.mean_b{suffix}": repr(self.mean_b),
        }


@dataclass(frozen=True)
class RateKernel:
    """Type-indexed pair ``(rho0, rho1)`` of growth-rate inheritance kernels on ``[e_min, e_max]``."""

    rho0: object
    rho1: object
    e_min: float
    e_max: float

    def __post_init__(self):
        if not 0 < self.e_min <= self.e_max < np.inf:
            raise ParameterError("rate support must satisfy 0 < e_min <= e_max < inf")
        for rho in (self.rho0, self.rho1):
            if isinstance(rho, PointMassKernel) and not self.e_min <= rho.value <= self.e_max:
                raise ParameterError("point-mass kernel value outside [e_min, e_max]")
            if isinstance(rho, GridKernel) and (
                rho.grid.min() < self.e_min or rho.grid.max() > self.e_max
            ):
                raise ParameterError("grid kernel nodes outside [e_min, e_max]")
            if isinstance(rho, TruncatedGaussianKernel) and (
                rho.lo != self.e_min or rho.hi != self.e_max
            ):
                raise ParameterError("truncated Gaussian kernel must be truncated to [e_min, e_max]")

    def __getitem__(self, i: int):
        return (self.rho0, self.rho1)[i]

    @property
    def family(self) -> str:
        return self.rho0.family

    def contains(self, v) -> bool:
        v = np.asarray(v, dtype=float)
        return bool(np.all((v >= self.e_min) & (v <= self.e_max)))

    def sample(self, types, v, rng) -> np.ndarray:
        """Draw child rates for parents with rates ``v`` and child types ``types``."""
        types = np.asarray(types)
        v = np.asarray(v, dtype=float)
        out = np.empty(np.broadcast(types, v).shape)
        types, v = np.broadcast_arrays(types, v)
        for i in (0, 1):
            sel = types == i
            if np.any(sel):
                out[sel] = self[i].sample(v[sel], rng)
        return out

    def default_nodes(self, n_v: int, extra: Sequence[float] = ()) -> np.ndarray:
        """Rate nodes for the grid solver: exact for point-mass and grid kernels."""
        if isinstance(self.rho0, GridKernel):
            return self.rho0.grid.copy()
        own = self.rho0.nodes() + self.rho1.nodes()
        if own:
            return np.unique(np.array(own + tuple(extra), dtype=float))
        if n_v == 1:
            return np.array([0.5 * (self.e_min + self.e_max)])
        return np.linspace(self.e_min, self.e_max, n_v)


def sample_rate_kernel(kernels: RateKernel, i: int, v: float, rng) -> float:
    """Draw a child growth rate from ``rho_i(v, .)``."""
    if i not in (0, 1):
        raise ValueError(f"type must be 0 or 1, got {i}")
    if not kernels.e_min <= v <= kernels.e_max:
        raise ValueError(f"parent rate {v} outside [{kernels.e_min}, {kernels.e_max}]")
    return float(kernels[i].sample(np.asarray(v), rng))


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelParams:
    """All model parameters. ``theta1`` is derived as ``1 - theta0``."""

    B: DivisionRate
    theta0: float
    kernels: RateKernel

    def __post_init__(self):
        if not 0.0 < self.theta0 <= 1.0:
            raise ParameterError(f"theta0 must lie in (0, 1], got {self.theta0}")

    @property
    def theta1(self) -> float:
        return 1.0 - self.theta0

    @property
    def theta(self) -> tuple[float, float]:
        return (self.theta0, self.theta1)

    @property
    def e_min(self) -> float:
        return self.kernels.e_min

    @property
    def e_max(self) -> float:
        return self.kernels.e_max

    @property
    def symmetric(self) -> bool:
        return self.theta0 == 0.5

    def with_theta0(self, theta0: float) -> "ModelParams":
        return ModelParams(self.B, theta0, self.kernels)

    def to_config(self) -> dict[str, str]:
        cfg = dict(self.B.to_config())
        cfg["theta0"] = repr(self.theta0)
        cfg["e_min"] = repr(self.e_min)
        cfg["e_max"] = repr(self.e_max)
        cfg["kernel.family"] = self.kernels.family
        first = self.kernels.rho0.to_config()
        second = self.kernels.rho1.to_config()
        if first == second:
            cfg.update(first)
        else:
            cfg.update(self.kernels.rho0.to_config("0"))
            cfg.update(self.kernels.rho1.to_config("1"))
        return cfg


def _parse_knots(text: str) -> list[tuple[float, float]]:
    pairs = []
    for item in text.replace(";", ",").split(","):
        item = item.strip()
        if not item:
            continue
        x, b = item.split(":")
        pairs.append((float(x), float(b)))
    return pairs


def _kernel_from_config(section: Mapping[str, str], family: str, suffix: str, e_min, e_max):
    def get(key, default=None):
        return section.get(f"{key}{suffix}", section.get(key, default))

    if family == "point":
        value = get("kernel.value")
        return PointMassKernel(float(value) if value is not None else 0.5 * (e_min + e_max))
    if family == "gaussian":
        if get("kernel.sigma") is None:
            raise ParameterError("gaussian kernel needs kernel.sigma")
        return TruncatedGaussianKernel(
            float(get("kernel.sigma")),
            e_min,
            e_max,
            mean_a=float(get("kernel.mean_a", 0.0)),
            mean_b=float(get("kernel.mean_b", 1.0)),
        )
    if family == "grid":
        n = int(get("kernel.n_nodes", 0))
        text = get("kernel.matrix", "identity")
        if text.strip() == "identity":
            if n < 1:
                raise ParameterError("identity grid kernel needs kernel.n_nodes")
            mat = np.eye(n)
        else:
            mat = np.array([[float(p) for p in row.split()] for row in text.split(";")])
            n = len(mat)
        nodes = np.linspace(e_min, e_max, n) if n > 1 else np.array([e_min])
        return GridKernel(nodes, mat)
    raise ParameterError(f"unknown kernel family {family!r}")


def params_from_config(section: Mapping[str, str]) -> ModelParams:
    """Build :class:`ModelParams` from the ``[model]`` section of a run config."""
    try:
        family = section.get("b.family", "power")
        if family == "power":
            B = make_division_rate(
                "power", {"c": section.get("b.c", "1.0"), "gamma": section.get("b.gamma", "1.0")}
            )
        else:
            B = make_division_rate(family, {"knots": _parse_knots(section["b.knots"])})
        e_min = float(section["e_min"])
        e_max = float(section["e_max"])
        kfam = section.get("kernel.family", "point")
        kernels = RateKernel(
            _kernel_from_config(section, kfam, "0", e_min, e_max),
            _kernel_from_config(section, kfam, "1", e_min, e_max),
            e_min,
            e_max,
        )
        return ModelParams(B, float(section["theta0"]), kernels)
    except KeyError as exc:
        raise ParameterError(f"missing model key {exc.args[0]}") from None
