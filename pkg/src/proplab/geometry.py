"""Lorentzian chart geometry and the null bicharacteristic flow.

The principal symbol of the wave operator is ``p(x, xi) = g^{mu nu}(x) xi_mu xi_nu``.
Its Hamilton field (with the bracket convention ``{p, q} = d_xi p d_x q - d_x p d_xi q``)
is::

    xdot^nu  =  2 g^{mu nu} xi_mu
    xidot_a  = -(d_a g^{mu nu}) xi_mu xi_nu

Curves of this field that start on ``p = 0`` are the bicharacteristics; their
base projections are null geodesics, with an affine parameter that differs
from the usual one by a constant factor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import minimize_scalar

from . import exprconfig as ec
from .errors import ChartExit, Inconclusive, NonNullPoint, OutOfChart, SignatureError, SingularMetric, StepFailure

NULL_TOL = 1e-9
DET_TOL = 1e-12

TIMELIKE_FUTURE = "timelike-future"
TIMELIKE_PAST = "timelike-past"
NULL_FUTURE = "null-future"
NULL_PAST = "null-past"
SPACELIKE = "spacelike"

DIAGONAL = "diagonal"
C_PLUS = "C+"
C_MINUS = "C-"
UNRELATED = "unrelated"


class MetricChart:
    """A coordinate chart carrying a Lorentzian metric given by expressions.

    Parameters
    ----------
    metric : dim x dim nested sequence of expressions or strings
    box : optional ``(dim, 2)`` array of coordinate bounds; unbounded if omitted.
    time_orientation : covector ``tau`` (default ``dx0``); a nonspacelike
        covector ``xi`` is future directed when ``g^{-1}(tau, xi) > 0``,
        see :func:`classify_covector`.
    name : label used in reports.
    """

    def __init__(self, metric, box=None, time_orientation=None, name: str = "chart",
                 check_signature: bool = True):
        dim = len(metric)
        if not 2 <= dim <= ec.MAX_DIM:
            raise ValueError("chart dimension must be 2..4")
        self.dim = dim
        self.name = name
        self.g_expr = tuple(tuple(ec.as_expr(v) for v in row) for row in metric)
        for i in range(dim):
            if len(self.g_expr[i]) != dim:
                raise ValueError("metric must be square")
        if box is None:
            box = [(-np.inf, np.inf)] * dim
        self.box = np.asarray(box, dtype=float).reshape(dim, 2)
        tau = np.zeros(dim)
        tau[0] = 1.0
        self.time_orientation = tau if time_orientation is None else np.asarray(time_orientation, float)
        flat = [self.g_expr[i][j] for i in range(dim) for j in range(dim)]
        self._g = ec.compile_exprs(flat, dim)
        self._dg = ec.compile_exprs([ec.differentiate(e, a) for a in range(dim) for e in flat], dim)
        self._d2g = None
        self._flat = flat
        self.is_constant = all(not ec.variables(e) for e in flat)
        self._md_cache = {}
        if check_signature:
            self._check_samples()

    # -- raw component access (vectorised over trailing axes) --------------
    def g(self, x):
        x = np.asarray(x, float)
        return self._g(x).reshape((self.dim, self.dim) + x.shape[1:])

    def dg(self, x):
        """``dg[a, mu, nu] = d_a g_{mu nu}``."""
        x = np.asarray(x, float)
        return self._dg(x).reshape((self.dim, self.dim, self.dim) + x.shape[1:])

    def d2g(self, x):
        """``d2g[a, b, mu, nu] = d_a d_b g_{mu nu}``."""
        if self._d2g is None:
            exprs = [ec.differentiate(ec.differentiate(e, a), b)
                     for a in range(self.dim) for b in range(self.dim) for e in self._flat]
            self._d2g = ec.compile_exprs(exprs, self.dim)
        x = np.asarray(x, float)
        return self._d2g(x).reshape((self.dim,) * 4 + x.shape[1:])

    def contains(self, x) -> bool:
        x = np.asarray(x, float)
        return bool(np.all(x >= self.box[:, 0]) and np.all(x <= self.box[:, 1]))

    def sample_points(self, count: int, rng=None) -> np.ndarray:
        """Uniform points in the (finite part of the) chart box."""
        rng = np.random.default_rng(0) if rng is None else rng
        lo = np.where(np.isfinite(self.box[:, 0]), self.box[:, 0], -1.0)
        hi = np.where(np.isfinite(self.box[:, 1]), self.box[:, 1], 1.0)
        return rng.uniform(lo, hi, size=(count, self.dim))

    def _check_samples(self, count: int = 16) -> None:
        for x in self.sample_points(count):
            g = self.g(x)
            if not np.allclose(g, g.T, rtol=0, atol=1e-12):
                raise SignatureError(f"metric of chart {self.name!r} is not symmetric at {x}")
            det = np.linalg.det(g)
            if abs(det) < DET_TOL:
                raise SingularMetric(f"|det g| < {DET_TOL} at {x}")
            ev = np.linalg.eigvalsh(g)
            if np.sum(ev < 0) != 1:
                raise SignatureError(f"metric of chart {self.name!r} is not Lorentzian (-,+,...,+) at {x}")

    def __repr__(self) -> str:
        return f"MetricChart(name={self.name!r}, dim={self.dim})"


def minkowski(dim: int = 2, box=None) -> MetricChart:
    """Flat chart with ``g = diag(-1, 1, ..., 1)``."""
    metric = [[("-1" if i == j == 0 else "1") if i == j else "0" for j in range(dim)] for i in range(dim)]
    return MetricChart(metric, box=box, name=f"minkowski{dim}")


def frw(a: str = "exp(x0)", box=None) -> MetricChart:
    """1+1 chart ``g = diag(-1, a(t)^2)``; ``box`` defaults to ``[-1, 1] x [-5, 5]``."""
    a_expr = ec.as_expr(a)
    metric = [[ec.Num(-1.0), ec.Num(0.0)], [ec.Num(0.0), ec.power(a_expr, 2)]]
    if box is None:
        box = [(-1.0, 1.0), (-5.0, 5.0)]
    return MetricChart(metric, box=box, name=f"frw:a={a}")


def chart_from_config(cfg: ec.ExperimentConfig) -> MetricChart:
    return MetricChart(cfg.metric, box=cfg.box, time_orientation=cfg.time_orientation, name=cfg.name)


def named_chart(spec: str, dim: int = 2) -> MetricChart:
    """Resolve ``minkowski`` or ``frw:a=<expr>``."""
    if spec == "minkowski":
        return minkowski(dim)
    if spec.startswith("frw"):
        _, _, rest = spec.partition(":")
        a = rest.split("=", 1)[1] if rest.startswith("a=") else "exp(x0)"
        return frw(a)
    raise ValueError(f"unknown chart {spec!r} (expected 'minkowski' or 'frw:a=<expr>')")


@dataclass(frozen=True)
class PhasePoint:
    """A point ``(x, xi)`` of the cotangent bundle with the zero section removed."""

    x: np.ndarray
    xi: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, float)
        xi = np.asarray(self.xi, float)
        if x.shape != xi.shape or x.ndim != 1:
            raise ValueError("x and xi must be 1-D of equal length")
        if not np.linalg.norm(xi) > 1e-300:
            raise ValueError("xi must be nonzero")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "xi", xi)


@dataclass(frozen=True)
class MetricData:
    g: np.ndarray
    ginv: np.ndarray
    dginv: np.ndarray  # [a, mu, nu] = d_a g^{mu nu}
    christoffel: np.ndarray  # [rho, mu, nu] = Gamma^rho_{mu nu}
    dg: np.ndarray


def metric_data(chart: MetricChart, x) -> MetricData:
    """Metric, inverse, inverse derivatives and Levi-Civita symbols at ``x``."""
    x = np.asarray(x, float)
    key = x.tobytes()
    cache = chart._md_cache
    hit = cache.get(key)
    if hit is not None:
        return hit
    md = _metric_data(chart, x)
    if len(cache) > 32:
        cache.clear()
    cache[key] = md
    return md


def _metric_data(chart: MetricChart, x) -> MetricData:
    if not chart.contains(x):
        raise OutOfChart(f"{x} is outside the box of chart {chart.name!r}")
    g = chart.g(x)
    det = np.linalg.det(g)
    if not abs(det) >= DET_TOL:
        raise SingularMetric(f"|det g| = {abs(det):.3e} < {DET_TOL} at {x}")
    ginv = np.linalg.solve(g, np.eye(chart.dim))
    dg = chart.dg(x)
    dginv = -np.einsum("mi,aij,jn->amn", ginv, dg, ginv)
    # Gamma^r_{mn} = 1/2 g^{rs}(d_m g_{sn} + d_n g_{sm} - d_s g_{mn})
    lower = 0.5 * (np.einsum("msn->smn", dg) + np.einsum("nsm->smn", dg) - dg)
    chris = np.einsum("rs,smn->rmn", ginv, lower)
    return MetricData(g=g, ginv=ginv, dginv=dginv, christoffel=chris, dg=dg)


def christoffel_derivative(chart: MetricChart, x) -> np.ndarray:
    """``out[m, r, a, b] = d_m Gamma^r_{ab}`` (needs second metric derivatives)."""
    md = metric_data(chart, x)
    dg, d2g = md.dg, chart.d2g(np.asarray(x, float))
    low = 0.5 * (np.einsum("asb->sab", dg) + np.einsum("bsa->sab", dg) - dg)
    dlow = 0.5 * (np.einsum("masb->msab", d2g) + np.einsum("mbsa->msab", d2g) - d2g)
    return np.einsum("mrs,sab->mrab", md.dginv, low) + np.einsum("rs,msab->mrab", md.ginv, dlow)


def principal(chart: MetricChart, x, xi) -> float:
    """``p(x, xi) = g^{-1}(xi, xi)``."""
    ginv = np.linalg.inv(chart.g(np.asarray(x, float)))
    xi = np.asarray(xi, float)
    return float(xi @ ginv @ xi)


def hamiltonian_field(chart: MetricChart, pt: PhasePoint):
    """Return ``(xdot, xidot)`` of the Hamilton field of ``p`` at ``pt``."""
    md = metric_data(chart, pt.x)
    xdot = 2.0 * md.ginv @ pt.xi
    xidot = -np.einsum("amn,m,n->a", md.dginv, pt.xi, pt.xi)
    return xdot, xidot


def _batched_rhs(chart: MetricChart):
    """Vectorised right-hand side over a stack of phase points.

    The state has shape ``(2 n, k)``; the metric is inverted in closed form
    per column with ``numpy.linalg``.
    """
    n = chart.dim

    def rhs(_s, y):
        y = y.reshape(2 * n, -1)
        x, xi = y[:n], y[n:]
        g = np.moveaxis(chart.g(x), -1, 0)  # (k, n, n)
        dg = np.moveaxis(chart.dg(x), -1, 0)  # (k, a, n, n)
        ginv = np.linalg.inv(g)
        up = np.einsum("kmn,nk->mk", ginv, xi)  # g^{mn} xi_n
        xdot = 2.0 * up
        # d_a g^{mn} xi_m xi_n = -(g^{-1} xi)^T d_a g (g^{-1} xi)
        xidot = np.einsum("mk,kamn,nk->ak", up, dg, up)
        return np.concatenate([xdot, xidot]).ravel()

    return rhs


@dataclass
class Bicharacteristic:
    """Sampled integral curve of the Hamilton field."""

    s: np.ndarray
    x: np.ndarray  # (len(s), n)
    xi: np.ndarray  # (len(s), n)
    p_drift: np.ndarray  # |p(x_i, xi_i) - p_0| / |xi_i|^2
    steps: int
    rejected: int
    exited: bool = False
    sol: Callable | None = field(default=None, repr=False)
    chart: MetricChart | None = field(default=None, repr=False)
    _rhs: Callable | None = field(default=None, repr=False)

    @property
    def max_drift(self) -> float:
        return float(np.max(self.p_drift)) if len(self.p_drift) else 0.0

    def state(self, s):
        """Dense-output state ``(x, xi)`` at parameter ``s``."""
        if self.sol is None:
            raise ValueError("curve has no dense output")
        y = self.sol(s)
        n = self.x.shape[1]
        return y[:n], y[n:]

    def velocity(self, s):
        """Base velocity ``xdot(s)`` from the Hamilton field."""
        x, xi = self.state(s)
        s_arr = np.ndim(s) > 0
        if self._rhs is None:
            self._rhs = _batched_rhs(self.chart)
        rhs = self._rhs
        n = self.x.shape[1]
        y = np.concatenate([np.atleast_2d(x.T).T if s_arr else x[:, None], xi if s_arr else xi[:, None]])
        out = rhs(0.0, y).reshape(2 * n, -1)[:n]
        return out if s_arr else out[:, 0]

    def rows(self):
        """CSV-ready rows ``s, x..., xi..., p_drift``."""
        return np.column_stack([self.s, self.x, self.xi, self.p_drift])


def _project_null(chart: MetricChart, x, xi, iters: int = 4):
    """Newton correction of ``xi_0`` so that ``p(x, xi) = 0``."""
    xi = np.array(xi, float)
    ginv = np.linalg.inv(chart.g(x))
    for _ in range(iters):
        p = xi @ ginv @ xi
        dp = 2.0 * (ginv @ xi)[0]
        if dp == 0:
            break
        xi[0] -= p / dp
    return xi


def flow_bicharacteristic(chart: MetricChart, pt: PhasePoint, s_range=(0.0, 10.0), tol: float = NULL_TOL,
                          samples=None, num: int = 201, *, null: bool = True, project: bool = False,
                          raise_on_exit: bool = False, rtol: float = 1e-12, atol: float = 1e-13) -> Bicharacteristic:
    """Integrate the Hamilton field from ``pt`` over ``s_range``.

    Parameters
    ----------
    samples : optional array of parameters at which to report the curve;
        defaults to ``num`` equally spaced values.
    null : require the seed to be null within ``tol * |xi|^2``.
    project : apply a Newton correction of ``xi_0`` at every reported sample
        (off by default so the integrator's own error is visible).
    raise_on_exit : raise :class:`ChartExit` (carrying the partial curve)
        instead of returning a curve flagged ``exited``.
    """
    s0, s1 = map(float, s_range)
    if not (math.isfinite(s0) and math.isfinite(s1)):
        raise ValueError("s_range must be finite")
    n = chart.dim
    xi_norm2 = float(pt.xi @ pt.xi)
    p0 = principal(chart, pt.x, pt.xi)
    if null and abs(p0) > tol * xi_norm2:
        raise NonNullPoint(f"seed is not null: |p| = {abs(p0):.3e}")
    metric_data(chart, pt.x)  # validates chart membership
    rhs = _batched_rhs(chart)

    def fun(s, y):
        return rhs(s, y[:, None])

    events = []
    if np.any(np.isfinite(chart.box)):
        lo, hi = chart.box[:, 0], chart.box[:, 1]

        def leave(s, y):
            x = y[:n]
            return float(np.min(np.concatenate([x - lo, hi - x])))

        leave.terminal = True
        leave.direction = -1
        events.append(leave)

    y0 = np.concatenate([pt.x, pt.xi])
    sol = solve_ivp(fun, (s0, s1), y0, method="DOP853", rtol=rtol, atol=atol, dense_output=True,
                    events=events or None)
    if sol.status == -1:
        raise StepFailure(f"integrator failed: {sol.message}")
    s_end = float(sol.t[-1])
    exited = sol.status == 1
    if samples is None:
        samples = np.linspace(s0, s1, num)
    samples = np.asarray(samples, float)
    lo_s, hi_s = min(s0, s_end), max(s0, s_end)
    keep = (samples >= lo_s - 1e-15) & (samples <= hi_s + 1e-15)
    samples = samples[keep]
    y = sol.sol(samples) if len(samples) else np.zeros((2 * n, 0))
    xs, xis = y[:n].T.copy(), y[n:].T.copy()
    if project:
        for i in range(len(samples)):
            xis[i] = _project_null(chart, xs[i], xis[i])
    ginv = np.linalg.inv(np.moveaxis(chart.g(xs.T), -1, 0)) if len(samples) else np.zeros((0, n, n))
    p = np.einsum("km,kmn,kn->k", xis, ginv, xis)
    drift = np.abs(p - p0) / np.einsum("km,km->k", xis, xis)
    curve = Bicharacteristic(s=samples, x=xs, xi=xis, p_drift=drift, steps=int(sol.nfev), rejected=0,
                             exited=exited, sol=sol.sol, chart=chart)
    # DOP853 uses 12 stages per accepted step; record accepted/rejected estimate
    accepted = len(sol.t) - 1
    curve.steps = accepted
    curve.rejected = max(0, (int(sol.nfev) - 1) // 12 - accepted)
    if exited and raise_on_exit:
        raise ChartExit(f"trajectory left chart {chart.name!r} at s = {s_end:.6g}", curve)
    return curve


def flow_many(chart: MetricChart, x0: np.ndarray, xi0: np.ndarray, s_range=(0.0, 10.0), num: int = 101,
              rtol: float = 1e-12, atol: float = 1e-13):
    """Flow many seeds at once as one stacked ODE system.

    Returns ``(s, x, xi, inside)`` with ``x, xi`` of shape ``(k, num, n)``;
    ``inside`` marks samples before the first exit from the chart box (the
    flow is continued past the box only when the metric stays defined).
    """
    x0 = np.atleast_2d(np.asarray(x0, float))
    xi0 = np.atleast_2d(np.asarray(xi0, float))
    k, n = x0.shape
    rhs = _batched_rhs(chart)
    s = np.linspace(s_range[0], s_range[1], num)
    y0 = np.concatenate([x0.T, xi0.T]).ravel()
    sol = solve_ivp(rhs, s_range, y0, method="DOP853", rtol=rtol, atol=atol, t_eval=s)
    if not sol.success:
        raise StepFailure(f"integrator failed: {sol.message}")
    y = sol.y.reshape(2 * n, k, -1)
    x = np.transpose(y[:n], (1, 2, 0))
    xi = np.transpose(y[n:], (1, 2, 0))
    inb = np.all((x >= chart.box[:, 0]) & (x <= chart.box[:, 1]), axis=2)
    inside = np.cumprod(inb, axis=1).astype(bool)
    return s, x, xi, inside


def random_null_covectors(chart: MetricChart, x: np.ndarray, rng, scale: float = 1.0,
                          orientation: str = "any") -> np.ndarray:
    """Random null covectors at the base points ``x`` (shape ``(k, n)``).

    Spatial components are drawn from a normal distribution and ``xi_0`` is
    solved from ``p = 0``.  ``orientation`` is ``"future"``, ``"past"`` or
    ``"any"`` (random root).
    """
    x = np.atleast_2d(x)
    k, n = x.shape
    out = np.empty((k, n))
    for i in range(k):
        ginv = np.linalg.inv(chart.g(x[i]))
        while True:
            sp = rng.normal(size=n - 1) * scale
            a = ginv[0, 0]
            b = 2.0 * ginv[0, 1:] @ sp
            c = sp @ ginv[1:, 1:] @ sp
            disc = b * b - 4 * a * c
            if disc > 0 and a != 0:
                roots = [(-b + sgn * math.sqrt(disc)) / (2 * a) for sgn in (1.0, -1.0)]
                if orientation == "any":
                    root = roots[int(rng.random() < 0.5)]
                else:
                    want = orientation == "future"
                    root = next(r for r in roots
                                if (chart.time_orientation @ ginv @ np.concatenate([[r], sp]) > 0) == want)
                out[i, 0] = root
                out[i, 1:] = sp
                out[i] = _project_null(chart, x[i], out[i])
                break
    return out


def classify_covector(chart: MetricChart, pt: PhasePoint) -> str:
    """Causal type of ``pt.xi`` with respect to the metric and time orientation.

    A nonspacelike covector is *future* directed when its raised vector
    ``g^{-1} xi`` pairs positively with the orientation covector ``tau``
    (default ``dx0``), i.e. when ``xi`` generates forward motion in ``x0``
    under the Hamilton field.  In Minkowski space ``(-1, 0)`` is therefore
    timelike future.
    """
    ginv = np.linalg.inv(chart.g(pt.x))
    p = float(pt.xi @ ginv @ pt.xi)
    orient = float(chart.time_orientation @ ginv @ pt.xi)
    if abs(p) <= NULL_TOL * float(pt.xi @ pt.xi):
        return NULL_FUTURE if orient > 0 else NULL_PAST
    if p < 0:
        return TIMELIKE_FUTURE if orient > 0 else TIMELIKE_PAST
    return SPACELIKE


@dataclass(frozen=True)
class RelationResult:
    kind: str
    s: float | None
    distance: float


def _conic_distance(x, xi, xa, xia) -> float:
    return float(np.linalg.norm(x - xa) + np.linalg.norm(xi / np.linalg.norm(xi) - xia / np.linalg.norm(xia)))


def relation_test(chart: MetricChart, ptA: PhasePoint, ptB: PhasePoint, tol: float = 1e-6,
                  s_max: float = 10.0, grid: int = 2001) -> RelationResult:
    """Decide whether ``ptA`` lies on the bicharacteristic through ``ptB``.

    Returns ``C+`` if ``ptA = Phi_s(ptB)`` for some ``s > 0`` (conic match:
    base points and normalised covectors within ``tol``), ``C-`` for
    ``s < 0``, ``diagonal`` when the two points coincide, else
    ``unrelated``.

    Raises
    ------
    Inconclusive
        A flow left the chart before any match was found.
    """
    for p_ in (ptA, ptB):
        if abs(principal(chart, p_.x, p_.xi)) > max(tol, NULL_TOL) * float(p_.xi @ p_.xi):
            raise NonNullPoint("relation_test requires null covectors")
    if _conic_distance(ptB.x, ptB.xi, ptA.x, ptA.xi) <= tol:
        return RelationResult(DIAGONAL, 0.0, _conic_distance(ptB.x, ptB.xi, ptA.x, ptA.xi))
    exited_any = False
    best = None
    for sign, kind in ((1.0, C_PLUS), (-1.0, C_MINUS)):
        s_grid = sign * np.linspace(0.0, s_max, grid)
        curve = flow_bicharacteristic(chart, ptB, (0.0, sign * s_max), tol=max(tol, NULL_TOL), samples=s_grid,
                                      null=False)
        exited_any |= curve.exited
        if len(curve.s) < 2:
            continue
        xin = curve.xi / np.linalg.norm(curve.xi, axis=1, keepdims=True)
        d = (np.linalg.norm(curve.x - ptA.x, axis=1)
             + np.linalg.norm(xin - ptA.xi / np.linalg.norm(ptA.xi), axis=1))
        i = int(np.argmin(d))
        lo = curve.s[max(i - 1, 0)]
        hi = curve.s[min(i + 1, len(curve.s) - 1)]
        a_, b_ = min(lo, hi), max(lo, hi)

        def dist(s):
            x, xi = curve.state(s)
            return _conic_distance(x, xi, ptA.x, ptA.xi)

        if b_ > a_:
            res = minimize_scalar(dist, bounds=(a_, b_), method="bounded",
                                  options={"xatol": 1e-12 * max(1.0, s_max)})
            s_opt, d_opt = float(res.x), float(res.fun)
        else:
            s_opt, d_opt = float(curve.s[i]), float(d[i])
        if d[i] < d_opt:
            s_opt, d_opt = float(curve.s[i]), float(d[i])
        if best is None or d_opt < best[2]:
            best = (kind, s_opt, d_opt)
        if d_opt <= tol and abs(s_opt) > 0:
            return RelationResult(kind, s_opt, d_opt)
    if exited_any:
        raise Inconclusive("trajectory left the chart before a match was found")
    return RelationResult(UNRELATED, None, best[2] if best else math.inf)
