"""Transport equations along curves and bicharacteristics.

All integrators here are classical fourth-order Runge-Kutta on the grid the
caller supplies; midpoint values come from the path's own interpolant, so the
scheme stays fourth order without adaptivity.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.interpolate import CubicSpline
from scipy.linalg import expm

from .errors import GridMismatch, Inconclusive, NotRelated, SingularB0
from .geometry import C_MINUS, C_PLUS, DIAGONAL, Bicharacteristic, MetricChart, PhasePoint, flow_bicharacteristic, relation_test
from .symbols import BundleConnection

CAUSAL_PREFACTOR = "(i/2) * sqrt(2*pi*|d_C|)"


@dataclass
class CurvePath:
    """Base curve ``x(s)`` sampled on ``s`` with callables for position and velocity."""

    s: np.ndarray
    x_fn: Callable
    xdot_fn: Callable

    @classmethod
    def from_samples(cls, s, x) -> "CurvePath":
        """Interpolate sampled points with a cubic spline (velocity from its derivative)."""
        s = np.asarray(s, float)
        x = np.asarray(x, float)
        if x.shape[0] != s.shape[0]:
            raise GridMismatch("curve samples and parameter grid differ in length")
        spline = CubicSpline(s, x, axis=0)
        return cls(s, spline, spline.derivative())

    @classmethod
    def from_bicharacteristic(cls, curve: Bicharacteristic) -> "CurvePath":
        return cls(curve.s, lambda s: curve.state(s)[0], curve.velocity)

    @classmethod
    def straight(cls, start, direction, s) -> "CurvePath":
        start = np.asarray(start, float)
        direction = np.asarray(direction, float)
        return cls(np.asarray(s, float), lambda t: start + t * direction, lambda t: direction)

    @property
    def x(self) -> np.ndarray:
        return np.array([self.x_fn(t) for t in self.s])


def rk4_grid(rhs: Callable, s: np.ndarray, y0: np.ndarray) -> np.ndarray:
    """Classical RK4 for ``y' = rhs(s, y)`` on the fixed grid ``s``."""
    y = np.asarray(y0, dtype=complex)
    out = np.empty((len(s),) + y.shape, dtype=complex)
    out[0] = y
    for i in range(len(s) - 1):
        t, h = s[i], s[i + 1] - s[i]
        k1 = rhs(t, y)
        k2 = rhs(t + h / 2, y + h / 2 * k1)
        k3 = rhs(t + h / 2, y + h / 2 * k2)
        k4 = rhs(t + h, y + h * k3)
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        out[i + 1] = y
    return out


def parallel_transport(conn: BundleConnection, path: CurvePath, v0) -> np.ndarray:
    """Solve ``v' = -i Gamma_mu(x(s)) xdot^mu(s) v`` along ``path``.

    ``v0`` may be an ``N``-vector or an ``N x N`` frame; the result has the
    grid as leading axis.
    """
    v0 = np.asarray(v0, dtype=complex)
    if v0.shape[0] != conn.rank:
        raise GridMismatch("initial value does not match the connection rank")

    def rhs(t, v):
        return -1j * conn.contract(path.x_fn(t), path.xdot_fn(t)) @ v

    return rk4_grid(rhs, path.s, v0)


def lie_halfdensity(X: Callable, f: Callable, alpha: float, x, h: float = 1e-5) -> float:
    """``X^mu d_mu f + alpha div(X) f`` at ``x`` (the Lie derivative of ``f |dx|^alpha``).

    Derivatives are central differences with step ``h (1 + |x_j|)``.
    """
    x = np.asarray(x, float)
    Xv = np.asarray(X(x), float)
    grad_f = np.empty(len(x))
    div = 0.0
    for j in range(len(x)):
        e = np.zeros(len(x))
        e[j] = h * (1.0 + abs(x[j]))
        grad_f[j] = (f(x + e) - f(x - e)) / (2 * e[j])
        div += (np.asarray(X(x + e))[j] - np.asarray(X(x - e))[j]) / (2 * e[j])
    return float(Xv @ grad_f + alpha * div * f(x))


def _as_function(values, s: np.ndarray, name: str) -> Callable:
    if values is None:
        return None
    if callable(values):
        return values
    values = np.asarray(values)
    if values.shape[0] != len(s):
        raise GridMismatch(f"{name} samples do not match the curve grid ({values.shape[0]} vs {len(s)})")
    re = CubicSpline(s, values.real, axis=0)
    im = CubicSpline(s, values.imag, axis=0) if np.iscomplexobj(values) else None
    return (lambda t: re(t) + 1j * im(t)) if im is not None else re


@dataclass
class TransportProblem:
    """Data for ``a' = i f - i sigma_sub a`` along a curve.

    ``sigma_sub`` and ``f`` are callables of ``s`` or arrays sampled on
    ``s``; arrays are interpolated with cubic splines for the RK4 midpoints.
    """

    s: np.ndarray
    sigma_sub: object
    a0: np.ndarray
    f: object = None


def transport_symbol(problem: TransportProblem) -> np.ndarray:
    """Integrate the principal-symbol transport equation by RK4 on ``problem.s``."""
    s = np.asarray(problem.s, float)
    sig = _as_function(problem.sigma_sub, s, "sigma_sub")
    src = _as_function(problem.f, s, "source")
    a0 = np.asarray(problem.a0, dtype=complex)

    def rhs(t, a):
        out = -1j * np.asarray(sig(t)) @ a
        if src is not None:
            out = out + 1j * np.asarray(src(t))
        return out

    return rk4_grid(rhs, s, a0)


def subprincipal_along(sub_symbol, curve: Bicharacteristic) -> Callable:
    """``s -> sigma_sub(x(s), xi(s))`` along a bicharacteristic (uses dense output)."""
    def fn(t):
        x, xi = curve.state(t)
        return sub_symbol.component(0, x, xi)
    return fn


# ---------------------------------------------------------------------------
# Model transport / Duhamel
# ---------------------------------------------------------------------------

def model_duhamel(q: Callable, r_k: Callable | None, y, k: int = 0, b0: np.ndarray | None = None) -> np.ndarray:
    """Solve the model transport hierarchy on the grid ``y`` (starting at ``y[0] = 0``).

    ``k = 0``: ``db0/dy = -i q b0`` with ``b0(0) = 1`` by RK4.
    ``k >= 1``: ``b_k = -i b0 int_0^y b0^{-1} r_k`` by cumulative trapezoid,
    which solves ``-i b_k' + q b_k + r_k = 0``.

    ``q(y)`` and ``r_k(y)`` return ``N x N`` matrices.
    """
    y = np.asarray(y, float)
    N = np.asarray(q(y[0])).shape[0]
    if b0 is None:
        b0 = rk4_grid(lambda t, b: -1j * np.asarray(q(t)) @ b, y, np.eye(N, dtype=complex))
    if k == 0:
        return b0
    dets = np.abs(np.linalg.det(b0))
    if np.min(dets) < 1e-10:
        raise SingularB0(f"|det b0| = {np.min(dets):.3e} on the grid")
    integrand = np.linalg.solve(b0, np.array([np.asarray(r_k(t), dtype=complex) for t in y]))
    integral = cumulative_trapezoid(integrand, y, axis=0, initial=0.0)
    return -1j * np.einsum("yab,ybc->yac", b0, integral)


_EDGE4 = (np.array([-25.0, 48.0, -36.0, 16.0, -3.0]) / 12.0,
          np.array([-3.0, -10.0, 18.0, -6.0, 1.0]) / 12.0)


def _derivative4(b: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Fourth-order first derivative along axis 0 (falls back to ``np.gradient`` on non-uniform grids)."""
    h = y[1] - y[0]
    if len(y) < 5 or not np.allclose(np.diff(y), h, rtol=1e-9, atol=0.0):
        return np.gradient(b, y, axis=0, edge_order=2)
    d = np.empty_like(b)
    d[2:-2] = (b[:-4] - 8 * b[1:-3] + 8 * b[3:-1] - b[4:]) / (12 * h)
    for i, w in enumerate(_EDGE4):
        d[i] = np.tensordot(w, b[:5], axes=1) / h
        d[-1 - i] = -np.tensordot(w, b[::-1][:5], axes=1) / h
    return d


def duhamel_residual(q: Callable, r_k: Callable | None, y, b: np.ndarray) -> float:
    """Max of ``|| -i b' + q b + r_k ||`` on a uniform grid.

    ``b'`` uses fourth-order central differences in the interior and
    fourth-order one-sided stencils on the two edge rows at each end, so
    the check does not mask an accurate solver behind its own truncation error.
    """
    y = np.asarray(y, float)
    db = _derivative4(b, y)
    qb = np.einsum("yab,ybc->yac", np.array([np.asarray(q(t)) for t in y]), b)
    res = -1j * db + qb
    if r_k is not None:
        res = res + np.array([np.asarray(r_k(t)) for t in y])
    return float(np.max(np.linalg.norm(res, axis=(1, 2))))


def constant_q_reference(q: np.ndarray, y) -> np.ndarray:
    """``exp(-i q y)`` on the grid (matrix-exponential oracle)."""
    return np.array([expm(-1j * np.asarray(q) * t) for t in np.asarray(y, float)])


# ---------------------------------------------------------------------------
# Causal propagator symbol, holonomy
# ---------------------------------------------------------------------------

@dataclass
class CausalSymbol:
    u: np.ndarray
    relation: str
    s: float
    prefactor: str = CAUSAL_PREFACTOR


def causal_symbol(chart: MetricChart, conn: BundleConnection, ptA: PhasePoint, ptB: PhasePoint,
                  tol: float = 1e-6, steps: int = 2001, s_max: float = 10.0) -> CausalSymbol:
    """Parallel transport of the identity from ``ptB`` to ``ptA`` along their bicharacteristic.

    The density factor ``|d_C|`` of the full symbol is not computed; only
    the endomorphism ``u`` is returned, together with the symbolic prefactor.

    Raises
    ------
    NotRelated
        The points do not lie on a common bicharacteristic.
    """
    try:
        rel = relation_test(chart, ptA, ptB, tol=tol, s_max=s_max)
    except Inconclusive as exc:
        raise NotRelated(f"could not connect the points: {exc}") from None
    eye = np.eye(conn.rank, dtype=complex)
    if rel.kind == DIAGONAL:
        return CausalSymbol(eye, DIAGONAL, 0.0)
    if rel.kind not in (C_PLUS, C_MINUS):
        raise NotRelated("points are not on a common bicharacteristic")
    s_grid = np.linspace(0.0, rel.s, steps)
    curve = flow_bicharacteristic(chart, ptB, (0.0, rel.s), samples=s_grid, null=False)
    v = parallel_transport(conn, CurvePath.from_bicharacteristic(curve), eye)
    return CausalSymbol(v[-1], rel.kind, rel.s)


def curvature(conn: BundleConnection, x, mu: int = 0, nu: int = 1) -> np.ndarray:
    """``F_{mu nu} = d_mu A_nu - d_nu A_mu + [A_mu, A_nu]`` with ``A = i Gamma``."""
    A = 1j * conn.at(x)
    dA = 1j * conn.d_at(x)
    return dA[mu, nu] - dA[nu, mu] + A[mu] @ A[nu] - A[nu] @ A[mu]


def square_loop_holonomy(conn: BundleConnection, center, eps: float, mu: int = 0, nu: int = 1,
                         steps_per_side: int = 64) -> np.ndarray:
    """Parallel transport of the identity around a counter-clockwise square of side ``eps``.

    For small ``eps`` the result is ``1 - eps^2 F_{mu nu} + O(eps^3)``.
    """
    center = np.asarray(center, float)
    n = len(center)
    e_mu = np.zeros(n)
    e_nu = np.zeros(n)
    e_mu[mu] = eps
    e_nu[nu] = eps
    corner = center - 0.5 * (e_mu + e_nu)
    frame = np.eye(conn.rank, dtype=complex)
    s = np.linspace(0.0, 1.0, steps_per_side + 1)
    for d in (e_mu, e_nu, -e_mu, -e_nu):
        v = parallel_transport(conn, CurvePath.straight(corner, d, s), frame)
        frame = v[-1]
        corner = corner + d
    return frame
