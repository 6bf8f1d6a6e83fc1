"""Matrix-valued symbol calculus for second-order operators.

Conventions
-----------
* The symbol of ``d_mu`` is ``i xi_mu``; a second-order operator is written
  ``P = -A^{mu nu} d_mu d_nu + B^mu d_mu + C`` so that its symbol is
  ``p2 = A^{mu nu} xi_mu xi_nu``, ``p1 = i B^mu xi_mu``, ``p0 = C``.
* Bundle connections act as ``nabla_mu = d_mu + i Gamma_mu``.
* Symbols are composed in the left (Kohn-Nirenberg) quantisation, truncated
  after the subleading term: ``c = p q + (1/i) sum_j d_xi_j p d_x_j q``.
* The subprincipal symbol is ``sigma_sub = p_{m-1} - (1/2i) sum_j d_x_j d_xi_j p_m``.

With these conventions the wave operator ``-tr_g nabla^2 + V`` has
``sigma_sub = 2 g^{mu nu} Gamma_nu xi_mu``, which equals ``Gamma(xdot)``
for the Hamilton field of ``geometry``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import exprconfig as ec
from .errors import (IdentityInapplicable, NonNullPoint, NotElliptic, NotNormallyHyperbolic,
                     TruncationUnderflow)
from .geometry import MetricChart, christoffel_derivative, metric_data, principal

FD_STEP = 1e-5
FD_STEP_MIXED = 1e-4


# ---------------------------------------------------------------------------
# Symbols
# ---------------------------------------------------------------------------

@dataclass
class SymbolComponent:
    """One homogeneous component ``a(x, xi)`` with optional exact derivatives.

    ``dx(x, xi)`` and ``dxi(x, xi)`` return arrays of shape ``(n, N, N)``;
    ``mixed(x, xi)`` returns ``sum_j d_x_j d_xi_j a`` with shape ``(N, N)``.
    Missing derivatives fall back to central differences.
    """

    f: Callable
    dx: Callable | None = None
    dxi: Callable | None = None
    mixed: Callable | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def _memo(self, name: str, x, xi, compute):
        # nested compositions revisit the same phase point many times
        key = (name, np.asarray(x, float).tobytes(), np.asarray(xi, float).tobytes())
        hit = self._cache.get(key)
        if hit is None:
            if len(self._cache) > 64:
                self._cache.clear()
            hit = compute()
            self._cache[key] = hit
        return hit

    def value(self, x, xi) -> np.ndarray:
        return self._memo("v", x, xi, lambda: np.asarray(self.f(x, xi), dtype=complex))

    def grad_x(self, x, xi) -> np.ndarray:
        return self._memo("dx", x, xi, lambda: self._grad_x(x, xi))

    def grad_xi(self, x, xi) -> np.ndarray:
        return self._memo("dxi", x, xi, lambda: self._grad_xi(x, xi))

    def mixed_trace(self, x, xi) -> np.ndarray:
        return self._memo("mx", x, xi, lambda: self._mixed_trace(x, xi))

    def _grad_x(self, x, xi) -> np.ndarray:
        if self.dx is not None:
            return np.asarray(self.dx(x, xi), dtype=complex)
        return _fd_grad(lambda y: self.value(y, xi), x)

    def _grad_xi(self, x, xi) -> np.ndarray:
        if self.dxi is not None:
            return np.asarray(self.dxi(x, xi), dtype=complex)
        return _fd_grad(lambda e: self.value(x, e), xi)

    def _mixed_trace(self, x, xi) -> np.ndarray:
        if self.mixed is not None:
            return np.asarray(self.mixed(x, xi), dtype=complex)
        if self.dxi is not None:
            # differentiate the exact xi-gradient once in x
            out = 0
            for j in range(len(x)):
                h = FD_STEP * (1.0 + abs(x[j]))
                e = np.zeros(len(x))
                e[j] = h
                out = out + (np.asarray(self.dxi(x + e, xi))[j] - np.asarray(self.dxi(x - e, xi))[j]) / (2 * h)
            return np.asarray(out, dtype=complex)
        out = 0
        for j in range(len(x)):
            h = FD_STEP_MIXED * (1.0 + abs(x[j]))
            k = FD_STEP_MIXED * (1.0 + abs(xi[j]))
            ex = np.zeros(len(x))
            ek = np.zeros(len(x))
            ex[j], ek[j] = h, k
            out = out + (self.value(x + ex, xi + ek) - self.value(x + ex, xi - ek)
                         - self.value(x - ex, xi + ek) + self.value(x - ex, xi - ek)) / (4 * h * k)
        return np.asarray(out, dtype=complex)


def _fd_grad(f: Callable, y) -> np.ndarray:
    y = np.asarray(y, float)
    parts = []
    for j in range(len(y)):
        h = FD_STEP * (1.0 + abs(y[j]))
        e = np.zeros(len(y))
        e[j] = h
        parts.append((f(y + e) - f(y - e)) / (2 * h))
    return np.array(parts, dtype=complex)


class MatrixSymbol:
    """Finite truncation ``a ~ a_m + a_{m-1} + ...`` of a polyhomogeneous symbol.

    Parameters
    ----------
    degree : order ``m`` of the leading component.
    components : list of :class:`SymbolComponent` or plain callables
        ``(x, xi) -> (N, N)``; entry ``k`` is homogeneous of degree ``m - k``.
    dim, rank : base dimension ``n`` and matrix size ``N``.
    """

    def __init__(self, degree: float, components: Sequence, dim: int, rank: int = 1):
        if len(components) > 3:
            raise ValueError("at most three homogeneous components are stored")
        self.degree = float(degree)
        self.components = [c if isinstance(c, SymbolComponent) else SymbolComponent(c) for c in components]
        self.dim = int(dim)
        self.rank = int(rank)

    @property
    def order(self) -> int:
        """Truncation order ``K`` (number of components minus one)."""
        return len(self.components) - 1

    def component(self, k: int, x, xi) -> np.ndarray:
        return self.components[k].value(np.asarray(x, float), np.asarray(xi, float))

    def principal(self, x, xi) -> np.ndarray:
        return self.component(0, x, xi)

    def subprincipal(self, x, xi) -> np.ndarray:
        """``a_{m-1} - (1/2i) sum_j d_x_j d_xi_j a_m``."""
        if self.order < 1:
            raise TruncationUnderflow("subprincipal symbol needs two components")
        x = np.asarray(x, float)
        xi = np.asarray(xi, float)
        return self.component(1, x, xi) - self.components[0].mixed_trace(x, xi) / 2j

    def homogeneity_defect(self, x, xi, lams=(2.0, 5.0)) -> float:
        """Largest relative violation of homogeneity over components and ``lams``."""
        worst = 0.0
        for k in range(len(self.components)):
            a = self.component(k, x, xi)
            scale = max(np.linalg.norm(a), 1e-300)
            for lam in lams:
                d = self.degree - k
                err = np.linalg.norm(self.component(k, x, lam * np.asarray(xi)) - lam ** d * a)
                worst = max(worst, err / (lam ** d * scale))
        return worst

    def is_scalar(self, x, xi, tol: float = 1e-12) -> bool:
        a = self.principal(x, xi)
        return bool(np.linalg.norm(a - a[0, 0] * np.eye(self.rank)) <= tol * max(1.0, np.linalg.norm(a)))


def polynomial_symbol(degree: int, components, dim: int, rank: int = 1) -> MatrixSymbol:
    """Symbol whose components are polynomials in ``xi`` with expression coefficients.

    ``components[k]`` is a list of ``(alpha, coeff)`` pairs where ``alpha`` is
    a multi-index of length ``dim`` with ``|alpha| = degree - k`` and
    ``coeff`` is an ``N x N`` array of expressions (strings, numbers or
    ``[re, im]`` pairs).  All derivatives are exact.
    """
    comps = []
    for k, terms in enumerate(components):
        alphas = np.array([a for a, _ in terms], dtype=int).reshape(-1, dim)
        if np.any(alphas.sum(axis=1) != degree - k):
            raise ValueError(f"component {k} is not homogeneous of degree {degree - k}")
        arr = ec.ExprArray([c for _, c in terms], dim, ndim=3) if terms else None
        comps.append(_poly_component(alphas, arr, rank))
    return MatrixSymbol(degree, comps, dim, rank)


def _monomials(alphas, xi):
    return np.prod(np.asarray(xi, float)[None, :] ** alphas, axis=1)


def _dmonomials(alphas, xi):
    """``out[j, t] = d_xi_j xi^alpha_t``."""
    xi = np.asarray(xi, float)
    out = np.empty((len(xi), len(alphas)))
    for j in range(len(xi)):
        lowered = alphas.copy()
        lowered[:, j] = np.maximum(lowered[:, j] - 1, 0)
        out[j] = alphas[:, j] * np.prod(xi[None, :] ** lowered, axis=1)
    return out


def _poly_component(alphas, arr, rank: int) -> SymbolComponent:
    if arr is None:
        zero = np.zeros((rank, rank), complex)
        return SymbolComponent(lambda x, xi: zero, lambda x, xi: np.zeros((len(x), rank, rank), complex),
                               lambda x, xi: np.zeros((len(xi), rank, rank), complex), lambda x, xi: zero)

    def f(x, xi):
        return np.einsum("t,tab->ab", _monomials(alphas, xi), arr.value(x))

    def dx(x, xi):
        return np.einsum("t,jtab->jab", _monomials(alphas, xi), arr.grad(x))

    def dxi(x, xi):
        return np.einsum("jt,tab->jab", _dmonomials(alphas, xi), arr.value(x))

    def mixed(x, xi):
        return np.einsum("jt,jtab->ab", _dmonomials(alphas, xi), arr.grad(x))

    return SymbolComponent(f, dx, dxi, mixed)


def scalar_symbol(degree: float, funcs: Sequence[Callable], dim: int) -> MatrixSymbol:
    """Rank-one symbol from scalar callables ``(x, xi) -> complex``."""
    comps = [SymbolComponent(lambda x, xi, f=f: np.array([[f(x, xi)]], dtype=complex)) for f in funcs]
    return MatrixSymbol(degree, comps, dim, 1)


# ---------------------------------------------------------------------------
# Composition
# ---------------------------------------------------------------------------

def compose_first_order(P: MatrixSymbol, Q: MatrixSymbol) -> MatrixSymbol:
    """Top two components of the composed symbol ``P # Q``.

    ``c_0 = p_0 q_0`` and ``c_1 = p_0 q_1 + p_1 q_0 + (1/i) sum_j d_xi_j p_0 d_x_j q_0``.
    Derivatives of ``c_0`` follow from the product rule, so the result can
    itself be composed again.
    """
    if P.order < 1 or Q.order < 1:
        raise TruncationUnderflow("composition needs at least two components in each factor")
    if P.dim != Q.dim or P.rank != Q.rank:
        raise ValueError("symbols must share dimension and rank")
    p0, p1 = P.components[:2]
    q0, q1 = Q.components[:2]

    def c0(x, xi):
        return p0.value(x, xi) @ q0.value(x, xi)

    def c0_dx(x, xi):
        return np.einsum("jab,bc->jac", p0.grad_x(x, xi), q0.value(x, xi)) + \
            np.einsum("ab,jbc->jac", p0.value(x, xi), q0.grad_x(x, xi))

    def c0_dxi(x, xi):
        return np.einsum("jab,bc->jac", p0.grad_xi(x, xi), q0.value(x, xi)) + \
            np.einsum("ab,jbc->jac", p0.value(x, xi), q0.grad_xi(x, xi))

    def c0_mixed(x, xi):
        return (p0.mixed_trace(x, xi) @ q0.value(x, xi) + p0.value(x, xi) @ q0.mixed_trace(x, xi)
                + np.einsum("jab,jbc->ac", p0.grad_x(x, xi), q0.grad_xi(x, xi))
                + np.einsum("jab,jbc->ac", p0.grad_xi(x, xi), q0.grad_x(x, xi)))

    def c1(x, xi):
        cross = np.einsum("jab,jbc->ac", p0.grad_xi(x, xi), q0.grad_x(x, xi))
        return p0.value(x, xi) @ q1.value(x, xi) + p1.value(x, xi) @ q0.value(x, xi) + cross / 1j

    return MatrixSymbol(P.degree + Q.degree, [SymbolComponent(c0, c0_dx, c0_dxi, c0_mixed), SymbolComponent(c1)],
                        P.dim, P.rank)


def adjoint_symbol(Q: MatrixSymbol) -> MatrixSymbol:
    """Top two components of the formal adjoint: ``(q_0^*, q_1^* - i sum_j d_x_j d_xi_j q_0^*)``."""
    q0, q1 = Q.components[:2]

    def h(a):
        return np.conj(np.swapaxes(a, -1, -2))

    a0 = SymbolComponent(lambda x, xi: h(q0.value(x, xi)), lambda x, xi: h(q0.grad_x(x, xi)),
                         lambda x, xi: h(q0.grad_xi(x, xi)), lambda x, xi: h(q0.mixed_trace(x, xi)))
    a1 = SymbolComponent(lambda x, xi: h(q1.value(x, xi)) - 1j * h(q0.mixed_trace(x, xi)))
    return MatrixSymbol(Q.degree, [a0, a1], Q.dim, Q.rank)


# ---------------------------------------------------------------------------
# Operators, connections, potentials
# ---------------------------------------------------------------------------

@dataclass
class BundleConnection:
    """Connection one-form ``Gamma_mu(x)`` with ``nabla_mu = d_mu + i Gamma_mu``.

    ``gamma(x)`` has shape ``(n, N, N)``; ``dgamma(x)[a, mu] = d_a Gamma_mu``.
    """

    dim: int
    rank: int
    gamma: Callable
    dgamma: Callable | None = None

    @classmethod
    def from_exprs(cls, entries, dim: int) -> "BundleConnection":
        arr = ec.ExprArray(entries, dim, ndim=3)
        if len(arr.shape) != 3 or arr.shape[0] != dim or arr.shape[1] != arr.shape[2]:
            raise ValueError("connection entries must have shape (dim, N, N)")
        conn = cls(dim, arr.shape[1], arr.value, arr.grad)
        conn.exprs = arr
        return conn

    @classmethod
    def trivial(cls, dim: int, rank: int = 1) -> "BundleConnection":
        return cls(dim, rank, lambda x: np.zeros((dim, rank, rank), complex),
                   lambda x: np.zeros((dim, dim, rank, rank), complex))

    def at(self, x) -> np.ndarray:
        return np.asarray(self.gamma(np.asarray(x, float)), dtype=complex)

    def d_at(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        if self.dgamma is not None:
            return np.asarray(self.dgamma(x), dtype=complex)
        return _fd_grad(self.at, x)

    def contract(self, x, v) -> np.ndarray:
        """``Gamma_mu(x) v^mu``."""
        return np.einsum("m,mab->ab", np.asarray(v, float), self.at(x))

    def perturbed(self, eps: float, delta: Callable) -> "BundleConnection":
        """``Gamma + eps * delta`` (``delta(x)`` of shape ``(n, N, N)``)."""
        return BundleConnection(self.dim, self.rank, lambda x: self.at(x) + eps * np.asarray(delta(x)), None)


@dataclass
class Potential:
    """Endomorphism field ``V(x)`` of shape ``(N, N)``."""

    rank: int
    V: Callable

    @classmethod
    def from_exprs(cls, entries, dim: int) -> "Potential":
        arr = ec.ExprArray(entries, dim, ndim=2)
        return cls(arr.shape[0], arr.value)

    @classmethod
    def zero(cls, rank: int = 1) -> "Potential":
        return cls(rank, lambda x: np.zeros((rank, rank), complex))

    def at(self, x) -> np.ndarray:
        return np.asarray(self.V(np.asarray(x, float)), dtype=complex)


@dataclass
class SecondOrderOperator:
    """``P = -A^{mu nu} d_mu d_nu + B^mu d_mu + C`` acting on ``N``-vectors.

    ``A(x)`` returns the scalar ``(n, n)`` principal coefficient (the
    operator's leading part is ``A^{mu nu} 1``), ``dA(x)[a] = d_a A``,
    ``B(x)`` has shape ``(n, N, N)``, ``dB(x)[a] = d_a B`` and ``C(x)`` is
    ``(N, N)``.  ``normally_hyperbolic`` records that ``A = g^{-1}`` for the
    chart the operator was built from.
    """

    dim: int
    rank: int
    A: Callable
    dA: Callable | None
    B: Callable
    C: Callable
    dB: Callable | None = None
    normally_hyperbolic: bool = False

    @classmethod
    def from_exprs(cls, A, B=None, C=None, dim: int | None = None, rank: int = 1) -> "SecondOrderOperator":
        """Build from expression arrays (``A`` scalar ``n x n``; ``B`` ``n x N x N``; ``C`` ``N x N``)."""
        n = len(A) if dim is None else dim
        a_arr = ec.ExprArray(A, n, ndim=2)
        if B is None:
            B = [[["0"] * rank for _ in range(rank)] for _ in range(n)]
        if C is None:
            C = [["0"] * rank for _ in range(rank)]
        b_arr = ec.ExprArray(B, n, ndim=3)
        c_arr = ec.ExprArray(C, n, ndim=2)
        if not a_arr.is_real:
            raise ValueError("principal coefficients must be real")
        return cls(n, rank, lambda x: a_arr.value(x).real, lambda x: a_arr.grad(x).real,
                   b_arr.value, c_arr.value, b_arr.grad)

    def coefficients(self, x):
        x = np.asarray(x, float)
        return (np.asarray(self.A(x), float), np.asarray(self.B(x), complex), np.asarray(self.C(x), complex))

    def dB_at(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        if self.dB is not None:
            return np.asarray(self.dB(x), complex)
        return _fd_grad(lambda y: np.asarray(self.B(y), complex), x)


def flat_wave_operator(dim: int = 2, rank: int = 1) -> SecondOrderOperator:
    """``-eta^{mu nu} d_mu d_nu`` on ``rank``-vectors."""
    eta = np.diag([-1.0] + [1.0] * (dim - 1))
    z = np.zeros((dim, rank, rank), complex)
    return SecondOrderOperator(dim, rank, lambda x: eta, lambda x: np.zeros((dim, dim, dim)), lambda x: z,
                               lambda x: np.zeros((rank, rank), complex), lambda x: np.zeros((dim,) + z.shape),
                               normally_hyperbolic=True)


def _halfdensity_phi(chart: MetricChart, x):
    """First and second derivatives of ``phi = -log|det g| / 4``."""
    md = metric_data(chart, x)
    d2g = chart.d2g(x)
    gi_dg = np.einsum("ij,ajk->aik", md.ginv, md.dg)
    dphi = -0.25 * np.einsum("aii->a", gi_dg)
    d2phi = -0.25 * (np.einsum("ij,abji->ab", md.ginv, d2g) - np.einsum("aij,bji->ab", gi_dg, gi_dg))
    return dphi, d2phi


def conjugated_coefficients(op: SecondOrderOperator, chart: MetricChart | None, x, zeroth: bool = True):
    """Coefficients of ``|g|^{1/4} P |g|^{-1/4}``; identity conjugation without a chart.

    With ``zeroth=False`` the zeroth-order coefficient is skipped (returned as ``None``).
    """
    x = np.asarray(x, float)
    A = np.asarray(op.A(x), float)
    B = np.asarray(op.B(x), complex)
    C = np.asarray(op.C(x), complex) if zeroth else None
    if chart is None:
        return A, B, C
    dphi, d2phi = _halfdensity_phi(chart, x)
    eye = np.eye(op.rank)
    Bt = B - 2.0 * np.einsum("mn,m->n", A, dphi)[:, None, None] * eye
    if not zeroth:
        return A, Bt, None
    Ct = (C - np.einsum("mn,mn->", A, d2phi + np.outer(dphi, dphi)) * eye
          + np.einsum("mab,m->ab", B, dphi))
    return A, Bt, Ct


def total_symbol_halfdensity(op: SecondOrderOperator, chart: MetricChart | None = None) -> MatrixSymbol:
    """Symbol ``(p2, p1, p0)`` of the half-density conjugate of ``op``.

    Without a chart the density is taken to be ``dx`` (``|det g| = 1``).
    """
    n, N = op.dim, op.rank
    eye = np.eye(N)

    def p2(x, xi):
        return float(xi @ np.asarray(op.A(x)) @ xi) * eye

    def p2_dx(x, xi):
        return np.einsum("amn,m,n->a", np.asarray(op.dA(x)), xi, xi)[:, None, None] * eye

    def p2_dxi(x, xi):
        return (2.0 * np.asarray(op.A(x)) @ xi)[:, None, None] * eye

    def p2_mixed(x, xi):
        return 2.0 * float(np.einsum("mmn,n->", np.asarray(op.dA(x)), xi)) * eye

    def p1(x, xi):
        _, Bt, _ = conjugated_coefficients(op, chart, x, zeroth=False)
        return 1j * np.einsum("m,mab->ab", xi, Bt)

    def p0(x, xi):
        return conjugated_coefficients(op, chart, x)[2]

    comps = [SymbolComponent(p2, p2_dx if op.dA is not None else None, p2_dxi,
                             p2_mixed if op.dA is not None else None),
             SymbolComponent(p1), SymbolComponent(p0)]
    return MatrixSymbol(2, comps, n, N)


def subprincipal(op: SecondOrderOperator, chart: MetricChart | None = None) -> MatrixSymbol:
    """Subprincipal symbol of ``op`` (single component of degree one)."""
    total = total_symbol_halfdensity(op, chart)
    return MatrixSymbol(1, [SymbolComponent(total.subprincipal)], op.dim, op.rank)


# ---------------------------------------------------------------------------
# Weitzenboeck form
# ---------------------------------------------------------------------------

def weitzenbock_assemble(chart: MetricChart, conn: BundleConnection, pot: Potential | None = None
                         ) -> SecondOrderOperator:
    """Expand ``-g^{mu nu}(nabla_mu nabla_nu - Gamma^rho_{mu nu} nabla_rho) + V``.

    With ``nabla = d + i Gamma`` the coefficients are::

        A^{mu nu} = g^{mu nu}
        B^rho     = -2i g^{rho nu} Gamma_nu + g^{mu nu} Gamma^rho_{mu nu}
        C         = -g^{mu nu}(i d_mu Gamma_nu - Gamma_mu Gamma_nu)
                    + i g^{mu nu} Gamma^rho_{mu nu} Gamma_rho + V
    """
    n, N = chart.dim, conn.rank
    if conn.dim != n:
        raise ValueError("connection and chart dimensions differ")
    pot = Potential.zero(N) if pot is None else pot
    if pot.rank != N:
        raise ValueError("connection and potential ranks differ")
    eye = np.eye(N)

    def A(x):
        return metric_data(chart, x).ginv

    def dA(x):
        return metric_data(chart, x).dginv

    def B(x):
        md = metric_data(chart, x)
        G = np.einsum("mn,rmn->r", md.ginv, md.christoffel)
        return -2j * np.einsum("rn,nab->rab", md.ginv, conn.at(x)) + G[:, None, None] * eye

    def dB(x):
        md = metric_data(chart, x)
        dchris = christoffel_derivative(chart, x)
        dG = np.einsum("amn,rmn->ar", md.dginv, md.christoffel) + np.einsum("mn,armn->ar", md.ginv, dchris)
        return (-2j * (np.einsum("arn,nbc->arbc", md.dginv, conn.at(x))
                       + np.einsum("rn,anbc->arbc", md.ginv, conn.d_at(x)))
                + dG[:, :, None, None] * eye)

    def C(x):
        md = metric_data(chart, x)
        gam = conn.at(x)
        dgam = conn.d_at(x)
        G = np.einsum("mn,rmn->r", md.ginv, md.christoffel)
        return (-np.einsum("mn,mnab->ab", md.ginv, 1j * dgam - np.einsum("mab,nbc->mnac", gam, gam))
                + 1j * np.einsum("r,rab->ab", G, gam) + pot.at(x))

    return SecondOrderOperator(n, N, A, dA, B, C, dB, normally_hyperbolic=True)


def weitzenbock_decompose(op: SecondOrderOperator, chart: MetricChart, tol: float = 1e-10,
                          check_points: int = 8) -> tuple:
    """Recover the unique ``(connection, potential)`` of a normally hyperbolic ``op``.

    Raises
    ------
    NotNormallyHyperbolic
        ``A`` differs from ``g^{-1}`` by more than ``tol`` at a check point.
    """
    for x in chart.sample_points(check_points, np.random.default_rng(7)):
        ginv = metric_data(chart, x).ginv
        if np.max(np.abs(np.asarray(op.A(x)) - ginv)) > tol * max(1.0, np.max(np.abs(ginv))):
            raise NotNormallyHyperbolic(f"principal coefficient is not g^-1 at {x}")
    n, N = op.dim, op.rank
    eye = np.eye(N)

    def gamma(x):
        md = metric_data(chart, x)
        G = np.einsum("mn,rmn->r", md.ginv, md.christoffel)
        return 0.5j * np.einsum("sr,rab->sab", md.g, np.asarray(op.B(x)) - G[:, None, None] * eye)

    def dgamma(x):
        md = metric_data(chart, x)
        dchris = christoffel_derivative(chart, x)
        G = np.einsum("mn,rmn->r", md.ginv, md.christoffel)
        dG = np.einsum("amn,rmn->ar", md.dginv, md.christoffel) + np.einsum("mn,armn->ar", md.ginv, dchris)
        inner = np.asarray(op.B(x)) - G[:, None, None] * eye
        dinner = op.dB_at(x) - dG[:, :, None, None] * eye
        return 0.5j * (np.einsum("asr,rbc->asbc", md.dg, inner) + np.einsum("sr,arbc->asbc", md.g, dinner))

    conn = BundleConnection(n, N, gamma, dgamma)

    def V(x):
        md = metric_data(chart, x)
        gam = conn.at(x)
        dgam = conn.d_at(x)
        G = np.einsum("mn,rmn->r", md.ginv, md.christoffel)
        return (np.asarray(op.C(x)) + np.einsum("mn,mnab->ab", md.ginv, 1j * dgam - np.einsum("mab,nbc->mnac", gam, gam))
                - 1j * np.einsum("r,rab->ab", G, gam))

    return conn, Potential(N, V)


def compatibility_residual(op: SecondOrderOperator, conn: BundleConnection, chart: MetricChart, points,
                           null_tol: float = 1e-9) -> np.ndarray:
    """``|| sigma_sub(op)(x, xi) - Gamma_nu(x) 2 g^{mu nu} xi_mu ||_F`` per phase point.

    Raises
    ------
    NonNullPoint
        A point is off the characteristic set.
    """
    sub = subprincipal(op, chart)
    out = []
    for pt in points:
        x, xi = np.asarray(pt.x, float), np.asarray(pt.xi, float)
        if abs(principal(chart, x, xi)) > null_tol * float(xi @ xi):
            raise NonNullPoint(f"point {x}, {xi} is not null")
        xdot = 2.0 * metric_data(chart, x).ginv @ xi
        out.append(np.linalg.norm(sub.component(0, x, xi) - conn.contract(x, xdot)))
    return np.array(out)


# ---------------------------------------------------------------------------
# Identities
# ---------------------------------------------------------------------------

IDENTITY_KINDS = ("product", "power", "inverse", "commutator", "egorov")


def sample_cloud(dim: int, count: int = 100, rng=None, x_scale: float = 1.0):
    """Phase points with ``x`` uniform in ``[-x_scale, x_scale]^n`` and ``|xi|`` in ``[0.5, 2]``."""
    rng = np.random.default_rng(0) if rng is None else rng
    x = rng.uniform(-x_scale, x_scale, size=(count, dim))
    d = rng.normal(size=(count, dim))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    xi = d * rng.uniform(0.5, 2.0, size=(count, 1))
    return list(zip(x, xi))


def _require_scalar(P: MatrixSymbol, cloud, what: str) -> None:
    for x, xi in cloud:
        if not P.is_scalar(x, xi):
            raise IdentityInapplicable(f"{what} requires a scalar principal symbol")


def parametrix_symbol(P: MatrixSymbol) -> MatrixSymbol:
    """Top two components of a parametrix of an elliptic ``P`` with scalar principal symbol.

    ``q_0 = p_0^{-1}`` and ``q_1 = -p_0^{-1}(p_1 q_0 + (1/i) sum_j d_xi_j p_0 d_x_j q_0)``,
    which makes the subleading component of ``P # Q`` vanish.
    """
    p0, p1 = P.components[:2]

    def q0(x, xi):
        return np.linalg.inv(p0.value(x, xi))

    def q0_dx(x, xi):
        inv = q0(x, xi)
        return -np.einsum("ab,jbc,cd->jad", inv, p0.grad_x(x, xi), inv)

    def q0_dxi(x, xi):
        inv = q0(x, xi)
        return -np.einsum("ab,jbc,cd->jad", inv, p0.grad_xi(x, xi), inv)

    def q1(x, xi):
        inv = q0(x, xi)
        cross = np.einsum("jab,jbc->ac", p0.grad_xi(x, xi), q0_dx(x, xi))
        return -inv @ (p1.value(x, xi) @ inv + cross / 1j)

    return MatrixSymbol(-P.degree, [SymbolComponent(q0, q0_dx, q0_dxi), SymbolComponent(q1)], P.dim, P.rank)


def verify_identity(kind: str, P: MatrixSymbol, Q: MatrixSymbol | None = None, *, k: int = 2,
                    kappa: Callable | None = None, A: MatrixSymbol | None = None, B: MatrixSymbol | None = None,
                    cloud=None, ellipticity_tol: float = 1e-10) -> float:
    """Maximum componentwise residual of a subprincipal-calculus identity.

    Parameters
    ----------
    kind : one of ``product``, ``power``, ``inverse``, ``commutator``, ``egorov``.
    P, Q : symbols; ``Q`` is needed for ``product`` and ``commutator``.
    k : power for ``power``.
    kappa : canonical map ``(x, xi) -> (x', xi')`` for ``egorov``.
    A, B : symbols multiplying ``P`` on the right and left for ``egorov``.
    cloud : list of ``(x, xi)``; 100 random points by default.

    Both sides are computed independently: the left side from
    :func:`compose_first_order`, the right side from the closed formula.
    """
    if kind not in IDENTITY_KINDS:
        raise ValueError(f"unknown identity kind {kind!r}")
    cloud = sample_cloud(P.dim) if cloud is None else cloud
    worst = 0.0
    if kind == "product":
        PQ = compose_first_order(P, Q)
        for x, xi in cloud:
            p, q = P.principal(x, xi), Q.principal(x, xi)
            bracket = (np.einsum("jab,jbc->ac", P.components[0].grad_xi(x, xi), Q.components[0].grad_x(x, xi))
                       - np.einsum("jab,jbc->ac", P.components[0].grad_x(x, xi), Q.components[0].grad_xi(x, xi)))
            rhs = P.subprincipal(x, xi) @ q + p @ Q.subprincipal(x, xi) + bracket / 2j
            worst = max(worst, np.max(np.abs(PQ.subprincipal(x, xi) - rhs)))
    elif kind == "power":
        _require_scalar(P, cloud, "power identity")
        if k < 1:
            raise ValueError("power must be >= 1")
        Pk = P
        for _ in range(k - 1):
            Pk = compose_first_order(Pk, P)
        for x, xi in cloud:
            p = P.principal(x, xi)
            rhs = k * np.linalg.matrix_power(p, k - 1) @ P.subprincipal(x, xi)
            worst = max(worst, np.max(np.abs(Pk.subprincipal(x, xi) - rhs)))
    elif kind == "inverse":
        _require_scalar(P, cloud, "inverse identity")
        for x, xi in cloud:
            p = P.principal(x, xi)
            if abs(np.linalg.det(p)) < ellipticity_tol:
                raise IdentityInapplicable(f"principal symbol is not elliptic at {x}, {xi}")
        Qp = parametrix_symbol(P)
        PQ = compose_first_order(P, Qp)
        for x, xi in cloud:
            # the parametrix really inverts P to subleading order
            worst = max(worst, np.max(np.abs(PQ.component(1, x, xi))))
            pinv = np.linalg.inv(P.principal(x, xi))
            rhs = -pinv @ pinv @ P.subprincipal(x, xi)
            worst = max(worst, np.max(np.abs(Qp.subprincipal(x, xi) - rhs)))
    elif kind == "commutator":
        _require_scalar(P, cloud, "commutator identity")
        PQ = compose_first_order(P, Q)
        QP = compose_first_order(Q, P)
        for x, xi in cloud:
            q = Q.principal(x, xi)
            pb = (np.einsum("jab,jbc->ac", P.components[0].grad_xi(x, xi), Q.components[0].grad_x(x, xi))
                  - np.einsum("jab,jbc->ac", P.components[0].grad_x(x, xi), Q.components[0].grad_xi(x, xi)))
            s = P.subprincipal(x, xi)
            rhs = pb / 1j + s @ q - q @ s
            worst = max(worst, np.max(np.abs(PQ.component(1, x, xi) - QP.component(1, x, xi) - rhs)))
    else:  # egorov
        kappa = (lambda x, xi: (x, xi)) if kappa is None else kappa
        _require_scalar(P, cloud, "Egorov identity")
        n, N = P.dim, P.rank
        A = identity_symbol(n, N) if A is None else A
        B = identity_symbol(n, N) if B is None else B

        def pk(x, xi):
            y, eta = kappa(np.asarray(x, float), np.asarray(xi, float))
            return P.principal(y, eta)

        Pk = MatrixSymbol(P.degree, [SymbolComponent(pk), SymbolComponent(lambda x, xi: np.zeros((N, N)))], n, N)
        BPA = compose_first_order(compose_first_order(B, Pk), A)
        BA = compose_first_order(B, A)
        for x, xi in cloud:
            rhs = BA.principal(x, xi) @ pk(x, xi)
            worst = max(worst, np.max(np.abs(BPA.principal(x, xi) - rhs)))
    return float(worst)


def identity_symbol(dim: int, rank: int = 1) -> MatrixSymbol:
    eye = np.eye(rank, dtype=complex)
    zero = np.zeros((rank, rank), complex)
    zg = np.zeros((dim, rank, rank), complex)
    c0 = SymbolComponent(lambda x, xi: eye, lambda x, xi: zg, lambda x, xi: zg, lambda x, xi: zero)
    return MatrixSymbol(0, [c0, SymbolComponent(lambda x, xi: zero)], dim, rank)


# ---------------------------------------------------------------------------
# Random corpora
# ---------------------------------------------------------------------------

_FUNCS = ("sin", "cos", "exp", "tanh")


def random_coefficient(rng, dim: int, complex_valued: bool = False):
    """Random smooth coefficient expression: affine part plus one elementary function."""
    def real_part():
        c = rng.normal(size=dim + 2) * 0.5
        terms = [ec.num(round(float(c[0]), 6))]
        for j in range(dim):
            terms.append(ec.mul(ec.num(round(float(c[j + 1]), 6)), ec.Var(j)))
        f = _FUNCS[int(rng.integers(len(_FUNCS)))]
        j = int(rng.integers(dim))
        terms.append(ec.mul(ec.num(round(float(c[-1]), 6)), ec.Call(f, ec.mul(ec.num(0.7), ec.Var(j)))))
        out = terms[0]
        for t in terms[1:]:
            out = ec.add(out, t)
        return out

    if complex_valued:
        return [real_part(), real_part()]
    return real_part()


def _multi_indices(dim: int, degree: int):
    if dim == 1:
        return [(degree,)]
    out = []
    for a in range(degree + 1):
        for rest in _multi_indices(dim - 1, degree - a):
            out.append((a,) + rest)
    return out


def random_polynomial_symbol(rng, dim: int = 2, rank: int = 2, degree: int = 2, scalar_principal: bool = False,
                             elliptic: bool = False) -> MatrixSymbol:
    """Random two-component polynomial symbol with expression coefficients.

    ``elliptic=True`` (implies a scalar principal part) produces
    ``p_0 = (c(x) |xi|^2 + sum_j a_j(x) xi_j^2) 1`` with ``c >= 1`` and
    ``a_j >= 0`` so that ``p_0`` never vanishes for ``xi != 0``; only
    ``degree = 2`` is supported then.
    """
    comps = []
    for k in range(2):
        terms = []
        for alpha in _multi_indices(dim, degree - k):
            if k == 0 and (scalar_principal or elliptic):
                if elliptic:
                    if sum(1 for a in alpha if a) != 1:
                        continue
                    j = alpha.index(2)
                    base = ec.Call("exp", ec.mul(ec.num(0.3), ec.Var(j)))
                    coeff = ec.add(ec.num(1.0), ec.power(ec.Call("sin", ec.add(ec.Var((j + 1) % dim), ec.num(float(rng.normal())))), 2))
                    c = ec.mul(base, coeff)
                else:
                    c = random_coefficient(rng, dim)
                mat = [[c if a == b else "0" for b in range(rank)] for a in range(rank)]
            else:
                mat = [[random_coefficient(rng, dim, complex_valued=(k == 1 or a != b)) for b in range(rank)]
                       for a in range(rank)]
            terms.append((alpha, mat))
        comps.append(terms)
    if elliptic and degree != 2:
        raise ValueError("elliptic random symbols are quadratic")
    return polynomial_symbol(degree, comps, dim, rank)


# ---------------------------------------------------------------------------
# Square roots
# ---------------------------------------------------------------------------

@dataclass
class SquareRoot:
    Q: MatrixSymbol
    residual: float
    residual_before: float = field(default=np.nan)


def square_root_symbols(P: MatrixSymbol, q: SymbolComponent | Callable, K: int = 1, cloud=None,
                        tol: float = 1e-10) -> SquareRoot:
    """Construct ``Q`` with ``P - Q^* Q`` of lower order.

    ``Q_0`` is the hermitised ``(q + q^*)/2``; for ``K = 1`` the correction
    ``Q_1 = (Q_0^*)^{-1} r / 2`` cancels the subleading residual
    ``r = p_1 - (Q_0^* # Q_0)_1``.  The correction is exact when ``r`` is
    hermitian, which holds for formally selfadjoint ``P``.

    Returns the symbol and the max subleading residual on the sample cloud.
    """
    q = q if isinstance(q, SymbolComponent) else SymbolComponent(q)
    n, N = P.dim, P.rank
    cloud = sample_cloud(n) if cloud is None else cloud
    for x, xi in cloud:
        if abs(np.linalg.det(q.value(x, xi))) < tol:
            raise NotElliptic(f"|det q| < {tol} at {x}, {xi}")

    def herm(a):
        return 0.5 * (a + np.conj(np.swapaxes(a, -1, -2)))

    q0 = SymbolComponent(lambda x, xi: herm(q.value(x, xi)), lambda x, xi: herm(q.grad_x(x, xi)),
                         lambda x, xi: herm(q.grad_xi(x, xi)), lambda x, xi: herm(q.mixed_trace(x, xi)))
    zero = SymbolComponent(lambda x, xi: np.zeros((N, N), complex))
    Q_bare = MatrixSymbol(P.degree / 2, [q0, zero], n, N)
    bare = compose_first_order(adjoint_symbol(Q_bare), Q_bare)

    def r(x, xi):
        return P.component(1, x, xi) - bare.component(1, x, xi)

    if K == 0:
        Q = Q_bare
    else:
        def q1(x, xi):
            return np.linalg.solve(np.conj(q0.value(x, xi)).T, r(x, xi)) / 2.0
        Q = MatrixSymbol(P.degree / 2, [q0, SymbolComponent(q1)], n, N)
    QQ = compose_first_order(adjoint_symbol(Q), Q)
    res = max(float(np.max(np.abs(P.component(1, x, xi) - QQ.component(1, x, xi)))) for x, xi in cloud)
    before = max(float(np.max(np.abs(r(x, xi)))) for x, xi in cloud)
    return SquareRoot(Q, res, before)
