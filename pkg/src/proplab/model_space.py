"""Fundamental solutions of the model operator ``D1 = -i d/dy1`` on a uniform grid.

Sections are arrays of shape ``(n1, n2)`` (scalar) or ``(n1, n2, N)``;
axis 0 is ``y1`` and axis 1 is ``y2``.  The kernels are::

    F_ret u (y)  =  i int_{-inf}^{y1} u(t, y') dt
    F_adv u (y)  = -i int_{y1}^{inf}  u(t, y') dt
    F u          =  F_ret u - F_adv u = i int u(t, y') dt
    F_feyn u     =  F_ret Pi_+ u + F_adv Pi_- u

where ``Pi_+`` keeps the strictly positive discrete ``y2``-frequencies and
``Pi_- = 1 - Pi_+``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .errors import UnsupportedDim

KINDS = ("ret", "adv", "causal", "feynman", "antifeynman")


@dataclass
class GridSection:
    """Complex values on a uniform grid with spacings ``h`` and lower corner ``origin``."""

    values: np.ndarray
    h: tuple
    origin: tuple = (0.0, 0.0)
    margin: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        self.h = tuple(float(v) for v in self.h)
        if len(self.h) != 2 and self.values.ndim >= 2:
            raise UnsupportedDim("model sections live on a two-dimensional grid")

    @property
    def shape(self) -> tuple:
        return self.values.shape[:2]

    def axes(self):
        return [self.origin[i] + self.h[i] * np.arange(self.shape[i]) for i in range(2)]

    def margin_ok(self, m: int | None = None, rel: float = 1e-14) -> bool:
        """True when ``|u| <= rel max|u|`` on the outer ``m`` cells."""
        m = self.margin if m is None else m
        if m == 0:
            return True
        a = np.abs(self.values)
        inner = np.zeros(a.shape[:2], bool)
        inner[m:-m, m:-m] = True
        mask = ~inner
        return bool(np.max(a[mask], initial=0.0) <= rel * max(np.max(a), 1e-300))

    def with_values(self, values) -> "GridSection":
        return GridSection(values, self.h, self.origin, self.margin)


def project_positive(values: np.ndarray, axis: int = 1) -> np.ndarray:
    """Sharp projection onto strictly positive discrete frequencies along ``axis``."""
    n = values.shape[axis]
    spec = np.fft.fft(values, axis=axis)
    freq = np.fft.fftfreq(n)
    shape = [1] * values.ndim
    shape[axis] = n
    return np.fft.ifft(spec * (freq > 0).reshape(shape), axis=axis)


def _ret(v: np.ndarray, h: float) -> np.ndarray:
    return 1j * cumulative_trapezoid(v, dx=h, axis=0, initial=0.0)


def _adv(v: np.ndarray, h: float) -> np.ndarray:
    total = np.trapezoid(v, dx=h, axis=0)
    return -1j * (total[None] - cumulative_trapezoid(v, dx=h, axis=0, initial=0.0))


def apply_model_green(kind: str, u: GridSection) -> GridSection:
    """Apply a model fundamental solution of ``D1`` to ``u``.

    ``causal`` is computed as ``ret - adv`` so that the identity holds to
    the last bit of the cumulative sums.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown kind {kind!r}; expected one of {KINDS}")
    v = u.values
    h1 = u.h[0]
    if kind == "ret":
        out = _ret(v, h1)
    elif kind == "adv":
        out = _adv(v, h1)
    elif kind == "causal":
        out = _ret(v, h1) - _adv(v, h1)
    else:
        if v.ndim < 2 or len(u.h) != 2:
            raise UnsupportedDim("frequency-split kernels need a two-dimensional grid")
        plus = project_positive(v, axis=1)
        minus = v - plus
        if kind == "feynman":
            out = _ret(plus, h1) + _adv(minus, h1)
        else:
            out = _ret(minus, h1) + _adv(plus, h1)
    return u.with_values(out)


def apply_d1(u: GridSection) -> GridSection:
    """``-i d/dy1`` by second-order finite differences."""
    return u.with_values(-1j * np.gradient(u.values, u.h[0], axis=0, edge_order=2))


def _column_integral(u: GridSection) -> np.ndarray:
    return np.sum(u.values, axis=0) * u.h[0]


def positivity_form(u: GridSection) -> float:
    """``-i F(u^* x u) = int |v(y')|^2 dy'`` with ``v(y') = sum_t u(t, y') h1``."""
    v = _column_integral(u)
    return float(np.sum(np.abs(v) ** 2) * u.h[1])


def bilinear_form(u: GridSection, kernel_values: np.ndarray) -> complex:
    """``<u, K u> = sum conj(u) (K u) h1 h2``."""
    return complex(np.sum(np.conj(u.values) * kernel_values) * u.h[0] * u.h[1])


def causal_bilinear(u: GridSection) -> complex:
    """``-i <u, F u>`` with the same Riemann-sum quadrature as :func:`positivity_form`."""
    v = _column_integral(u)
    Fu = 1j * np.broadcast_to(v, u.values.shape)
    return -1j * bilinear_form(u, Fu)


def model_feynman_positivity(u: GridSection) -> float:
    """``-i <u, (F_feyn - F_adv) u> = <v, Pi_+ v>`` with ``v = int u dt``.

    ``F_feyn - F_adv = F Pi_+``, and ``Pi_+`` is an orthogonal projection
    commuting with the ``y1`` integration, so the value is ``>= 0``.
    """
    if u.values.ndim < 2:
        raise UnsupportedDim("frequency-split kernels need a two-dimensional grid")
    v = _column_integral(u)
    pv = project_positive(v, axis=0)
    return float(np.real(np.sum(np.conj(v) * pv)) * u.h[1])


def random_section(rng, shape=(48, 40), h=(0.1, 0.1), margin: int = 5, bumps: int = 4) -> GridSection:
    """Random superposition of complex Gaussian bumps vanishing on the outer ``margin`` cells."""
    n1, n2 = shape
    y1 = np.arange(n1)[:, None]
    y2 = np.arange(n2)[None, :]
    vals = np.zeros(shape, complex)
    for _ in range(bumps):
        c1 = rng.uniform(margin + 6, n1 - margin - 7)
        c2 = rng.uniform(margin + 6, n2 - margin - 7)
        w = rng.uniform(1.5, 3.0)
        amp = rng.normal() + 1j * rng.normal()
        k = rng.normal(scale=0.6)
        vals += amp * np.exp(-((y1 - c1) ** 2 + (y2 - c2) ** 2) / (2 * w * w) + 1j * k * y2)
    vals[:margin] = 0
    vals[-margin:] = 0
    vals[:, :margin] = 0
    vals[:, -margin:] = 0
    return GridSection(vals, h, margin=margin)
