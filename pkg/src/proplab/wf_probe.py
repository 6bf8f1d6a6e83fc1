"""Wavefront detection by windowed-Fourier decay on 2-D grids.

A field ``u`` sampled on a uniform ``(t, x)`` grid is multiplied by a
Gaussian window centred at ``x0`` and Fourier transformed directly at the
covectors ``lambda * theta_j``::

    U(lambda, theta) = sum w(y - x0) u(y) exp(-i lambda theta . (y - x0)) dt dx

Per direction a straight line is fitted to ``log|U|`` against
``log(lambda)``; ``alpha = -slope`` is the decay exponent.  Directions with
``alpha < alpha_star`` are flagged singular.  Covectors are physical
``(xi_t, xi_x)``, so the null codirections of ``t = +-x`` are at 45 degree
multiples regardless of the grid aspect ratio.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NyquistViolation

ALPHA_CEILING = 10.0
ALPHA_STAR = 2.0
N_BINS = 32
FLOOR = 1e-13


def direction_bins(count: int = N_BINS) -> np.ndarray:
    """Unit covectors ``(cos phi_j, sin phi_j)`` with ``phi_j = 2 pi j / count``."""
    phi = 2 * np.pi * np.arange(count) / count
    return np.column_stack([np.cos(phi), np.sin(phi)])


def dyadic_scales(h: float, count: int = 4, top: float = 0.5) -> np.ndarray:
    """``top * pi / h * 2^{-k}`` for ``k = count-1 .. 0`` (ascending)."""
    return top * np.pi / h * 2.0 ** -np.arange(count - 1, -1, -1)


def nearest_bin(theta, count: int = N_BINS) -> int:
    phi = np.arctan2(theta[1], theta[0]) % (2 * np.pi)
    return int(round(phi / (2 * np.pi / count))) % count


@dataclass
class DecayProfile:
    x0: tuple
    sigma: float
    directions: np.ndarray
    scales: np.ndarray
    alpha: np.ndarray
    r2: np.ndarray
    magnitudes: np.ndarray  # (n_dir, n_scale)

    def rows(self):
        """CSV-ready rows ``theta, alpha, r2, flagged`` (theta as an angle in radians)."""
        phi = np.arctan2(self.directions[:, 1], self.directions[:, 0]) % (2 * np.pi)
        flags = np.zeros(len(phi), bool)
        flags[singular_directions(self)] = True
        return np.column_stack([phi, self.alpha, self.r2, flags.astype(float)])


def windowed_ft(field: np.ndarray, t: np.ndarray, x: np.ndarray, x0, sigma: float, covectors: np.ndarray,
                reach: float = 7.0, margin: float = 4.0) -> np.ndarray:
    """Direct windowed DTFT of ``field`` at the rows of ``covectors`` (shape ``(K, 2)``).

    The Gaussian window is cut at ``reach`` widths (clipped to the grid);
    the probe point must lie ``margin`` widths inside the grid.
    """
    t0, xx0 = x0
    dt = t[1] - t[0]
    dx = x[1] - x[0]
    m = margin * sigma
    if t0 - m < t[0] - 1e-12 or t0 + m > t[-1] + 1e-12 or xx0 - m < x[0] - 1e-12 or xx0 + m > x[-1] + 1e-12:
        raise ValueError("probe point must be at least 4 window widths from the boundary")
    it = np.nonzero(np.abs(t - t0) <= reach * sigma + 1e-12)[0]
    ix = np.nonzero(np.abs(x - xx0) <= reach * sigma + 1e-12)[0]
    tt = t[it] - t0
    xs = x[ix] - xx0
    w = np.exp(-(tt[:, None] ** 2 + xs[None, :] ** 2) / (2 * sigma * sigma))
    patch = field[np.ix_(it, ix)] * w
    Et = np.exp(-1j * np.outer(covectors[:, 0], tt))  # (K, nt)
    Ex = np.exp(-1j * np.outer(covectors[:, 1], xs))  # (K, nx)
    return np.einsum("ka,ab,kb->k", Et, patch, Ex) * dt * dx


def _fit(lam: np.ndarray, mag: np.ndarray, floor: float) -> tuple:
    """Slope fit of ``log mag`` vs ``log lam``.

    A profile that falls under ``floor`` at the largest scale decays faster
    than any power the scale range can resolve and saturates the ceiling.
    """
    if mag[-1] <= floor:
        return ALPHA_CEILING, 1.0
    m = np.maximum(mag, floor)
    X = np.log(lam)
    Y = np.log(m)
    slope, icpt = np.polyfit(X, Y, 1)
    resid = Y - (slope * X + icpt)
    ss = np.sum((Y - Y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid ** 2) / ss if ss > 0 else 1.0
    return float(min(-slope, ALPHA_CEILING)), float(r2)


def decay_exponents(field: np.ndarray, t: np.ndarray, x: np.ndarray, x0, sigma: float | None = None,
                    directions: np.ndarray | None = None, scales: np.ndarray | None = None,
                    field_scale: float | None = None) -> DecayProfile:
    """Fit ``|U(lambda theta)| ~ lambda^{-alpha}`` per direction.

    Parameters
    ----------
    field : (nt, nx) array on the grid ``t`` x ``x``.
    x0 : (t0, x0) probe point, at least four window widths from the boundary.
    sigma : window width; default eight cells of the coarser axis.
    directions : (J, 2) unit covectors; default 32 angular bins.
    scales : ascending magnitudes; default four dyadic scales up to half the Nyquist frequency.
    field_scale : optional global amplitude of the field.  The noise floor
        is ``1e-13`` times the largest local transform, or times
        ``field_scale * sigma^2`` when that is larger, so that probes of
        numerically vanishing regions saturate instead of fitting rounding noise.

    Raises
    ------
    NyquistViolation
        The largest scale exceeds ``pi / h``.
    """
    h = max(t[1] - t[0], x[1] - x[0])
    sigma = 8 * h if sigma is None else sigma
    directions = direction_bins() if directions is None else np.asarray(directions, float)
    scales = dyadic_scales(h) if scales is None else np.asarray(scales, float)
    if np.max(scales) > np.pi / h * (1 + 1e-12):
        raise NyquistViolation(f"scale {np.max(scales):.4g} exceeds the Nyquist frequency {np.pi / h:.4g}")
    cov = (directions[:, None, :] * scales[None, :, None]).reshape(-1, 2)
    U = np.abs(windowed_ft(field, t, x, x0, sigma, cov)).reshape(len(directions), len(scales))
    ref = np.abs(windowed_ft(field, t, x, x0, sigma, np.zeros((1, 2))))[0]
    level = max(float(np.max(U)), float(ref))
    if field_scale is not None:
        level = max(level, field_scale * sigma * sigma)
    floor = FLOOR * max(level, FLOOR)
    alpha = np.empty(len(directions))
    r2 = np.empty(len(directions))
    for j in range(len(directions)):
        alpha[j], r2[j] = _fit(scales, U[j], floor)
    return DecayProfile(tuple(x0), sigma, directions, scales, alpha, r2, U)


@dataclass(frozen=True)
class SingularSet:
    indices: tuple
    low_confidence: tuple

    def __iter__(self):
        return iter(self.indices)

    def __len__(self):
        return len(self.indices)

    def __getitem__(self, i):
        return self.indices[i]


def singular_directions(profile: DecayProfile, alpha_star: float = ALPHA_STAR) -> list:
    """Indices ``j`` with ``alpha_j < alpha_star``."""
    return [int(j) for j in np.nonzero(profile.alpha < alpha_star)[0]]


def singular_set(profile: DecayProfile, alpha_star: float = ALPHA_STAR) -> SingularSet:
    """Flagged directions together with the ones whose fit has ``R^2 < 0.9`` (low confidence)."""
    idx = singular_directions(profile, alpha_star)
    low = tuple(j for j in idx if profile.r2[j] < 0.9)
    return SingularSet(tuple(idx), low)


def half_plane_ratio(field: np.ndarray, t: np.ndarray, x: np.ndarray, x0, sigma: float | None = None,
                     scales: np.ndarray | None = None, count: int = N_BINS) -> float:
    """Windowed-FT mass with ``xi_t < 0`` over mass with ``xi_t > 0`` (as ``max / min`` of the two).

    Directions with ``xi_t = 0`` are excluded.
    """
    h = max(t[1] - t[0], x[1] - x[0])
    sigma = 8 * h if sigma is None else sigma
    scales = dyadic_scales(h) if scales is None else np.asarray(scales, float)
    dirs = direction_bins(count)
    cov = (dirs[:, None, :] * scales[None, :, None]).reshape(-1, 2)
    U2 = np.abs(windowed_ft(field, t, x, x0, sigma, cov)).reshape(count, len(scales)) ** 2
    neg = U2[dirs[:, 0] < -1e-12].sum()
    pos = U2[dirs[:, 0] > 1e-12].sum()
    lo, hi = sorted((neg, pos))
    return float(hi / lo) if lo > 0 else float("inf")


def null_bins(count: int = N_BINS) -> set:
    """Bins of the four null codirections ``(+-1, +-1)/sqrt 2``."""
    return {nearest_bin(v, count) for v in ((1, 1), (1, -1), (-1, 1), (-1, -1))}


def cone_localized(flags, expected, count: int = N_BINS, tol_bins: int = 1) -> bool:
    """Every flagged bin lies within ``tol_bins`` of an expected bin and every expected bin is flagged."""
    flags = set(flags)
    expected = set(expected)
    if not expected <= flags:
        return False

    def close(j):
        return any(min((j - e) % count, (e - j) % count) <= tol_bins for e in expected)

    return all(close(j) for j in flags)


def gaussian_datum_wave(grid, width_cells: float = 1.0, m: float = 0.0) -> np.ndarray:
    """Leapfrog solution for ``t >= 0`` of ``(box + m^2) u = 0`` with a narrow Gaussian Cauchy datum.

    ``u(0, x) = exp(-x^2 / (2 (width dx)^2))``, ``u_t(0, x) = 0``; rows ``t < 0``
    are left at zero.  Returns an array on the grid of shape ``grid.shape``.
    """
    grid.check_cfl()
    dt, dx = grid.dt, grid.dx
    xs = grid.x
    u0 = np.exp(-xs ** 2 / (2 * (width_cells * dx) ** 2))
    out = np.zeros(grid.shape)
    n = grid.n_t
    out[n] = u0

    def lap(v):
        r = np.zeros_like(v)
        r[1:-1] = (v[2:] - 2 * v[1:-1] + v[:-2]) / dx ** 2
        return r

    prev = u0
    cur = u0 + 0.5 * dt * dt * (lap(u0) - m * m * u0)
    out[n + 1] = cur
    for k in range(2, n + 1):
        nxt = 2 * cur - prev + dt * dt * (lap(cur) - m * m * cur)
        prev, cur = cur, nxt
        out[n + k] = cur
    return out
