"""Klein-Gordon propagators on 1+1 Minkowski space at desk scale.

Sign conventions (fixed project wide and printed in report headers)::

    box = d_t^2 - d_x^2,      (box + m^2) G = delta

so that ``box = -tr_g nabla^2`` for ``g = diag(-1, 1)``.  Per spatial
momentum ``k`` with ``w = sqrt(k^2 + m^2)``::

    G_ret  = theta(t) sin(w t) / w
    G_F    = i exp(-i w |t|) / (2 w)
    omega  = exp(-i w t) / (2 w)      (Wightman function)

and ``omega = -i (G_F - G_adv)``.  Kernels are sampled on a symmetric
grid ``t_a = a dt``, ``x_j = j dx`` for ``a, j = -n..n``; a value at index
``(a, j)`` is the kernel at the difference ``(t_a, x_j)`` of its arguments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate
from scipy.ndimage import convolve1d
from scipy.signal import fftconvolve
from scipy.special import exp1

from .errors import CFLViolation, GridMismatch, MassTooSmall

CFL_MAX = 0.9
M_MIN = 0.1
SIGN_CONVENTION = "box = d_t^2 - d_x^2 (signature -,+), (box + m^2) G = delta"


@dataclass(frozen=True)
class SpacetimeGrid:
    """Symmetric grid ``[-T, T] x [-L, L]`` with ``2 n_t + 1`` by ``2 n_x + 1`` nodes."""

    n_t: int
    n_x: int
    dt: float
    dx: float

    @classmethod
    def default(cls, n: int = 256, L: float = 8.0, cfl: float = CFL_MAX) -> "SpacetimeGrid":
        dx = L / n
        return cls(n, n, cfl * dx, dx)

    @property
    def cfl(self) -> float:
        return self.dt / self.dx

    @property
    def shape(self) -> tuple:
        return (2 * self.n_t + 1, 2 * self.n_x + 1)

    @property
    def t(self) -> np.ndarray:
        return np.arange(-self.n_t, self.n_t + 1) * self.dt

    @property
    def x(self) -> np.ndarray:
        return np.arange(-self.n_x, self.n_x + 1) * self.dx

    @property
    def T(self) -> float:
        return self.n_t * self.dt

    @property
    def L(self) -> float:
        return self.n_x * self.dx

    def mesh(self):
        return np.meshgrid(self.t, self.x, indexing="ij")

    def index(self, t: float, x: float) -> tuple:
        """Nearest node indices of ``(t, x)``."""
        return int(round(t / self.dt)) + self.n_t, int(round(x / self.dx)) + self.n_x

    def check_cfl(self) -> None:
        if self.cfl > CFL_MAX + 1e-12:
            raise CFLViolation(f"dt/dx = {self.cfl:.4f} exceeds {CFL_MAX}")

    def interior(self, frac: float = 0.8, band: float = 0.0, origin: float = 0.0) -> np.ndarray:
        """Mask of nodes with ``|t| < frac T``, ``|x| < frac L``, at least ``band`` cells
        from the light cone and outside a radius of ``origin`` cells around the origin."""
        Tm, Xm = self.mesh()
        mask = (np.abs(Tm) < frac * self.T) & (np.abs(Xm) < frac * self.L)
        if band > 0:
            mask &= np.abs(np.abs(Tm) - np.abs(Xm)) > band * self.dx
        if origin > 0:
            mask &= np.hypot(Tm / self.dt, Xm / self.dx) > origin
        return mask


@dataclass
class KernelField:
    """Translation-invariant kernel ``K(t, x)`` sampled on a :class:`SpacetimeGrid`."""

    values: np.ndarray
    grid: SpacetimeGrid
    kind: str
    m: float
    eps: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.values.shape[:2] != self.grid.shape:
            raise GridMismatch(f"values of shape {self.values.shape} do not fit grid {self.grid.shape}")

    def at(self, t: float, x: float):
        return self.values[self.grid.index(t, x)]

    def with_values(self, values, kind: str | None = None) -> "KernelField":
        return KernelField(values, self.grid, kind or self.kind, self.m, self.eps, dict(self.meta))

    def rows(self):
        """CSV-ready rows ``t, x, re, im`` (scalar kernels only)."""
        Tm, Xm = self.grid.mesh()
        v = self.values
        return np.column_stack([Tm.ravel(), Xm.ravel(), v.real.ravel(), v.imag.ravel()])


def _same_grid(*kernels: KernelField) -> None:
    g0 = kernels[0].grid
    for k in kernels[1:]:
        if k.grid != g0:
            raise GridMismatch("kernels live on different grids")


def lattice_smooth(values: np.ndarray, passes: int = 2) -> np.ndarray:
    """Binomial ``[1, 2, 1] / 4`` smoothing per axis, ``passes`` times.

    Equivalent to pairing the kernel with a lattice-scale test function;
    it removes the grid-frequency checkerboard mode that second-order
    time stepping leaves near the light cone.
    """
    w = np.array([0.25, 0.5, 0.25])
    out = values
    for _ in range(passes):
        out = convolve1d(convolve1d(out, w, axis=0, mode="nearest"), w, axis=1, mode="nearest")
    return out


# ---------------------------------------------------------------------------
# Retarded / advanced
# ---------------------------------------------------------------------------

def _leapfrog(m: float, grid: SpacetimeGrid) -> np.ndarray:
    n_t, n_x = grid.n_t, grid.n_x
    dt, dx = grid.dt, grid.dx
    nx = 2 * n_x + 1
    out = np.zeros(grid.shape)
    prev = np.zeros(nx)
    cur = np.zeros(nx)
    src = np.zeros(nx)
    src[n_x] = 1.0 / (dt * dx)
    lap = np.zeros(nx)
    for k in range(n_t):
        lap[1:-1] = (cur[2:] - 2 * cur[1:-1] + cur[:-2]) / dx ** 2
        nxt = 2 * cur - prev + dt * dt * (lap - m * m * cur + (src if k == 0 else 0.0))
        prev, cur = cur, nxt
        out[n_t + k + 1] = cur
    return out


def kg_green(kind: str, m: float, grid: SpacetimeGrid) -> KernelField:
    """Retarded or advanced Green kernel of ``box + m^2`` by leapfrog time stepping.

    The source is a single-node delta of weight ``1/(dt dx)`` at the origin;
    spatial boundaries are Dirichlet (the cone never reaches them when
    ``T <= L``).  The advanced kernel is the time reflection of the retarded one.
    """
    if kind not in ("ret", "adv"):
        raise ValueError("kind must be 'ret' or 'adv'")
    if m < 0:
        raise ValueError("mass must be nonnegative")
    grid.check_cfl()
    G = _leapfrog(m, grid)
    if kind == "adv":
        G = G[::-1].copy()
    return KernelField(G, grid, kind, m, meta={"convention": SIGN_CONVENTION})


def apply_kg(values: np.ndarray, m: float, grid: SpacetimeGrid) -> np.ndarray:
    """Discrete ``(box + m^2)`` (5-point stencil) on interior nodes; zero on the boundary ring."""
    v = values
    out = np.zeros_like(v)
    out[1:-1, 1:-1] = ((v[2:, 1:-1] - 2 * v[1:-1, 1:-1] + v[:-2, 1:-1]) / grid.dt ** 2
                       - (v[1:-1, 2:] - 2 * v[1:-1, 1:-1] + v[1:-1, :-2]) / grid.dx ** 2
                       + m * m * v[1:-1, 1:-1])
    return out


@dataclass(frozen=True)
class DeltaResidual:
    source_rel_error: float
    off_source_rel: float


def delta_residual(kernel: KernelField, m: float | None = None) -> DeltaResidual:
    """Compare ``(box + m^2) K`` with the discrete delta ``1/(dt dx)`` at the origin.

    Returns the relative error at the source node and the largest
    off-source value relative to the delta peak.
    """
    g = kernel.grid
    m = kernel.m if m is None else m
    R = apply_kg(kernel.values, m, g)
    peak = 1.0 / (g.dt * g.dx)
    src = g.n_t, g.n_x
    source_err = abs(R[src] - peak) / peak
    R = R.copy()
    R[src] = 0.0
    R[0] = R[-1] = 0.0
    R[:, 0] = R[:, -1] = 0.0
    return DeltaResidual(float(source_err), float(np.max(np.abs(R[1:-1, 1:-1])) / peak))


# ---------------------------------------------------------------------------
# Feynman
# ---------------------------------------------------------------------------

def _lattice_feynman(m: float, eps: float, grid: SpacetimeGrid, pad: int = 4) -> np.ndarray:
    """Exact solution of the leapfrog operator with ``m^2 -> m^2 - i eps`` decaying in ``|t|``.

    Per lattice momentum the time dependence is ``A z^{|a|}`` with ``|z| < 1``
    the root of ``(z - 2 + 1/z)/dt^2 + Om^2 = 0``; space is handled by a
    padded periodic FFT, which is exact while the kernel is negligible at the
    padded boundary.
    """
    dt, dx = grid.dt, grid.dx
    n_t, n_x = grid.n_t, grid.n_x
    M = pad * (2 * n_x + 1)
    k = 2 * np.pi * np.fft.fftfreq(M, d=dx)
    lam = (2.0 / dx * np.sin(k * dx / 2)) ** 2 + m * m
    om2 = lam - 1j * eps
    c = 1 - dt * dt * om2 / 2
    z = c - np.sqrt(c * c - 1 + 0j)
    z = np.where(np.abs(z) < 1, z, 1 / z)
    A = (1.0 / dt) / ((2 * z - 2) / dt ** 2 + om2)
    a = np.abs(np.arange(-n_t, n_t + 1))
    Gk = A[None, :] * z[None, :] ** a[:, None]
    Gx = np.fft.fftshift(np.fft.ifft(Gk, axis=1) / dx, axes=1)
    c0 = M // 2
    return Gx[:, c0 - n_x:c0 + n_x + 1]


def kg_feynman(m: float, eps: float, grid: SpacetimeGrid, extrapolate: bool = True, pad: int = 4,
               _allow_massless: bool = False) -> KernelField:
    """Feynman kernel from the ``-i eps`` prescription on the lattice.

    With ``extrapolate=True`` the Richardson combination
    ``2 G(eps/2) - G(eps)`` is returned (first-order error in ``eps`` removed).
    """
    if m < M_MIN and not _allow_massless:
        raise MassTooSmall(f"m = {m} is below {M_MIN} (infrared control)")
    if not 1e-3 <= eps <= 1e-1:
        raise ValueError("eps must lie in [1e-3, 1e-1]")
    grid.check_cfl()
    G = _lattice_feynman(m, eps, grid, pad)
    if extrapolate:
        G = 2 * _lattice_feynman(m, eps / 2, grid, pad) - G
    return KernelField(G, grid, "feynman", m, eps, meta={"extrapolated": extrapolate, "convention": SIGN_CONVENTION})


# ---------------------------------------------------------------------------
# Wightman
# ---------------------------------------------------------------------------

def _supersampling(grid: SpacetimeGrid, delta: float, tail: float) -> int:
    """Fine-grid factor so the regulated mode integral beyond the FFT band is below ``tail``."""
    # tail of int_K^inf exp(-delta k) / (2 pi k) dk = E1(delta K) / (2 pi)
    K = 1.0
    while exp1(delta * K) / (2 * np.pi) > tail:
        K *= 1.25
    return max(1, int(math.ceil(K * grid.dx / np.pi)))


def _mode_sum(m: float, grid: SpacetimeGrid, delta: float, sup: int, pad: int) -> np.ndarray:
    dxf = grid.dx / sup
    M = pad * sup * (2 * grid.n_x + 1)
    if M % 2 == 0:
        M += 1  # odd length keeps the momentum grid symmetric
    k = 2 * np.pi * np.fft.fftfreq(M, d=dxf)
    w = np.sqrt(k * k + m * m)
    weight = np.exp(-delta * w) / (2 * w)
    c0 = M // 2
    idx = (c0 + sup * np.arange(-grid.n_x, grid.n_x + 1))
    out = np.empty(grid.shape, complex)
    t = grid.t
    rows = max(1, int(2 ** 22 // M))
    for a0 in range(0, len(t), rows):
        tt = t[a0:a0 + rows]
        F = np.exp(-1j * np.outer(tt, w)) * weight[None, :]
        W = np.fft.fftshift(np.fft.ifft(F, axis=1), axes=1) / dxf
        out[a0:a0 + rows] = W[:, idx]
    return out


def kg_wightman(m: float, grid: SpacetimeGrid, delta: float = 0.02, tail: float = 1e-8, pad: int = 4,
                extrapolate: bool = True) -> KernelField:
    """Wightman function by the continuum mode sum ``int dk exp(ikx - i w t) / (4 pi w)``.

    The integral is regulated by ``exp(-delta w)`` (a shift ``t -> t - i delta``),
    evaluated by FFT on a supersampled spatial grid whose band covers the
    regulated integrand up to a tail below ``tail``, and Richardson
    extrapolated in ``delta``: ``2 W(delta/2) - W(delta)``.
    """
    if m < M_MIN:
        raise MassTooSmall(f"m = {m} is below {M_MIN} (infrared control)")
    sup = _supersampling(grid, delta / 2 if extrapolate else delta, tail)
    W = _mode_sum(m, grid, delta, sup, pad)
    if extrapolate:
        W = 2 * _mode_sum(m, grid, delta / 2, sup, pad) - W
    return KernelField(W, grid, "wightman", m, meta={"delta": delta, "supersampling": sup,
                                                    "extrapolated": extrapolate, "convention": SIGN_CONVENTION})


def wightman_cutoff(m: float, t: float, x: float, cutoff: float) -> complex:
    """Hard-cutoff mode integral ``int_{-cutoff}^{cutoff} dk exp(ikx - i w t) / (4 pi w)`` by quadrature."""
    def re(k):
        w = math.sqrt(k * k + m * m)
        return math.cos(k * x - w * t) / (4 * math.pi * w)

    def im(k):
        w = math.sqrt(k * k + m * m)
        return math.sin(k * x - w * t) / (4 * math.pi * w)

    limit = max(200, int(cutoff * max(abs(t), abs(x), 1e-3)) * 4)
    r = integrate.quad(re, -cutoff, cutoff, limit=limit, epsabs=1e-13, epsrel=1e-12)[0]
    i = integrate.quad(im, -cutoff, cutoff, limit=limit, epsabs=1e-13, epsrel=1e-12)[0]
    return complex(r, i)


def log_growth_slope(m: float = 1.0, cutoffs=(1e2, 1e3, 1e4, 1e5)) -> float:
    """Least-squares slope of ``Re omega_cutoff(0, 0)`` against ``log(cutoff)``."""
    vals = [wightman_cutoff(m, 0.0, 0.0, c).real for c in cutoffs]
    return float(np.polyfit(np.log(cutoffs), vals, 1)[0])


# ---------------------------------------------------------------------------
# Consistency checks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConsistencyResult:
    max_rel: float  # max interior |G_F - G_adv - i omega| / max interior |omega|
    l2_rel: float  # interior L2 norm ratio


def feynman_consistency(GF: KernelField, Gadv: KernelField, omega: KernelField, *, band: float = 4.0,
                        frac: float = 0.8, passes: int = 2) -> ConsistencyResult:
    """Residual of ``G_F - G_adv - i omega`` on the interior after lattice smoothing.

    The interior excludes the outer ``1 - frac`` of the grid and a band of
    ``band`` cells around the light cone.
    """
    _same_grid(GF, Gadv, omega)
    mask = GF.grid.interior(frac=frac, band=band)
    R = lattice_smooth(GF.values - Gadv.values - 1j * omega.values, passes)
    ref = lattice_smooth(omega.values, passes)
    return ConsistencyResult(float(np.max(np.abs(R[mask])) / np.max(np.abs(ref[mask]))),
                             float(np.linalg.norm(R[mask]) / np.linalg.norm(ref[mask])))


@dataclass
class TestFunctionSet:
    """Seeded complex bump superpositions on a ``(P_t, P_x)`` patch of the kernel grid."""

    values: np.ndarray  # (count, P_t, P_x)
    seed: int
    margin: int

    def __len__(self):
        return self.values.shape[0]


def random_tests(grid: SpacetimeGrid, count: int = 20, seed: int = 0, size: int | None = None,
                 margin: int = 5, bumps: int = 3) -> TestFunctionSet:
    """Random smooth tests supported at least ``margin`` cells inside a patch of ``size`` nodes.

    The patch edge is at most ``n + 1`` so all differences of support
    points are represented in the kernel grid.
    """
    rng = np.random.default_rng(seed)
    size = min(grid.n_t, grid.n_x) // 2 if size is None else size
    if size > min(grid.n_t, grid.n_x) + 1:
        raise GridMismatch("test patch is larger than the kernel range")
    a = np.arange(size)[:, None]
    b = np.arange(size)[None, :]
    out = np.zeros((count, size, size), complex)
    for i in range(count):
        for _ in range(bumps):
            w = rng.uniform(2.0, 5.0)
            ca, cb = rng.uniform(margin + 3 * w, size - margin - 1 - 3 * w, size=2)
            amp = rng.normal() + 1j * rng.normal()
            kt, kx = rng.normal(scale=0.4, size=2)
            out[i] += amp * np.exp(-((a - ca) ** 2 + (b - cb) ** 2) / (2 * w * w) + 1j * (kt * a + kx * b))
        out[i, :margin] = 0
        out[i, -margin:] = 0
        out[i, :, :margin] = 0
        out[i, :, -margin:] = 0
    return TestFunctionSet(out, seed, margin)


def gram_matrix(kernel: np.ndarray, grid: SpacetimeGrid, tests: np.ndarray) -> np.ndarray:
    """``M_ab = sum conj(u_a)(x) K(x - y) u_b(y) (dt dx)^2`` via FFT convolution."""
    count, P_t, P_x = tests.shape
    n_t, n_x = grid.n_t, grid.n_x
    if P_t > n_t + 1 or P_x > n_x + 1:
        raise GridMismatch("test patch is larger than the kernel range")
    conv = np.empty_like(tests)
    for b in range(count):
        full = fftconvolve(tests[b], kernel, mode="full")
        conv[b] = full[n_t:n_t + P_t, n_x:n_x + P_x]
    w = (grid.dt * grid.dx) ** 2
    return np.einsum("aij,bij->ab", np.conj(tests), conv) * w


@dataclass(frozen=True)
class GramResult:
    min_eig: float
    spectral_radius: float
    hermiticity_defect: float

    @property
    def ratio(self) -> float:
        return self.min_eig / self.spectral_radius if self.spectral_radius > 0 else 0.0

    def passes(self, rel: float = 1e-6) -> bool:
        return self.min_eig >= -rel * self.spectral_radius


def gram_positivity(omega: KernelField, tests: TestFunctionSet) -> GramResult:
    """Extremal eigenvalues of the hermitised Gram matrix of ``omega`` over ``tests``."""
    M = gram_matrix(omega.values, omega.grid, tests.values)
    H = 0.5 * (M + M.conj().T)
    ev = np.linalg.eigvalsh(H)
    defect = float(np.max(np.abs(M - M.conj().T)) / max(np.max(np.abs(M)), 1e-300))
    return GramResult(float(ev[0]), float(np.max(np.abs(ev))), defect)


def apply_kg4(values: np.ndarray, m: float, grid: SpacetimeGrid) -> np.ndarray:
    """Fourth-order (9-point cross) ``(box + m^2)``; zero on the outer two-node ring."""
    c = (-1 / 12, 4 / 3, -5 / 2, 4 / 3, -1 / 12)
    v = values
    out = np.zeros_like(v)
    core = (slice(2, -2), slice(2, -2))
    acc = m * m * v[core]
    nt, nx = v.shape
    for o, w in zip(range(-2, 3), c):
        acc = acc + w * v[2 + o:nt - 2 + o, 2:-2] / grid.dt ** 2
        acc = acc - w * v[2:-2, 2 + o:nx - 2 + o] / grid.dx ** 2
    out[core] = acc
    return out


def bisolution_residual(omega: KernelField, m: float | None = None, *, band: float = 8.0, frac: float = 0.8,
                        order: int = 4) -> float:
    """Relative interior norm of a discrete ``(box + m^2)`` applied in the first slot.

    ``||(box + m^2) omega|| / ||omega||`` over interior nodes at least
    ``band`` cells from the light cone.  ``order`` selects the 5-point
    (2) or 9-point (4) stencil; the continuum mode sum is smooth off the
    cone, so the fourth-order stencil measures the bisolution property
    rather than the stencil's own truncation error.
    """
    g = omega.grid
    m = omega.m if m is None else m
    if order == 2:
        R = apply_kg(omega.values, m, g)
    elif order == 4:
        R = apply_kg4(omega.values, m, g)
    else:
        raise ValueError("order must be 2 or 4")
    mask = g.interior(frac=frac, band=band)
    return float(np.linalg.norm(R[mask]) / np.linalg.norm(omega.values[mask]))
