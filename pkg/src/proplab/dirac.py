"""Massless Dirac-type operators on flat space at desk scale.

Conventions: signature ``(-, +, ...)``, Clifford relation
``g^mu g^nu + g^nu g^mu = 2 g^{mu nu}``, ``D = -i gamma^mu d_mu`` so that
``D^2 = box = d_t^2 - d_x^2``.  The spinor pairing is ``<u|v> = (B u)^H v``
with ``B = i gamma^0``, which makes the beta-form
``(u|v) = <-i sigma_D(N_flat) u | v>`` positive definite for future timelike
``N``.  With that ``B`` the operator ``D`` is formally skew-adjoint,
``<Du|v> = -<u|Dv>``; this fixes the overall phase that the calibration
step of :func:`dirac_positivity_suite` records.

The discrete ``D`` uses centered differences.  Its square is the
``2h`` wide stencil, whose Green kernel is the scalar leapfrog kernel on the
doubled-spacing sublattice; building ``S = D G`` from that kernel makes
``D S = delta`` hold to rounding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BandLimitViolation, GridMismatch, UnsupportedDimension
from .minkowski_qft import KernelField, SpacetimeGrid, _lattice_feynman, kg_green

# gamma matrices as exact small-integer (Gaussian integer) arrays
_G2 = np.array([[[0, 1], [-1, 0]],
                [[0, 1], [1, 0]]], dtype=complex)

_PAULI = np.array([[[0, 1], [1, 0]], [[0, -1j], [1j, 0]], [[1, 0], [0, -1]]])
_I2 = np.eye(2)
_Z2 = np.zeros((2, 2))


def _dirac_rep_physics():
    g0 = np.block([[_I2, _Z2], [_Z2, -_I2]]).astype(complex)
    gs = [np.block([[_Z2, s], [-s, _Z2]]).astype(complex) for s in _PAULI]
    return np.array([g0] + gs)


_G4 = 1j * _dirac_rep_physics()


@dataclass(frozen=True)
class CliffordRep:
    """Gamma matrices ``gamma[mu]`` (``n x N x N``) and the adjoint structure ``B``."""

    n: int
    gamma: np.ndarray
    B: np.ndarray

    @property
    def N(self) -> int:
        return self.gamma.shape[1]

    @property
    def metric(self) -> np.ndarray:
        return np.diag([-1.0] + [1.0] * (self.n - 1))

    def sigma(self, xi) -> np.ndarray:
        """``sigma_D(xi) = gamma^mu xi_mu``."""
        return np.tensordot(np.asarray(xi, dtype=complex), self.gamma, axes=(0, 0))

    def anticommutator_defect(self) -> float:
        """Largest entry of ``{gamma^mu, gamma^nu} - 2 g^{mu nu} 1`` over all pairs."""
        eye = np.eye(self.N)
        g = self.metric
        worst = 0.0
        for a in range(self.n):
            for b in range(self.n):
                ac = self.gamma[a] @ self.gamma[b] + self.gamma[b] @ self.gamma[a]
                worst = max(worst, float(np.max(np.abs(ac - 2 * g[a, b] * eye))))
        return worst


def build_clifford(n: int) -> CliffordRep:
    """Canonical representation for ``n`` in {2, 4}.

    ``n = 2``: ``gamma^0 = [[0, 1], [-1, 0]]``, ``gamma^1 = [[0, 1], [1, 0]]``.
    ``n = 4``: ``i`` times the standard Dirac representation.
    In both cases ``B = i gamma^0``.
    """
    if n == 2:
        gamma = _G2.copy()
    elif n == 4:
        gamma = _G4.copy()
    else:
        raise UnsupportedDimension(f"no Clifford representation built for n = {n}; use 2 or 4")
    rep = CliffordRep(n, gamma, 1j * gamma[0])
    if rep.anticommutator_defect() != 0.0:
        raise AssertionError("Clifford relations violated")  # pragma: no cover
    return rep


def pairing(rep: CliffordRep, u, v) -> complex:
    """``<u|v> = sum (B u)^H v`` over all leading (grid) axes; spinor index last."""
    Bu = np.einsum("ab,...b->...a", rep.B, u)
    return complex(np.sum(np.conj(Bu) * v))


# ---------------------------------------------------------------------------
# beta-form
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BetaForm:
    matrix: np.ndarray
    eigenvalues: np.ndarray

    @property
    def positive_definite(self) -> bool:
        return bool(self.eigenvalues[0] > 0)

    @property
    def indefinite(self) -> bool:
        return bool(self.eigenvalues[0] < 0 < self.eigenvalues[-1])


def beta_form(rep: CliffordRep, N) -> BetaForm:
    """Hermitised matrix of ``(u|v) = <-i sigma_D(N_flat) u | v>`` and its spectrum."""
    N = np.asarray(N, float)
    if N.shape != (rep.n,) or not np.any(N):
        raise ValueError("N must be a nonzero vector of length n")
    X = -1j * rep.sigma(rep.metric @ N)
    M = (rep.B @ X).conj().T  # (B X u)^H v = u^H (B X)^H v
    H = 0.5 * (M + M.conj().T)
    return BetaForm(H, np.linalg.eigvalsh(H))


def random_cone_vectors(rng, n: int, count: int, kind: str = "timelike"):
    """Random future timelike or spacelike vectors in ``R^{1,n-1}``."""
    out = []
    while len(out) < count:
        v = rng.normal(size=n)
        s = np.linalg.norm(v[1:])
        if kind == "timelike":
            v[0] = s * rng.uniform(1.05, 3.0) + rng.uniform(0, 0.5)
        elif kind == "spacelike":
            v[0] = s * rng.uniform(-0.95, 0.95)
        else:
            raise ValueError(kind)
        out.append(v)
    return np.array(out)


# ---------------------------------------------------------------------------
# discrete operator
# ---------------------------------------------------------------------------

def _dc(f: np.ndarray, axis: int, h: float) -> np.ndarray:
    out = np.zeros_like(f)
    sl = [slice(None)] * f.ndim
    lo, hi, mid = list(sl), list(sl), list(sl)
    lo[axis] = slice(0, -2)
    hi[axis] = slice(2, None)
    mid[axis] = slice(1, -1)
    out[tuple(mid)] = (f[tuple(hi)] - f[tuple(lo)]) / (2 * h)
    return out


def apply_dirac(rep: CliffordRep, field: np.ndarray, spacing) -> np.ndarray:
    """Centered-difference ``D f = -i gamma^mu d_mu f``.

    ``field`` has ``rep.n`` grid axes followed by the spinor axis and
    optionally one more (matrix-valued kernels, ``D`` acting on the rows).
    The outermost grid ring is left at zero.
    """
    n = rep.n
    if len(spacing) != n:
        raise GridMismatch("spacing must have one entry per grid axis")
    out = np.zeros(field.shape, dtype=complex)
    for mu in range(n):
        d = _dc(field.astype(complex), mu, spacing[mu])
        if field.ndim == n + 1:
            out += np.einsum("ab,...b->...a", rep.gamma[mu], d)
        else:
            out += np.einsum("ab,...bc->...ac", rep.gamma[mu], d)
    return -1j * out


def adjoint_residuals(rep: CliffordRep, rng, size: int | None = None, margin: int = 2) -> tuple:
    """Relative ``|<Du|v> + <u|Dv>|`` and ``|<Du|v> - <u|Dv>|`` for random compact spinors.

    The first vanishes (skew-adjointness) for the chosen ``B``.
    """
    size = size or (24 if rep.n == 2 else 8)
    shape = (size,) * rep.n + (rep.N,)
    u = rng.normal(size=shape) + 1j * rng.normal(size=shape)
    v = rng.normal(size=shape) + 1j * rng.normal(size=shape)
    inner = tuple(slice(margin, -margin) for _ in range(rep.n))
    mask = np.zeros(shape[:-1], bool)
    mask[inner] = True
    u[~mask] = 0
    v[~mask] = 0
    h = [1.0] * rep.n
    a = pairing(rep, apply_dirac(rep, u, h), v)
    b = pairing(rep, u, apply_dirac(rep, v, h))
    scale = max(abs(a), abs(b), 1e-300)
    return abs(a + b) / scale, abs(a - b) / scale


# ---------------------------------------------------------------------------
# Green kernels
# ---------------------------------------------------------------------------

def _coarse(grid: SpacetimeGrid) -> SpacetimeGrid:
    if grid.n_t % 2 or grid.n_x % 2:
        raise GridMismatch("the Dirac kernels need even node counts n_t, n_x")
    return SpacetimeGrid(grid.n_t // 2, grid.n_x // 2, 2 * grid.dt, 2 * grid.dx)


def wide_green(kind: str, grid: SpacetimeGrid, eps: float = 0.05) -> KernelField:
    """Scalar massless Green kernel of the squared centered-difference operator.

    Nonzero only on the even sublattice, where it equals four times the
    leapfrog kernel of spacing ``(2 dt, 2 dx)``; the discrete delta is the
    same ``1/(dt dx)`` single-node source as in :func:`kg_green`.
    """
    coarse = _coarse(grid)
    if kind in ("ret", "adv"):
        Gc = kg_green(kind, 0.0, coarse).values
    elif kind == "feynman":
        Gc = 2 * _lattice_feynman(0.0, eps / 2, coarse) - _lattice_feynman(0.0, eps, coarse)
    else:
        raise ValueError("kind must be 'ret', 'adv' or 'feynman'")
    G = np.zeros(grid.shape, dtype=complex if np.iscomplexobj(Gc) else float)
    G[::2, ::2] = 4.0 * Gc
    return KernelField(G, grid, kind, 0.0, eps if kind == "feynman" else None, meta={"stencil": "centered"})


def dirac_green(kind: str, rep: CliffordRep, grid: SpacetimeGrid, eps: float = 0.05) -> KernelField:
    """Matrix kernel ``S = D (G 1)`` for ``kind`` in {ret, adv, feynman}; ``rep.n`` must be 2."""
    if rep.n != 2:
        raise UnsupportedDimension("grid kernels are built in 1+1 dimensions only")
    grid.check_cfl()
    G = wide_green(kind, grid, eps)
    field_ = G.values[:, :, None, None] * np.eye(rep.N)[None, None]
    S = apply_dirac(rep, field_, (grid.dt, grid.dx))
    return KernelField(S, grid, kind, 0.0, G.eps, meta={"stencil": "centered", "spinor_dim": rep.N})


@dataclass(frozen=True)
class DiracResidual:
    source_rel_error: float
    off_source_rel: float


def dirac_residual(S: KernelField, rep: CliffordRep, target: str = "delta", ring: int = 2) -> DiracResidual:
    """``D S`` against ``delta 1`` (``target='delta'``) or against zero (``target='zero'``).

    The outer ``ring`` nodes, where the stencil is incomplete, are excluded.
    """
    g = S.grid
    R = apply_dirac(rep, S.values, (g.dt, g.dx))
    peak = 1.0 / (g.dt * g.dx)
    eye = np.eye(rep.N)
    src = (g.n_t, g.n_x)
    if target == "delta":
        src_err = float(np.max(np.abs(R[src] - peak * eye)) / peak)
    else:
        src_err = float(np.max(np.abs(R[src])) / peak)
    R = R.copy()
    R[src] = 0
    inner = R[ring:-ring, ring:-ring]
    return DiracResidual(src_err, float(np.max(np.abs(inner)) / peak))


# ---------------------------------------------------------------------------
# positivity suite
# ---------------------------------------------------------------------------

@dataclass
class DiracTestSet:
    values: np.ndarray  # (count, P, P, N)
    seed: int
    margin: int
    energies: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self):
        return self.values.shape[0]


def random_dirac_tests(grid: SpacetimeGrid, count: int = 20, seed: int = 0, size: int = 127, margin: int = 5,
                       width: float = 9.0, theta=(0.62, 0.75), sign: int | None = None) -> DiracTestSet:
    """Band-limited spinor tests: Gaussian packets modulated near the null shell.

    Each test is a packet ``exp(-i E t + i k x)`` with phase per time step
    ``E dt`` drawn from ``theta`` and ``|k| ~ |E|``, so its spectrum stays away
    from zero frequency and from the doubler edge ``pi / (2 h)`` of the
    centered stencil.  The spinor part is a random constant.  ``sign=+1``
    gives positive energy (``E > 0``), ``-1`` negative and ``None`` mixed.
    Packets are cut to zero outside six widths and on the outer ``margin`` cells.
    """
    rng = np.random.default_rng(seed)
    if size > min(grid.n_t, grid.n_x) + 1:
        raise GridMismatch("test patch is larger than the kernel range")
    a = np.arange(size)[:, None]
    b = np.arange(size)[None, :]
    reach = 6 * width
    lo, hi = margin + reach, size - margin - 1 - reach
    if lo > hi:
        raise GridMismatch("test patch too small for the packet width")
    out = np.zeros((count, size, size, 2), complex)
    energies = np.empty(count)
    for i in range(count):
        s = sign if sign is not None else rng.choice([-1, 1])
        E = s * rng.uniform(*theta) / grid.dt
        k = rng.choice([-1, 1]) * abs(E) * rng.uniform(0.9, 1.1)
        ca, cb = rng.uniform(lo, hi, size=2)
        env = np.exp(-((a - ca) ** 2 + (b - cb) ** 2) / (2 * width * width))
        env[np.hypot(a - ca, b - cb) > reach] = 0.0
        phase = np.exp(-1j * E * a * grid.dt + 1j * k * b * grid.dx)
        spinor = rng.normal(size=2) + 1j * rng.normal(size=2)
        out[i] = (env * phase)[..., None] * spinor
        energies[i] = E
    out[:, :margin] = 0
    out[:, -margin:] = 0
    out[:, :, :margin] = 0
    out[:, :, -margin:] = 0
    return DiracTestSet(out, seed, margin, energies)


def check_band_limit(tests: DiracTestSet, bins: int = 3, tol: float = 1e-6) -> None:
    """Raise :class:`BandLimitViolation` if a test has spectral mass near or past the cutoff.

    The cutoff is the doubler edge ``pi / (2 h)`` (a quarter of the
    sampling frequency) of the centered stencil, on both grid axes.
    """
    P = tests.values.shape[1]
    f = np.abs(np.fft.fftfreq(P))
    near = f >= 0.25 - bins / P
    spec = np.abs(np.fft.fft2(tests.values, axes=(1, 2))) ** 2
    bad = near[:, None] | near[None, :]
    for i in range(len(tests)):
        s = spec[i].sum(axis=-1)
        frac = s[bad].sum() / max(s.sum(), 1e-300)
        if frac > tol:
            raise BandLimitViolation(f"test {i} carries {frac:.2e} of its mass within {bins} bins of the cutoff")


class _TorusOps:
    """Circulant embedding of a matrix kernel and tests on a padded torus."""

    def __init__(self, S: KernelField, P: int):
        g = S.grid
        self.grid = g
        self.F = (2 * g.n_t + P, 2 * g.n_x + P)
        K = np.zeros(self.F + S.values.shape[2:], complex)
        ta = np.arange(-g.n_t, g.n_t + 1) % self.F[0]
        xa = np.arange(-g.n_x, g.n_x + 1) % self.F[1]
        K[np.ix_(ta, xa)] = S.values
        self.Khat = np.fft.fft2(K, axes=(0, 1))
        # numpy frequencies: exp(+i w t) with w = 2 pi f / dt; positive energy is w < 0
        w = np.fft.fftfreq(self.F[0])
        self.mask = {"+": (w < 0)[:, None], "-": (w > 0)[:, None], "0": (w == 0)[:, None]}
        self.P = P

    def hat(self, u: np.ndarray) -> np.ndarray:
        """FFT of tests ``(count, P, P, N)`` zero-padded to the torus."""
        pad = np.zeros((u.shape[0],) + self.F + u.shape[3:], complex)
        pad[:, :u.shape[1], :u.shape[2]] = u
        return np.fft.fft2(pad, axes=(1, 2))

    def gram(self, B: np.ndarray, uh: np.ndarray, part: str | None = None, euclid: bool = False) -> np.ndarray:
        """``M_ab = <Pi u_a | S Pi u_b> (dt dx)^2`` computed in Fourier space."""
        Su = np.einsum("tkab,ntkb->ntka", self.Khat, uh)
        if part is not None:
            Su = Su * self.mask[part][None, ..., None]
        left = uh if euclid else np.einsum("ab,ntkb->ntka", B, uh)
        M = np.einsum("atkc,btkc->ab", np.conj(left), Su)
        nF = self.F[0] * self.F[1]
        return M * (self.grid.dt * self.grid.dx) ** 2 / nF

    def apply(self, uh: np.ndarray, part: str | None = None) -> np.ndarray:
        Su = np.einsum("tkab,ntkb->ntka", self.Khat, uh)
        if part is not None:
            Su = Su * self.mask[part][None, ..., None]
        return Su


def _herm_extremes(M: np.ndarray) -> tuple:
    H = 0.5 * (M + M.conj().T)
    ev = np.linalg.eigvalsh(H)
    return float(ev[0]), float(np.max(np.abs(ev)))


_PHASES = (1, -1, 1j, -1j)


def _calibrate(value: complex) -> complex:
    """Phase in {1, -1, i, -i} that makes ``value`` closest to the positive real axis."""
    return max(_PHASES, key=lambda p: (p * value).real)


@dataclass
class DiracSuiteResult:
    sigma: complex
    sigma_omega: complex
    q_imag_rel: float
    gram_min: float
    gram_radius: float
    split_rel: float
    dsplit_rel: dict
    split_min: dict
    split_radius: dict
    omega_min: float
    omega_radius: float
    euclid_imag_rel: float
    reference_q: float
    reference_minus_rel: float
    records: dict = field(default_factory=dict)

    def verdicts(self, real_tol=1e-8, psd_tol=1e-6, split_tol=1e-6, d_tol=1e-3) -> dict:
        # a frequency part can be empty for one-signed test sets; the full
        # Gram radius keeps the relative test meaningful there
        def psd(lo, rad):
            return lo >= -psd_tol * max(rad, self.gram_radius)

        return {
            "q_real": self.q_imag_rel <= real_tol,
            "gram_psd": self.gram_min >= -psd_tol * self.gram_radius,
            "split_sum": self.split_rel <= split_tol,
            "d_split": max(self.dsplit_rel.values()) <= d_tol,
            "split_psd": all(psd(self.split_min[p], self.split_radius[p]) for p in "+-"),
            "omega_psd": psd(self.omega_min, self.omega_radius),
            "euclid_control": self.euclid_imag_rel >= 1e-3,
        }


def dirac_positivity_suite(rep: CliffordRep, grid: SpacetimeGrid, tests: DiracTestSet, ref_seed: int = 12345) -> DiracSuiteResult:
    """Pauli-Jordan nonnegativity, frequency split and the Dirac two-point form.

    The global phase ``sigma`` is calibrated on one positive-energy reference
    packet so that ``sigma <u|S u>`` is real positive; ``sigma_omega`` is
    calibrated the same way for ``omega_D = i S^-`` on a negative-energy
    packet.  Both phases are applied uniformly to the whole test set.
    """
    check_band_limit(tests)
    P = tests.values.shape[1]
    Sret = dirac_green("ret", rep, grid)
    Sadv = dirac_green("adv", rep, grid)
    S = Sret.with_values(Sret.values - Sadv.values, kind="causal")
    ops = _TorusOps(S, P)
    B = rep.B

    ref_p = random_dirac_tests(grid, 1, ref_seed, size=P, margin=tests.margin, sign=+1)
    ref_m = random_dirac_tests(grid, 1, ref_seed + 1, size=P, margin=tests.margin, sign=-1)
    hp = ops.hat(ref_p.values)
    hm = ops.hat(ref_m.values)
    q_ref = ops.gram(B, hp)[0, 0]
    sigma = _calibrate(q_ref)
    q_ref_minus = ops.gram(B, hp, "-")[0, 0]
    omega_ref = 1j * ops.gram(B, hm, "-")[0, 0]
    sigma_omega = _calibrate(omega_ref)

    uh = ops.hat(tests.values)
    M = sigma * ops.gram(B, uh)
    scale = float(np.max(np.abs(M)))
    q_imag = float(np.max(np.abs(np.diag(M).imag)) / scale)
    gmin, grad = _herm_extremes(M)

    Su = ops.apply(uh)
    split = {p: ops.apply(uh, p) for p in "+-"}
    split_rel = float(np.linalg.norm(split["+"] + split["-"] - Su) / np.linalg.norm(Su))

    dhat = np.einsum("mab,mtk->tkab", rep.gamma, _dirac_symbol(ops.F, grid))
    umax = float(np.max(np.abs(tests.values)))
    dsplit = {}
    for p in "+-":
        DS = np.fft.ifft2(np.einsum("tkab,ntkb->ntka", dhat, split[p]), axes=(1, 2))[:, :P, :P]
        dsplit[p] = float(np.max(np.abs(DS)) / umax)

    smin, srad = {}, {}
    for p in "+-":
        smin[p], srad[p] = _herm_extremes(sigma * ops.gram(B, uh, p))
    Mw = sigma_omega * 1j * ops.gram(B, uh, "-")
    wmin, wrad = _herm_extremes(Mw)

    E = sigma * ops.gram(B, uh, euclid=True)
    e_imag = float(np.max(np.abs(np.diag(E).imag)) / np.max(np.abs(E)))

    return DiracSuiteResult(sigma, sigma_omega, q_imag, gmin, grad, split_rel, dsplit, smin, srad, wmin, wrad,
                            e_imag, float((sigma * q_ref).real), float(abs(q_ref_minus) / abs(q_ref)))


def _dirac_symbol(F: tuple, grid: SpacetimeGrid) -> np.ndarray:
    """Fourier symbol of the centered ``D`` on the torus: ``gamma^mu sin(k_mu h_mu) / h_mu``."""
    kt = 2 * np.pi * np.fft.fftfreq(F[0])
    kx = 2 * np.pi * np.fft.fftfreq(F[1])
    st = np.broadcast_to((np.sin(kt) / grid.dt)[:, None], F)
    sx = np.broadcast_to((np.sin(kx) / grid.dx)[None, :], F)
    return np.array([st, sx])
