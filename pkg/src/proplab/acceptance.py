"""The one-shot acceptance suite.

Ten criteria, each producing exactly one :class:`~proplab.report.CheckRecord`.
All random corpora derive from a single seed: criterion ``i`` draws from the
``i``-th child of ``SeedSequence(seed)``, so verdicts do not depend on the
order (or concurrency) in which criteria run.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from scipy.linalg import expm
from scipy.special import k0

from . import __version__
from . import dirac as dr
from . import geometry as geo
from . import minkowski_qft as qft
from . import model_space as ms
from . import symbols as sy
from . import transport as tr
from . import wf_probe as wf
from .report import CheckRecord, RunReport, config_hash, sub_check

CRITERIA = (
    "null_conservation",
    "compatibility",
    "symbol_identities",
    "duhamel",
    "model_positivity",
    "transport_parallel",
    "kg_kernels",
    "hadamard_positivity",
    "wavefront",
    "dirac",
)

RUNTIME_BUDGETS = {
    "null_conservation": 10.0,
    "compatibility": 5.0,
    "symbol_identities": 10.0,
    "model_positivity": 30.0,
    "kg_kernels": 60.0,
    "dirac": 60.0,
}

HEADER = {
    "operator_convention": qft.SIGN_CONVENTION,
    "hamilton_field": "xdot^nu = 2 g^{nu mu} xi_mu, xidot_a = -d_a g^{mu nu} xi_mu xi_nu",
    "dirac_pairing": "<u|v> = (B u)^H v, B = i gamma^0, D = -i gamma^mu d_mu",
}


def _all(details: dict) -> bool:
    return all(v["pass"] for v in details.values())


def _frw_connection():
    conn = sy.BundleConnection.from_exprs(
        [[["0.3*x1", ["0.1", "0.2*x0"]], [["0.1", "-0.2*x0"], "sin(x0)"]],
         [["x0*x1", ["0", "0.5"]], [["0", "-0.5"], "cos(x1)"]]], 2)
    pot = sy.Potential.from_exprs([["1+x0^2", ["0.1", "0"]], [["0.1", "0"], "2"]], 2)
    return conn, pot


# ---------------------------------------------------------------------------
# 1
# ---------------------------------------------------------------------------

def null_conservation(rng) -> CheckRecord:
    details = {}
    charts = {"minkowski": (geo.minkowski(2), "any"), "frw": (geo.frw(), "future")}
    worst_all = 0.0
    for name, (chart, orient) in charts.items():
        x0 = chart.sample_points(100, rng)
        xi0 = geo.random_null_covectors(chart, x0, rng, orientation=orient)
        s, x, xi, inside = geo.flow_many(chart, x0, xi0, (0.0, 10.0), num=201)
        drift = 0.0
        for i in range(len(x0)):
            ginv = np.linalg.inv(np.moveaxis(chart.g(x[i].T), -1, 0))
            p = np.einsum("km,kmn,kn->k", xi[i], ginv, xi[i])
            norm = float(xi0[i] @ xi0[i])
            drift = max(drift, float(np.max(np.abs(p))) / norm)
        worst_all = max(worst_all, drift)
        details[name] = sub_check(drift, "<= 1e-9 |xi|^2", drift <= 1e-9)
        details[name + "_fraction_inside_box"] = float(np.mean(inside[:, -1]))
    passed = all(v["pass"] for k, v in details.items() if isinstance(v, dict))
    return CheckRecord("null_conservation", "max |p| drift <= 1e-9 |xi|^2 over s in [0, 10]", worst_all, passed, details)


# ---------------------------------------------------------------------------
# 2
# ---------------------------------------------------------------------------

def compatibility(rng) -> CheckRecord:
    chart = geo.frw()
    conn, pot = _frw_connection()
    op = sy.weitzenbock_assemble(chart, conn, pot)
    x = chart.sample_points(100, rng) * 0.8
    xi = geo.random_null_covectors(chart, x, rng)
    pts = [geo.PhasePoint(a, b) for a, b in zip(x, xi)]
    res = float(np.max(sy.compatibility_residual(op, conn, chart, pts)))

    def delta(_x):
        return np.array([[[1, 0], [0, 0]], [[0, 1j], [-1j, 0]]])

    pert = float(np.min(sy.compatibility_residual(op, conn.perturbed(1e-2, delta), chart, pts)))
    ratio = pert / max(res, 1e-300)
    details = {"residual": sub_check(res, "<= 1e-8", res <= 1e-8),
               "perturbation_ratio": sub_check(ratio, ">= 1e3", ratio >= 1e3)}
    return CheckRecord("compatibility", "residual <= 1e-8; 1e-2 perturbation raises it >= 1e3 x", res, _all(details),
                       details)


# ---------------------------------------------------------------------------
# 3
# ---------------------------------------------------------------------------

def _egorov_map(x, xi):
    return x + 0.1 * np.sin(x[::-1]), 1.5 * xi


def symbol_identities(rng, count: int = 20) -> CheckRecord:
    details = {}
    for kind in sy.IDENTITY_KINDS:
        worst = 0.0
        for _ in range(count):
            kw = {}
            if kind == "product":
                P, Q = sy.random_polynomial_symbol(rng), sy.random_polynomial_symbol(rng)
            elif kind == "commutator":
                P, Q = sy.random_polynomial_symbol(rng, scalar_principal=True), sy.random_polynomial_symbol(rng)
            elif kind == "inverse":
                P, Q = sy.random_polynomial_symbol(rng, elliptic=True), None
            else:
                P, Q = sy.random_polynomial_symbol(rng, scalar_principal=True), None
            if kind == "egorov":
                kw = dict(kappa=_egorov_map, A=sy.random_polynomial_symbol(rng, degree=1),
                          B=sy.random_polynomial_symbol(rng, degree=1))
            cloud = sy.sample_cloud(2, 100, rng)
            worst = max(worst, sy.verify_identity(kind, P, Q, k=3, cloud=cloud, **kw))
        details[kind] = sub_check(worst, "<= 1e-6", worst <= 1e-6)
    worst = max(v["measured"] for v in details.values())
    return CheckRecord("symbol_identities", "max residual <= 1e-6 over 20 instances per identity", worst,
                       _all(details), details)


# ---------------------------------------------------------------------------
# 4
# ---------------------------------------------------------------------------

def _random_matrix(rng, n=2):
    return rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))


def duhamel(rng, count: int = 10) -> CheckRecord:
    y = np.linspace(0.0, 1.0, 20001)
    worst = {0: 0.0, 1: 0.0, 2: 0.0}
    for _ in range(count):
        Q0, Q1, Q2 = (0.5 * _random_matrix(rng) for _ in range(3))
        R = [(_random_matrix(rng), _random_matrix(rng), rng.uniform(1, 4)) for _ in range(2)]

        def q(t, Q0=Q0, Q1=Q1, Q2=Q2):
            return Q0 + t * Q1 + np.sin(2 * t) * Q2

        b0 = tr.model_duhamel(q, None, y)
        worst[0] = max(worst[0], tr.duhamel_residual(q, None, y, b0))
        for k, (A, B, w) in enumerate(R, start=1):
            def r(t, A=A, B=B, w=w):
                return A + np.cos(w * t) * B

            bk = tr.model_duhamel(q, r, y, k, b0)
            worst[k] = max(worst[k], tr.duhamel_residual(q, r, y, bk))
    Qc = 0.5 * _random_matrix(rng)
    const = float(np.max(np.abs(tr.model_duhamel(lambda t: Qc, None, y[::100]) - tr.constant_q_reference(Qc, y[::100]))))
    details = {f"k{k}": sub_check(v, "<= 1e-7", v <= 1e-7) for k, v in worst.items()}
    details["constant_q"] = sub_check(const, "<= 1e-10", const <= 1e-10)
    return CheckRecord("duhamel", "ODE residual <= 1e-7 for k = 0, 1, 2; constant q vs expm <= 1e-10",
                       max(worst.values()), _all(details), details)


# ---------------------------------------------------------------------------
# 5
# ---------------------------------------------------------------------------

def model_positivity(rng, count: int = 10_000) -> CheckRecord:
    min_rel = np.inf
    cross = 0.0
    feyn = np.inf
    for _ in range(count):
        u = ms.random_section(rng)
        scale = float(np.sum(np.abs(u.values) ** 2) * u.h[0] * u.h[1])
        p = ms.positivity_form(u)
        min_rel = min(min_rel, p / scale)
        b = ms.causal_bilinear(u)
        cross = max(cross, abs(b - p) / max(abs(p), scale))
        v = np.sum(u.values, axis=0) * u.h[0]
        nv = float(np.sum(np.abs(v) ** 2) * u.h[1])
        feyn = min(feyn, ms.model_feynman_positivity(u) / nv)
    details = {"positivity_min_over_scale": sub_check(min_rel, ">= -1e-14", min_rel >= -1e-14),
               "bilinear_crosscheck": sub_check(cross, "<= 1e-12", cross <= 1e-12),
               "feynman_min_over_norm": sub_check(feyn, ">= -1e-10", feyn >= -1e-10)}
    return CheckRecord("model_positivity", "positivity_form >= -1e-14 scale over 1e4 sections", min_rel, _all(details),
                       details)


# ---------------------------------------------------------------------------
# 6
# ---------------------------------------------------------------------------

def transport_parallel(rng, count: int = 20) -> CheckRecord:
    chart = geo.frw()
    conn, _ = _frw_connection()
    op = sy.weitzenbock_assemble(chart, conn)
    sub = sy.subprincipal(op, chart)
    worst = 0.0
    eye = np.eye(2, dtype=complex)
    for _ in range(count):
        x = rng.uniform(-0.3, 0.3, size=(1, 2))
        xi = geo.random_null_covectors(chart, x, rng, orientation="future")[0]
        c = geo.flow_bicharacteristic(chart, geo.PhasePoint(x[0], xi), (0.0, 0.3), num=301)
        a = tr.transport_symbol(tr.TransportProblem(c.s, tr.subprincipal_along(sub, c), eye))
        v = tr.parallel_transport(conn, tr.CurvePath.from_bicharacteristic(c), eye)
        worst = max(worst, float(np.max(np.abs(a - v))))
    details = {"max_difference": sub_check(worst, "<= 1e-8", worst <= 1e-8)}
    return CheckRecord("transport_parallel", "transport (f = 0) vs parallel transport <= 1e-8 on 20 segments", worst,
                       worst <= 1e-8, details)


# ---------------------------------------------------------------------------
# 7
# ---------------------------------------------------------------------------

PLATEAU_PROBES = ((2.0, 0.0), (4.0, 1.0), (6.0, -3.0), (7.0, 5.0), (3.0, 2.0))


def kg_kernels(rng, grid: qft.SpacetimeGrid | None = None) -> CheckRecord:
    grid = grid or qft.SpacetimeGrid.default()
    G0 = qft.kg_green("ret", 0.0, grid)
    smooth = qft.lattice_smooth(G0.values)
    plateau = max(abs(smooth[grid.index(t, x)] - 0.5) / 0.5 for t, x in PLATEAU_PROBES)
    GF = qft.kg_feynman(1.0, 0.05, grid)
    bessel = 0.0
    for r in np.linspace(0.5, 3.0, 11):
        v = GF.at(0.0, r)
        ref = k0(r) / (2 * np.pi)
        bessel = max(bessel, abs((-1j * v).real - ref) / ref)
    res = {kind: qft.delta_residual(k) for kind, k in
           (("ret_massless", G0), ("ret_m1", qft.kg_green("ret", 1.0, grid)), ("feynman", GF))}
    details = {"plateau": sub_check(plateau, "<= 2%", plateau <= 0.02),
               "feynman_vs_k0": sub_check(bessel, "<= 2%", bessel <= 0.02)}
    for name, r in res.items():
        details[f"residual_{name}_source"] = sub_check(r.source_rel_error, "<= 5%", r.source_rel_error <= 0.05)
        details[f"residual_{name}_off_source"] = sub_check(r.off_source_rel, "<= 1e-3 peak", r.off_source_rel <= 1e-3)
    return CheckRecord("kg_kernels", "plateau and K0 within 2%; (box + m^2) residual <= 1e-3 peak off source",
                       max(plateau, bessel), _all(details), details)


# ---------------------------------------------------------------------------
# 8
# ---------------------------------------------------------------------------

def hadamard_positivity(rng, grid: qft.SpacetimeGrid | None = None) -> CheckRecord:
    grid = grid or qft.SpacetimeGrid.default()
    W = qft.kg_wightman(1.0, grid)
    tests = qft.random_tests(grid, 20, int(rng.integers(2 ** 31)))
    g = qft.gram_positivity(W, tests)
    GF = qft.kg_feynman(1.0, 0.05, grid)
    Gadv = qft.kg_green("adv", 1.0, grid)
    cons = qft.feynman_consistency(GF, Gadv, W)
    bis = qft.bisolution_residual(W)
    details = {"gram_min_over_radius": sub_check(g.ratio, ">= -1e-6", g.passes()),
               "cross_construction_l2": sub_check(cons.l2_rel, "<= 3%", cons.l2_rel <= 0.03),
               "cross_construction_max": cons.max_rel,
               "bisolution": sub_check(bis, "<= 1e-3", bis <= 1e-3)}
    passed = all(v["pass"] for v in details.values() if isinstance(v, dict))
    return CheckRecord("hadamard_positivity", "Gram >= -1e-6 radius; cross-construction <= 3%; bisolution <= 1e-3",
                       g.ratio, passed, details)


# ---------------------------------------------------------------------------
# 9
# ---------------------------------------------------------------------------

CONE_POINTS = ((1.8, 1.8), (3.6, -3.6), (-2.7, 2.7))
OFF_CONE_POINTS = ((3.0, 0.0), (0.0, 4.0), (-4.0, 1.0))
RAY_PARAMETERS = (0.5, 1.0, 1.5, 2.25, 3.0)
OFF_RAY_POINTS = ((3.0, 0.0), (5.0, -1.0), (6.0, 3.0))


def _expected_bins(t0: float, x0: float) -> set:
    s = np.sign(t0 * x0)
    return {wf.nearest_bin((1.0, -s)), wf.nearest_bin((-1.0, s))}


def wavefront(rng, grid: qft.SpacetimeGrid | None = None) -> CheckRecord:
    grid = grid or qft.SpacetimeGrid.default()
    t, x = grid.t, grid.x
    G = qft.kg_green("ret", 0.0, grid).values - qft.kg_green("adv", 0.0, grid).values
    on_ok = []
    for p in CONE_POINTS:
        prof = wf.decay_exponents(G, t, x, p)
        on_ok.append(wf.cone_localized(wf.singular_directions(prof), _expected_bins(*p)))
    off_flags = [len(wf.singular_directions(wf.decay_exponents(G, t, x, p))) for p in OFF_CONE_POINTS]

    GF = qft.kg_feynman(1.0, 0.05, grid).values
    Gadv = qft.kg_green("adv", 1.0, grid).values
    fwd = (2.0, 2.0)
    ratio_f = wf.half_plane_ratio(GF, t, x, fwd)
    ratio_a = wf.half_plane_ratio(Gadv, t, x, (-fwd[0], fwd[1]))

    u = wf.gaussian_datum_wave(grid, 1.5)
    scale = float(np.max(np.abs(u)))
    chart = geo.minkowski(2, box=[(-grid.T, grid.T), (-grid.L, grid.L)])
    seed = geo.PhasePoint(np.array([0.0, 0.0]), np.array([-1.0, 1.0]))
    ray = geo.flow_bicharacteristic(chart, seed, (0.0, max(RAY_PARAMETERS)), samples=np.array(RAY_PARAMETERS))
    jb = wf.nearest_bin(seed.xi)
    on_alpha = [wf.decay_exponents(u, t, x, tuple(p), field_scale=scale).alpha[jb] for p in ray.x]
    off_alpha = [float(np.min(wf.decay_exponents(u, t, x, p, field_scale=scale).alpha)) for p in OFF_RAY_POINTS]
    spread = float(np.max(on_alpha) - np.min(on_alpha))
    gap = float(np.min(off_alpha) - np.max(on_alpha))

    details = {"cone_localized": sub_check(float(sum(on_ok)), "3 of 3", all(on_ok)),
               "off_cone_empty": sub_check(float(max(off_flags)), "0 flagged", max(off_flags) == 0),
               "feynman_ratio": sub_check(ratio_f, ">= 5", ratio_f >= 5),
               "advanced_ratio": sub_check(ratio_a, "<= 2", ratio_a <= 2),
               "ray_spread": sub_check(spread, "< 1", spread < 1),
               "on_off_gap": sub_check(gap, "> 2", gap > 2)}
    return CheckRecord("wavefront", "cone localisation; Feynman asymmetry; propagation dichotomy", ratio_f,
                       _all(details), details)


# ---------------------------------------------------------------------------
# 10
# ---------------------------------------------------------------------------

def dirac(rng, grid: qft.SpacetimeGrid | None = None) -> CheckRecord:
    grid = grid or qft.SpacetimeGrid.default(128)
    details = {}
    for n in (2, 4):
        rep = dr.build_clifford(n)
        defect = rep.anticommutator_defect()
        details[f"clifford_n{n}"] = sub_check(defect, "== 0", defect == 0.0)
        tl = dr.random_cone_vectors(rng, n, 50, "timelike")
        sl = dr.random_cone_vectors(rng, n, 50, "spacelike")
        pd = sum(dr.beta_form(rep, v).positive_definite for v in tl)
        ind = sum(dr.beta_form(rep, v).indefinite for v in sl)
        details[f"beta_n{n}_timelike_pd"] = sub_check(float(pd), "50 of 50", pd == 50)
        details[f"beta_n{n}_spacelike_indefinite"] = sub_check(float(ind), "50 of 50", ind == 50)
    rep = dr.build_clifford(2)
    tests = dr.random_dirac_tests(grid, 20, int(rng.integers(2 ** 31)))
    res = dr.dirac_positivity_suite(rep, grid, tests)
    details["q_real"] = sub_check(res.q_imag_rel, "<= 1e-8 scale", res.q_imag_rel <= 1e-8)
    details["pauli_jordan_gram"] = sub_check(res.gram_min / res.gram_radius, ">= -1e-6", res.gram_min >= -1e-6 * res.gram_radius)
    details["omega_gram"] = sub_check(res.omega_min / res.omega_radius, ">= -1e-6",
                                      res.omega_min >= -1e-6 * res.omega_radius)
    dmax = max(res.dsplit_rel.values())
    details["d_split"] = sub_check(dmax, "<= 1e-3 peak", dmax <= 1e-3)
    details["calibration_sigma"] = str(res.sigma)
    details["calibration_sigma_omega"] = str(res.sigma_omega)
    passed = all(v["pass"] for v in details.values() if isinstance(v, dict))
    return CheckRecord("dirac", "Clifford exact; beta-form 50/50; Pauli-Jordan and omega_D Gram PSD; D S^+- <= 1e-3",
                       res.q_imag_rel, passed, details)


FUNCTIONS = {
    "null_conservation": null_conservation,
    "compatibility": compatibility,
    "symbol_identities": symbol_identities,
    "duhamel": duhamel,
    "model_positivity": model_positivity,
    "transport_parallel": transport_parallel,
    "kg_kernels": kg_kernels,
    "hadamard_positivity": hadamard_positivity,
    "wavefront": wavefront,
    "dirac": dirac,
}


def criterion_rng(seed: int, name: str) -> np.random.Generator:
    """Generator of criterion ``name``: the matching child of ``SeedSequence(seed)``."""
    children = np.random.SeedSequence(seed).spawn(len(CRITERIA))
    return np.random.default_rng(children[CRITERIA.index(name)])


def run_criterion(name: str, seed: int = 42):
    """Run one criterion; returns ``(record, seconds)``."""
    t0 = time.perf_counter()
    rec = FUNCTIONS[name](criterion_rng(seed, name))
    return rec, time.perf_counter() - t0


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("PROPLAB_THREADS", "1")))
    except ValueError:
        return 1


def run_suite(seed: int = 42, only=None, config: dict | None = None, workers: int | None = None) -> RunReport:
    """Run the acceptance criteria (all, or the names in ``only``) into a :class:`RunReport`."""
    names = list(CRITERIA) if only is None else [n for n in CRITERIA if n in set(only)]
    workers = worker_count() if workers is None else workers
    params = {"criteria": names, "config": config or {}}
    report = RunReport(__version__, config_hash(params), seed, header=dict(HEADER))
    t0 = time.perf_counter()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda n: run_criterion(n, seed), names))
    else:
        results = [run_criterion(n, seed) for n in names]
    for name, (rec, secs) in zip(names, results):
        report.records.append(rec)
        budget = RUNTIME_BUDGETS.get(name)
        report.times[name] = {"seconds": secs, "budget": budget, "pass": budget is None or secs <= budget}
    report.times["total"] = {"seconds": time.perf_counter() - t0, "budget": 600.0,
                             "pass": time.perf_counter() - t0 <= 600.0}
    return report
