"""Command-line front end.

Every subcommand writes its files into ``--out`` (default: the current
directory) and prints a short JSON verdict block on stdout.  Exit status
is 0 when all checks pass, 1 when a check fails and 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import acceptance
from . import dirac as dr
from . import exprconfig as ec
from . import geometry as geo
from . import minkowski_qft as qft
from . import symbols as sy
from . import transport as tr
from . import wf_probe as wf
from .errors import ProplabError
from .report import dumps, emit_report

log = logging.getLogger("proplab")


class UsageError(Exception):
    pass


def _floats(text: str, what: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise UsageError(f"{what}: expected comma-separated numbers, got {text!r}") from None


def _write_csv(path: Path, header: list, rows: np.ndarray) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, rows, delimiter=",", header=",".join(header), comments="", fmt="%.12e", encoding="utf-8")
    return path


def _emit(args, block: dict, passed: bool) -> int:
    block = dict(block, ok=bool(passed))
    text = dumps(block)
    sys.stdout.write(text)
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{args.command}.json").write_text(text, encoding="utf-8")
    return 0 if passed else 1


def _out_dir(args) -> Path:
    return Path(args.out) if args.out is not None else Path(".")


def _config(args):
    return ec.load_config(args.config) if args.config else None


def _chart(args):
    cfg = _config(args)
    if cfg is not None:
        return geo.chart_from_config(cfg), cfg
    try:
        return geo.named_chart(args.chart, args.dim), None
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_flow(args) -> int:
    chart, _ = _chart(args)
    xi = _floats(args.xi, "--xi")
    x = _floats(args.x, "--x") if args.x else _centre(chart)
    if len(x) != chart.dim or len(xi) != chart.dim:
        raise UsageError(f"--x and --xi need {chart.dim} components")
    curve = geo.flow_bicharacteristic(chart, geo.PhasePoint(x, xi), (0.0, args.smax), samples=np.linspace(0, args.smax, args.num))
    n = chart.dim
    header = ["s"] + [f"x{i}" for i in range(n)] + [f"xi{i}" for i in range(n)] + ["p_drift"]
    path = _write_csv(_out_dir(args) / "flow.csv", header, curve.rows())
    drift = curve.max_drift
    return _emit(args, {"csv": str(path), "max_p_drift": drift, "exited_chart": bool(curve.exited)}, drift <= 1e-9)


def _centre(chart) -> np.ndarray:
    lo, hi = chart.box[:, 0], chart.box[:, 1]
    finite = np.isfinite(lo) & np.isfinite(hi)
    return np.where(finite, 0.5 * (np.where(finite, lo, 0.0) + np.where(finite, hi, 0.0)), 0.0)


def cmd_symbols(args) -> int:
    cfg = _config(args)
    section = dict(cfg.sections.get("symbols", {})) if cfg is not None else {}
    count = int(section.get("count", args.count))
    rng = np.random.default_rng(args.seed)
    rec = acceptance.symbol_identities(rng, count=count)
    print(f"{'identity':<12} {'n':>4} {'max residual':>14}  verdict")
    for kind, d in rec.details.items():
        print(f"{kind:<12} {count:>4} {d['measured']:>14.3e}  {'pass' if d['pass'] else 'FAIL'}")
    rows = np.array([[i, count, d["measured"], float(d["pass"])] for i, d in enumerate(rec.details.values())])
    _write_csv(_out_dir(args) / "symbols.csv", ["identity_index", "count", "max_residual", "pass"], rows)
    return 0 if rec.passed else 1


def cmd_transport(args) -> int:
    chart, cfg = _chart(args)
    if cfg is not None and cfg.connection is not None:
        conn = sy.BundleConnection.from_exprs(cfg.connection, cfg.dim)
        pot = sy.Potential.from_exprs(cfg.potential, cfg.dim) if cfg.potential is not None else None
    elif chart.dim == 2:
        conn, pot = acceptance._frw_connection()
    else:
        conn, pot = sy.BundleConnection.trivial(chart.dim, 1), None
    op = sy.weitzenbock_assemble(chart, conn, pot)
    x = _floats(args.x, "--x") if args.x else _centre(chart)
    xi = _floats(args.xi, "--xi")
    s = np.linspace(0.0, args.smax, args.num)
    c = geo.flow_bicharacteristic(chart, geo.PhasePoint(x, xi), (0.0, args.smax), samples=s)
    eye = np.eye(conn.rank, dtype=complex)
    a = tr.transport_symbol(tr.TransportProblem(c.s, tr.subprincipal_along(sy.subprincipal(op, chart), c), eye))
    v = tr.parallel_transport(conn, tr.CurvePath.from_bicharacteristic(c), eye)
    N = conn.rank
    header = ["s"]
    cols = [c.s]
    for name, arr in (("a", a), ("v", v)):
        for i in range(N):
            for j in range(N):
                header += [f"{name}{i}{j}_re", f"{name}{i}{j}_im"]
                cols += [arr[:, i, j].real, arr[:, i, j].imag]
    path = _write_csv(_out_dir(args) / "transport.csv", header, np.column_stack(cols))
    diff = float(np.max(np.abs(a - v)))
    return _emit(args, {"csv": str(path), "max_transport_minus_parallel": diff}, diff <= 1e-8)


def cmd_model(args) -> int:
    rec = acceptance.model_positivity(np.random.default_rng(args.seed), count=args.n)
    block = {"min_positivity_over_scale": rec.measured, "checks": rec.details}
    print(f"min positivity_form / scale = {rec.measured:.3e}  {'pass' if rec.passed else 'FAIL'}", file=sys.stderr)
    return _emit(args, block, rec.passed)


def _grid(args) -> qft.SpacetimeGrid:
    try:
        g = qft.SpacetimeGrid.default(args.n, args.L, args.cfl)
        g.check_cfl()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return g


def cmd_qft(args) -> int:
    grid = _grid(args)
    out = _out_dir(args)
    if args.qft_command == "gram":
        W = qft.kg_wightman(args.m, grid)
        tests = qft.random_tests(grid, args.count, args.seed)
        g = qft.gram_positivity(W, tests)
        bis = qft.bisolution_residual(W)
        block = {"min_eig": g.min_eig, "spectral_radius": g.spectral_radius,
                 "residuals": {"hermiticity": g.hermiticity_defect, "bisolution": bis}}
        return _emit(args, block, g.passes() and bis <= 1e-3)
    if args.qft_command == "green":
        K = qft.kg_green(args.kind, args.m, grid)
    elif args.qft_command == "feynman":
        K = qft.kg_feynman(args.m, args.eps, grid)
    else:
        K = qft.kg_wightman(args.m, grid)
    path = _write_csv(out / f"{args.qft_command}.csv", ["t", "x", "re", "im"], K.rows())
    block = {"csv": str(path), "kind": K.kind, "m": args.m}
    ok = True
    if args.qft_command in ("green", "feynman"):
        r = qft.delta_residual(K)
        block["residuals"] = {"source_rel_error": r.source_rel_error, "off_source_rel": r.off_source_rel}
        ok = r.off_source_rel <= 1e-3
    return _emit(args, block, ok)


def cmd_dirac(args) -> int:
    if args.dirac_command == "clifford":
        try:
            rep = dr.build_clifford(args.n)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        d = rep.anticommutator_defect()
        return _emit(args, {"n": args.n, "anticommutator_defect": d, "size": rep.N}, d == 0.0)
    if args.dirac_command == "beta":
        N = _floats(args.N, "--N")
        try:
            rep = dr.build_clifford(len(N))
            b = dr.beta_form(rep, N)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        q = float(N @ rep.metric @ N)
        kind = "timelike" if q < 0 else ("spacelike" if q > 0 else "null")
        future = bool(N[0] > 0)
        expect_pd = kind == "timelike" and future
        ok = b.positive_definite if expect_pd else (not b.positive_definite)
        block = {"N": N.tolist(), "causal_type": kind, "eigenvalues": b.eigenvalues.tolist(),
                 "positive_definite": b.positive_definite, "indefinite": b.indefinite}
        return _emit(args, block, ok)
    grid = qft.SpacetimeGrid.default(args.n, args.L)
    rep = dr.build_clifford(2)
    tests = dr.random_dirac_tests(grid, args.count, args.seed)
    res = dr.dirac_positivity_suite(rep, grid, tests)
    verdicts = res.verdicts()
    block = {"sigma": str(res.sigma), "sigma_omega": str(res.sigma_omega), "q_imag_rel": res.q_imag_rel,
             "gram_min": res.gram_min, "gram_radius": res.gram_radius, "omega_min": res.omega_min,
             "omega_radius": res.omega_radius, "d_split": res.dsplit_rel, "verdicts": verdicts}
    return _emit(args, block, all(verdicts.values()))


def read_kernel_csv(path) -> tuple:
    """Read a ``t, x, re, im`` CSV into ``(t, x, values)`` on its tensor grid."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] < 3:
        raise UsageError(f"{path}: expected columns t, x, re[, im]")
    t = np.unique(data[:, 0])
    x = np.unique(data[:, 1])
    if len(t) * len(x) != len(data):
        raise UsageError(f"{path}: samples do not form a full tensor grid")
    order = np.lexsort((data[:, 1], data[:, 0]))
    vals = data[order, 2] + (1j * data[order, 3] if data.shape[1] > 3 else 0)
    return t, x, vals.reshape(len(t), len(x))


def cmd_probe(args) -> int:
    t, x, u = read_kernel_csv(args.input)
    point = tuple(_floats(args.point, "--point"))
    if len(point) != 2:
        raise UsageError("--point needs t,x")
    h = max(t[1] - t[0], x[1] - x[0])
    try:
        prof = wf.decay_exponents(u, t, x, point, sigma=args.sigma * h, field_scale=float(np.max(np.abs(u))))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    path = _write_csv(_out_dir(args) / "probe.csv", ["theta", "alpha", "r2", "flagged"], prof.rows())
    flags = wf.singular_set(prof)
    block = {"csv": str(path), "flagged": list(flags.indices), "low_confidence": list(flags.low_confidence)}
    return _emit(args, block, True)


def cmd_suite(args) -> int:
    cfg = json.loads(Path(args.config).read_text(encoding="utf-8")) if args.config else {}
    only = args.only.split(",") if args.only else None
    if only and set(only) - set(acceptance.CRITERIA):
        raise UsageError(f"unknown criteria {sorted(set(only) - set(acceptance.CRITERIA))}")
    report = acceptance.run_suite(args.seed, only=only, config=cfg)
    for rec in report.records:
        print(f"{'PASS' if rec.passed else 'FAIL'}  {rec.name:<22} measured={rec.measured:.3e}  ({rec.budget})")
    target = emit_report(report, _out_dir(args))
    print(f"report: {target}")
    return 0 if report.passed else 1


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--seed", type=int, default=42)
    common.add_argument("--config", default=None, help="JSON configuration file")

    p = argparse.ArgumentParser(prog="proplab", description="Microlocal propagator experiments at desk scale.")
    p.add_argument("--version", action="version", version=f"proplab {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("flow", parents=[common], help="integrate a null bicharacteristic")
    f.add_argument("--chart", default="minkowski", help="minkowski or frw:a=<expr>")
    f.add_argument("--dim", type=int, default=2)
    f.add_argument("--x", default=None, help="base point, comma separated (default: chart centre)")
    f.add_argument("--xi", required=True, help="covector, comma separated")
    f.add_argument("--smax", type=float, default=10.0)
    f.add_argument("--num", type=int, default=201)
    f.set_defaults(func=cmd_flow)

    s = sub.add_parser("symbols", parents=[common], help="symbol-calculus identities")
    s.add_argument("action", choices=["check"])
    s.add_argument("--count", type=int, default=20)
    s.set_defaults(func=cmd_symbols)

    t = sub.add_parser("transport", parents=[common], help="transport vs parallel transport along a bicharacteristic")
    t.add_argument("--chart", default="frw:a=exp(x0)")
    t.add_argument("--dim", type=int, default=2)
    t.add_argument("--x", default=None)
    t.add_argument("--xi", default="1,1")
    t.add_argument("--smax", type=float, default=0.3)
    t.add_argument("--num", type=int, default=301)
    t.set_defaults(func=cmd_transport)

    m = sub.add_parser("model", parents=[common], help="model-space positivity")
    m.add_argument("action", choices=["positivity"])
    m.add_argument("--n", type=int, default=10_000)
    m.set_defaults(func=cmd_model)

    q = sub.add_parser("qft", help="Klein-Gordon kernels on 1+1 Minkowski space")
    qs = q.add_subparsers(dest="qft_command", required=True)
    for name in ("green", "feynman", "wightman", "gram"):
        qq = qs.add_parser(name, parents=[common])
        qq.add_argument("--m", type=float, default=1.0)
        qq.add_argument("--n", type=int, default=256, help="half-width in cells")
        qq.add_argument("--L", type=float, default=8.0)
        qq.add_argument("--cfl", type=float, default=qft.CFL_MAX)
        if name == "green":
            qq.add_argument("--kind", choices=["ret", "adv"], default="ret")
        if name == "feynman":
            qq.add_argument("--eps", type=float, default=0.05)
        if name == "gram":
            qq.add_argument("--count", type=int, default=20)
        qq.set_defaults(func=cmd_qft, command="qft")

    d = sub.add_parser("dirac", help="Dirac-type operators")
    ds = d.add_subparsers(dest="dirac_command", required=True)
    dc = ds.add_parser("clifford", parents=[common])
    dc.add_argument("--n", type=int, default=4)
    db = ds.add_parser("beta", parents=[common])
    db.add_argument("--N", required=True, help="vector components t0,...")
    dsu = ds.add_parser("suite", parents=[common])
    dsu.add_argument("--n", type=int, default=128)
    dsu.add_argument("--L", type=float, default=8.0)
    dsu.add_argument("--count", type=int, default=20)
    for sp in (dc, db, dsu):
        sp.set_defaults(func=cmd_dirac, command="dirac")

    pr = sub.add_parser("probe", help="numerical wavefront probe")
    prs = pr.add_subparsers(dest="probe_command", required=True)
    pw = prs.add_parser("wf", parents=[common])
    pw.add_argument("--input", required=True, help="kernel CSV with columns t, x, re, im")
    pw.add_argument("--point", required=True, help="t,x")
    pw.add_argument("--sigma", type=float, default=8.0, help="window width in cells")
    pw.set_defaults(func=cmd_probe, command="probe")

    su = sub.add_parser("suite", parents=[common], help="acceptance suite")
    su.add_argument("action", choices=["acceptance"])
    su.add_argument("--only", default=None, help="comma-separated subset of criteria")
    su.set_defaults(func=cmd_suite)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse prints usage itself
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ProplabError, ValueError, OSError) as exc:
        parser.print_usage(sys.stderr)
        print(f"proplab: error: {exc}", file=sys.stderr)
        return 2


execute = main

if __name__ == "__main__":
    sys.exit(main())
