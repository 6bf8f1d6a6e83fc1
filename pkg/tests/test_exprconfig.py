import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from proplab import exprconfig as ec
from proplab.errors import ConfigError, DomainError, ExprSyntaxError, UnknownIdentifier

# frozen with the standard-library calculator
EXP_RATIO = 0.9110594001952544  # exp(2*0.3)/2
DEXP = 5.466356401171526  # 3*exp(0.6)
LOG2 = 0.6931471805599453


class TestParse:
    def test_tree_shape(self):
        e = ec.parse_expression("x0^2 * sin(x1)")
        assert ec.describe(e) == "Mul(Pow(x0,2),Sin(x1))"

    def test_unary_minus(self):
        e = ec.parse_expression("-x0 + 1")
        assert ec.describe(e) == "Add(Neg(x0),1.0)"
        assert ec.evaluate(e, [0.5]) == 0.5

    def test_exp_division(self):
        e = ec.parse_expression("exp(2*x1)/x2")
        assert ec.evaluate(e, [0.0, 0.3, 2.0]) == pytest.approx(EXP_RATIO, rel=1e-14)

    @pytest.mark.parametrize("text", ["", "   ", "x0 +", "(x0", "x0)", "sin x0", "2 ** 3", "x0^1.5", "x0^x1",
                                      "1e", "@", "x0 x1"])
    def test_malformed(self, text):
        with pytest.raises(ExprSyntaxError) as info:
            ec.parse_expression(text)
        assert info.value.offset >= 0

    @pytest.mark.parametrize("text", ["y0", "x4", "foo(x0)", "abs(x0)"])
    def test_unknown_identifier(self, text):
        with pytest.raises(UnknownIdentifier):
            ec.parse_expression(text)

    def test_offset_points_at_problem(self):
        with pytest.raises(ExprSyntaxError) as info:
            ec.parse_expression("x0 + * 2")
        assert info.value.offset == 5

    def test_non_ascii(self):
        with pytest.raises(ExprSyntaxError):
            ec.parse_expression("x0 + é")

    def test_precedence_and_associativity(self):
        assert ec.evaluate(ec.parse_expression("2 - 3 - 4"), []) == -5.0
        assert ec.evaluate(ec.parse_expression("2^3^2"), []) == 2.0 ** 9
        assert ec.evaluate(ec.parse_expression("-2^2"), []) == -4.0
        assert ec.evaluate(ec.parse_expression("8 / 4 / 2"), []) == 1.0


class TestEvaluate:
    def test_constant(self):
        assert ec.evaluate(ec.parse_expression("1"), [3.0, 4.0]) == 1.0

    def test_cancellation(self):
        assert ec.evaluate(ec.parse_expression("x0 - x0"), [7.3]) == 0.0

    def test_log(self):
        assert ec.evaluate(ec.parse_expression("log(x0)"), [2.0]) == pytest.approx(LOG2, rel=1e-15)

    @pytest.mark.parametrize("text, x", [("log(x0)", -1.0), ("log(x0)", 0.0), ("sqrt(x0)", -2.0),
                                         ("1/x0", 0.0), ("x0^(-2)", 0.0)])
    def test_domain_errors(self, text, x):
        with pytest.raises(DomainError):
            ec.evaluate(ec.parse_expression(text), [x])

    def test_overflow_warns(self):
        with pytest.warns(ec.NonFiniteWarning):
            ec.evaluate(ec.parse_expression("exp(x0)"), [1000.0])

    def test_vectorised(self):
        e = ec.parse_expression("x0*cos(x1)")
        a = np.linspace(0, 1, 7)
        b = np.linspace(-1, 2, 7)
        np.testing.assert_array_equal(ec.evaluate(e, [a, b]), a * np.cos(b))

    def test_missing_coordinate(self):
        with pytest.raises(ValueError):
            ec.evaluate(ec.parse_expression("x2"), [1.0])


class TestDifferentiate:
    def test_power(self):
        d = ec.differentiate(ec.parse_expression("x0^2"), 0)
        assert ec.describe(d) == "Mul(2.0,x0)"

    def test_product_with_constant_factor(self):
        d = ec.differentiate(ec.parse_expression("sin(x1)*x0"), "x1")
        assert ec.describe(d) == "Mul(Cos(x1),x0)"

    def test_exp_chain(self):
        d = ec.differentiate(ec.parse_expression("exp(x0*x1)"), 0)
        assert ec.evaluate(d, [0.2, 3.0]) == pytest.approx(DEXP, rel=1e-12)

    def test_unused_variable_folds_to_zero(self):
        assert ec.differentiate(ec.parse_expression("sin(x0)"), 1) == ec.Num(0.0)


# ---------------------------------------------------------------------------
# random expression corpus
# ---------------------------------------------------------------------------

def _random_expr(rng, depth=3):
    if depth == 0 or rng.random() < 0.25:
        if rng.random() < 0.6:
            return f"x{rng.integers(3)}"
        return f"{rng.uniform(0.1, 2.0):.3f}"
    r = rng.random()
    if r < 0.45:
        op = rng.choice(["+", "-", "*"])
        return f"({_random_expr(rng, depth - 1)} {op} {_random_expr(rng, depth - 1)})"
    if r < 0.6:
        return f"({_random_expr(rng, depth - 1)})^{rng.integers(0, 4)}"
    if r < 0.7:
        return f"-{_random_expr(rng, depth - 1)}"
    return f"{rng.choice(['sin', 'cos', 'tanh', 'exp'])}({_random_expr(rng, depth - 1)} * 0.3)"


CORPUS = [_random_expr(np.random.default_rng(k)) for k in range(50)]


@pytest.mark.parametrize("k", range(len(CORPUS)))
def test_derivative_matches_finite_differences(k):
    e = ec.parse_expression(CORPUS[k])
    rng = np.random.default_rng(100 + k)
    for _ in range(5):
        x = rng.uniform(-1, 1, 3)
        for v in range(3):
            h = 1e-5 * (1 + abs(x[v]))
            xp, xm = x.copy(), x.copy()
            xp[v] += h
            xm[v] -= h
            fd = (ec.evaluate(e, xp) - ec.evaluate(e, xm)) / (2 * h)
            exact = ec.evaluate(ec.differentiate(e, v), x)
            assert abs(exact - fd) <= 1e-6 * max(1.0, abs(exact))


@pytest.mark.parametrize("text", CORPUS)
def test_pretty_round_trip_bit_exact(text):
    e = ec.parse_expression(text)
    again = ec.parse_expression(ec.pretty(e))
    pts = np.random.default_rng(1).uniform(-2, 2, size=(3, 100))
    np.testing.assert_array_equal(ec.evaluate(e, pts), ec.evaluate(again, pts))


@given(st.binary(max_size=40))
@settings(max_examples=2000)
def test_parser_total_on_bytes(data):
    try:
        ec.parse_expression(data)
    except ExprSyntaxError:
        pass


@given(st.text(alphabet="x0123^+-*/() .esincoaplgqrth", max_size=30))
@settings(max_examples=2000)
def test_parser_total_on_grammar_alphabet(text):
    try:
        e = ec.parse_expression(text)
    except ExprSyntaxError:
        return
    assert ec.parse_expression(ec.pretty(e)) is not None


def test_parser_total_bulk_fuzz():
    rng = np.random.default_rng(7)
    alphabet = np.frombuffer(b"x0123^+-*/() .,esincolgqrtah\x00\xff", dtype=np.uint8)
    for _ in range(100_000):
        raw = bytes(rng.choice(alphabet, size=rng.integers(0, 16)))
        try:
            ec.parse_expression(raw)
        except ExprSyntaxError:
            pass


@given(st.floats(-1e6, 1e6, allow_nan=False), st.floats(-1e6, 1e6, allow_nan=False))
def test_pretty_preserves_literals(a, b):
    e = ec.add(ec.num(a), ec.mul(ec.num(b), ec.Var(0)))
    again = ec.parse_expression(ec.pretty(e))
    assert ec.evaluate(e, [1.5]) == ec.evaluate(again, [1.5])


# ---------------------------------------------------------------------------
# configuration documents
# ---------------------------------------------------------------------------

FRW_DOC = {"dim": 2, "metric": [["-1", "0"], ["0", "exp(2*x0)"]], "rank": 2,
           "connection": [[["0", ["0", "1"]], [["0", "-1"], "0"]], [["x0", "0"], ["0", "0"]]],
           "potential": [["1", "0"], ["0", "2"]], "box": [[-1, 1], [-5, 5]], "experiment": {"count": 3}}


def test_load_config_from_mapping_and_text(tmp_path):
    cfg = ec.load_config(FRW_DOC)
    assert cfg.dim == 2 and cfg.rank == 2
    assert cfg.sections == {"experiment": {"count": 3}}
    p = tmp_path / "c.json"
    p.write_text(json.dumps(FRW_DOC))
    assert ec.load_config(p).digest == cfg.digest
    assert ec.load_config(json.dumps(FRW_DOC)).digest == cfg.digest


@pytest.mark.parametrize("patch", [
    {"dim": 7},
    {"metric": [["-1", "x0"], ["0", "1"]]},
    {"metric": [["-1", "0"]]},
    {"metric": [["-1", "0"], ["0", "x0 +"]]},
    {"rank": 0},
    {"box": [[1, -1], [0, 1]]},
    {"time_orientation": [1, 0, 0]},
    {"connection": [[["0"]]]},
])
def test_load_config_rejects(patch):
    doc = dict(FRW_DOC, **patch)
    with pytest.raises(ConfigError):
        ec.load_config(doc)


def test_load_config_not_json():
    with pytest.raises(ConfigError):
        ec.load_config("{not json")


def test_expr_array_grad_matches_differentiate():
    arr = ec.ExprArray([["x0*x1", "sin(x0)"], ["exp(x1)", "1"]], 2, ndim=2)
    x = np.array([0.3, -0.7])
    g = arr.grad(x)
    assert g.shape[0] == 2
    assert g[0, 0, 1] == pytest.approx(math.cos(0.3))
    assert g[1, 1, 0] == pytest.approx(math.exp(-0.7))


def test_evaluate_does_not_warn_on_finite():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        ec.evaluate(ec.parse_expression("tanh(x0)"), [3.0])


def test_expr_array_pair_leaves_are_complex():
    arr = ec.ExprArray([["x0", "1"], ["0", "2"]], 1)
    assert arr.shape == (2,)
    np.testing.assert_allclose(arr.value([0.5]), [0.5 + 1j, 2j])
