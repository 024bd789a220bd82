import math

import numpy as np
import pytest

from ulamcert import exprdsl
from ulamcert.exprdsl import (
    Binary,
    Call,
    DomainError,
    EvalError,
    ParseError,
    compile_fn,
    differentiate,
    evaluate,
    parse,
    to_string,
)


def ev(text, allowed, **bindings):
    return evaluate(parse(text, allowed), bindings)


class TestParse:
    def test_bernoulli_rhs_shape(self):
        e = parse("x*z + (x/(1+x^2))*sqrt(z)", ["x", "z"])
        assert isinstance(e.root, Binary) and e.root.op == "+"
        assert isinstance(e.root.right.right, Call)
        assert e.root.right.right.fn == "sqrt"
        # value spot check against a hand evaluation
        assert evaluate(e, {"x": 1.0, "z": 4.0}) == pytest.approx(4.0 + 0.5 * 2.0, abs=1e-15)

    def test_constant_zero(self):
        e = parse("0", ["x"])
        assert isinstance(e.root, exprdsl.Num)
        assert e.root.value == 0.0

    def test_syntax_error_offset(self):
        with pytest.raises(ParseError) as exc:
            parse("x +* z", ["x", "z"])
        assert exc.value.offset == 3

    def test_unknown_identifier(self):
        with pytest.raises(ParseError, match="unknown identifier"):
            parse("x + w", ["x"])

    def test_unknown_function(self):
        with pytest.raises(ParseError, match="unknown function"):
            parse("sinh(x)", ["x"])

    def test_arity_mismatch(self):
        with pytest.raises(ParseError, match="argument"):
            parse("pow(x)", ["x"])
        with pytest.raises(ParseError, match="argument"):
            parse("sqrt(x, x)", ["x"])

    def test_empty_and_trailing(self):
        with pytest.raises(ParseError):
            parse("   ", ["x"])
        with pytest.raises(ParseError, match="trailing"):
            parse("x x", ["x"])

    def test_non_ascii_rejected(self):
        with pytest.raises(ParseError):
            parse("x²", ["x"])

    def test_rejects_non_permitted_variable_names(self):
        with pytest.raises(ValueError):
            parse("t", ["t"])

    def test_precedence(self):
        # ^ above unary minus above * / above + -
        assert ev("-2^2", []) == -4.0
        assert ev("(-2)^2", []) == 4.0
        assert ev("2^-1", []) == 0.5
        assert ev("2^3^2", []) == 512.0  # right associative
        assert ev("8/4/2", []) == 1.0  # left associative
        assert ev("1-2-3", []) == -4.0
        assert ev("2+3*4", []) == 14.0
        assert ev("-x*3", ["x"], x=2.0) == -6.0


class TestEvaluate:
    def test_rational(self):
        assert ev("x/(1+x^2)", ["x"], x=1.0) == pytest.approx(0.5, abs=1e-15)

    def test_sin_difference(self):
        assert ev("sin(y - x)", ["x", "y"], x=0.7, y=0.7) == 0.0

    def test_sqrt_domain_error(self):
        with pytest.raises(DomainError) as exc:
            ev("sqrt(z)", ["z"], z=-1.0)
        assert "sqrt" in exc.value.node_text

    def test_log_domain_error(self):
        with pytest.raises(DomainError):
            ev("log(x)", ["x"], x=0.0)

    def test_division_by_zero(self):
        with pytest.raises(DomainError) as exc:
            ev("1/(x-1)", ["x"], x=1.0)
        assert exc.value.node_text == "1 / (x - 1)"

    def test_unbound_variable(self):
        with pytest.raises(EvalError):
            ev("x + y", ["x", "y"], x=1.0)

    def test_power_semantics(self):
        # integer exponents are sign preserving
        assert ev("z^3", ["z"], z=-2.0) == -8.0
        assert ev("z^2", ["z"], z=-3.0) == 9.0
        # non-integer exponent of non-positive base is a domain error
        with pytest.raises(DomainError):
            ev("z^0.5", ["z"], z=-1.0)
        with pytest.raises(DomainError):
            ev("z^0.5", ["z"], z=0.0)
        assert ev("z^0.5", ["z"], z=4.0) == pytest.approx(2.0, rel=1e-15)
        with pytest.raises(DomainError):
            ev("z^-1", ["z"], z=0.0)

    def test_overflow_is_domain_error(self):
        with pytest.raises(DomainError):
            ev("exp(x)", ["x"], x=1e6)

    def test_purity_bit_identical(self):
        e = parse("sin(x)*exp(x/3) + x^0.5 - tanh(x)", ["x"])
        vals = [evaluate(e, {"x": 1.234567}) for _ in range(5)]
        assert all(v == vals[0] for v in vals)


class TestDifferentiate:
    def test_power_rule(self):
        d = differentiate(parse("z^2", ["z"]), "z")
        assert evaluate(d, {"z": 3.0}) == 6.0
        assert to_string(d).replace(" ", "") in ("2*z", "2*z^1", "z*2")

    def test_sqrt_derivative_matches_fd(self):
        e = parse("sqrt(z)", ["z"])
        d = differentiate(e, "z")
        assert evaluate(d, {"z": 4.0}) == pytest.approx(0.25, rel=1e-12)
        h = 1e-5
        fd = (evaluate(e, {"z": 4 + h}) - evaluate(e, {"z": 4 - h})) / (2 * h)
        assert evaluate(d, {"z": 4.0}) == pytest.approx(fd, rel=1e-8)

    def test_constant_rule(self):
        d = differentiate(parse("3.5", ["x"]), "x")
        assert evaluate(d, {"x": 0.3}) == 0.0

    def test_var_requirement(self):
        with pytest.raises(ValueError):
            differentiate(parse("x", ["x"]), "z")

    def test_abs_derivative(self):
        d = differentiate(parse("abs(x)", ["x"]), "x")
        assert evaluate(d, {"x": 2.5}) == 1.0
        assert evaluate(d, {"x": -2.5}) == -1.0
        with pytest.raises(DomainError):
            evaluate(d, {"x": 0.0})

    # every supported node type, checked against central finite differences
    FD_CASES = [
        ("sqrt(x)", 2.3),
        ("exp(x)", 0.4),
        ("log(x)", 1.7),
        ("sin(x)", 0.9),
        ("cos(x)", 0.9),
        ("tan(x)", 0.4),
        ("tanh(x)", 0.6),
        ("abs(x)", 0.8),
        ("abs(x)", -0.8),
        ("pow(x, 3)", 1.3),
        ("x^2.5", 1.9),
        ("x^-2", 1.4),
        ("2^x", 1.1),
        ("x^x", 1.6),
        ("x*sin(x) - cos(x)/x", 1.2),
        ("(x + 1)/(x^2 + 1)", 0.7),
        ("-x^3 + 2*x", 1.05),
        ("exp(-x^2/4)*sqrt(x+2)", 0.35),
    ]

    @pytest.mark.parametrize("text,point", FD_CASES)
    def test_fd_agreement(self, text, point):
        e = parse(text, ["x"])
        d = differentiate(e, "x")
        h = 1e-5
        fd = (evaluate(e, {"x": point + h}) - evaluate(e, {"x": point - h})) / (2 * h)
        sym = evaluate(d, {"x": point})
        assert sym == pytest.approx(fd, rel=1e-5, abs=1e-9)

    def test_partial_derivative(self):
        e = parse("x*z + (x/(1+x^2))*sqrt(z)", ["x", "z"])
        d = differentiate(e, "z")
        # d/dz = x + x/(1+x^2) * 1/(2 sqrt(z))
        expected = 1.0 + (1.0 / 2.0) * 0.5
        assert evaluate(d, {"x": 1.0, "z": 1.0}) == pytest.approx(expected, rel=1e-13)


class TestRoundTrip:
    EXPRS = [
        "x*z + (x/(1+x^2))*sqrt(z)",
        "-x^2 + 3*x - 4/(x - 9.5)",
        "sin(x)*cos(x)/(1 + tanh(x)^2)",
        "pow(x, 2) - exp(-x)*log(x + 10)",
        "2^-x + x^0.5",
        "abs(x - 0.5) + 1e-3*x",
    ]

    @pytest.mark.parametrize("text", EXPRS)
    def test_print_parse_round_trip(self, text):
        e = parse(text, ["x", "z"])
        e2 = parse(to_string(e), ["x", "z"])
        rng = np.random.default_rng(7)
        checked = 0
        while checked < 100:
            pt = {"x": float(rng.uniform(0.1, 3.0)), "z": float(rng.uniform(0.1, 3.0))}
            try:
                v1 = evaluate(e, pt)
            except DomainError:
                continue
            v2 = evaluate(e2, pt)
            assert v2 == pytest.approx(v1, rel=1e-12, abs=1e-12)
            checked += 1

    def test_derivative_round_trip(self):
        d = differentiate(parse("x^3*sin(x)", ["x"]), "x")
        d2 = parse(to_string(d), ["x"])
        for x in (0.3, 1.1, 2.7):
            assert evaluate(d2, {"x": x}) == pytest.approx(evaluate(d, {"x": x}), rel=1e-14)


class TestCompileFn:
    def test_matches_evaluate_on_arrays(self):
        e = parse("x*z + (x/(1+x^2))*sqrt(z)", ["x", "z"])
        fn = compile_fn(e)
        xs = np.linspace(0.0, 1.0, 57)
        zs = np.linspace(1.0, 4.0, 57)
        got = fn(x=xs, z=zs)
        want = np.array([evaluate(e, {"x": float(a), "z": float(b)}) for a, b in zip(xs, zs)])
        np.testing.assert_allclose(got, want, rtol=1e-15)

    def test_nan_semantics(self):
        fn = compile_fn(parse("sqrt(x)", ["x"]))
        out = fn(x=np.array([-1.0, 4.0]))
        assert math.isnan(out[0]) and out[1] == 2.0

    def test_scalar_negative_fractional_power_is_nan(self):
        fn = compile_fn(parse("x^0.5", ["x"]))
        assert math.isnan(float(fn(x=-2.0)))

    def test_integer_exponent_sign_preserving(self):
        fn = compile_fn(parse("x^3", ["x"]))
        assert float(fn(x=-2.0)) == -8.0

    def test_constant_expression(self):
        fn = compile_fn(parse("2 + 3", []))
        assert float(fn()) == 5.0
