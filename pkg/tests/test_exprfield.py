"""Parser, evaluation, and exact-derivative behavior of scalar fields."""

import math

import mpmath
import numpy as np
import pytest

from flatbundle import (
    ParseError,
    ScalarField,
    SingularEvaluationError,
    derivative,
    evaluate,
    parse_scalar_field,
)


def test_parse_and_evaluate_basic():
    f = parse_scalar_field("-sin(theta)*cos(theta)", ("theta",))
    assert abs(f(0.7) + math.sin(0.7) * math.cos(0.7)) < 1e-15
    assert parse_scalar_field("0", ("x",))(3.0) == 0.0


def test_evaluate_against_mpmath():
    f = parse_scalar_field("x^2*y + exp(x)", ("x", "y"))
    expected = float(mpmath.mpf(1) ** 2 * 2 + mpmath.e)
    assert abs(f(1.0, 2.0) - expected) < 1e-12
    assert abs(evaluate(f, (1.0, 2.0)) - expected) < 1e-12


def test_power_is_right_associative():
    f = parse_scalar_field("2^3^2", ())
    assert f() == 512.0
    g = parse_scalar_field("x^2*y", ("x", "y"))
    assert abs(g(3.0, 5.0) - 45.0) < 1e-12
    # unary minus binds looser than the exponent
    h = parse_scalar_field("-x^2", ("x",))
    assert h(3.0) == -9.0
    assert parse_scalar_field("2^-2", ())() == 0.25


def test_derivative_closed_form():
    f = parse_scalar_field("-sin(theta)*cos(theta)", ("theta",))
    df = f.diff(0)
    # d/dt(-sin t cos t) = sin^2 t - cos^2 t = -cos 2t
    assert abs(df(0.7) + math.cos(1.4)) < 1e-12
    fd = (f(0.7 + 1e-5) - f(0.7 - 1e-5)) / 2e-5
    assert abs(df(0.7) - fd) < 1e-8


def test_derivative_module_function_and_names():
    f = parse_scalar_field("x*y^2", ("x", "y"))
    assert abs(derivative(f, "y")(2.0, 3.0) - 12.0) < 1e-12
    assert abs(derivative(f, 0)(2.0, 3.0) - 9.0) < 1e-12
    with pytest.raises(ValueError):
        derivative(f, "z")


def test_derivative_of_squared_sine():
    f = parse_scalar_field("sin(theta)^2", ("theta",))
    assert abs(f.diff(0)(math.pi / 4) - 1.0) < 1e-12


def test_derivative_of_constant_is_zero():
    f = parse_scalar_field("3.5", ("x", "y"))
    assert f.diff(0).is_zero
    assert f.diff(1).is_zero


def test_cotangent_value_and_pole():
    f = parse_scalar_field("cot(x)", ("x",))
    assert abs(f(math.pi / 2)) < 1e-15
    with pytest.raises(SingularEvaluationError) as err:
        f(0.0)
    assert "cot" in err.value.expression


def test_domain_errors():
    for src, bad in (("log(x)", -1.0), ("sqrt(x)", -0.5), ("x^0.5", -2.0),
                     ("1/x", 0.0), ("x^-1", 0.0)):
        f = parse_scalar_field(src, ("x",))
        with pytest.raises(SingularEvaluationError):
            f(bad)


def test_parse_error_columns():
    cases = [
        ("sin(theta", 10),
        ("2 +* x", 4),
        ("foo(x)", 1),
        ("x +", 4),
        ("z + x", 1),
        ("(x", 3),
        (")x", 1),
        ("x y", 3),
        ("sin()", 5),
    ]
    for src, col in cases:
        with pytest.raises(ParseError) as err:
            parse_scalar_field(src, ("x", "y", "theta"))
        assert err.value.column == col, src


def test_unknown_identifier_mentions_name():
    with pytest.raises(ParseError, match="theta2"):
        parse_scalar_field("theta2", ("theta",))


def test_roundtrip_through_str():
    corpus = [
        "-sin(theta)*cos(theta)",
        "x^2*y + exp(x)",
        "cot(theta) + theta",
        "log(2 + x)*sqrt(3 + y)",
        "tan(x/3) - 2*x/(1 + y^2)",
        "(x + y)^3/(1 + x^2)",
        "-(x - y)*(x + y)",
        "sqrt(1 + sin(x)^2)",
    ]
    rng = np.random.default_rng(4)
    coords = ("x", "y", "theta")
    for src in corpus:
        f = parse_scalar_field(src, coords)
        g = parse_scalar_field(str(f), coords)
        pts = rng.uniform(0.1, 1.4, size=(25, 3))
        for p in pts:
            assert abs(f(*p) - g(*p)) < 1e-12


def test_str_of_reparsed_is_stable():
    f = parse_scalar_field("x^2*y + exp(x)", ("x", "y"))
    assert str(parse_scalar_field(str(f), ("x", "y"))) == str(f)


def test_vectorized_grid_evaluation_matches_scalar():
    f = parse_scalar_field("sin(x)*y + x^2", ("x", "y"))
    xs = np.linspace(0.0, 1.0, 7)
    ys = np.linspace(0.5, 2.0, 5)
    mx, my = np.meshgrid(xs, ys, indexing="ij")
    grid = f.on_grid((mx, my))
    for i in range(7):
        for j in range(5):
            assert abs(grid[i, j] - f(xs[i], ys[j])) < 1e-14


def test_field_algebra():
    coords = ("x", "y")
    f = parse_scalar_field("sin(x)", coords)
    g = parse_scalar_field("y^2", coords)
    p = (0.6, 1.3)
    assert abs((f + g)(*p) - (f(*p) + g(*p))) < 1e-15
    assert abs((f - g)(*p) - (f(*p) - g(*p))) < 1e-15
    assert abs((f * g)(*p) - f(*p) * g(*p)) < 1e-15
    assert abs((f / g)(*p) - f(*p) / g(*p)) < 1e-15
    assert abs((-f)(*p) + f(*p)) < 1e-15
    assert abs((f ** 2)(*p) - f(*p) ** 2) < 1e-15
    const = ScalarField.constant(2.5, coords)
    assert (f * 0 + const)(*p) == 2.5


def test_free_coordinates():
    f = parse_scalar_field("sin(x) + 1", ("x", "y"))
    assert f.free_coordinates() == {"x"}


def test_finite_difference_agreement_is_second_order():
    """Central differences of exact fields converge at O(h^2)."""
    corpus = [
        "sin(x)*cos(y)",
        "exp(x/2)*y^2",
        "log(2 + x)*sqrt(3 + y)",
        "tan(x/3) + cot(4 + y)",
        "x^3*y - 2*x/(1 + y^2)",
        "sqrt(1 + x^2)^3",
    ]
    rng = np.random.default_rng(2)
    h = 1e-5
    for src in corpus:
        f = parse_scalar_field(src, ("x", "y"))
        for _ in range(10):
            p = rng.uniform(0.1, 1.4, size=2)
            for mu in range(2):
                exact = f.diff(mu)(*p)
                step = np.zeros(2)
                step[mu] = h
                fd = (f(*(p + step)) - f(*(p - step))) / (2 * h)
                assert abs(fd - exact) < 1e-8, (src, mu, p)


def test_finite_difference_error_ratio():
    # halving h divides the central-difference error by about 4
    f = parse_scalar_field("exp(x)*sin(3*x)", ("x",))
    exact = f.diff(0)(0.8)

    def fd_err(h):
        return abs((f(0.8 + h) - f(0.8 - h)) / (2 * h) - exact)

    e1, e2 = fd_err(1e-3), fd_err(5e-4)
    assert 3.0 < e1 / e2 < 5.0
