import numpy as np
import pytest

from geobeam.errors import ConfigurationError
from geobeam.expressions import Expression, compile_form

P = np.array([[1.0, 2.0, 3.0], [-0.5, 0.0, 2.0]])


def test_arithmetic_and_power():
    e = Expression("x1^2 + 3*x2 - x3/2")
    assert np.allclose(e(P), P[:, 0] ** 2 + 3 * P[:, 1] - P[:, 2] / 2)
    assert np.allclose(Expression("-2^2")(P), -4.0)


def test_functions_and_constants():
    e = Expression("sin(pi*x1) + exp(-x2) * max(x3, c)", {"c": 2.5})
    ref = np.sin(np.pi * P[:, 0]) + np.exp(-P[:, 1]) * np.maximum(P[:, 2], 2.5)
    assert np.allclose(e(P), ref)


def test_polar_names():
    p = np.array([[3.0, 4.0], [0.0, -1.0]])
    assert np.allclose(Expression("r")(p), [5.0, 1.0])
    assert np.allclose(Expression("theta")(p), np.arctan2(p[:, 1], p[:, 0]))
    # in 3d theta is the angle of the last two coordinates
    assert np.allclose(Expression("theta")(P), np.arctan2(P[:, 2], P[:, 1]))


def test_missing_coordinate_is_zero():
    assert np.allclose(Expression("x3 + 1")(np.zeros((4, 2))), 1.0)


def test_constant_expression_broadcasts():
    out = Expression("2")(np.zeros((3, 5, 2)))
    assert out.shape == (3, 5) and np.all(out == 2)


@pytest.mark.parametrize("text", [
    "y + 1", "x1.real", "(lambda: 1)()", "__import__('os')", "x1 if x1 else 0",
    "'a'", "True", "sin(x=x1)", "x1 < 2", "x1 ** ", "",
])
def test_rejected(text):
    with pytest.raises(ConfigurationError):
        Expression(text)


@pytest.mark.parametrize("name", ["x1", "r", "sin", "2a", "a-b"])
def test_invalid_constant_names(name):
    with pytest.raises(ConfigurationError):
        Expression("1", {name: 1.0})


def test_compile_form_shape():
    f = compile_form(["-x2", "x1"])
    pts = np.random.default_rng(0).normal(size=(7, 3, 2))
    out = f(pts)
    assert out.shape == (2, 7, 3)
    assert np.allclose(out[0], -pts[..., 1]) and np.allclose(out[1], pts[..., 0])
    assert f.texts == ("-x2", "x1")
