import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from msgad.model import (
    TWOD_MINIMA,
    TWOD_SADDLES,
    ModelError,
    UnsupportedOperation,
    eval_slow_drift,
    exact_effective_force,
    make_model,
)

coords = st.floats(0.0, 8.0, allow_nan=False)


def central_jacobian(fun, x, h=1e-6):
    cols = []
    for j in range(x.size):
        e = np.zeros(x.size)
        e[j] = h
        cols.append((fun(x + e) - fun(x - e)) / (2 * h))
    return np.array(cols).T


# -- two-dimensional example ---------------------------------------------------


@pytest.mark.parametrize("point", {**TWOD_MINIMA, **TWOD_SADDLES}.values())
def test_published_points_are_critical(twod, point):
    assert np.linalg.norm(twod.exact_F(point)) <= 1e-3


def test_exact_force_closed_form_at_4_4(twod):
    # E y_i^2 = sigma2 Gamma_i / 2 = 2.5 at x_i = 4; -D (4, 4) = (-2.4, -1.2)
    np.testing.assert_allclose(twod.exact_F(np.array([4.0, 4.0])), [0.1, 1.3], atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(coords, coords)
def test_exact_jacobian_matches_finite_differences(x1, x2):
    model = make_model("twod-ou")
    x = np.array([x1, x2])
    fd = central_jacobian(model.exact_F, x)
    np.testing.assert_allclose(model.exact_DF(x), fd, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(coords, coords)
def test_force_is_minus_gradient_of_free_energy(x1, x2):
    model = make_model("twod-ou")
    x = np.array([x1, x2])
    grad = central_jacobian(lambda z: np.atleast_1d(model.exact_W(z)), x)[0]
    np.testing.assert_allclose(model.exact_F(x), -grad, atol=1e-6)


def test_fast_gradient_is_minus_slow_derivative_of_potential(twod):
    # U(x, y) = sum y_i^2 (1 + (x_i - 5)^2) / sigma2
    rng = np.random.default_rng(1)
    x, y = rng.uniform(0, 8, 2), rng.normal(size=2)

    def U(z):
        return np.sum(y**2 * (1 + (z - 5) ** 2)) / twod.sigma2

    grad = central_jacobian(lambda z: np.atleast_1d(U(z)), x)[0]
    np.testing.assert_allclose(twod.g(x, y), -grad, atol=1e-7)


def test_eval_rejects_wrong_dimensions(twod):
    with pytest.raises(ModelError):
        eval_slow_drift(twod, np.zeros(3), np.zeros(2))
    with pytest.raises(ModelError):
        exact_effective_force(twod, np.zeros(1))


def test_unknown_model_parameter_is_named():
    with pytest.raises(ModelError, match="model.bogus"):
        make_model("twod-ou", {"bogus": 1})
    with pytest.raises(ModelError):
        make_model("no-such-model")


# -- Allen-Cahn ----------------------------------------------------------------


@pytest.mark.parametrize("c", [math.sqrt(2.0), -math.sqrt(2.0)])
def test_allen_cahn_constant_equilibria(ac_model, c):
    u = np.full(ac_model.N, c)
    assert np.max(np.abs(exact_effective_force(ac_model, u))) <= 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_laplacian_is_self_adjoint_in_weighted_product(seed):
    model = make_model("allen-cahn", {"grid_n": 41})
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, model.N))
    lhs = model.inner(model.laplacian(a), b)
    rhs = model.inner(a, model.laplacian(b))
    assert abs(lhs - rhs) <= 1e-9 * (1 + abs(lhs))


def test_helmholtz_solve_inverts_apply(ac_model):
    rng = np.random.default_rng(3)
    w = rng.normal(size=ac_model.N)
    rhs = ac_model.helmholtz_apply(w)
    np.testing.assert_allclose(ac_model.solve_helmholtz(rhs), w, atol=1e-10)


def test_helmholtz_of_cosine_mode(ac_model):
    # (I - Laplacian) cos(pi x) = (1 + lambda_1) cos(pi x) with the discrete eigenvalue
    u = np.cos(np.pi * ac_model.grid)
    lam = ac_model.lap_eigs[1]
    np.testing.assert_allclose(ac_model.solve_helmholtz(u), u / (1 + lam), atol=1e-12)


def test_allen_cahn_drift_is_minus_gradient_of_energy(ac_model):
    rng = np.random.default_rng(4)
    u, phi, v = rng.normal(size=(3, ac_model.N))
    h = 1e-6
    dU = (ac_model.energy(u + h * v, phi) - ac_model.energy(u - h * v, phi)) / (2 * h)
    assert dU == pytest.approx(-ac_model.inner(ac_model.f(u, phi), v), rel=1e-6)


def test_allen_cahn_free_energy_gradient(ac_model):
    rng = np.random.default_rng(5)
    u = np.cos(np.pi * ac_model.grid) + 0.1 * rng.normal(size=ac_model.N)
    v = rng.normal(size=ac_model.N)
    h = 1e-6
    dW = (ac_model.exact_W(u + h * v) - ac_model.exact_W(u - h * v)) / (2 * h)
    assert dW == pytest.approx(-ac_model.inner(ac_model.exact_F(u), v), rel=1e-6)


def test_allen_cahn_jacobian_action_matches_finite_differences(ac_model):
    rng = np.random.default_rng(6)
    u, v = rng.normal(size=(2, ac_model.N))
    h = 1e-6
    fd = (ac_model.exact_F(u + h * v) - ac_model.exact_F(u - h * v)) / (2 * h)
    np.testing.assert_allclose(ac_model.exact_DF_matvec(u, v), fd, atol=1e-5 * np.abs(fd).max())
    dense = ac_model.exact_DF(u) @ v
    np.testing.assert_allclose(dense, ac_model.exact_DF_matvec(u, v), atol=1e-8)


def test_allen_cahn_fast_mean_is_helmholtz_response(ac_model):
    u = np.cos(np.pi * ac_model.grid)
    y0 = ac_model.default_y0(u)
    np.testing.assert_allclose(ac_model.b(u, y0), 0.0, atol=1e-9)


# -- extended Lagrangian -------------------------------------------------------


def frozen_mean_by_quad(x, kappa=10.0, sigma=0.5):
    def weight(y):
        return math.exp(-2 / sigma**2 * 0.25 * (y * y - 1) ** 2 - kappa / sigma**2 * (x - y) ** 2)

    Z = quad(weight, -6, 6, points=[x], limit=200)[0]
    m1 = quad(lambda y: y * weight(y), -6, 6, points=[x], limit=200)[0]
    m2 = quad(lambda y: y * y * weight(y), -6, 6, points=[x], limit=200)[0]
    mean = m1 / Z
    return mean, m2 / Z - mean**2


@pytest.mark.parametrize("x", [-1.2, -0.3, 0.0, 0.3, 0.9])
def test_ext_lagrangian_closed_forms_match_adaptive_quadrature(x):
    model = make_model("ext-lagrangian")
    mean, var = frozen_mean_by_quad(x)
    np.testing.assert_allclose(model.exact_F(np.array([x])), [-10.0 * (x - mean)], atol=1e-9)
    np.testing.assert_allclose(model.exact_DF(np.array([x])), [[-10.0 + 2 * 100 * var / 0.25]], atol=1e-7)


def test_ext_lagrangian_force_is_minus_gradient():
    model = make_model("ext-lagrangian")
    for x in (-0.7, 0.2, 1.1):
        z = np.array([x])
        h = 1e-5
        dW = (model.exact_W(z + h) - model.exact_W(z - h)) / (2 * h)
        assert model.exact_F(z)[0] == pytest.approx(-dW, abs=1e-6)


def test_closed_form_only_where_available():
    model = make_model("twod-ou")
    assert model.has_exact
    from msgad.model import SlowFastModel

    with pytest.raises(UnsupportedOperation):
        SlowFastModel().exact_F(np.zeros(1))
