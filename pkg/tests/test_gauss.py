from __future__ import annotations

import numpy as np
import pytest
from conftest import random_model

from fastep import gauss
from fastep.model import ModelSpec, SiteParams, Sites
from fastep.operators import dense_op
from fastep.oracle import fd_gradient, quad_logz_model


def dense_parts(model):
    return model.X.materialize_dense(), model.B.materialize_dense()


def test_precision_and_mean(rng):
    model = random_model(rng, n=4, q=6)
    th = SiteParams(rng.uniform(0.5, 2.0, 6), rng.normal(size=6))
    X, B = dense_parts(model)
    A = X.T @ X / model.noise_var + B.T @ np.diag(th.pi) @ B
    np.testing.assert_allclose(gauss.precision_matrix(model, th.pi), A, rtol=1e-12)
    st = gauss.gauss_state(model, th)
    u = np.linalg.solve(A, X.T @ model.y / model.noise_var + B.T @ th.b)
    np.testing.assert_allclose(st.u_star, u, rtol=1e-10)
    np.testing.assert_allclose(st.z, np.diag(B @ np.linalg.inv(A) @ B.T), rtol=1e-10)
    np.testing.assert_allclose(st.logdet, np.linalg.slogdet(A)[1], rtol=1e-12)


def test_log_det_gradient_is_marginal_variance(rng):
    for n in (1, 3, 5, 8):
        model = random_model(rng, n=n, q=n + 2)
        pi = rng.uniform(0.3, 2.0, n + 2)
        st = gauss.gauss_state(model, SiteParams(pi, np.zeros_like(pi)))

        def logdet(p):
            return np.linalg.slogdet(gauss.precision_matrix(model, p))[1]

        np.testing.assert_allclose(fd_gradient(logdet, pi), st.z, rtol=1e-5)


def test_log_zq_against_quadrature(rng):
    for n in (1, 2):
        X = dense_op(rng.normal(size=(n + 1, n)))
        model = ModelSpec(X, dense_op(np.eye(n)), rng.normal(size=n + 1), 0.7, Sites.flat(n))
        st = gauss.gauss_state(model, SiteParams(np.zeros(n), np.zeros(n)), variances=False)
        assert abs(quad_logz_model(model) - st.log_zq) < 1e-7


def test_log_zq_with_gaussian_sites_closed_form(rng):
    # pi, b act as exp(b s - pi s^2 / 2) on s = B u; compare to a direct Gaussian integral
    model = random_model(rng, n=3, q=4)
    th = SiteParams(rng.uniform(0.5, 2.0, 4), rng.normal(size=4))
    X, B = dense_parts(model)
    A = X.T @ X / model.noise_var + B.T @ np.diag(th.pi) @ B
    r = X.T @ model.y / model.noise_var + B.T @ th.b
    ref = (
        -0.5 * model.m * np.log(2 * np.pi * model.noise_var) - 0.5 * model.yty / model.noise_var
        + 0.5 * model.n * np.log(2 * np.pi) - 0.5 * np.linalg.slogdet(A)[1] + 0.5 * r @ np.linalg.solve(A, r)
    )
    st = gauss.gauss_state(model, th, variances=False)
    np.testing.assert_allclose(st.log_zq, ref, rtol=1e-12)


def test_gstar_is_the_dual_minimum(rng):
    model = random_model(rng, n=3, q=5)
    pi = rng.uniform(0.5, 2.0, 5)
    st = gauss.gauss_state(model, SiteParams(pi, np.zeros(5)))
    for _ in range(50):
        other = pi * np.exp(rng.normal(0, 0.7, 5))
        val = st.z @ other - np.linalg.slogdet(gauss.precision_matrix(model, other))[1]
        assert val >= st.gstar - 1e-10


def test_blocked_variances_match_inverse(rng):
    model = random_model(rng, n=20, q=40, m=25)
    th = SiteParams(rng.uniform(0.5, 2.0, 40), np.zeros(40))
    fac = gauss.build_precision(model, th)
    z_small = gauss.marginal_variances(model, fac, block=3)
    z_big = gauss.marginal_variances(model, fac, block=512)
    np.testing.assert_allclose(z_small, z_big, rtol=1e-12)


def test_factorization_failure_reports_pivot():
    X = dense_op(np.zeros((1, 2)))
    model = ModelSpec(X, dense_op(np.eye(2)), np.zeros(1), 1.0, Sites.laplace(1.0, 2))
    with pytest.raises(gauss.FactorizationError):
        gauss.build_precision(model, SiteParams([1.0, -1.0], [0.0, 0.0]))
