from __future__ import annotations

import numpy as np
import pytest
from conftest import random_model

from fastep.model import SitePotential, Sites
from fastep.oracle import fd_gradient, quad_logz_model
from fastep.solvers import parallel_ep
from fastep.vb import compare_ep_vb, h_laplace, inner_objective, phi_vb, vb_solve


def test_laplace_is_a_maximum_over_gaussians(rng):
    tau = 1.7
    pis = np.exp(np.linspace(-8, 8, 20001))
    for s in rng.normal(0, 2, 10):
        best = np.max(-0.5 * pis * s * s - 0.5 * h_laplace(pis, tau))
        assert best <= -tau * abs(s) + 1e-12
        assert best >= -tau * abs(s) - 1e-3


def test_inner_objective_gradient(rng):
    model = random_model(rng, n=4, q=7)
    z = rng.uniform(0.1, 1.0, 7)
    for _ in range(5):
        u = rng.normal(size=4)
        _, g = inner_objective(u, z, model)
        np.testing.assert_allclose(g, fd_gradient(lambda v: inner_objective(v, z, model)[0], u), rtol=1e-5, atol=1e-6)


def test_vb_trace_decreases_and_b_is_zero(rng):
    model = random_model(rng, n=5, q=10)
    res, trace = vb_solve(model)
    assert np.all(np.diff(trace.phi) <= 1e-9 * np.abs(trace.phi[1:]))
    np.testing.assert_array_equal(res.th.b, 0.0)
    assert np.all(res.pi > 0)
    np.testing.assert_allclose(res.phi_vb, phi_vb(res.pi, res.z, res.state.gstar, model), rtol=1e-6)


def test_vb_is_an_upper_bound_and_ep_is_closer(rng):
    for n in (1, 2):
        for _ in range(2):
            model = random_model(rng, n=n, q=n + 1, m=n + 1)
            truth = -2.0 * quad_logz_model(model)
            vb, _ = vb_solve(model)
            ep = parallel_ep(model)
            assert vb.phi_vb >= truth - 1e-8
            assert abs(ep.phi - truth) <= abs(vb.phi_vb - truth)


def test_comparison_summary(rng):
    model = random_model(rng, n=5, q=10)
    vb, _ = vb_solve(model)
    ep = parallel_ep(model)
    comp = compare_ep_vb(model, ep, vb)
    assert comp.summary["b_vb_max_abs"] == 0.0
    assert comp.ep["u_var"].shape == comp.vb["u_var"].shape == (5,)
    assert "median_u_var_ep=" in comp.to_text()


def test_vb_rejects_non_laplace(rng):
    model = random_model(rng, q=2, sites=Sites.from_list([SitePotential.laplace(1.0), SitePotential.flat()]))
    with pytest.raises(ValueError):
        vb_solve(model)
