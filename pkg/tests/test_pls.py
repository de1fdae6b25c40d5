from __future__ import annotations

import numpy as np
import pytest
from conftest import random_model

from fastep import gauss
from fastep.energy import psi_site
from fastep.model import CavityParams, SiteParams, SitePotential, Sites, TildeParams
from fastep.oracle import fd_gradient
from fastep.pls import _PlsObjective, pls_solve, site_profile, site_profile_batch, update_ttil
from fastep.solvers.common import inverse_preconditioner, marginal_tilde
from fastep.tilted import tilted_moments_batch


def test_profile_recovers_moment_matching_site(rng):
    q, eta = 40, 0.8
    sites = Sites.laplace(rng.uniform(0.5, 3.0, q))
    tt = TildeParams(rng.uniform(1.0, 5.0, q), rng.normal(0, 2, q))
    th0 = SiteParams(rng.uniform(0.1, 0.9, q) * tt.pi_tilde / eta, rng.normal(0, 1, q))
    tm = tilted_moments_batch(CavityParams(tt.pi_tilde - eta * th0.pi, tt.b_tilde - eta * th0.b), sites, eta)
    prof = site_profile_batch(tm.mean, tm.variance, tt, sites, eta)
    np.testing.assert_allclose(prof.pi, th0.pi, rtol=1e-6)
    np.testing.assert_allclose(prof.b, th0.b, rtol=1e-6, atol=1e-7)


def test_profile_is_a_minimum(rng):
    site, eta = SitePotential.laplace(1.3), 0.9
    for _ in range(20):
        pt, bt = rng.uniform(1.0, 4.0), rng.normal()
        s, z = rng.normal(), rng.uniform(0.05, 2.0)
        val, pi, b = site_profile(s, z, pt, bt, site, eta)
        assert 0 <= pi < pt / eta
        for _ in range(10):
            p2 = rng.uniform(0, 0.999) * pt / eta
            assert psi_site(s, p2, b + rng.normal(0, 0.5), z, pt, bt, site, eta) >= val - 1e-9


def test_profile_mixed_sites(rng):
    pots = [SitePotential.laplace(1.0), SitePotential.flat(), SitePotential.gaussian(0.5, 1.0)]
    tt = TildeParams([2.0, 2.0, 2.0], [0.1, -0.4, 0.3])
    prof = site_profile_batch(np.array([0.1, -0.2, 0.2]), np.array([0.3, 0.3, 0.3]), tt, Sites.from_list(pots), 1.0)
    assert np.all(np.isfinite(prof.psi))
    assert np.all(prof.pi >= 0)


def test_objective_gradient(rng):
    for eta in (1.0, 0.6):
        model = random_model(rng, n=4, q=7, eta=eta)
        st = gauss.gauss_state(model, SiteParams(rng.uniform(0.5, 2.0, 7), rng.normal(0, 0.3, 7)))
        tt = marginal_tilde(st)
        obj = _PlsObjective(model, st.z, tt, None)
        for _ in range(5):
            u = st.u_star + 0.3 * rng.normal(size=model.n)
            np.testing.assert_allclose(obj.g(u), fd_gradient(obj.f, u), rtol=1e-5, atol=1e-6)


def test_pls_reaches_a_minimum(rng):
    model = random_model(rng, n=5, q=9)
    st = gauss.gauss_state(model, SiteParams(np.ones(9), np.zeros(9)))
    tt = marginal_tilde(st)
    res = pls_solve(st.z, tt, model, precond=inverse_preconditioner(st))
    assert res.converged
    obj = _PlsObjective(model, st.z, tt, None)
    for _ in range(20):
        assert obj.f(res.u_star + 0.05 * rng.normal(size=model.n)) >= res.objective - 1e-9
    np.testing.assert_allclose(res.s_star, model.B.apply(res.u_star))


def test_pls_preconditioner_does_not_change_the_answer(rng):
    model = random_model(rng, n=5, q=9)
    st = gauss.gauss_state(model, SiteParams(np.ones(9), np.zeros(9)))
    tt = marginal_tilde(st)
    a = pls_solve(st.z, tt, model)
    b = pls_solve(st.z, tt, model, precond=inverse_preconditioner(st))
    np.testing.assert_allclose(a.u_star, b.u_star, rtol=1e-5, atol=1e-6)


def test_update_ttil_is_monotone_and_consistent(rng):
    model = random_model(rng, n=5, q=10, eta=0.8)
    st = gauss.gauss_state(model, SiteParams(np.ones(10), np.zeros(10)))
    res = update_ttil(st.z, marginal_tilde(st), model, st.gstar, precond=inverse_preconditioner(st))
    hist = np.array(res.phi_history)
    assert np.all(np.diff(hist) <= 1e-9 * np.abs(hist[1:]))
    np.testing.assert_allclose(res.tt.rho, st.z)
    # the last round moved mu onto s* unless it hit the call limit
    assert res.pls_calls >= 2


def test_update_ttil_rejects_bad_tolerance_type(rng):
    model = random_model(rng)
    st = gauss.gauss_state(model, SiteParams(np.ones(model.q), np.zeros(model.q)))
    with pytest.raises(Exception):
        update_ttil(st.z[:-1], marginal_tilde(st), model, st.gstar)
