"""Sequential EP with rank-one updates of the explicit covariance A^-1."""

from __future__ import annotations

import numpy as np
from scipy.linalg import blas

from .. import gauss
from ..energy import phi_total
from ..model import KAPPA_MIN, CavityParams, ModelSpec, SiteParams
from ..tilted import tilted_moments_batch
from .common import (
    SolverConfig,
    SolverResult,
    SolverTrace,
    ep_fixed_point_residual,
    initial_state,
    marginal_tilde,
    scaled_fixed_point_residual,
)


class _Covariance:
    """V = A^-1 (Fortran order), posterior mean and log|A| under rank-one site changes."""

    def __init__(self, model: ModelSpec, th: SiteParams):
        fac = gauss.build_precision(model, th)
        self.V = np.asfortranarray(gauss.inverse_from_chol(fac.chol))
        self.u = gauss.posterior_mean(model, th, fac)
        self.logdet = gauss.log_det(fac)
        Bs = model.B_sparse
        self.indptr, self.indices, self.data = Bs.indptr, Bs.indices, Bs.data

    def row(self, i):
        lo, hi = self.indptr[i], self.indptr[i + 1]
        return self.indices[lo:hi], self.data[lo:hi]

    def update(self, w, d_pi, d_b, mu, rho):
        denom = 1.0 + d_pi * rho
        self.u += w * ((d_b - d_pi * mu) / denom)
        self.logdet += np.log(denom)
        if d_pi != 0.0:
            blas.dger(-d_pi / denom, w, w, a=self.V, overwrite_a=1)

    def state(self, model: ModelSpec, th: SiteParams) -> gauss.GaussState:
        z = gauss.variances_from_inverse(model, self.V)
        u = self.u.copy()
        lz = -0.5 * (self.logdet + gauss.residual_term(model, th, u) + gauss.log_zq_constant(model))
        st = gauss.GaussState(None, u, model.B.apply(u), z, self.logdet, lz, None, th.pi.copy(), None)
        st.z, st.gstar = gauss.refresh_dual(st)
        return st


def sequential_ep(model: ModelSpec, config: SolverConfig | None = None, init: SiteParams | None = None) -> SolverResult:
    config = config or SolverConfig(solver_kind="sequential")
    trace = SolverTrace()
    eta = model.eta
    th, state = initial_state(model, trace, init)
    sites = model.sites
    converged = False
    phi = phi_total(th, marginal_tilde(state), model, state).phi
    trace.add(phi)
    skipped = 0
    for sweep in range(config.max_outer):
        if ep_fixed_point_residual(th, marginal_tilde(state), model, state) < config.tol_fixed_point:
            converged = True
            break
        if config.time_limit and trace.elapsed() > config.time_limit:
            break
        cov = _Covariance(model, th)
        trace.count()
        pi, b = th.pi.copy(), th.b.copy()
        for i in range(model.q):
            idx, val = cov.row(i)
            w = cov.V[:, idx] @ val
            rho = float(val @ w[idx])
            mu = float(val @ cov.u[idx])
            p_minus = 1.0 / rho - eta * pi[i]
            b_minus = mu / rho - eta * b[i]
            if not p_minus > KAPPA_MIN / rho:
                skipped += 1
                continue
            tm = tilted_moments_batch(CavityParams(np.array([p_minus]), np.array([b_minus])), sites.subset([i]), eta)
            v_t, m_t = tm.variance[0], tm.mean[0]
            pi_prop = (1.0 / v_t - p_minus) / eta
            b_prop = (m_t / v_t - b_minus) / eta
            gamma = config.damping
            for _ in range(config.max_backoff + 1):
                pi_new = max((1 - gamma) * pi[i] + gamma * pi_prop, 0.0)
                b_new = (1 - gamma) * b[i] + gamma * b_prop
                d_pi = pi_new - pi[i]
                # cavity of site i after its own update
                rho_new = rho / (1.0 + d_pi * rho)
                if 1.0 / rho_new - eta * pi_new > KAPPA_MIN / rho_new:
                    break
                gamma *= 0.5
            else:
                skipped += 1
                continue
            d_b = b_new - b[i]
            if abs(d_pi) * rho < 1e-15 and abs(d_b - d_pi * mu) * np.sqrt(rho) < 1e-15 * (1 + abs(mu)):
                continue
            cov.update(w, d_pi, d_b, mu, rho)
            pi[i], b[i] = pi_new, b_new
        th = SiteParams(pi, b)
        state = cov.state(model, th)
        phi = phi_total(th, marginal_tilde(state), model, state).phi
        trace.add(phi)
    tt = marginal_tilde(state)
    return SolverResult(
        th, tt, state, trace, converged, False,
        ep_fixed_point_residual(th, tt, model, state), phi,
        {"scaled_residual": scaled_fixed_point_residual(th, tt, model, state), "skipped_updates": skipped},
    )
