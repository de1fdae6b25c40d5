"""Parallel EP: all sites are updated at once from one Gaussian refresh."""

from __future__ import annotations

import numpy as np

from .. import gauss
from ..energy import phi_total
from ..model import KAPPA_MIN, ModelSpec, SiteParams, cavity
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

DIVERGENCE_RUN = 5
DIVERGENCE_RISE = 0.10


def proposal(th: SiteParams, state: gauss.GaussState, model: ModelSpec):
    """Moment-matching site parameters for every site, cavities taken from Q."""
    eta = model.eta
    tt = marginal_tilde(state)
    cav = cavity(tt, th, eta)
    tm = tilted_moments_batch(cav, model.sites, eta)
    pi_new = (1.0 / tm.variance - cav.pi_minus) / eta
    b_new = (tm.mean / tm.variance - cav.b_minus) / eta
    return SiteParams(pi_new, b_new), tt


def parallel_ep(model: ModelSpec, config: SolverConfig | None = None, init: SiteParams | None = None) -> SolverResult:
    config = config or SolverConfig(solver_kind="parallel")
    trace = SolverTrace()
    eta = model.eta
    th, state = initial_state(model, trace, init)
    gamma = np.full(model.q, config.damping)
    rises = 0
    rise_base = None
    converged = diverged = False
    phi = np.nan
    for it in range(config.max_outer + 1):
        tt = marginal_tilde(state)
        phi = phi_total(th, tt, model, state).phi
        trace.add(phi)
        if ep_fixed_point_residual(th, tt, model, state) < config.tol_fixed_point:
            converged = True
            break
        if len(trace.rows) > 1:
            prev = trace.rows[-2].phi
            if phi > prev:
                rises += 1
                rise_base = prev if rises == 1 else rise_base
                if rises >= DIVERGENCE_RUN and phi - rise_base > DIVERGENCE_RISE * abs(rise_base):
                    diverged = True
                    break
            else:
                rises = 0
        if it == config.max_outer or (config.time_limit and trace.elapsed() > config.time_limit):
            break
        prop, _ = proposal(th, state, model)
        step = gamma.copy()
        for attempt in range(config.max_backoff + 1):
            pi_new = np.maximum((1 - step) * th.pi + step * prop.pi, 0.0)
            b_new = (1 - step) * th.b + step * prop.b
            # cavities against the current marginals must stay valid
            bad = tt.pi_tilde - eta * pi_new <= KAPPA_MIN * tt.pi_tilde
            if not np.any(bad):
                break
            step = np.where(bad, 0.5 * step, step)
        else:
            pi_new = np.where(bad, th.pi, pi_new)
            b_new = np.where(bad, th.b, b_new)
        th_new = SiteParams(pi_new, b_new)
        for attempt in range(config.max_backoff + 1):
            try:
                new_state = gauss.gauss_state(model, th_new)
                trace.count()
                new_tt = marginal_tilde(new_state)
                bad = new_tt.pi_tilde - eta * th_new.pi <= KAPPA_MIN * new_tt.pi_tilde
            except gauss.FactorizationError:
                trace.count()
                bad = np.ones(model.q, dtype=bool)
                new_state = None
            if not np.any(bad):
                break
            step = np.where(bad, 0.5 * step, step)
            th_new = SiteParams(
                np.where(bad, np.maximum((1 - step) * th.pi + step * prop.pi, 0.0), th_new.pi),
                np.where(bad, (1 - step) * th.b + step * prop.b, th_new.b),
            )
        else:
            raise gauss.FactorizationError(-1) if new_state is None else RuntimeError(
                f"cavity invalid at {int(np.sum(bad))} sites after damping backoff"
            )
        th, state = th_new, new_state
    tt = marginal_tilde(state)
    return SolverResult(
        th, tt, state, trace, converged, diverged,
        ep_fixed_point_residual(th, tt, model, state), phi,
        {"scaled_residual": scaled_fixed_point_residual(th, tt, model, state)},
    )
