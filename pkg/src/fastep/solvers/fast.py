"""Double-loop EP with optimistic variance refreshes and an ascent fallback.

Each outer iteration refreshes z = Var_Q[s|y] at the current theta and runs
updateTTil(z, theta~), which needs no further variance computations.  The
result is accepted when phi(z, theta~) drops by a relative margin epsilon.
Otherwise ascent steps on max_theta phi(theta, theta~) are taken, each
followed by another optimistic attempt, until one is accepted or the ascent
stalls, which signals a stationary point.
"""

from __future__ import annotations

from .. import gauss
from ..energy import delta_metric
from ..model import ModelSpec, SiteParams
from ..pls import update_ttil
from .common import (
    SolverConfig,
    SolverResult,
    SolverTrace,
    ep_fixed_point_residual,
    initial_state,
    inverse_preconditioner,
    marginal_tilde,
    scaled_fixed_point_residual,
)
from .ow import OwMemory, ow_inner_max_step

MAX_FALLBACK_STEPS = 100


def _ttil(model, state, tt, th, u, config):
    return update_ttil(
        state.z, tt, model, state.gstar, u0=u, th0=th,
        precond=inverse_preconditioner(state),
        tol_inner=config.tol_inner, max_calls=config.max_inner,
    )


def fast_ep(model: ModelSpec, config: SolverConfig | None = None, init: SiteParams | None = None) -> SolverResult:
    config = config or SolverConfig(solver_kind="fast")
    trace = SolverTrace()
    eps = config.epsilon
    th, state = initial_state(model, trace, init)
    r = _ttil(model, state, marginal_tilde(state), th, state.u_star, config)
    tt, th, phi, u = r.tt, r.th, r.phi, r.u_star
    trace.add(phi)
    converged = stationary = False
    fallback_steps = 0
    ttil_calls = [r.pls_calls]
    for outer in range(config.max_outer):
        state = gauss.gauss_state(model, th)
        trace.count()
        if ep_fixed_point_residual(th, tt, model, state) < config.tol_fixed_point:
            converged = True
            break
        if config.time_limit and trace.elapsed() > config.time_limit:
            break
        th_k, state_k = th, state
        memory = OwMemory()
        used_fallback = False
        for k in range(MAX_FALLBACK_STEPS + 1):
            r = _ttil(model, state_k, tt, th_k, u, config)
            ttil_calls.append(r.pls_calls)
            if delta_metric(r.phi, phi) > eps:
                tt, th, phi, u = r.tt, r.th, r.phi, r.u_star
                trace.add(phi, fallback=used_fallback)
                break
            used_fallback = True
            fallback_steps += 1
            step = ow_inner_max_step(th_k, tt, model, config, state_k, memory, trace)
            th_k, state_k = step.th, step.state
            if abs(delta_metric(step.phi_before, step.phi_after)) < eps:
                stationary = True
                break
        else:
            stationary = True
        if stationary:
            th, state = th_k, state_k
            trace.add(phi, fallback=True)
            break
    else:
        state = gauss.gauss_state(model, th)
        trace.count()
    final_tt = tt
    info = {
        "fallback_steps": fallback_steps,
        "stationary_exit": stationary,
        "ttil_calls": ttil_calls,
        "scaled_residual": scaled_fixed_point_residual(th, final_tt, model, state),
    }
    return SolverResult(
        th, final_tt, state, trace, converged or stationary, False,
        ep_fixed_point_residual(th, final_tt, model, state), phi, info,
    )
