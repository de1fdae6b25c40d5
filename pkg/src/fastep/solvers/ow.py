"""Ascent steps on the inner problem max_theta phi(theta, theta~) for fixed theta~.

phi(., theta~) is concave in theta.  Each step is one limited-memory
quasi-Newton iteration, seeded by a diagonal curvature bound from the tilted
moments, projected onto 0 <= pi <= (1 - kappa) pi~ / eta and followed by an
Armijo backtracking search.  Every trial point needs a fresh Gaussian refresh,
and each one is counted in the trace.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import gauss
from ..energy import phi_total, site_log_zhat
from ..model import KAPPA_MIN, ModelSpec, SiteParams, TildeParams
from .common import SolverConfig, SolverTrace

MEMORY = 10


@dataclass
class OwMemory:
    S: list = field(default_factory=list)
    Y: list = field(default_factory=list)
    last_x: np.ndarray | None = None
    last_g: np.ndarray | None = None


@dataclass
class OwStep:
    th: SiteParams
    state: gauss.GaussState
    phi_before: float
    phi_after: float
    probes: int
    grad_norm: float


def ow_gradient(th: SiteParams, tt: TildeParams, model: ModelSpec, state: gauss.GaussState):
    """(d phi / d pi, d phi / d b) and the tilted moments at the cavity."""
    tm = site_log_zhat(th, tt, model.sites, model.eta)
    eq2 = state.z + state.s_star ** 2
    g_pi = eq2 - tm.second_moment
    g_b = 2.0 * (tm.mean - state.s_star)
    return g_pi, g_b, tm


def _pack(a, b):
    return np.concatenate([a, b])


def ow_inner_max_step(
    th: SiteParams,
    tt: TildeParams,
    model: ModelSpec,
    config: SolverConfig | None = None,
    state: gauss.GaussState | None = None,
    memory: OwMemory | None = None,
    trace: SolverTrace | None = None,
    max_probes: int = 30,
) -> OwStep:
    q = model.q
    eta = model.eta
    if state is None or state.z is None:
        state = gauss.gauss_state(model, th)
        if trace is not None:
            trace.count()
    memory = memory if memory is not None else OwMemory()
    g_pi, g_b, tm = ow_gradient(th, tt, model, state)
    g = _pack(g_pi, g_b)
    x = _pack(th.pi, th.b)
    phi0 = phi_total(th, tt, model, state).phi
    gnorm = float(np.max(np.abs(g)))

    if memory.last_x is not None:
        s = x - memory.last_x
        y = -(g - memory.last_g)
        if s @ y > 1e-12 * np.sqrt((s @ s) * (y @ y)):
            memory.S.append(s)
            memory.Y.append(y)
            if len(memory.S) > MEMORY:
                memory.S.pop(0)
                memory.Y.pop(0)
    memory.last_x, memory.last_g = x, g

    v, m = tm.variance, tm.mean
    h = _pack(eta * (v ** 2 + 2 * m ** 2 * v), 2.0 * eta * v)
    d = _lbfgs_direction(g, memory.S, memory.Y, h)
    if not g @ d > 0:
        memory.S.clear()
        memory.Y.clear()
        d = g / h

    upper = (1.0 - 10 * KAPPA_MIN) * tt.pi_tilde / eta
    alpha = 1.0
    for probe in range(1, max_probes + 1):
        x_new = x + alpha * d
        x_new[:q] = np.clip(x_new[:q], 0.0, upper)
        th_new = SiteParams(x_new[:q], x_new[q:])
        try:
            st_new = gauss.gauss_state(model, th_new)
            if trace is not None:
                trace.count()
            phi1 = phi_total(th_new, tt, model, st_new).phi
        except (gauss.FactorizationError, ValueError, FloatingPointError):
            if trace is not None:
                trace.count()
            phi1 = -np.inf
        gain = g @ (x_new - x)
        if phi1 >= phi0 + 1e-4 * gain and np.isfinite(phi1):
            return OwStep(th_new, st_new, phi0, phi1, probe, gnorm)
        alpha *= 0.5
    memory.S.clear()
    memory.Y.clear()
    return OwStep(th, state, phi0, phi0, max_probes, gnorm)


def _lbfgs_direction(g, S, Y, h):
    """Approximate (-Hessian)^-1 g for the concave objective."""
    q = g.copy()
    stack = []
    for s, y in zip(reversed(S), reversed(Y)):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        stack.append((rho, a))
        q -= a * y
    r = q / h
    for (s, y), (rho, a) in zip(zip(S, Y), reversed(stack)):
        b = rho * (y @ r)
        r += s * (a - b)
    return r
