"""Variational bounding baseline for Laplace potentials.

Each Laplace factor is bounded by a Gaussian in s with a free precision:

    exp(-tau |s|) = max_{pi > 0} exp(-pi s^2 / 2 - h(pi) / 2),   h(pi) = tau^2 / pi,

and b = 0 throughout (the potentials are even).  The resulting upper bound
phi_VB(pi) >= -2 log Z is minimized by a double loop: the outer loop sets z =
Var_Q[s|y] and g*(z), the inner loop minimizes over (pi, u) with z fixed.
Eliminating pi analytically (pi_i = tau_i / sqrt(z_i + s_i^2)) leaves the
smooth convex problem

    min_u sigma^-2 ||y - X u||^2 + sum_i 2 tau_i sqrt(z_i + s_i^2).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from . import gauss
from .model import ModelSpec, SiteParams
from .solvers.common import SolverConfig, SolverTrace


@dataclass
class VbState:
    pi: np.ndarray
    z: np.ndarray
    u_star: np.ndarray
    phi_vb: float
    state: gauss.GaussState | None = None

    @property
    def th(self):
        return SiteParams(self.pi, np.zeros_like(self.pi))


def h_laplace(pi, tau):
    """h_i(pi_i) = tau_i^2 / pi_i."""
    return tau ** 2 / pi


def inner_objective(u, z, model: ModelSpec):
    tau = model.sites.tau
    s = model.B.apply(u)
    r = model.X.apply(u) - model.y
    root = np.sqrt(z + s * s)
    value = float(r @ r) / model.noise_var + 2.0 * float(tau @ root)
    grad = (2.0 / model.noise_var) * model.X.apply_adjoint(r) + 2.0 * model.B.apply_adjoint(tau * s / root)
    return value, grad


def phi_vb(pi, z, gstar, model: ModelSpec) -> float:
    """z^T pi - g* + min_u R(pi, 0, u) + sum h(pi) + constants."""
    th = SiteParams(pi, np.zeros_like(pi))
    fac = gauss.build_precision(model, th)
    rhs = gauss.rhs_vector(model, th)
    u = gauss.cho_solve((fac.chol, True), rhs)
    rmin = model.yty / model.noise_var - float(rhs @ u)
    return float(z @ pi) - gstar + rmin + float(np.sum(h_laplace(pi, model.sites.tau))) + gauss.log_zq_constant(model)


def vb_solve(model: ModelSpec, config: SolverConfig | None = None, tol: float = 1e-9, gtol: float = 1e-9):
    """Double-loop minimization of the VB bound; returns (VbState, SolverTrace)."""
    if not model.sites.all_laplace:
        raise ValueError("the VB baseline is implemented for Laplace potentials only")
    config = config or SolverConfig(solver_kind="vb")
    trace = SolverTrace()
    tau = model.sites.tau
    pi = tau ** 2
    u = np.zeros(model.n)
    phi_prev = np.inf
    state = None
    phi = np.inf
    for outer in range(config.max_outer):
        state = gauss.gauss_state(model, SiteParams(pi, np.zeros_like(pi)))
        trace.count()
        z, gstar = state.z, state.gstar
        if outer == 0:
            u = state.u_star
        res = minimize(inner_objective, u, args=(z, model), jac=True, method="L-BFGS-B",
                       options={"maxiter": 5000, "gtol": gtol, "ftol": 1e-15, "maxcor": 20})
        u = res.x
        s = model.B.apply(u)
        pi = tau / np.sqrt(z + s * s)
        phi = float(res.fun) - gstar + gauss.log_zq_constant(model)
        trace.add(phi)
        if abs(phi_prev - phi) <= tol * max(abs(phi), 1e-9):
            break
        phi_prev = phi
    state = gauss.gauss_state(model, SiteParams(pi, np.zeros_like(pi)))
    trace.count()
    return VbState(pi, state.z, state.u_star, phi, state), trace


def u_marginal_variances(state: gauss.GaussState) -> np.ndarray:
    ainv = state.ainv if state.ainv is not None else gauss.inverse_from_chol(state.chol)
    return np.diag(ainv).copy()


@dataclass
class Comparison:
    ep: dict
    vb: dict
    summary: dict

    def to_text(self) -> str:
        lines = [f"{k}={v}" for k, v in self.summary.items()]
        return "\n".join(lines) + "\n"


def compare_ep_vb(model: ModelSpec, ep_result, vb_result: VbState, pi_threshold: float = 10.0) -> Comparison:
    """Aligned marginals of both approximations plus summary statistics."""
    ep_state = ep_result.state
    if ep_state.chol is None and ep_state.ainv is None:
        ep_state = gauss.gauss_state(model, ep_result.th)
    ep = {
        "u_mean": ep_state.u_star,
        "u_var": u_marginal_variances(ep_state),
        "s_mean": ep_state.s_star,
        "s_var": ep_state.z,
        "pi": ep_result.th.pi,
        "b": ep_result.th.b,
    }
    vst = vb_result.state
    vb = {
        "u_mean": vst.u_star,
        "u_var": u_marginal_variances(vst),
        "s_mean": vst.s_star,
        "s_var": vst.z,
        "pi": vb_result.pi,
        "b": np.zeros_like(vb_result.pi),
    }
    summary = {
        "b_vb_max_abs": float(np.max(np.abs(vb["b"]))),
        "b_ep_max_abs": float(np.max(np.abs(ep["b"]))),
        "pi_vb_min": float(np.min(vb["pi"])),
        "pi_vb_frac_above_threshold": float(np.mean(vb["pi"] > pi_threshold)),
        "pi_ep_frac_above_threshold": float(np.mean(ep["pi"] > pi_threshold)),
        "median_u_var_vb": float(np.median(vb["u_var"])),
        "median_u_var_ep": float(np.median(ep["u_var"])),
        "mean_u_var_ratio_ep_over_vb": float(np.mean(ep["u_var"] / vb["u_var"])),
        "mean_s_var_ratio_ep_over_vb": float(np.mean(ep["s_var"] / vb["s_var"])),
        "log_z_ep": -0.5 * float(ep_result.phi),
        "log_z_vb_bound": -0.5 * float(vb_result.phi_vb),
    }
    return Comparison(ep, vb, summary)
