"""EP energy pieces.

phi(theta, theta~) = phi_cap + phi_cup with

    phi_cap = -(2/eta) sum_i log Zhat_i(theta~_i - eta theta_i) - 2 log Z_Q(theta)
    phi_cup = (2/eta) sum_i log Z_i(theta~_i).

The decoupled variant replaces log|A(pi)| inside -2 log Z_Q by its linear
upper bound z^T pi - g*(z).  All values carry the additive constant fixed by
:func:`fastep.gauss.log_zq`, so coupled and decoupled energies are directly
comparable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve

from . import gauss
from .model import InvalidCavityError, ModelSpec, SiteParams, Sites, TildeParams, cavity, log_partition_gauss1d
from .tilted import tilted_moments_batch


@dataclass
class EnergyBreakdown:
    phi: float
    minus2_log_zq: float
    site_sum: float
    coupling: float = 0.0
    cup: float = 0.0


def phi_cup(tt: TildeParams, eta: float) -> float:
    return (2.0 / eta) * float(np.sum(log_partition_gauss1d(tt.pi_tilde, tt.b_tilde)))


def site_log_zhat(th: SiteParams, tt: TildeParams, sites: Sites, eta: float):
    """Tilted moments at the cavity tt - eta * th."""
    cav = cavity(tt, th, eta)
    bad = np.flatnonzero(~(cav.pi_minus > 0))
    if bad.size:
        raise InvalidCavityError("cavity precision must be positive", int(bad[0]))
    return tilted_moments_batch(cav, sites, eta)


def phi_cap_coupled(th: SiteParams, tt: TildeParams, model: ModelSpec, state: gauss.GaussState | None = None) -> float:
    return phi_total(th, tt, model, state, cup=False).phi


def phi_total(th: SiteParams, tt: TildeParams, model: ModelSpec, state: gauss.GaussState | None = None, cup: bool = True) -> EnergyBreakdown:
    """phi_cap + phi_cup; pass ``state`` to reuse a factorization at th.pi."""
    eta = model.eta
    tm = site_log_zhat(th, tt, model.sites, eta)
    if state is None:
        state = gauss.gauss_state(model, th, variances=False)
    m2 = -2.0 * state.log_zq
    ss = -(2.0 / eta) * float(np.sum(tm.log_zhat))
    c = phi_cup(tt, eta) if cup else 0.0
    return EnergyBreakdown(m2 + ss + c, m2, ss, 0.0, c)


def psi_sites(s, th: SiteParams, z, tt: TildeParams, sites: Sites, eta: float):
    """psi_i(s_i, pi_i, b_i) = -(z_i + s_i^2) pi_i + 2 b_i s_i + (2/eta) log Zhat_i."""
    s = np.asarray(s, dtype=float)
    tm = site_log_zhat(th, tt, sites, eta)
    return -(z + s ** 2) * th.pi + 2.0 * th.b * s + (2.0 / eta) * tm.log_zhat


def psi_site(s, pi_i, b_i, z_i, pt_i, bt_i, site, eta):
    """Scalar form of :func:`psi_sites`."""
    th = SiteParams([pi_i], [b_i])
    tt = TildeParams([pt_i], [bt_i])
    return float(psi_sites([s], th, np.array([z_i], float), tt, Sites.from_list([site]), eta)[0])


def min_residual(model: ModelSpec, th: SiteParams, fac: gauss.Factorization | None = None):
    """min_u R(pi, b, u) and its minimizer."""
    if fac is None:
        fac = gauss.build_precision(model, th)
    rhs = gauss.rhs_vector(model, th)
    u = cho_solve((fac.chol, True), rhs)
    return model.yty / model.noise_var - float(rhs @ u), u


def phi_decoupled(th: SiteParams, z, tt: TildeParams, model: ModelSpec, gstar: float, eta: float | None = None) -> EnergyBreakdown:
    """phi(theta, z, theta~) including constants and phi_cup."""
    eta = model.eta if eta is None else eta
    tm = site_log_zhat(th, tt, model.sites, eta)
    rmin, _ = min_residual(model, th)
    coupling = float(np.asarray(z) @ th.pi) - gstar
    m2 = rmin + gauss.log_zq_constant(model)
    ss = -(2.0 / eta) * float(np.sum(tm.log_zhat))
    c = phi_cup(tt, eta)
    return EnergyBreakdown(m2 + ss + coupling + c, m2, ss, coupling, c)


def phi_z_from_objective(f_min: float, gstar: float, tt: TildeParams, model: ModelSpec) -> float:
    """phi(z, theta~) from the optimal PLS objective value min_u f(u)."""
    return f_min - gstar + gauss.log_zq_constant(model) + phi_cup(tt, model.eta)


def delta_metric(a: float, b: float) -> float:
    """Relative change (b - a) / max(|a|, |b|, 1e-9)."""
    return (b - a) / max(abs(a), abs(b), 1e-9)

