"""Penalized least squares inner problem and the updateTTil iteration.

For fixed marginal variances z and tilde parameters theta~, the inner
problem is

    min_u f(u) = sigma^-2 ||y - X u||^2 - sum_i psi_i(s_i),    s = B u,

where psi_i(s) = min_{pi_i, b_i} psi_i(s, pi_i, b_i) is a concave profile.
Each profile is a convex problem in the cavity coordinates
(p, c) = theta~_i - eta (pi_i, b_i), which is where it is solved.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import line_search

from .energy import delta_metric, phi_z_from_objective
from .model import FLAT, GAUSSIAN, KAPPA_MIN, CavityParams, ModelSpec, SiteParams, Sites, TildeParams
from .tilted import TiltedMoments, _laplace, tilted_moments_batch

PI_MAX = 1e8
SITE_TOL = 1e-10
SITE_MAX_NEWTON = 50
# Profiles that stall above SITE_TOL but below this are accepted (roundoff floor).
SITE_ACCEPT = 1e-7


class SiteProfileError(RuntimeError):
    def __init__(self, message, index=None):
        super().__init__(message if index is None else f"{message} (site {index})")
        self.index = index


class PLSError(RuntimeError):
    pass


class MonotonicityError(RuntimeError):
    pass


@dataclass
class SiteProfile:
    psi: np.ndarray
    pi: np.ndarray
    b: np.ndarray
    tilted: TiltedMoments
    newton_steps: int


@dataclass
class PlsResult:
    u_star: np.ndarray
    s_star: np.ndarray
    th: SiteParams
    objective: float
    iterations: int
    converged: bool
    grad_norm: float = np.nan
    tilted: TiltedMoments | None = None


def _psi_cavity(p, c, s, z, pt, bt, log_zhat, eta):
    return (-(z + s * s) * (pt - p) + 2.0 * s * (bt - c) + 2.0 * log_zhat) / eta


def _grad_cavity(tm, s, z, eta):
    dm = tm.mean - s
    gp = (z - tm.variance - dm * (tm.mean + s)) / eta
    gc = 2.0 * dm / eta
    return gp, gc


def _residuals(tm, s, z):
    r1 = np.abs(tm.mean - s) / np.sqrt(z)
    r2 = np.abs(tm.variance - z) / z
    return r1, r2


def _tilted(p, c, tau, eta):
    """Laplace tilted moments without validity checks (NaN marks failure)."""
    with np.errstate(all="ignore"):
        p = np.where(p > 0, p, np.nan)
        return TiltedMoments(*_laplace(p, c, eta * tau))


def _closed_form(s, z, pt, bt, lo, sites, eta):
    """Flat and Gaussian sites: the reduced objective is z p' - log p'."""
    shift_p = np.where(sites.kind == GAUSSIAN, eta / sites.var, 0.0)
    shift_c = np.where(sites.kind == GAUSSIAN, eta * sites.mean / sites.var, 0.0)
    p = np.clip(1.0 / z - shift_p, lo, pt)
    c = s * (p + shift_p) - shift_c
    return p, c


def site_profile_batch(s, z, tt: TildeParams, sites: Sites, eta: float, init: SiteParams | None = None) -> SiteProfile:
    """Minimize psi_i(s_i, pi_i, b_i) over (pi_i, b_i) for every site.

    Box: 0 <= pi_i <= PI_MAX and cavity precision above KAPPA_MIN * pi_tilde.
    Interior minimizers match tilted mean to s_i and tilted variance to z_i.
    """
    s = np.asarray(s, dtype=float)
    z = np.asarray(z, dtype=float)
    pt, bt = tt.pi_tilde, tt.b_tilde
    q = s.size
    lo = np.maximum(KAPPA_MIN * pt, pt - eta * PI_MAX)
    hi = pt.copy()

    closed = (sites.kind == FLAT) | (sites.kind == GAUSSIAN)
    p = np.empty(q)
    c = np.empty(q)
    tm = TiltedMoments(np.empty(q), np.empty(q), np.empty(q))
    if np.any(closed):
        sub = sites.subset(closed)
        p[closed], c[closed] = _closed_form(s[closed], z[closed], pt[closed], bt[closed], lo[closed], sub, eta)
        tm[closed] = tilted_moments_batch(CavityParams(p[closed], c[closed]), sub, eta)

    lap = ~closed
    steps = 0
    if np.any(lap):
        idx = np.flatnonzero(lap)
        ps, cs, tm_lap, steps = _newton_sites(
            s[idx], z[idx], pt[idx], bt[idx], lo[idx], hi[idx], sites.tau[idx], eta,
            None if init is None else (init.pi[idx], init.b[idx]),
            idx,
        )
        p[idx], c[idx] = ps, cs
        tm[idx] = tm_lap
    psi = _psi_cavity(p, c, s, z, pt, bt, tm.log_zhat, eta)
    pi = np.maximum((pt - p) / eta, 0.0)
    b = (bt - c) / eta
    return SiteProfile(psi, pi, b, tm, steps)


def _newton_sites(s, z, pt, bt, lo, hi, tau, eta, init, global_idx):
    if init is None:
        p = hi.copy()
        c = bt.copy()
        # two moment-matching sweeps from the flat site
        for _ in range(2):
            tm = _tilted(p, c, tau, eta)
            ok = np.isfinite(tm.variance) & (tm.variance > 0)
            p = np.where(ok, np.clip(p + 1.0 / z - 1.0 / np.where(ok, tm.variance, 1.0), lo, hi), p)
            c = np.where(ok, c + s / z - np.where(ok, tm.mean / tm.variance, 0.0), c)
    else:
        p = np.clip(pt - eta * init[0], lo, hi)
        c = bt - eta * init[1]

    active = np.ones(s.size, dtype=bool)
    tm = _tilted(p, c, tau, eta)
    steps = 0
    for it in range(SITE_MAX_NEWTON + 1):
        gp, gc = _grad_cavity(tm, s, z, eta)
        r1, r2 = _residuals(tm, s, z)
        at_hi = (p >= hi * (1 - 1e-12)) & (gp < 0)
        at_lo = (p <= lo * (1 + 1e-12)) & (gp > 0)
        bound = at_hi | at_lo
        res = np.where(bound, r1, np.maximum(r1, r2))
        res = np.where(np.isfinite(res), res, np.inf)
        active = res > SITE_TOL
        if not np.any(active) or it == SITE_MAX_NEWTON:
            break
        steps = it + 1
        a = np.flatnonzero(active)
        pa, ca = p[a], c[a]
        sa, za = s[a], z[a]
        taua = tau[a]
        # Hessian: exact in c, forward differences in p
        hcc = 2.0 * tm.variance[a] / eta
        dp = 1e-6 * pa
        back = pa - dp > lo[a]
        dp = np.where(back, -dp, dp)
        tm_h = _tilted(pa + dp, ca, taua, eta)
        gp_h, gc_h = _grad_cavity(tm_h, sa, za, eta)
        hpp = (gp_h - gp[a]) / dp
        hpc = (gc_h - gc[a]) / dp
        det = hpp * hcc - hpc ** 2
        good = (hpp > 0) & (det > 0) & np.isfinite(det)
        d_p = np.where(good, -(hcc * gp[a] - hpc * gc[a]) / np.where(good, det, 1.0), -gp[a] / np.where(hpp > 0, hpp, np.inf))
        d_c = np.where(good, -(hpp * gc[a] - hpc * gp[a]) / np.where(good, det, 1.0), -gc[a] / hcc)
        fix = bound[a]
        d_p = np.where(fix, 0.0, d_p)
        d_c = np.where(fix, -gc[a] / hcc, d_c)

        psi0 = _psi_cavity(pa, ca, sa, za, pt[a], bt[a], tm.log_zhat[a], eta)
        alpha = np.ones(a.size)
        pending = np.ones(a.size, dtype=bool)
        new_p, new_c = pa.copy(), ca.copy()
        new_tm = TiltedMoments(tm.log_zhat[a].copy(), tm.mean[a].copy(), tm.variance[a].copy())
        for _ in range(40):
            k = np.flatnonzero(pending)
            if k.size == 0:
                break
            trial_p = np.clip(pa[k] + alpha[k] * d_p[k], lo[a][k], hi[a][k])
            trial_c = ca[k] + alpha[k] * d_c[k]
            ttm = _tilted(trial_p, trial_c, taua[k], eta)
            psi1 = _psi_cavity(trial_p, trial_c, sa[k], za[k], pt[a][k], bt[a][k], ttm.log_zhat, eta)
            decr = gp[a][k] * (trial_p - pa[k]) + gc[a][k] * (trial_c - ca[k])
            slack = 1e-13 * (np.abs(psi0[k]) + np.abs((z[a][k] + sa[k] ** 2) * pt[a][k] / eta) + np.abs(2 * sa[k] * bt[a][k] / eta))
            ok = np.isfinite(psi1) & np.isfinite(ttm.variance) & (ttm.variance > 0) & (psi1 <= psi0[k] + 1e-4 * decr + slack)
            acc = k[ok]
            new_p[acc], new_c[acc] = trial_p[ok], trial_c[ok]
            new_tm.log_zhat[acc] = ttm.log_zhat[ok]
            new_tm.mean[acc] = ttm.mean[ok]
            new_tm.variance[acc] = ttm.variance[ok]
            pending[acc] = False
            alpha[k[~ok]] *= 0.5
        p[a], c[a] = new_p, new_c
        tm.log_zhat[a], tm.mean[a], tm.variance[a] = new_tm.log_zhat, new_tm.mean, new_tm.variance
        stuck = pending
        if np.all(stuck):
            break

    bad = res > SITE_ACCEPT
    if np.any(bad):
        j = int(np.flatnonzero(bad)[0])
        raise SiteProfileError(f"site profile did not converge (residual {res[j]:.3g})", int(global_idx[j]))
    return p, c, tm, steps


def site_profile(s, z_i, pt_i, bt_i, site, eta, init_th=None):
    """Scalar wrapper returning (psi, pi_i, b_i)."""
    init = None if init_th is None else SiteParams([init_th[0]], [init_th[1]])
    prof = site_profile_batch(
        np.array([s], float), np.array([z_i], float), TildeParams([pt_i], [bt_i]),
        Sites.from_list([site]), eta, init,
    )
    return float(prof.psi[0]), float(prof.pi[0]), float(prof.b[0])


class _PlsObjective:
    """f(u) and its gradient with per-site warm starts and a one-entry cache."""

    def __init__(self, model: ModelSpec, z, tt: TildeParams, init: SiteParams | None):
        self.model = model
        self.z = z
        self.tt = tt
        self.warm = init
        self.key = None
        self.evals = 0

    def evaluate(self, u):
        key = u.tobytes()
        if key == self.key:
            return self.value, self.grad
        m = self.model
        s = m.B.apply(u)
        prof = site_profile_batch(s, self.z, self.tt, m.sites, m.eta, self.warm)
        self.warm = SiteParams(prof.pi, prof.b)
        r = m.X.apply(u) - m.y
        value = float(r @ r) / m.noise_var - float(np.sum(prof.psi))
        grad = (2.0 / m.noise_var) * m.X.apply_adjoint(r) + 2.0 * m.B.apply_adjoint(prof.pi * s - prof.b)
        self.key, self.value, self.grad, self.s, self.prof = key, value, grad, s, prof
        self.evals += 1
        return value, grad

    def f(self, u):
        return self.evaluate(u)[0]

    def g(self, u):
        return self.evaluate(u)[1]


def pls_solve(
    z,
    tt: TildeParams,
    model: ModelSpec,
    u0=None,
    th0: SiteParams | None = None,
    precond: Callable | None = None,
    tol_grad: float = 1e-7,
    max_iter: int = 500,
    memory: int = 10,
) -> PlsResult:
    """Minimize f(u) by limited-memory BFGS with a strong-Wolfe line search.

    ``precond`` applies an approximation of the inverse Hessian of f (for
    instance A^-1 / 2 from the last variance computation); it seeds the
    two-loop recursion in place of the usual scaled identity.
    """
    z = np.asarray(z, dtype=float)
    obj = _PlsObjective(model, z, tt, th0)
    u = np.zeros(model.n) if u0 is None else np.array(u0, dtype=float)
    fval, g = obj.evaluate(u)
    g_zero = g if u0 is None else _PlsObjective(model, z, tt, th0).g(np.zeros(model.n))
    thresh = tol_grad * (1.0 + np.max(np.abs(g_zero)))
    S, Y = [], []
    it = 0
    converged = np.max(np.abs(g)) <= thresh
    while not converged and it < max_iter:
        d = -_two_loop(g, S, Y, precond)
        if not g @ d < 0:
            S, Y = [], []
            d = -(precond(g) if precond is not None else g)
        alpha, _, _, f_new, _, g_new = line_search(obj.f, obj.g, u, d, gfk=g, old_fval=fval, c1=1e-4, c2=0.9, maxiter=30)
        if alpha is None:
            alpha, f_new, g_new = _backtrack(obj, u, d, fval, g)
            if alpha is None:
                if S:
                    S, Y = [], []
                    continue
                break
        if g_new is None:
            f_new, g_new = obj.evaluate(u + alpha * d)
        step = alpha * d
        u = u + step
        yk = g_new - g
        if step @ yk > 1e-12 * np.sqrt((step @ step) * (yk @ yk)):
            S.append(step)
            Y.append(yk)
            if len(S) > memory:
                S.pop(0)
                Y.pop(0)
        fval, g = f_new, g_new
        it += 1
        converged = np.max(np.abs(g)) <= thresh
    fval, g = obj.evaluate(u)
    gnorm = float(np.max(np.abs(g)))
    if not converged and gnorm > 1e3 * thresh:
        raise PLSError(f"PLS stalled with gradient {gnorm:.3g} (threshold {thresh:.3g})")
    prof = obj.prof
    return PlsResult(u, obj.s, SiteParams(prof.pi, prof.b), fval, it, bool(converged), gnorm, prof.tilted)


def _two_loop(g, S, Y, precond):
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(S), reversed(Y)):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        alphas.append((rho, a))
        q -= a * y
    if precond is not None:
        r = precond(q)
    elif S:
        r = q * (S[-1] @ Y[-1]) / (Y[-1] @ Y[-1])
    else:
        r = q / max(1.0, np.max(np.abs(g)))
    for (s, y), (rho, a) in zip(zip(S, Y), reversed(alphas)):
        b = rho * (y @ r)
        r += s * (a - b)
    return r


def _backtrack(obj, u, d, fval, g):
    slope = g @ d
    alpha = 1.0
    for _ in range(50):
        try:
            f_new, g_new = obj.evaluate(u + alpha * d)
        except (SiteProfileError, FloatingPointError):
            f_new = np.inf
        if f_new <= fval + 1e-4 * alpha * slope:
            return alpha, f_new, g_new
        alpha *= 0.5
    return None, None, None


@dataclass
class TtilResult:
    tt: TildeParams
    th: SiteParams
    phi: float
    u_star: np.ndarray
    s_star: np.ndarray
    pls_calls: int
    phi_history: list
    tilted: TiltedMoments | None = None


def update_ttil(
    z,
    tt: TildeParams,
    model: ModelSpec,
    gstar: float,
    u0=None,
    th0: SiteParams | None = None,
    precond: Callable | None = None,
    tol_inner: float = 1e-8,
    max_calls: int = 50,
    mono_tol: float = 1e-9,
) -> TtilResult:
    """Locally minimize phi(z, theta~) over theta~ by alternating PLS and mean refits.

    rho is pinned to z on entry; each round solves PLS and moves mu to s*.
    A rise of phi larger than ``mono_tol`` (relative) raises MonotonicityError.
    """
    z = np.asarray(z, dtype=float)
    mu = tt.mu
    cur = TildeParams(1.0 / z, mu / z)
    history = []
    res = None
    th = th0
    u = u0
    for call in range(max_calls):
        res = pls_solve(z, cur, model, u0=u, th0=th, precond=precond)
        phi = phi_z_from_objective(res.objective, gstar, cur, model)
        if history and delta_metric(history[-1], phi) > mono_tol:
            raise MonotonicityError(
                f"phi(z, theta~) rose from {history[-1]!r} to {phi!r} in updateTTil round {call}"
            )
        history.append(phi)
        u, th = res.u_star, res.th
        if len(history) > 1 and abs(delta_metric(history[-2], history[-1])) < tol_inner:
            break
        if call + 1 < max_calls:
            cur = TildeParams(1.0 / z, res.s_star / z)
    return TtilResult(cur, res.th, history[-1], res.u_star, res.s_star, len(history), history, res.tilted)
