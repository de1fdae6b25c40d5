"""Brute-force reference computations for tests and the self-test command.

Nothing in the solver stack imports this module.  The references favour
independence and accuracy over speed: adaptive quadrature for tilted moments
and tiny partition functions, dense direct linear algebra, nested numerical
optimization for the saddle-point problem and central finite differences.
"""

from __future__ import annotations

import numpy as np
from scipy import integrate, optimize
from scipy.special import erfcx, log_ndtr

from .model import LOG_2PI, CavityParams, ModelSpec, SitePotential, SiteParams, TildeParams
from .tilted import TiltedMoments

# Integration windows extend until the log density has dropped this far.
DROP_NATS = 60.0


class OracleError(RuntimeError):
    pass


def _site_log_potential(site: SitePotential, eta: float):
    if site.kind == "laplace":
        a = eta * site.tau
        return lambda s: -a * np.abs(s), (0.0,)
    if site.kind == "gaussian":
        m, v = site.mean, site.var
        return lambda s: -eta * (0.5 * (LOG_2PI + np.log(v)) + 0.5 * (s - m) ** 2 / v), ()
    return lambda s: 0.0 * s, ()


def _tilted_mode(p, c, site: SitePotential, eta: float):
    if site.kind == "laplace":
        a = eta * site.tau
        if c - a > 0:
            return (c - a) / p
        if c + a < 0:
            return (c + a) / p
        return 0.0
    if site.kind == "gaussian":
        pp = p + eta / site.var
        return (c + eta * site.mean / site.var) / pp
    return c / p


def quad_tilted(cav: CavityParams, site: SitePotential, eta: float, tol: float = 1e-10) -> TiltedMoments:
    """Tilted moments of exp(c s - p s^2 / 2) t(s)^eta by adaptive quadrature.

    The density is log-concave with curvature at least p, so a window of
    half-width sqrt(2 * DROP_NATS / p) around the mode holds all but a
    negligible part of the mass.  Kinks and the mode are passed as
    breakpoints.
    """
    p = float(np.asarray(cav.pi_minus).reshape(-1)[0])
    c = float(np.asarray(cav.b_minus).reshape(-1)[0])
    if not p > 0:
        raise OracleError("cavity precision must be positive")
    logt, kinks = _site_log_potential(site, eta)
    mode = _tilted_mode(p, c, site, eta)

    def logf(s):
        return c * s - 0.5 * p * s * s + logt(s)

    peak = logf(mode)
    half = np.sqrt(2.0 * DROP_NATS / p)
    lo, hi = mode - half, mode + half
    points = sorted({x for x in (*kinks, mode) if lo < x < hi})

    def integral(fn):
        val, err = integrate.quad(
            lambda s: fn(s) * np.exp(logf(s) - peak), lo, hi,
            points=points or None, epsabs=0.0, epsrel=tol, limit=400,
        )
        return val, err

    z0, e0 = integral(lambda s: 1.0)
    m1, e1 = integral(lambda s: s)
    mean = m1 / z0
    v, e2 = integral(lambda s: (s - mean) ** 2)
    var = v / z0
    for val, err in ((z0, e0), (v, e2)):
        if not err <= 50.0 * tol * abs(val):
            raise OracleError(f"quadrature tolerance not reached (estimate {err:.3g} for {val:.3g})")
    return TiltedMoments(np.log(z0) + peak, mean, var)


def quad_logz_model(model: ModelSpec) -> float:
    """log of the integral over u of N(y | X u, sigma^2 I) prod_i t_i(s_i).

    Uses the same potential normalization as the tilted module (Laplace
    factors exp(-tau |s|), normalized Gaussian factors), so the result is
    comparable with -phi / 2 of a converged EP run at eta = 1.
    """
    n = model.n
    if n > 3:
        raise OracleError("tensor-product quadrature is limited to n <= 3")
    X = model.X.materialize_dense()
    B = model.B.materialize_dense()
    y, s2 = model.y, model.noise_var
    sites = [model.sites[i] for i in range(model.q)]
    logts = [_site_log_potential(site, 1.0)[0] for site in sites]
    const = -0.5 * model.m * (LOG_2PI + np.log(s2))

    def neg_log(u):
        u = np.asarray(u, dtype=float)
        r = y - X @ u
        s = B @ u
        return 0.5 * float(r @ r) / s2 - sum(float(lt(si)) for lt, si in zip(logts, s))

    # MAP by a derivative-free polish of a least-squares start
    u0 = np.linalg.lstsq(np.vstack([X / np.sqrt(s2), B]), np.concatenate([y / np.sqrt(s2), np.zeros(model.q)]), rcond=None)[0]
    res = optimize.minimize(neg_log, u0, method="Nelder-Mead", options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": 20000})
    umap, gmin = res.x, res.fun
    # bounding box of the level set {neg_log <= gmin + DROP_NATS}
    cons = {"type": "ineq", "fun": lambda u: gmin + DROP_NATS - neg_log(u)}
    box = []
    for j in range(n):
        ends = []
        for sign in (-1.0, 1.0):
            r = optimize.minimize(lambda u: -sign * u[j], umap, constraints=[cons], method="SLSQP",
                                  options={"ftol": 1e-12, "maxiter": 500})
            ends.append(float(r.x[j]) + sign * 1e-3 * (1.0 + abs(r.x[j])))
        box.append(tuple(ends))

    def integrand(*u):
        return np.exp(gmin - neg_log(np.array(u)))

    def inner_opts(*outer):
        # Laplace kinks and the MAP along the innermost variable u_0
        rest = np.array(outer)
        pts = [umap[0]]
        for i, site in enumerate(sites):
            if site.kind == "laplace" and B[i, 0] != 0:
                pts.append(-(B[i, 1:] @ rest) / B[i, 0])
        lo, hi = box[0]
        pts = [x for x in pts if lo < x < hi]
        return {"points": pts or None, "epsabs": 0.0, "epsrel": 1e-10, "limit": 200}

    outer_opts = {"epsabs": 0.0, "epsrel": 1e-10, "limit": 200}
    val, _ = integrate.nquad(integrand, box, opts=[inner_opts] + [outer_opts] * (n - 1))
    return const - gmin + float(np.log(val))


def fd_gradient(f, x, h: float = 1e-6) -> np.ndarray:
    """Central differences with step h * (1 + |x_i|)."""
    x = np.array(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        step = h * (1.0 + abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += step
        xm[i] -= step
        g[i] = (f(xp) - f(xm)) / (2.0 * step)
    return g


# -- saddle point of phi_cap on tiny instances --------------------------------

def _half_log_mass(x):
    """x^2 / 2 + log Phi(x) without cancellation for negative x."""
    x = np.asarray(x, dtype=float)
    return np.where(x < 0, np.log(0.5 * erfcx(-x / np.sqrt(2.0))), 0.5 * x * x + log_ndtr(x))


def _laplace_terms(p, c, a):
    """log Zhat, mean and second moment for a Laplace site.

    Written independently of the tilted module: a direct two-component
    mixture with Mills ratios, no continued fractions.
    """
    sd = 1.0 / np.sqrt(p)
    xp, xm = (c - a) * sd, -(c + a) * sd
    lp, lm = _half_log_mass(xp), _half_log_mass(xm)
    lse = np.logaddexp(lp, lm)
    log_z = 0.5 * (LOG_2PI - np.log(p)) + lse
    wp = np.exp(lp - lse)
    wm = np.exp(lm - lse)
    # Mills ratios phi(x) / Phi(x) of the two halves
    rp = np.exp(-0.5 * LOG_2PI - lp)
    rm = np.exp(-0.5 * LOG_2PI - lm)
    mp, mm = xp * sd, -xm * sd
    e_p = mp + sd * rp
    e_m = mm - sd * rm
    s2_p = mp ** 2 + sd ** 2 + mp * sd * rp
    s2_m = mm ** 2 + sd ** 2 - mm * sd * rm
    return log_z, wp * e_p + wm * e_m, wp * s2_p + wm * s2_m


def _site_terms(p, c, site: SitePotential, eta):
    if site.kind == "laplace":
        with np.errstate(all="ignore"):
            return _laplace_terms(p, c, eta * site.tau)
    if site.kind == "gaussian":
        pp = p + eta / site.var
        cc = c + eta * site.mean / site.var
        log_z = 0.5 * (LOG_2PI - np.log(pp)) + 0.5 * cc ** 2 / pp - eta * (0.5 * (LOG_2PI + np.log(site.var)) + 0.5 * site.mean ** 2 / site.var)
        return log_z, cc / pp, 1.0 / pp + (cc / pp) ** 2
    return 0.5 * (LOG_2PI - np.log(p)) + 0.5 * c ** 2 / p, c / p, 1.0 / p + (c / p) ** 2


class _Tiny:
    def __init__(self, model: ModelSpec, tt: TildeParams, cond_max: float):
        if model.n > 4 or model.q > 6:
            raise OracleError("saddle_brute is limited to n <= 4 and q <= 6")
        self.X = model.X.materialize_dense()
        self.B = model.B.materialize_dense()
        self.y = model.y
        self.s2 = model.noise_var
        self.eta = model.eta
        self.sites = [model.sites[i] for i in range(model.q)]
        self.pt = np.asarray(tt.pi_tilde, float)
        self.bt = np.asarray(tt.b_tilde, float)
        self.const = model.m * (LOG_2PI + np.log(self.s2)) - model.n * LOG_2PI
        self.G = self.X.T @ self.X / self.s2
        ref = self.G + self.B.T @ np.diag(self.pt / self.eta) @ self.B
        if np.linalg.cond(self.G + self.B.T @ self.B) > cond_max or np.linalg.cond(ref) > cond_max:
            raise OracleError("precision matrix is near singular; strong duality needs A(pi) positive definite")
        self.hi = self.pt / self.eta * (1.0 - 1e-7)

    def A(self, pi):
        return self.G + self.B.T @ (pi[:, None] * self.B)

    def site_sum(self, pi, b):
        out = 0.0
        for i, site in enumerate(self.sites):
            out += _site_terms(self.pt[i] - self.eta * pi[i], self.bt[i] - self.eta * b[i], site, self.eta)[0]
        return -(2.0 / self.eta) * out

    def phi_cap(self, pi, b):
        """min_v phi_cap(v, theta) = log|A| + min_u R - (2/eta) sum log Zhat + const."""
        sign, logdet = np.linalg.slogdet(self.A(pi))
        if sign <= 0:
            return -np.inf
        rhs = self.X.T @ self.y / self.s2 + self.B.T @ b
        u = np.linalg.solve(self.A(pi), rhs)
        rmin = float(self.y @ self.y) / self.s2 - float(rhs @ u)
        return logdet + rmin + self.site_sum(pi, b) + self.const

    def gstar(self, z):
        """inf over pi >= 0 of z^T pi - log|A(pi)|, by projected Newton."""

        def val(p):
            sign, ld = np.linalg.slogdet(self.A(p))
            return np.inf if sign <= 0 else float(z @ p) - ld

        def grad(p):
            return z - np.diag(self.B @ np.linalg.solve(self.A(p), self.B.T))

        r = optimize.minimize(val, np.ones_like(z), jac=grad, method="L-BFGS-B",
                              bounds=[(0.0, None)] * z.size, options={"ftol": 1e-16, "gtol": 1e-12, "maxiter": 5000})
        pi, f = r.x, r.fun
        # Newton polish on the free variables
        for _ in range(50):
            W = self.B @ np.linalg.solve(self.A(pi), self.B.T)
            g = z - np.diag(W)
            free = (pi > 0) | (g < 0)
            pg = np.where(free, g, 0.0)
            if np.max(np.abs(pg)) < 1e-13 * (1.0 + np.max(np.abs(z))):
                break
            d = np.zeros_like(pi)
            H = (W * W)[np.ix_(free, free)]
            d[free] = -np.linalg.lstsq(H, g[free], rcond=None)[0]
            if not g @ d < 0:
                d = -pg
            t = 1.0
            while t > 1e-16:
                trial = np.maximum(pi + t * d, 0.0)
                fn = val(trial)
                if fn <= f + 1e-4 * (g @ (trial - pi)):
                    break
                t *= 0.5
            else:
                break
            f_old, pi, f = f, trial, fn
            if f_old - f < 1e-16 * (1.0 + abs(f)):
                break
        return f, pi

    def site_max(self, i, zi, si):
        """max over (pi_i, b_i) of (z_i + s_i^2) pi_i - 2 b_i s_i - (2/eta) log Zhat_i."""
        site, eta = self.sites[i], self.eta

        def neg(x):
            pi, b = x
            lz, m1, m2 = _site_terms(self.pt[i] - eta * pi, self.bt[i] - eta * b, site, eta)
            val = (zi + si ** 2) * pi - 2.0 * b * si - (2.0 / eta) * lz
            grad = np.array([zi + si ** 2 - m2, -2.0 * si + 2.0 * m1])
            return -val, -grad

        best = None
        for start in ((0.5 * self.hi[i], 0.0), (0.05 * self.hi[i], si * self.pt[i]), (0.95 * self.hi[i], 0.0)):
            r = optimize.minimize(neg, np.array(start), jac=True, method="L-BFGS-B",
                                  bounds=[(0.0, self.hi[i]), (None, None)],
                                  options={"ftol": 1e-15, "gtol": 1e-11, "maxiter": 2000})
            if best is None or r.fun < best.fun:
                best = r
        return -best.fun, best.x


def saddle_brute(model: ModelSpec, tt: TildeParams, restarts: int = 3, seed: int = 0, cond_max: float = 1e10):
    """(max_theta min_v phi_cap, min_v max_theta phi_cap) at fixed theta~.

    v = (z, u*).  Both orders are solved numerically with several restarts;
    the inner minimum over v of the first order is available in closed form
    through log|A| and a linear solve, the inner maximum over theta of the
    second order separates over sites.
    """
    tiny = _Tiny(model, tt, cond_max)
    rng = np.random.default_rng(seed)
    q, n, eta = model.q, model.n, model.eta

    # max_theta min_v
    def neg_maxmin(x):
        pi, b = x[:q], x[q:]
        val = tiny.phi_cap(pi, b)
        return -val if np.isfinite(val) else 1e300

    def grad_maxmin(x):
        pi, b = x[:q], x[q:]
        A = tiny.A(pi)
        Ainv = np.linalg.inv(A)
        rhs = tiny.X.T @ tiny.y / tiny.s2 + tiny.B.T @ b
        u = Ainv @ rhs
        s = tiny.B @ u
        zq = np.einsum("ij,jk,ik->i", tiny.B, Ainv, tiny.B)
        gp, gb = np.empty(q), np.empty(q)
        for i, site in enumerate(tiny.sites):
            _, m1, m2 = _site_terms(tiny.pt[i] - eta * pi[i], tiny.bt[i] - eta * b[i], site, eta)
            gp[i] = zq[i] + s[i] ** 2 - m2
            gb[i] = 2.0 * (m1 - s[i])
        return -np.concatenate([gp, gb])

    best_maxmin = -np.inf
    for k in range(restarts):
        x0 = np.concatenate([tiny.hi * rng.uniform(0.2, 0.8, q), rng.normal(0, 0.1, q)])
        r = optimize.minimize(neg_maxmin, x0, jac=grad_maxmin, method="L-BFGS-B",
                              bounds=[(0.0, h) for h in tiny.hi] + [(None, None)] * q,
                              options={"ftol": 1e-15, "gtol": 1e-10, "maxiter": 5000})
        best_maxmin = max(best_maxmin, -r.fun)

    # min_v max_theta
    def outer(v):
        z, u = np.exp(v[:q]), v[q:]
        s = tiny.B @ u
        gs, pi_g = tiny.gstar(z)
        r = tiny.y - tiny.X @ u
        val = -gs + float(r @ r) / tiny.s2 + tiny.const
        grad_z = -pi_g.copy()
        grad_u = -2.0 * tiny.X.T @ r / tiny.s2
        for i in range(q):
            m, (pi_i, b_i) = tiny.site_max(i, z[i], s[i])
            val += m
            grad_z[i] += pi_i
            grad_u += tiny.B[i] * (2.0 * pi_i * s[i] - 2.0 * b_i)
        return val, np.concatenate([grad_z * z, grad_u])

    best_minmax = np.inf
    for k in range(restarts):
        th0 = SiteParams(tiny.hi * rng.uniform(0.2, 0.8, q), np.zeros(q))
        A = tiny.A(th0.pi)
        z0 = np.einsum("ij,jk,ik->i", tiny.B, np.linalg.inv(A), tiny.B)
        u0 = np.linalg.solve(A, tiny.X.T @ tiny.y / tiny.s2)
        r = optimize.minimize(outer, np.concatenate([np.log(z0), u0]), jac=True, method="L-BFGS-B",
                              options={"ftol": 1e-15, "gtol": 1e-10, "maxiter": 5000})
        best_minmax = min(best_minmax, r.fun)
    return float(best_maxmin), float(best_minmax)
