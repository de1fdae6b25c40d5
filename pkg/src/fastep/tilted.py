"""Moments of the tilted marginals exp(b_minus s - pi_minus s^2 / 2) t(s)^eta.

Laplace sites split the integral at zero into two truncated Gaussians.  Both
halves are evaluated in log space through the scaled complementary error
function; far in the tail (standardized truncation point below -3) the mean
and variance of each half come from the continued fraction of the Mills
ratio, which avoids the cancellation of the direct formulas.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erfcx

from .model import FLAT, GAUSSIAN, LAPLACE, LOG_2PI, CavityParams, InvalidCavityError, Sites, SitePotential

_SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)
_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_TAIL = -3.0
_CF_TERMS = 60
VARIANCE_FLOOR = 1e-12


@dataclass
class TiltedMoments:
    log_zhat: np.ndarray
    mean: np.ndarray
    variance: np.ndarray

    @property
    def second_moment(self):
        return self.variance + self.mean ** 2

    def __getitem__(self, idx):
        return TiltedMoments(self.log_zhat[idx], self.mean[idx], self.variance[idx])

    def __setitem__(self, idx, other):
        self.log_zhat[idx] = other.log_zhat
        self.mean[idx] = other.mean
        self.variance[idx] = other.variance


def _log_half_erfcx(z):
    """z^2/2 + log Phi(z), finite for all z."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    neg = z <= 0
    out[neg] = np.log(0.5 * erfcx(-z[neg] * _INV_SQRT2))
    zp = z[~neg]
    out[~neg] = 0.5 * zp ** 2 + np.log1p(-0.5 * erfcx(zp * _INV_SQRT2) * np.exp(-0.5 * zp ** 2))
    return out


def _truncated_moments(z):
    """Standardized mean and variance of N(z, 1) restricted to [0, inf)."""
    z = np.asarray(z, dtype=float)
    g = np.empty_like(z)
    v = np.empty_like(z)
    tail = z <= _TAIL
    if np.any(tail):
        alpha = -z[tail]
        f = np.zeros_like(alpha)
        for k in range(_CF_TERMS, 1, -1):
            f = k / (alpha + f)
        f1 = 1.0 / (alpha + f)
        g[tail] = f1
        v[tail] = f1 * (f - f1)
    body = ~tail
    if np.any(body):
        zb = z[body]
        lam = np.empty_like(zb)
        neg = zb <= 0
        lam[neg] = _SQRT_2_OVER_PI / erfcx(-zb[neg] * _INV_SQRT2)
        zp = zb[~neg]
        dens = np.exp(-0.5 * zp ** 2) / np.sqrt(2.0 * np.pi)
        lam[~neg] = dens / (1.0 - 0.5 * erfcx(zp * _INV_SQRT2) * np.exp(-0.5 * zp ** 2))
        g[body] = zb + lam
        v[body] = 1.0 - lam * (zb + lam)
    return g, v


def _laplace(p, c, a):
    sd = 1.0 / np.sqrt(p)
    zp = (c - a) * sd
    zm = -(c + a) * sd
    lp = _log_half_erfcx(zp)
    lm = _log_half_erfcx(zm)
    lse = np.logaddexp(lp, lm)
    wp = np.exp(lp - lse)
    wm = np.exp(lm - lse)
    gp, vp = _truncated_moments(zp)
    gm, vm = _truncated_moments(zm)
    ep, em = sd * gp, -sd * gm
    mean = wp * ep + wm * em
    var = sd ** 2 * (wp * vp + wm * vm) + wp * wm * (ep - em) ** 2
    log_z = 0.5 * (LOG_2PI - np.log(p)) + lse
    return log_z, mean, var


def tilted_moments_batch(cav: CavityParams, sites: Sites, eta: float, strict: bool = True) -> TiltedMoments:
    """Elementwise tilted moments for every site; raises with the offending index.

    With ``strict=False`` non-finite or collapsed results are returned as they
    are, which lets line searches reject a trial point instead of aborting.
    """
    p = np.asarray(cav.pi_minus, dtype=float)
    c = np.asarray(cav.b_minus, dtype=float)
    bad = np.flatnonzero(~(p > 0))
    if bad.size and strict:
        raise InvalidCavityError("cavity precision must be positive", int(bad[0]))
    if bad.size:
        p = np.where(p > 0, p, np.nan)
    kind = sites.kind
    log_z = np.empty_like(p)
    mean = np.empty_like(p)
    var = np.empty_like(p)

    sel = kind == FLAT
    if np.any(sel):
        pp, cc = p[sel], c[sel]
        log_z[sel] = 0.5 * (LOG_2PI - np.log(pp)) + 0.5 * cc ** 2 / pp
        mean[sel] = cc / pp
        var[sel] = 1.0 / pp

    sel = kind == GAUSSIAN
    if np.any(sel):
        gm, gv = sites.mean[sel], sites.var[sel]
        pp = p[sel] + eta / gv
        cc = c[sel] + eta * gm / gv
        log_z[sel] = (
            0.5 * (LOG_2PI - np.log(pp)) + 0.5 * cc ** 2 / pp
            - eta * (0.5 * (LOG_2PI + np.log(gv)) + 0.5 * gm ** 2 / gv)
        )
        mean[sel] = cc / pp
        var[sel] = 1.0 / pp

    sel = kind == LAPLACE
    if np.any(sel):
        with np.errstate(invalid="ignore"):
            log_z[sel], mean[sel], var[sel] = _laplace(p[sel], c[sel], eta * sites.tau[sel])

    if not strict:
        return TiltedMoments(log_z, mean, var)
    bad = np.flatnonzero(~(np.isfinite(log_z) & np.isfinite(mean) & np.isfinite(var)))
    if bad.size:
        raise FloatingPointError(f"non-finite tilted moments at site {int(bad[0])}")
    bad = np.flatnonzero(var < VARIANCE_FLOOR / p)
    if bad.size:
        raise FloatingPointError(f"tilted variance collapsed at site {int(bad[0])}")
    return TiltedMoments(log_z, mean, var)


def tilted_moments(pi_minus: float, b_minus: float, site: SitePotential, eta: float) -> TiltedMoments:
    """Scalar version of :func:`tilted_moments_batch`."""
    cav = CavityParams(np.array([pi_minus], dtype=float), np.array([b_minus], dtype=float))
    tm = tilted_moments_batch(cav, Sites.from_list([site]), eta)
    return TiltedMoments(float(tm.log_zhat[0]), float(tm.mean[0]), float(tm.variance[0]))
