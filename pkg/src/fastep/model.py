"""Model container and natural-parameter algebra.

Site quantities are stored as length-q arrays so every solver can work on
all potentials at once.  Notation follows the usual EP conventions:

* site parameters ``(pi, b)`` enter Q through exp(b s - pi s^2 / 2),
* tilde parameters ``(pi_tilde, b_tilde)`` are the natural parameters of the
  marginals N(mu, rho): pi_tilde = 1/rho, b_tilde = mu/rho,
* cavity parameters are tilde - eta * site.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .operators import LinOp

LAPLACE, GAUSSIAN, FLAT = 0, 1, 2
_KIND_NAMES = {"laplace": LAPLACE, "gaussian": GAUSSIAN, "flat": FLAT}

# Cavities with pi_minus below KAPPA_MIN * pi_tilde are rejected.
KAPPA_MIN = 1e-6
LOG_2PI = np.log(2.0 * np.pi)


class InvalidCavityError(ValueError):
    def __init__(self, message, index=None):
        super().__init__(message if index is None else f"{message} (site {index})")
        self.index = index


@dataclass(frozen=True)
class SitePotential:
    """One potential t_i(s_i)."""

    kind: str
    tau: float = 0.0
    mean: float = 0.0
    var: float = 1.0

    def __post_init__(self):
        if self.kind not in _KIND_NAMES:
            raise ValueError(f"unknown potential kind {self.kind!r}")
        if self.kind == "laplace" and not self.tau > 0:
            raise ValueError("Laplace scale tau must be positive")
        if self.kind == "gaussian" and not self.var > 0:
            raise ValueError("Gaussian site variance must be positive")

    @classmethod
    def laplace(cls, tau):
        return cls("laplace", tau=float(tau))

    @classmethod
    def gaussian(cls, mean, var):
        return cls("gaussian", mean=float(mean), var=float(var))

    @classmethod
    def flat(cls):
        return cls("flat")


class Sites:
    """Vectorized collection of q potentials."""

    def __init__(self, kind, tau=None, mean=None, var=None):
        kind = np.asarray(kind, dtype=np.int8)
        q = kind.size
        self.kind = kind
        self.tau = np.zeros(q) if tau is None else np.broadcast_to(np.asarray(tau, float), (q,)).copy()
        self.mean = np.zeros(q) if mean is None else np.broadcast_to(np.asarray(mean, float), (q,)).copy()
        self.var = np.ones(q) if var is None else np.broadcast_to(np.asarray(var, float), (q,)).copy()
        if np.any(self.tau[kind == LAPLACE] <= 0):
            raise ValueError("Laplace scale tau must be positive")
        if np.any(self.var[kind == GAUSSIAN] <= 0):
            raise ValueError("Gaussian site variance must be positive")

    def __len__(self):
        return self.kind.size

    @classmethod
    def laplace(cls, tau, q=None):
        tau = np.asarray(tau, dtype=float)
        if q is not None:
            tau = np.broadcast_to(tau, (q,))
        return cls(np.full(tau.size, LAPLACE), tau=tau)

    @classmethod
    def flat(cls, q):
        return cls(np.full(q, FLAT))

    @classmethod
    def from_list(cls, potentials):
        potentials = list(potentials)
        return cls(
            [_KIND_NAMES[p.kind] for p in potentials],
            tau=[p.tau for p in potentials],
            mean=[p.mean for p in potentials],
            var=[p.var for p in potentials],
        )

    def subset(self, idx):
        return Sites(self.kind[idx], self.tau[idx], self.mean[idx], self.var[idx])

    def __getitem__(self, i) -> SitePotential:
        name = {v: k for k, v in _KIND_NAMES.items()}[int(self.kind[i])]
        return SitePotential(name, float(self.tau[i]), float(self.mean[i]), float(self.var[i]))

    @property
    def all_laplace(self):
        return bool(np.all(self.kind == LAPLACE))


@dataclass
class SiteParams:
    """theta = (pi, b)."""

    pi: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=float)
        self.b = np.asarray(self.b, dtype=float)

    def copy(self):
        return SiteParams(self.pi.copy(), self.b.copy())


@dataclass
class TildeParams:
    """Natural parameters (pi_tilde, b_tilde) of the marginals N(mu, rho)."""

    pi_tilde: np.ndarray
    b_tilde: np.ndarray

    def __post_init__(self):
        self.pi_tilde = np.asarray(self.pi_tilde, dtype=float)
        self.b_tilde = np.asarray(self.b_tilde, dtype=float)

    def copy(self):
        return TildeParams(self.pi_tilde.copy(), self.b_tilde.copy())

    @property
    def mu(self):
        return self.b_tilde / self.pi_tilde

    @property
    def rho(self):
        return 1.0 / self.pi_tilde


@dataclass
class CavityParams:
    pi_minus: np.ndarray
    b_minus: np.ndarray


def moments_to_natural(mu, rho) -> TildeParams:
    mu = np.asarray(mu, dtype=float)
    rho = np.asarray(rho, dtype=float)
    if np.any(~(rho > 0)):
        raise ValueError("variances must be positive")
    return TildeParams(1.0 / rho, mu / rho)


def natural_to_moments(tt: TildeParams):
    if np.any(~(tt.pi_tilde > 0)):
        raise ValueError("pi_tilde must be positive")
    rho = 1.0 / tt.pi_tilde
    return tt.b_tilde * rho, rho


def cavity(tt: TildeParams, th: SiteParams, eta: float) -> CavityParams:
    return CavityParams(tt.pi_tilde - eta * th.pi, tt.b_tilde - eta * th.b)


def cavity_valid(cav: CavityParams, tt: TildeParams, kappa: float = KAPPA_MIN):
    """Boolean mask of sites whose cavity passes the positivity guard."""
    return cav.pi_minus > kappa * tt.pi_tilde


def log_partition_gauss1d(pi_tilde, b_tilde):
    """log of the integral of exp(b s - pi s^2 / 2)."""
    pi_tilde = np.asarray(pi_tilde, dtype=float)
    if np.any(~(pi_tilde > 0)):
        raise ValueError("log partition requires positive precision")
    return 0.5 * (LOG_2PI - np.log(pi_tilde)) + 0.5 * np.asarray(b_tilde) ** 2 / pi_tilde


@dataclass(eq=False)
class ModelSpec:
    """Linear-Gaussian observations y = X u + noise with potentials on s = B u."""

    X: LinOp
    B: LinOp
    y: np.ndarray
    noise_var: float
    sites: Sites
    eta: float = 1.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        if not self.noise_var > 0:
            raise ValueError("noise variance must be positive")
        if not 0 < self.eta <= 1:
            raise ValueError("eta must lie in (0, 1]")
        if self.X.cols != self.B.cols:
            raise ValueError("X and B must act on the same latent dimension")
        if self.y.shape != (self.X.rows,):
            raise ValueError("y must have one entry per row of X")
        if len(self.sites) != self.B.rows:
            raise ValueError("need one potential per row of B")

    @property
    def n(self):
        return self.X.cols

    @property
    def m(self):
        return self.X.rows

    @property
    def q(self):
        return self.B.rows

    @cached_property
    def B_sparse(self):
        return self.B.to_sparse()

    @cached_property
    def B_csc(self):
        return self.B_sparse.tocsc()

    @cached_property
    def XtX(self):
        return self.X.gram_dense()

    @cached_property
    def Xty(self):
        return self.X.apply_adjoint(self.y)

    @cached_property
    def yty(self):
        return float(self.y @ self.y)

    def data_gradient(self, u):
        """Gradient of sigma^-2 ||y - X u||^2."""
        return (2.0 / self.noise_var) * (self.X.apply_adjoint(self.X.apply(u)) - self.Xty)

    def data_fit(self, u):
        r = self.y - self.X.apply(u)
        return float(r @ r) / self.noise_var

    def with_eta(self, eta):
        out = ModelSpec(self.X, self.B, self.y, self.noise_var, self.sites, eta, dict(self.meta))
        for key in ("B_sparse", "B_csc", "XtX", "Xty", "yty"):
            if key in self.__dict__:
                out.__dict__[key] = self.__dict__[key]
        return out


def initial_site_params(sites: Sites) -> SiteParams:
    """pi = tau^2 on Laplace sites, 1 elsewhere; b = 0."""
    pi = np.where(sites.kind == LAPLACE, sites.tau ** 2, 1.0)
    return SiteParams(pi, np.zeros(len(sites)))
