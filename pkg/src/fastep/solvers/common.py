"""Configuration, traces and shared helpers for the EP solvers."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .. import gauss
from ..model import ModelSpec, SiteParams, TildeParams, cavity, initial_site_params, moments_to_natural
from ..tilted import tilted_moments_batch

SOLVER_KINDS = ("sequential", "parallel", "fast", "vb")


@dataclass
class SolverConfig:
    epsilon: float = 1e-12
    damping: float = 0.9
    max_outer: int = 200
    tol_fixed_point: float = 1e-5
    solver_kind: str = "fast"
    max_backoff: int = 6
    tol_inner: float = 1e-8
    max_inner: int = 50
    time_limit: float | None = None

    def __post_init__(self):
        if self.solver_kind not in SOLVER_KINDS:
            raise ValueError(f"unknown solver kind {self.solver_kind!r}")
        for name in ("epsilon", "tol_fixed_point", "tol_inner"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        if self.max_outer < 1:
            raise ValueError("max_outer must be at least 1")


@dataclass
class TraceRow:
    iter: int
    time_sec: float
    phi: float
    n_var_comp: int
    fallback: bool = False


class SolverTrace:
    """Per-outer-iteration record of time, energy and variance computations."""

    HEADER = "iter,time_sec,phi,n_var_comp,fallback"

    def __init__(self):
        self.rows: list[TraceRow] = []
        self.start = time.perf_counter()
        self.n_var_comp = 0

    def elapsed(self):
        return time.perf_counter() - self.start

    def count(self, k=1):
        self.n_var_comp += k

    def add(self, phi, fallback=False):
        self.rows.append(TraceRow(len(self.rows), self.elapsed(), float(phi), self.n_var_comp, bool(fallback)))

    @property
    def phi(self):
        return np.array([r.phi for r in self.rows])

    @property
    def times(self):
        return np.array([r.time_sec for r in self.rows])

    @property
    def fallback_count(self):
        return sum(r.fallback for r in self.rows)

    def to_csv(self) -> str:
        lines = [self.HEADER]
        for r in self.rows:
            lines.append(f"{r.iter},{r.time_sec:.6f},{r.phi:.17g},{r.n_var_comp},{int(r.fallback)}")
        return "\n".join(lines) + "\n"

    def time_to(self, phi_star, rel):
        """(time, n_var_comp) of the first row within relative distance ``rel`` of phi_star."""
        for r in self.rows:
            if abs((r.phi - phi_star) / phi_star) < rel:
                return r.time_sec, r.n_var_comp
        return np.inf, None


@dataclass
class SolverResult:
    th: SiteParams
    tt: TildeParams
    state: gauss.GaussState
    trace: SolverTrace
    converged: bool = False
    diverged: bool = False
    residual: float = np.nan
    phi: float = np.nan
    info: dict = field(default_factory=dict)

    def __iter__(self):
        return iter((self.th, self.tt, self.state, self.trace))


def marginal_tilde(state: gauss.GaussState) -> TildeParams:
    return moments_to_natural(state.s_star, state.z)


def initial_state(model: ModelSpec, trace: SolverTrace, init: SiteParams | None = None):
    th = initial_site_params(model.sites) if init is None else init.copy()
    state = gauss.gauss_state(model, th)
    trace.count()
    return th, state


def ep_fixed_point_residual(th: SiteParams, tt: TildeParams, model: ModelSpec, state: gauss.GaussState, eta: float | None = None) -> float:
    """Distance from expectation consistency; zero exactly at an EP fixed point.

    Tilted moments are compared with the Q marginals (s*, z); tilde
    parameters are compared with the same marginals.  The state must carry
    variances at th.pi.
    """
    eta = model.eta if eta is None else eta
    cav = cavity(tt, th, eta)
    if np.any(~(cav.pi_minus > 0)):
        return np.inf
    try:
        tm = tilted_moments_batch(cav, model.sites, eta)
    except (ValueError, FloatingPointError):
        return np.inf
    s, z = state.s_star, state.z
    r_mean = np.max(np.abs(tm.mean - s) / (1.0 + np.abs(s)), initial=0.0)
    r_var = np.max(np.abs(tm.variance - z) / (1.0 + z), initial=0.0)
    mu, rho = tt.mu, tt.rho
    return float(max(r_mean, r_var) + np.max(np.abs(mu - s), initial=0.0) + np.max(np.abs(rho - z), initial=0.0))


def inverse_preconditioner(state: gauss.GaussState):
    """v -> A^-1 v / 2, an approximate inverse Hessian of the PLS objective."""
    ainv = state.ainv
    if ainv is None:
        return None
    return lambda v: 0.5 * (ainv @ v)


def scaled_fixed_point_residual(th: SiteParams, tt: TildeParams, model: ModelSpec, state: gauss.GaussState) -> float:
    """Scale-free variant: mean gaps in marginal standard deviations, variance gaps relative to z."""
    eta = model.eta
    cav = cavity(tt, th, eta)
    if np.any(~(cav.pi_minus > 0)):
        return np.inf
    try:
        tm = tilted_moments_batch(cav, model.sites, eta)
    except (ValueError, FloatingPointError):
        return np.inf
    s, z = state.s_star, state.z
    sd = np.sqrt(z)
    gaps = (
        np.abs(tm.mean - s) / sd,
        np.abs(tm.variance - z) / z,
        np.abs(tt.mu - s) / sd,
        np.abs(tt.rho - z) / z,
    )
    return float(max(np.max(g, initial=0.0) for g in gaps))
