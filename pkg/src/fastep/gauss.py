"""Dense Gaussian backend for Q(u|y).

A(pi) = sigma^-2 X^T X + B^T diag(pi) B is factorized by Cholesky.  Marginal
variances z = diag(B A^-1 B^T) are accumulated from the explicit inverse,
which is formed from the factor, and the dual value g*(z) = z^T pi - log|A|
is cached alongside so the decoupled energy can be evaluated later without
touching A again.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, lapack

from .model import LOG_2PI, ModelSpec, SiteParams


class FactorizationError(np.linalg.LinAlgError):
    def __init__(self, pivot):
        super().__init__(f"precision matrix not positive definite (pivot {pivot})")
        self.pivot = pivot


@dataclass
class Factorization:
    chol: np.ndarray  # lower triangular, A = L L^T
    pi: np.ndarray


@dataclass
class GaussState:
    chol: np.ndarray
    u_star: np.ndarray
    s_star: np.ndarray
    z: np.ndarray | None
    logdet: float
    log_zq: float
    gstar: float | None
    pi_at_z: np.ndarray
    ainv: np.ndarray | None = None

    @property
    def has_variances(self):
        return self.z is not None


def precision_matrix(model: ModelSpec, pi) -> np.ndarray:
    Bs = model.B_sparse
    A = model.XtX / model.noise_var
    BtPB = (Bs.T @ Bs.multiply(np.asarray(pi, dtype=float)[:, None]).tocsr()).toarray()
    return A + BtPB


def build_precision(model: ModelSpec, th: SiteParams) -> Factorization:
    """Cholesky factor of A(pi); raises FactorizationError with the failing pivot."""
    A = precision_matrix(model, th.pi)
    L, info = lapack.dpotrf(A, lower=1, clean=1, overwrite_a=1)
    if info != 0:
        raise FactorizationError(info - 1 if info > 0 else info)
    return Factorization(L, np.array(th.pi, dtype=float))


def rhs_vector(model: ModelSpec, th: SiteParams) -> np.ndarray:
    return model.Xty / model.noise_var + model.B.apply_adjoint(th.b)


def posterior_mean(model: ModelSpec, th: SiteParams, fac: Factorization) -> np.ndarray:
    """Solves A u* = sigma^-2 X^T y + B^T b."""
    return cho_solve((fac.chol, True), rhs_vector(model, th))


def inverse_from_chol(chol) -> np.ndarray:
    inv, info = lapack.dpotri(chol, lower=1)
    if info != 0:
        raise FactorizationError(info)
    il = np.tril_indices_from(inv, -1)
    inv[il[1], il[0]] = inv[il]
    return inv


def marginal_variances(model: ModelSpec, fac: Factorization, block: int = 512, return_inverse: bool = False):
    """z_j = (B A^-1 B^T)_jj from the explicit inverse.

    Columns of C = B A^-1 are produced in blocks with the operator B; only
    the entries of C on the sparsity pattern of B are needed.
    """
    ainv = inverse_from_chol(fac.chol)
    z = variances_from_inverse(model, ainv, block)
    return (z, ainv) if return_inverse else z


def variances_from_inverse(model: ModelSpec, ainv, block: int = 512) -> np.ndarray:
    Bc = model.B_csc
    z = np.zeros(model.q)
    for start in range(0, model.n, block):
        stop = min(start + block, model.n)
        C = model.B.apply(np.ascontiguousarray(ainv[:, start:stop]))
        lo, hi = Bc.indptr[start], Bc.indptr[stop]
        rows = Bc.indices[lo:hi]
        cols = np.repeat(np.arange(stop - start), np.diff(Bc.indptr[start:stop + 1]))
        z += np.bincount(rows, weights=Bc.data[lo:hi] * C[rows, cols], minlength=model.q)
    if np.any(~(z > 0)):
        raise FactorizationError(int(np.flatnonzero(~(z > 0))[0]))
    return z


def log_det(fac: Factorization) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(fac.chol))))


def residual_term(model: ModelSpec, th: SiteParams, u) -> float:
    """R = sigma^-2 ||y - X u||^2 + s^T diag(pi) s - 2 b^T s."""
    s = model.B.apply(u)
    return model.data_fit(u) + float(s @ (th.pi * s)) - 2.0 * float(th.b @ s)


def log_zq_constant(model: ModelSpec) -> float:
    """Additive constant of -2 log Z_Q beyond log|A| + R."""
    return model.m * (LOG_2PI + np.log(model.noise_var)) - model.n * LOG_2PI


def log_zq(model: ModelSpec, th: SiteParams, fac: Factorization, u_star) -> float:
    m2 = log_det(fac) + residual_term(model, th, u_star) + log_zq_constant(model)
    return -0.5 * m2


def refresh_dual(state: GaussState):
    """(z, g*(z)) with g* = z^T pi - log|A(pi)| at the state's pi."""
    if state.z is None:
        raise ValueError("state carries no marginal variances")
    gstar = float(state.z @ state.pi_at_z) - state.logdet
    return state.z, gstar


def gauss_state(model: ModelSpec, th: SiteParams, variances: bool = True) -> GaussState:
    """Factorize, solve for the mean and optionally compute variances and g*."""
    fac = build_precision(model, th)
    u = posterior_mean(model, th, fac)
    ld = log_det(fac)
    lz = log_zq(model, th, fac, u)
    state = GaussState(fac.chol, u, model.B.apply(u), None, ld, lz, None, fac.pi)
    if variances:
        state.z, state.ainv = marginal_variances(model, fac, return_inverse=True)
        state.z, state.gstar = refresh_dual(state)
    return state
