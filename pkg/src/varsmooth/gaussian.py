"""Pairwise Gaussian joints over (theta, x_k, x_{k+1}) and their algebra.

The assumed density is a product of per-step Gaussians, each
parameterised by three mean blocks and an upper-triangular square root

    U = [[A, B, C],
         [0, D, E],
         [0, 0, F]],      cov = U^T U,

with A, D, F upper triangular with strictly positive diagonals.  The
closed-form pieces of the objective (entropies, the Gaussian-prior cross
entropy) live here, together with the flat packing used by the
derivative and solver code.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import ConfigurationError, NumericalError

LOG_2PI = float(np.log(2.0 * np.pi))


def _check_triangular(name, mat):
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ConfigurationError(f"block {name} must be square, got {mat.shape}")
    if mat.shape[0] and np.any(np.tril(mat, -1) != 0.0):
        raise ConfigurationError(f"block {name} must be upper triangular")
    if mat.shape[0] and np.any(np.diag(mat) <= 0.0):
        raise ConfigurationError(f"block {name} must have positive diagonal")
    return mat


@dataclass(frozen=True)
class Gaussian:
    """Plain Gaussian with an upper-triangular factor, cov = chol^T chol."""

    mean: np.ndarray
    chol: np.ndarray  # upper triangular, positive diagonal

    @property
    def dim(self):
        return self.mean.shape[0]

    @property
    def cov(self):
        return self.chol.T @ self.chol

    def sample(self, rng, size):
        z = rng.standard_normal((size, self.dim))
        return self.mean[None, :] + z @ self.chol


def chol_upper(cov):
    """Upper-triangular U with cov = U^T U (positive diagonal)."""
    cov = np.asarray(cov, dtype=float)
    try:
        return scipy.linalg.cholesky(cov, lower=False)
    except scipy.linalg.LinAlgError as exc:
        raise NumericalError(f"matrix is not positive definite: {exc}") from exc


@dataclass(frozen=True)
class PairwiseGaussian:
    """One q(theta, x_k, x_{k+1}) joint.

    Mean blocks mu_theta (ntheta), mu_xk (nx), mu_xk1 (nx) and the six
    factor blocks A (ntheta x ntheta), B, C (ntheta x nx), D, E, F
    (nx x nx); A, D, F upper triangular with positive diagonals.
    """

    mu_theta: np.ndarray
    mu_xk: np.ndarray
    mu_xk1: np.ndarray
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    E: np.ndarray
    F: np.ndarray

    def __post_init__(self):
        for name in ("mu_theta", "mu_xk", "mu_xk1"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        nt, nx = self.mu_theta.shape[0], self.mu_xk.shape[0]
        if self.mu_xk1.shape[0] != nx:
            raise ConfigurationError("mu_xk and mu_xk1 must share a dimension")
        object.__setattr__(self, "A", _check_triangular("A", self.A))
        object.__setattr__(self, "D", _check_triangular("D", self.D))
        object.__setattr__(self, "F", _check_triangular("F", self.F))
        for name, shape in (("B", (nt, nx)), ("C", (nt, nx))):
            mat = np.asarray(getattr(self, name), dtype=float)
            if mat.shape != shape:
                raise ConfigurationError(f"block {name} must have shape {shape}")
            object.__setattr__(self, name, mat)
        for name, dim in (("A", nt), ("D", nx), ("F", nx)):
            if getattr(self, name).shape != (dim, dim):
                raise ConfigurationError(f"block {name} must have shape ({dim}, {dim})")
        if self.E.shape != (nx, nx):
            raise ConfigurationError(f"block E must have shape ({nx}, {nx})")
        object.__setattr__(self, "E", np.asarray(self.E, dtype=float))

    @property
    def ntheta(self):
        return self.mu_theta.shape[0]

    @property
    def nx(self):
        return self.mu_xk.shape[0]

    @property
    def dim(self):
        return self.ntheta + 2 * self.nx

    @property
    def mean(self):
        return np.concatenate([self.mu_theta, self.mu_xk, self.mu_xk1])

    def half_matrix(self):
        """Assemble the full upper-triangular factor U."""
        nt, nx = self.ntheta, self.nx
        U = np.zeros((self.dim, self.dim))
        U[:nt, :nt] = self.A
        U[:nt, nt : nt + nx] = self.B
        U[:nt, nt + nx :] = self.C
        U[nt : nt + nx, nt : nt + nx] = self.D
        U[nt : nt + nx, nt + nx :] = self.E
        U[nt + nx :, nt + nx :] = self.F
        return U

    @property
    def cov(self):
        U = self.half_matrix()
        return U.T @ U

    def as_gaussian(self):
        return Gaussian(self.mean, self.half_matrix())


def pair_from_moments(mean, cov, ntheta, nx):
    """Factorise a full (theta, x_k, x_{k+1}) moment pair into blocks."""
    mean = np.asarray(mean, dtype=float)
    U = chol_upper(cov)
    nt = ntheta
    return PairwiseGaussian(
        mu_theta=mean[:nt],
        mu_xk=mean[nt : nt + nx],
        mu_xk1=mean[nt + nx :],
        A=U[:nt, :nt],
        B=U[:nt, nt : nt + nx],
        C=U[:nt, nt + nx :],
        D=U[nt : nt + nx, nt : nt + nx],
        E=U[nt : nt + nx, nt + nx :],
        F=U[nt + nx :, nt + nx :],
    )


def marginal_theta_x(pair: PairwiseGaussian, which: str) -> Gaussian:
    """Marginal over (theta, x) for the first or second state slot.

    The first-slot marginal keeps the leading sub-factor [[A, B], [0, D]]
    exactly; the second-slot covariance is assembled from the blocks and
    re-factorised.
    """
    nt, nx = pair.ntheta, pair.nx
    if which == "first":
        chol = np.zeros((nt + nx, nt + nx))
        chol[:nt, :nt] = pair.A
        chol[:nt, nt:] = pair.B
        chol[nt:, nt:] = pair.D
        return Gaussian(np.concatenate([pair.mu_theta, pair.mu_xk]), chol)
    if which == "second":
        cov = np.zeros((nt + nx, nt + nx))
        cov[:nt, :nt] = pair.A.T @ pair.A
        cov[:nt, nt:] = pair.A.T @ pair.C
        cov[nt:, :nt] = cov[:nt, nt:].T
        cov[nt:, nt:] = pair.C.T @ pair.C + pair.E.T @ pair.E + pair.F.T @ pair.F
        return Gaussian(np.concatenate([pair.mu_theta, pair.mu_xk1]), chol_upper(cov))
    raise ConfigurationError(f"which must be 'first' or 'second', got {which!r}")


def entropy(dim: int, chol) -> float:
    """Differential entropy of a Gaussian given its triangular factor."""
    chol = np.asarray(chol, dtype=float)
    d = np.diag(chol)
    if np.any(d <= 0):
        raise NumericalError("entropy requires a positive factor diagonal")
    return 0.5 * dim * (1.0 + LOG_2PI) + float(np.sum(np.log(d)))


def chain_next_pair(prev: PairwiseGaussian, mu_xk1, C, E, F) -> PairwiseGaussian:
    """Build a pair whose first slot marginalises prev's second slot.

    The result satisfies the overlap-consistency constraints against prev
    by construction (up to the re-factorisation roundoff).
    """
    marg = marginal_theta_x(prev, "second")
    nt, nx = prev.ntheta, prev.nx
    U = marg.chol
    return PairwiseGaussian(
        mu_theta=marg.mean[:nt],
        mu_xk=marg.mean[nt:],
        mu_xk1=np.asarray(mu_xk1, dtype=float),
        A=U[:nt, :nt],
        B=U[:nt, nt:],
        C=np.asarray(C, dtype=float),
        D=U[nt:, nt:],
        E=np.asarray(E, dtype=float),
        F=np.asarray(F, dtype=float),
    )


@dataclass
class BetaParams:
    """Full decision vector: T pairwise joints plus point-estimate slots."""

    pairs: list
    eta: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.eta = np.asarray(self.eta, dtype=float)
        if not self.pairs:
            raise ConfigurationError("BetaParams needs at least one pair")
        nt, nx = self.pairs[0].ntheta, self.pairs[0].nx
        for p in self.pairs:
            if p.ntheta != nt or p.nx != nx:
                raise ConfigurationError("all pairs must share dimensions")

    @property
    def T(self):
        return len(self.pairs)

    @property
    def ntheta(self):
        return self.pairs[0].ntheta

    @property
    def nx(self):
        return self.pairs[0].nx

    @property
    def n_beta(self):
        p = self.ntheta + 2 * self.nx
        return self.T * (p + p * (p + 1) // 2)


def i4(beta: BetaParams) -> float:
    """Negative pairwise entropies minus negative overlap entropies.

    The overlap marginal is pair k's first state slot, which only needs
    the leading diagonal entries of each factor.
    """
    total = 0.0
    d_overlap = beta.ntheta + beta.nx
    for k, pair in enumerate(beta.pairs):
        total -= entropy(pair.dim, pair.half_matrix())
        if k >= 1:
            total += entropy(d_overlap, marginal_theta_x(pair, "first").chol)
    return total


def gaussian_cross_entropy(q: Gaussian, prior_mean, prior_cov) -> float:
    """E_q[log N(.; prior_mean, prior_cov)] in closed form."""
    m = np.asarray(prior_mean, dtype=float)
    S = np.asarray(prior_cov, dtype=float)
    d = q.dim
    try:
        cf = scipy.linalg.cho_factor(S, lower=False)
    except scipy.linalg.LinAlgError as exc:
        raise ConfigurationError(f"prior covariance is singular: {exc}") from exc
    dev = q.mean - m
    quad = float(dev @ scipy.linalg.cho_solve(cf, dev))
    tr = float(np.trace(scipy.linalg.cho_solve(cf, q.cov)))
    logdet = 2.0 * float(np.sum(np.log(np.diag(cf[0]))))
    return -0.5 * (quad + tr + d * LOG_2PI + logdet)


def i1(beta: BetaParams, model, cfg=None) -> float:
    """Expected log prior of (theta, x_1) under pair 1's first marginal.

    Gaussian priors use the closed form; otherwise the prior log density
    is integrated with the configured quadrature rule.
    """
    from . import quadrature

    marg = marginal_theta_x(beta.pairs[0], "first")
    if model.gaussian_prior is not None:
        pm, pc = model.gaussian_prior
        return gaussian_cross_entropy(marg, pm, pc)
    if cfg is None:
        cfg = quadrature.SchemeConfig()
    pts = quadrature.generate(marg.mean, marg.chol.T, cfg)
    nt = beta.ntheta
    return quadrature.expect(
        pts, lambda xi: float(model.prior_logpdf(xi[nt:], xi[:nt]))
    )


class PairLayout:
    """Flat packing of BetaParams used by derivative and solver code.

    Per pair the layout is [mu (p), upper-triangular entries of U row by
    row]; eta is appended after all pairs.  Diagonal entries of U are
    stored raw (no bijection) so gradients of the objective with respect
    to every free scalar are directly comparable to finite differences.
    """

    def __init__(self, ntheta, nx, T, neta=0):
        self.ntheta, self.nx, self.T, self.neta = ntheta, nx, T, neta
        self.p = ntheta + 2 * nx
        self.iu, self.ju = np.triu_indices(self.p)
        self.n_tri = self.iu.shape[0]
        self.per_pair = self.p + self.n_tri
        self.n_free = T * self.per_pair + neta
        # positions of factor-diagonal entries inside the tri segment
        self.tri_diag = np.flatnonzero(self.iu == self.ju)
        base = np.arange(T) * self.per_pair
        self.diag_indices = (
            base[:, None] + self.p + self.tri_diag[None, :]
        ).ravel()

    def pack(self, beta: BetaParams) -> np.ndarray:
        if beta.T != self.T or beta.ntheta != self.ntheta or beta.nx != self.nx:
            raise ConfigurationError("BetaParams does not match layout dimensions")
        z = np.empty(self.n_free)
        for k, pair in enumerate(beta.pairs):
            off = k * self.per_pair
            z[off : off + self.p] = pair.mean
            z[off + self.p : off + self.per_pair] = pair.half_matrix()[self.iu, self.ju]
        if self.neta:
            z[self.T * self.per_pair :] = beta.eta
        return z

    def unpack(self, z) -> BetaParams:
        z = np.asarray(z, dtype=float)
        if z.shape != (self.n_free,):
            raise ConfigurationError(
                f"flat vector has length {z.shape}, expected ({self.n_free},)"
            )
        nt, nx = self.ntheta, self.nx
        pairs = []
        for k in range(self.T):
            off = k * self.per_pair
            mean = z[off : off + self.p]
            U = np.zeros((self.p, self.p))
            U[self.iu, self.ju] = z[off + self.p : off + self.per_pair]
            pairs.append(
                PairwiseGaussian(
                    mu_theta=mean[:nt],
                    mu_xk=mean[nt : nt + nx],
                    mu_xk1=mean[nt + nx :],
                    A=U[:nt, :nt],
                    B=U[:nt, nt : nt + nx],
                    C=U[:nt, nt + nx :],
                    D=U[nt : nt + nx, nt : nt + nx],
                    E=U[nt : nt + nx, nt + nx :],
                    F=U[nt + nx :, nt + nx :],
                )
            )
        eta = z[self.T * self.per_pair :] if self.neta else np.zeros(0)
        return BetaParams(pairs=pairs, eta=eta)
