"""Sigma-point quadrature rules for Gaussian expectations.

Two rules are provided: the scaled unscented transform (exact for
polynomials up to total degree 3) and a fully symmetric fifth-degree
cubature (exact up to degree 5, 2n^2+1 points).  Both rules are realised
as a fixed set of standard-normal points and weights; points for an
arbitrary Gaussian N(m, S^T S) are the affine image ``m + S^T zeta``.
That affine structure is what downstream derivative code relies on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, EvaluationError


@dataclass(frozen=True)
class SchemeConfig:
    """Quadrature rule selection.

    kind is "unscented" or "cubature5".  alpha, kappa, beta_ut only apply
    to the unscented rule; beta_ut is kept for interface compatibility
    with the usual covariance-weight convention but does not enter the
    expectation weights (with alpha=1, beta_ut=0 the conventions agree
    anyway).
    """

    kind: str = "cubature5"
    alpha: float = 1.0
    kappa: float = 0.0
    beta_ut: float = 0.0

    def __post_init__(self):
        if self.kind not in ("unscented", "cubature5"):
            raise ConfigurationError(f"unknown quadrature kind {self.kind!r}")
        if self.kind == "unscented" and self.alpha <= 0:
            raise ConfigurationError("unscented alpha must be positive")


@dataclass(frozen=True)
class SigmaPointSet:
    """Weighted points realizing a Gaussian quadrature rule."""

    points: np.ndarray  # (n_s, n)
    weights: np.ndarray  # (n_s,)
    scheme: str = "unscented"

    @property
    def n_points(self):
        return self.points.shape[0]

    @property
    def dim(self):
        return self.points.shape[1]


def unit_points(cfg: SchemeConfig, n: int):
    """Standard-normal points and weights (zeta, w) for dimension n.

    zeta has shape (n_s, n) and w shape (n_s,); weights sum to one.
    Point order is deterministic.
    """
    if n < 1:
        raise ConfigurationError("quadrature dimension must be >= 1")
    if cfg.kind == "unscented":
        lam = cfg.alpha**2 * (n + cfg.kappa) - n
        if n + lam <= 0:
            raise ConfigurationError(
                f"degenerate unscented spread: n + lambda = {n + lam}"
            )
        scale = np.sqrt(n + lam)
        zeta = np.zeros((2 * n + 1, n))
        zeta[1 : n + 1] = scale * np.eye(n)
        zeta[n + 1 :] = -scale * np.eye(n)
        w = np.full(2 * n + 1, 1.0 / (2.0 * (n + lam)))
        w[0] = lam / (n + lam)
        return zeta, w
    # Fifth-degree fully symmetric rule: centre, axis and pair points.
    n_s = 2 * n * n + 1
    zeta = np.zeros((n_s, n))
    w = np.zeros(n_s)
    w[0] = 2.0 / (n + 2.0)
    r1 = np.sqrt(n + 2.0)
    zeta[1 : n + 1] = r1 * np.eye(n)
    zeta[n + 1 : 2 * n + 1] = -r1 * np.eye(n)
    w[1 : 2 * n + 1] = (4.0 - n) / (2.0 * (n + 2.0) ** 2)
    r2 = np.sqrt((n + 2.0) / 2.0)
    idx = 2 * n + 1
    for i in range(n):
        for j in range(i + 1, n):
            for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                zeta[idx, i] = si * r2
                zeta[idx, j] = sj * r2
                idx += 1
    w[2 * n + 1 :] = 1.0 / (n + 2.0) ** 2
    return zeta, w


def generate(mean, cholT, cfg: SchemeConfig) -> SigmaPointSet:
    """Sigma points for N(mean, cholT @ cholT.T).

    cholT is the transposed upper-triangular factor, i.e. the lower
    triangle whose columns span the covariance square root; every point
    is ``mean + cholT @ zeta_j``.
    """
    mean = np.asarray(mean, dtype=float)
    cholT = np.asarray(cholT, dtype=float)
    n = mean.shape[0]
    if cholT.shape != (n, n):
        raise ConfigurationError(
            f"factor shape {cholT.shape} does not match mean dimension {n}"
        )
    zeta, w = unit_points(cfg, n)
    points = mean[None, :] + zeta @ cholT.T
    return SigmaPointSet(points=points, weights=w, scheme=cfg.kind)


def expect(point_set: SigmaPointSet, f) -> float:
    """Weighted sum of f over the sigma points.

    f maps an (n,) vector to a scalar.  -inf values propagate to a -inf
    result; NaN raises EvaluationError naming the offending point.
    """
    total = 0.0
    neg_inf = False
    for j, xi in enumerate(point_set.points):
        v = float(f(xi))
        if np.isnan(v):
            raise EvaluationError(f"integrand returned NaN at sigma point {j}")
        if np.isinf(v) and v < 0:
            neg_inf = True
            continue
        total += point_set.weights[j] * v
    if neg_inf:
        return -np.inf
    return total
