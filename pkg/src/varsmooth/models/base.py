"""Model and dataset contracts.

A model is described by two log densities: the joint step density
log p(x_{k+1}, y_k | x_k, theta) and the prior log p(x_1, theta).  Both
must be traceable with jax.numpy so the objective can be differentiated
through them.  Sampling hooks use a numpy Generator and are only needed
for simulation and the particle reference.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .._jax import jnp
from ..errors import ConfigurationError, UnsupportedOperationError


def mvn_logpdf(x, mean, cov):
    """Gaussian log density, traceable in all arguments."""
    dev = x - mean
    L = jnp.linalg.cholesky(cov)
    z = jnp.linalg.solve(L, dev)
    half_logdet = jnp.sum(jnp.log(jnp.diagonal(L)))
    d = dev.shape[0]
    return -0.5 * (z @ z) - half_logdet - 0.5 * d * jnp.log(2.0 * jnp.pi)


@dataclass(frozen=True)
class Dataset:
    """Measurements y_1..y_T with optional per-step inputs."""

    y: np.ndarray  # (T, ny)
    u: Optional[np.ndarray] = None  # (T, nu)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        if y.ndim != 2:
            raise ConfigurationError(f"y must be (T, ny), got shape {y.shape}")
        if not np.all(np.isfinite(y)):
            raise ConfigurationError("measurements must be finite")
        object.__setattr__(self, "y", y)
        if self.u is not None:
            u = np.asarray(self.u, dtype=float)
            if u.ndim != 2 or u.shape[0] != y.shape[0]:
                raise ConfigurationError(
                    f"u must be ({y.shape[0]}, nu), got shape {u.shape}"
                )
            if not np.all(np.isfinite(u)):
                raise ConfigurationError("inputs must be finite")
            object.__setattr__(self, "u", u)

    @property
    def T(self):
        return self.y.shape[0]

    @property
    def ny(self):
        return self.y.shape[1]

    @property
    def nu(self):
        return 0 if self.u is None else self.u.shape[1]

    def inputs(self):
        """Inputs as a dense (T, nu) array, zero-width when absent."""
        if self.u is None:
            return np.zeros((self.T, 0))
        return self.u


@dataclass
class ModelSpec:
    """Bundle of densities and hooks describing one state-space model.

    Required pieces are the dimensions, ``joint_logpdf(x_next, y, x,
    theta, eta, u, k)`` and ``prior_logpdf(x1, theta)``.  Everything else
    is optional and unlocks extra functionality (closed-form prior terms,
    simulation, particle references, Gauss-Newton curvature, exact
    linear-Gaussian references).
    """

    name: str
    ntheta: int
    nx: int
    ny: int
    joint_logpdf: Callable
    prior_logpdf: Callable
    neta: int = 0
    nu: int = 0
    # closed-form N(mean, cov) prior over the stacked (theta, x1) vector
    gaussian_prior: Optional[tuple] = None
    theta_prior_mean: Optional[np.ndarray] = None
    theta_prior_chol: Optional[np.ndarray] = None  # upper triangular
    eta0: Optional[np.ndarray] = None
    # sampling hooks (numpy Generator based)
    sample_initial: Optional[Callable] = None  # (rng, theta) -> x1
    sample_step: Optional[Callable] = None  # (rng, x, theta, u, k) -> (x_next, y)
    sample_transition: Optional[Callable] = None  # (rng, x, theta, u, k) -> x_next
    sample_measurement: Optional[Callable] = None  # (rng, x, theta, u, k) -> y
    # factor densities for particle methods (jnp traceable)
    measurement_logpdf: Optional[Callable] = None  # (y, x, theta, eta, u, k)
    transition_logpdf: Optional[Callable] = None  # (x_next, x, theta, eta, u, k)
    # deterministic skeleton used to seed optimisation
    transition_mean: Optional[Callable] = None  # (x, theta, eta, u, k) -> x_next
    x1_mean: Optional[Callable] = None  # (theta,) -> x1
    # residual form: (x_next, y, x, theta, eta, u, k) -> (r, Pi) with
    # joint_logpdf == -0.5 r' Pi^{-1} r - 0.5 logdet(2 pi Pi)
    residual_fn: Optional[Callable] = None
    # (theta, eta) -> dict(A, b, Q, H, c, R, m1, P1) when the model is
    # linear Gaussian, enabling exact Kalman references
    lgssm_mats: Optional[Callable] = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ConfigurationError("nx and ny must be at least 1")
        if self.ntheta < 0 or self.neta < 0 or self.nu < 0:
            raise ConfigurationError("dimensions must be non-negative")
        if self.eta0 is None:
            self.eta0 = np.zeros(self.neta)
        self.eta0 = np.asarray(self.eta0, dtype=float)
        if self.eta0.shape != (self.neta,):
            raise ConfigurationError(
                f"eta0 must have shape ({self.neta},), got {self.eta0.shape}"
            )
        if self.gaussian_prior is not None:
            m, S = self.gaussian_prior
            m = np.asarray(m, dtype=float)
            S = np.asarray(S, dtype=float)
            d = self.ntheta + self.nx
            if m.shape != (d,) or S.shape != (d, d):
                raise ConfigurationError(
                    "gaussian_prior must cover the stacked (theta, x1) vector"
                )
            self.gaussian_prior = (m, S)

    def require(self, hook):
        fn = getattr(self, hook)
        if fn is None:
            raise UnsupportedOperationError(
                f"model {self.name!r} does not provide {hook}"
            )
        return fn


def simulate(model: ModelSpec, theta, T, rng, u=None):
    """Draw a trajectory x_1..x_{T+1} and measurements y_1..y_T.

    Inputs u are per measurement step; the returned state array has one
    more row than y because the final transition is still applied.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (model.ntheta,):
        raise ConfigurationError(
            f"theta must have shape ({model.ntheta},), got {theta.shape}"
        )
    if u is None:
        u = np.zeros((T, model.nu))
    u = np.asarray(u, dtype=float)
    if u.shape != (T, model.nu):
        raise ConfigurationError(f"u must have shape ({T}, {model.nu})")
    x = np.zeros((T + 1, model.nx))
    y = np.zeros((T, model.ny))
    x[0] = model.require("sample_initial")(rng, theta)
    if model.sample_step is not None:
        for k in range(T):
            x[k + 1], y[k] = model.sample_step(rng, x[k], theta, u[k], k)
    else:
        trans = model.require("sample_transition")
        meas = model.require("sample_measurement")
        for k in range(T):
            y[k] = meas(rng, x[k], theta, u[k], k)
            x[k + 1] = trans(rng, x[k], theta, u[k], k)
    return x, y


def residual_consistency(model: ModelSpec, rng, n_draws=20, scale=0.7):
    """Largest |joint_logpdf - residual form| over random evaluation points.

    Useful as a guard that a model's Gauss-Newton residual really does
    reproduce its joint density.
    """
    fn = model.require("residual_fn")
    worst = 0.0
    for _ in range(n_draws):
        x = scale * rng.standard_normal(model.nx)
        xn = scale * rng.standard_normal(model.nx)
        yv = scale * rng.standard_normal(model.ny)
        if model.theta_prior_mean is not None:
            # Perturb at the prior's own scale so parameters with tiny
            # magnitudes (physical inertias, say) stay in their valid range.
            if model.theta_prior_chol is not None:
                step = 0.3 * model.theta_prior_chol.T @ rng.standard_normal(
                    model.ntheta
                )
            else:
                step = 0.1 * rng.standard_normal(model.ntheta)
            th = model.theta_prior_mean + step
        else:
            th = scale * rng.standard_normal(model.ntheta)
        uv = scale * rng.standard_normal(model.nu)
        eta = model.eta0
        r, Pi = fn(jnp.asarray(xn), jnp.asarray(yv), jnp.asarray(x),
                   jnp.asarray(th), jnp.asarray(eta), jnp.asarray(uv), 0)
        r = np.asarray(r)
        Pi = np.asarray(Pi)
        sign, logdet = np.linalg.slogdet(2.0 * np.pi * Pi)
        form = -0.5 * float(r @ np.linalg.solve(Pi, r)) - 0.5 * float(logdet)
        direct = float(
            model.joint_logpdf(
                jnp.asarray(xn), jnp.asarray(yv), jnp.asarray(x),
                jnp.asarray(th), jnp.asarray(eta), jnp.asarray(uv), 0,
            )
        )
        worst = max(worst, abs(direct - form))
    return worst
