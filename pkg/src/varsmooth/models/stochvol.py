"""Scalar stochastic volatility model.

    x_{k+1} = a + b x_k + sqrt(c) w_k,   w_k ~ N(0, 1)
    y_k     = exp(x_k / 2) v_k,          v_k ~ N(0, 1)

with theta = [a, b, log(sqrt(c))].  The initial state prior is the
stationary distribution N(0, c / (1 - b^2)) while |b| < 1 and falls back
to a fixed variance otherwise, so the density stays finite everywhere.
"""

from __future__ import annotations

import numpy as np

from .._jax import jnp
from ..errors import ConfigurationError
from .base import ModelSpec, mvn_logpdf

LOG_2PI = float(np.log(2.0 * np.pi))


def _stationary_var(theta, fallback):
    b = theta[1]
    c = jnp.exp(2.0 * theta[2])
    stationary = b * b < 1.0
    # keep the unselected branch free of divisions by zero so reverse-mode
    # derivatives stay finite on both sides of the switch
    denom = jnp.where(stationary, 1.0 - b * b, 1.0)
    return jnp.where(stationary, c / denom, fallback)


def make_stochvol(
    prior_mean=(0.0, 0.0, 0.0),
    prior_cov=((10.0, 0.0, 0.0), (0.0, 10.0, 0.0), (0.0, 0.0, 10.0)),
    nonstationary_var=10.0,
    name="stochvol",
):
    """Build the stochastic volatility ModelSpec.

    prior_mean / prior_cov specify the Gaussian prior over theta; the
    x1 prior is tied to theta through the stationary variance (variance
    nonstationary_var when |b| >= 1), so no joint closed form is exposed.
    """
    m0 = np.asarray(prior_mean, dtype=float)
    S0 = np.asarray(prior_cov, dtype=float)
    if m0.shape != (3,) or S0.shape != (3, 3):
        raise ConfigurationError("stochvol prior must be 3-dimensional")
    try:
        np.linalg.cholesky(S0)
    except np.linalg.LinAlgError as exc:
        raise ConfigurationError("prior_cov must be positive definite") from exc

    def trans_lp(x_next, x, theta):
        a, b, lsc = theta[0], theta[1], theta[2]
        dev = x_next[0] - a - b * x[0]
        return -0.5 * (LOG_2PI + 2.0 * lsc + dev * dev * jnp.exp(-2.0 * lsc))

    def meas_lp(y, x):
        # y^2 e^{-x} written in log space so y = 0 and very negative x
        # cannot pair a 0 with an inf under AD
        yv, xv = y[0], x[0]
        safe = jnp.where(yv == 0.0, 1.0, jnp.abs(yv))
        ratio = jnp.where(yv == 0.0, 0.0, jnp.exp(2.0 * jnp.log(safe) - xv))
        return -0.5 * (LOG_2PI + xv + ratio)

    def joint_logpdf(x_next, y, x, theta, eta, u, k):
        return trans_lp(x_next, x, theta) + meas_lp(y, x)

    def transition_logpdf(x_next, x, theta, eta, u, k):
        return trans_lp(x_next, x, theta)

    def measurement_logpdf(y, x, theta, eta, u, k):
        return meas_lp(y, x)

    def prior_logpdf(x1, theta):
        lp_theta = mvn_logpdf(theta, jnp.asarray(m0), jnp.asarray(S0))
        s2 = _stationary_var(theta, nonstationary_var)
        lp_x1 = -0.5 * (LOG_2PI + jnp.log(s2) + x1[0] * x1[0] / s2)
        return lp_theta + lp_x1

    def sample_initial(rng, theta):
        b = theta[1]
        c = np.exp(2.0 * theta[2])
        s2 = c / (1.0 - b * b) if b * b < 1.0 else nonstationary_var
        return np.array([np.sqrt(s2) * rng.standard_normal()])

    def sample_transition(rng, x, theta, u, k):
        a, b, lsc = theta
        return np.array([a + b * x[0] + np.exp(lsc) * rng.standard_normal()])

    def sample_transition_batch(rng, X, theta, u, k):
        a, b, lsc = theta
        return a + b * X + np.exp(lsc) * rng.standard_normal(X.shape)

    def sample_measurement(rng, x, theta, u, k):
        return np.array([np.exp(0.5 * x[0]) * rng.standard_normal()])

    def residual_fn(x_next, y, x, theta, eta, u, k):
        a, b, lsc = theta[0], theta[1], theta[2]
        r = jnp.array([x_next[0] - a - b * x[0], y[0]])
        Pi = jnp.diag(jnp.array([jnp.exp(2.0 * lsc), jnp.exp(x[0])]))
        return r, Pi

    return ModelSpec(
        name=name,
        ntheta=3,
        nx=1,
        ny=1,
        joint_logpdf=joint_logpdf,
        prior_logpdf=prior_logpdf,
        theta_prior_mean=m0,
        theta_prior_chol=np.linalg.cholesky(S0).T,
        sample_initial=sample_initial,
        sample_transition=sample_transition,
        sample_measurement=sample_measurement,
        measurement_logpdf=measurement_logpdf,
        transition_logpdf=transition_logpdf,
        transition_mean=lambda x, theta, eta, u, k: np.array(
            [theta[0] + theta[1] * x[0]]
        ),
        x1_mean=lambda theta: np.zeros(1),
        residual_fn=residual_fn,
        extra={"sample_transition_batch": sample_transition_batch},
    )
