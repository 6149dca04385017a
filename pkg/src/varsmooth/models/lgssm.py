"""Linear Gaussian state-space models.

    x_{k+1} = A x_k + b + v_k,   v_k ~ N(0, Q)
    y_k     = H x_k + c + w_k,   w_k ~ N(0, R)
    x_1 ~ N(m1, P1)

Selected entries of A and log square roots of a diagonal Q can be
promoted to unknown parameters, which keeps an exact Kalman reference
available at any fixed theta while making the joint density genuinely
nonlinear in the parameter vector.
"""

from __future__ import annotations

import numpy as np

from .._jax import jnp
from ..errors import ConfigurationError
from .base import ModelSpec, mvn_logpdf


def _spd(name, mat):
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ConfigurationError(f"{name} must be square, got {mat.shape}")
    if not np.allclose(mat, mat.T):
        raise ConfigurationError(f"{name} must be symmetric")
    try:
        np.linalg.cholesky(mat)
    except np.linalg.LinAlgError as exc:
        raise ConfigurationError(f"{name} must be positive definite") from exc
    return mat


def make_lgssm(
    A,
    Q,
    H,
    R,
    m1,
    P1,
    b=None,
    c=None,
    theta_entries=(),
    theta_prior_mean=None,
    theta_prior_cov=None,
    name="lgssm",
):
    """Build a linear Gaussian ModelSpec.

    theta_entries lists the free parameters: ("A", i, j) exposes that
    matrix entry, ("log_sqrt_q", i) exposes the log square root of the
    i-th diagonal entry of Q (Q must then be diagonal).
    """
    A0 = np.asarray(A, dtype=float)
    Q0 = _spd("Q", Q)
    H0 = np.asarray(H, dtype=float)
    R0 = _spd("R", R)
    m1 = np.asarray(m1, dtype=float)
    P1 = _spd("P1", P1)
    nx = A0.shape[0]
    ny = H0.shape[0]
    if A0.shape != (nx, nx) or H0.shape != (ny, nx):
        raise ConfigurationError("A and H have inconsistent shapes")
    if Q0.shape != (nx, nx) or R0.shape != (ny, ny) or P1.shape != (nx, nx):
        raise ConfigurationError("Q, R, P1 have inconsistent shapes")
    if m1.shape != (nx,):
        raise ConfigurationError(f"m1 must have shape ({nx},)")
    b0 = np.zeros(nx) if b is None else np.asarray(b, dtype=float)
    c0 = np.zeros(ny) if c is None else np.asarray(c, dtype=float)
    if b0.shape != (nx,) or c0.shape != (ny,):
        raise ConfigurationError("b or c has the wrong shape")

    theta_entries = tuple(theta_entries)
    ntheta = len(theta_entries)
    q_free = [e for e in theta_entries if e[0] == "log_sqrt_q"]
    if q_free and not np.allclose(Q0, np.diag(np.diag(Q0))):
        raise ConfigurationError("log_sqrt_q parameters require a diagonal Q")
    base_theta = np.zeros(ntheta)
    for l, ent in enumerate(theta_entries):
        if ent[0] == "A":
            _, i, j = ent
            if not (0 <= i < nx and 0 <= j < nx):
                raise ConfigurationError(f"A index out of range in {ent}")
            base_theta[l] = A0[i, j]
        elif ent[0] == "log_sqrt_q":
            _, i = ent
            if not 0 <= i < nx:
                raise ConfigurationError(f"Q index out of range in {ent}")
            base_theta[l] = 0.5 * np.log(Q0[i, i])
        else:
            raise ConfigurationError(f"unknown theta entry kind {ent[0]!r}")

    if theta_prior_mean is None:
        theta_prior_mean = base_theta.copy()
    theta_prior_mean = np.asarray(theta_prior_mean, dtype=float)
    if theta_prior_cov is None:
        theta_prior_cov = 0.25 * np.eye(ntheta)
    theta_prior_cov = (
        _spd("theta_prior_cov", theta_prior_cov) if ntheta else np.zeros((0, 0))
    )
    if theta_prior_mean.shape != (ntheta,):
        raise ConfigurationError(f"theta_prior_mean must have shape ({ntheta},)")

    def materialize(theta):
        A_ = jnp.asarray(A0)
        qdiag = jnp.asarray(np.diag(Q0))
        for l, ent in enumerate(theta_entries):
            if ent[0] == "A":
                A_ = A_.at[ent[1], ent[2]].set(theta[l])
            else:
                qdiag = qdiag.at[ent[1]].set(jnp.exp(2.0 * theta[l]))
        Q_ = jnp.diag(qdiag) if q_free else jnp.asarray(Q0)
        return A_, Q_

    def mats_np(theta):
        A_, Q_ = materialize(jnp.asarray(theta))
        return np.asarray(A_), np.asarray(Q_)

    def joint_logpdf(x_next, y, x, theta, eta, u, k):
        A_, Q_ = materialize(theta)
        lp_t = mvn_logpdf(x_next, A_ @ x + b0, Q_)
        lp_m = mvn_logpdf(y, H0 @ x + c0, jnp.asarray(R0))
        return lp_t + lp_m

    def transition_logpdf(x_next, x, theta, eta, u, k):
        A_, Q_ = materialize(theta)
        return mvn_logpdf(x_next, A_ @ x + b0, Q_)

    def measurement_logpdf(y, x, theta, eta, u, k):
        return mvn_logpdf(y, H0 @ x + c0, jnp.asarray(R0))

    prior_mean = np.concatenate([theta_prior_mean, m1])
    prior_cov = np.zeros((ntheta + nx, ntheta + nx))
    prior_cov[:ntheta, :ntheta] = theta_prior_cov
    prior_cov[ntheta:, ntheta:] = P1

    def prior_logpdf(x1, theta):
        z = jnp.concatenate([theta, x1])
        return mvn_logpdf(z, jnp.asarray(prior_mean), jnp.asarray(prior_cov))

    L1 = np.linalg.cholesky(P1)
    Lq_base = np.linalg.cholesky(Q0)
    Lr = np.linalg.cholesky(R0)

    def sample_initial(rng, theta):
        return m1 + L1 @ rng.standard_normal(nx)

    def sample_transition(rng, x, theta, u, k):
        A_, Q_ = mats_np(theta)
        Lq = np.diag(np.sqrt(np.diag(Q_))) if q_free else Lq_base
        return A_ @ x + b0 + Lq @ rng.standard_normal(nx)

    def sample_transition_batch(rng, X, theta, u, k):
        A_, Q_ = mats_np(theta)
        Lq = np.diag(np.sqrt(np.diag(Q_))) if q_free else Lq_base
        return X @ A_.T + b0 + rng.standard_normal(X.shape) @ Lq.T

    def sample_measurement(rng, x, theta, u, k):
        return H0 @ x + c0 + Lr @ rng.standard_normal(ny)

    def transition_mean(x, theta, eta, u, k):
        A_, _ = mats_np(theta)
        return A_ @ x + b0

    def residual_fn(x_next, y, x, theta, eta, u, k):
        A_, Q_ = materialize(theta)
        r = jnp.concatenate([x_next - A_ @ x - b0, y - H0 @ x - c0])
        Pi = jnp.zeros((nx + ny, nx + ny))
        Pi = Pi.at[:nx, :nx].set(Q_)
        Pi = Pi.at[nx:, nx:].set(jnp.asarray(R0))
        return r, Pi

    def lgssm_mats(theta, eta):
        A_, Q_ = mats_np(np.asarray(theta))
        return {
            "A": A_, "b": b0.copy(), "Q": Q_,
            "H": H0.copy(), "c": c0.copy(), "R": R0.copy(),
            "m1": m1.copy(), "P1": P1.copy(),
        }

    chol_theta = (
        np.linalg.cholesky(theta_prior_cov).T if ntheta else np.zeros((0, 0))
    )
    return ModelSpec(
        name=name,
        ntheta=ntheta,
        nx=nx,
        ny=ny,
        joint_logpdf=joint_logpdf,
        prior_logpdf=prior_logpdf,
        gaussian_prior=(prior_mean, prior_cov),
        theta_prior_mean=theta_prior_mean,
        theta_prior_chol=chol_theta,
        sample_initial=sample_initial,
        sample_transition=sample_transition,
        sample_measurement=sample_measurement,
        measurement_logpdf=measurement_logpdf,
        transition_logpdf=transition_logpdf,
        transition_mean=transition_mean,
        x1_mean=lambda theta: m1.copy(),
        residual_fn=residual_fn,
        lgssm_mats=lgssm_mats,
        extra={
            "theta_entries": theta_entries,
            "base_theta": base_theta,
            "sample_transition_batch": sample_transition_batch,
        },
    )
