"""Reference posteriors: exact Kalman/RTS smoothing and a particle smoother.

These are deliberately independent of the variational machinery — they
provide the ground truth that the bound and its optimiser are checked
against (exact in the linear Gaussian case, asymptotically exact via
Monte Carlo otherwise).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from ._jax import jax, jnp
from .errors import ConfigurationError
from .gaussian import BetaParams, pair_from_moments

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class SmootherResult:
    """Exact Gaussian smoothing posterior over x_1..x_{T+1}.

    cross_covs[k] is cov(x_{k+1}, x_{k+2} | y_{1:T}) in 0-based storage,
    i.e. one entry per transition.  The final state carries no
    measurement; its filtered quantities equal the one-step prediction.
    """

    means: np.ndarray  # (T+1, nx)
    covs: np.ndarray  # (T+1, nx, nx)
    cross_covs: np.ndarray  # (T, nx, nx)
    filtered_means: np.ndarray
    filtered_covs: np.ndarray
    loglik: float


def kalman_smoother(model, dataset, theta=None, eta=None) -> SmootherResult:
    """RTS smoother and exact log marginal likelihood of a linear model."""
    mats_fn = model.require("lgssm_mats")
    theta = np.zeros(model.ntheta) if theta is None else np.asarray(theta, float)
    eta = model.eta0 if eta is None else np.asarray(eta, float)
    mats = mats_fn(theta, eta)
    A, b, Q = mats["A"], mats["b"], mats["Q"]
    H, c, R = mats["H"], mats["c"], mats["R"]
    m1, P1 = mats["m1"], mats["P1"]
    y = dataset.y
    T = dataset.T
    nx = A.shape[0]

    pred_m = np.zeros((T + 1, nx))
    pred_P = np.zeros((T + 1, nx, nx))
    filt_m = np.zeros((T + 1, nx))
    filt_P = np.zeros((T + 1, nx, nx))
    pred_m[0], pred_P[0] = m1, P1
    loglik = 0.0
    I = np.eye(nx)
    for k in range(T):
        # y row k measures state row k; then predict one step ahead
        v = y[k] - H @ pred_m[k] - c
        S = H @ pred_P[k] @ H.T + R
        cf = scipy.linalg.cho_factor(S, lower=True)
        loglik += -0.5 * (
            v @ scipy.linalg.cho_solve(cf, v)
            + 2.0 * np.sum(np.log(np.diag(cf[0])))
            + y.shape[1] * LOG_2PI
        )
        K = scipy.linalg.cho_solve(cf, H @ pred_P[k]).T
        filt_m[k] = pred_m[k] + K @ v
        J = I - K @ H
        filt_P[k] = J @ pred_P[k] @ J.T + K @ R @ K.T
        pred_m[k + 1] = A @ filt_m[k] + b
        pred_P[k + 1] = A @ filt_P[k] @ A.T + Q
    filt_m[T], filt_P[T] = pred_m[T], pred_P[T]

    sm = np.zeros_like(filt_m)
    sP = np.zeros_like(filt_P)
    cross = np.zeros((T, nx, nx))
    sm[T], sP[T] = filt_m[T], filt_P[T]
    for k in range(T - 1, -1, -1):
        G = scipy.linalg.solve(
            pred_P[k + 1], A @ filt_P[k], assume_a="pos"
        ).T
        sm[k] = filt_m[k] + G @ (sm[k + 1] - pred_m[k + 1])
        sP[k] = filt_P[k] + G @ (sP[k + 1] - pred_P[k + 1]) @ G.T
        cross[k] = G @ sP[k + 1]
    return SmootherResult(
        means=sm,
        covs=sP,
        cross_covs=cross,
        filtered_means=filt_m,
        filtered_covs=filt_P,
        loglik=float(loglik),
    )


def smoother_to_pairwise(result: SmootherResult) -> BetaParams:
    """Exact smoothing posterior as consistent (x_k, x_{k+1}) pairs."""
    T = result.cross_covs.shape[0]
    if T < 1:
        raise ConfigurationError("need at least one transition")
    nx = result.means.shape[1]
    pairs = []
    for k in range(T):
        mean = np.concatenate([result.means[k], result.means[k + 1]])
        cov = np.zeros((2 * nx, 2 * nx))
        cov[:nx, :nx] = result.covs[k]
        cov[:nx, nx:] = result.cross_covs[k]
        cov[nx:, :nx] = result.cross_covs[k].T
        cov[nx:, nx:] = result.covs[k + 1]
        pairs.append(pair_from_moments(mean, cov, 0, nx))
    return BetaParams(pairs=pairs)


@dataclass(frozen=True)
class ParticleResult:
    """Bootstrap filter loglik estimate plus backward-simulation draws."""

    loglik: float
    draws: np.ndarray  # (n_draws, T+1, nx)
    means: np.ndarray  # (T+1, nx)
    variances: np.ndarray  # (T+1, nx)


def _systematic(rng, logw):
    n = logw.shape[0]
    w = np.exp(logw - logw.max())
    w /= w.sum()
    positions = (rng.random() + np.arange(n)) / n
    return np.searchsorted(np.cumsum(w), positions).clip(0, n - 1)


def particle_smoother(
    model, dataset, theta, rng, n_particles=1000, n_draws=500, eta=None
) -> ParticleResult:
    """Bootstrap particle filter with a backward-simulation pass.

    Requires the model's transition sampling and factored log densities;
    models with coupled process/measurement noise cannot be handled.
    """
    meas_lp = model.require("measurement_logpdf")
    trans_lp = model.require("transition_logpdf")
    sample_init = model.require("sample_initial")
    sample_trans = model.require("sample_transition")
    theta = np.asarray(theta, dtype=float)
    eta = model.eta0 if eta is None else np.asarray(eta, float)
    T, nx = dataset.T, model.nx
    N = n_particles
    y = dataset.y
    u = dataset.inputs()

    th_j, eta_j = jnp.asarray(theta), jnp.asarray(eta)
    meas_vec = jax.jit(
        jax.vmap(
            lambda x, yv, uv, k: meas_lp(yv, x, th_j, eta_j, uv, k),
            in_axes=(0, None, None, None),
        )
    )
    # (M draws) x (N particles) transition density table
    trans_mat = jax.jit(
        jax.vmap(
            jax.vmap(
                lambda xn, x, uv, k: trans_lp(xn, x, th_j, eta_j, uv, k),
                in_axes=(None, 0, None, None),
            ),
            in_axes=(0, None, None, None),
        )
    )

    batch_trans = model.extra.get("sample_transition_batch")

    def propagate(X, uv, k):
        if batch_trans is not None:
            return batch_trans(rng, X, theta, uv, k)
        return np.stack([sample_trans(rng, X[i], theta, uv, k) for i in range(N)])

    X = np.stack([sample_init(rng, theta) for _ in range(N)])
    hist_x = np.zeros((T + 1, N, nx))
    hist_logw = np.zeros((T + 1, N))
    loglik = 0.0
    for k in range(T):
        lw = np.asarray(meas_vec(jnp.asarray(X), jnp.asarray(y[k]), jnp.asarray(u[k]), k))
        m = lw.max()
        if not np.isfinite(m):
            raise ConfigurationError("all particles got zero weight")
        loglik += m + np.log(np.mean(np.exp(lw - m)))
        hist_x[k] = X
        hist_logw[k] = lw - m - np.log(np.sum(np.exp(lw - m)))
        idx = _systematic(rng, lw)
        X = propagate(X[idx], u[k], k)
    hist_x[T] = X
    hist_logw[T] = -np.log(N)

    # backward simulation
    M = n_draws
    draws = np.zeros((M, T + 1, nx))
    wT = np.exp(hist_logw[T] - hist_logw[T].max())
    wT /= wT.sum()
    idx = rng.choice(N, size=M, p=wT)
    draws[:, T] = hist_x[T][idx]
    for k in range(T - 1, -1, -1):
        table = np.asarray(
            trans_mat(
                jnp.asarray(draws[:, k + 1]),
                jnp.asarray(hist_x[k]),
                jnp.asarray(u[k]),
                k,
            )
        )
        logw = hist_logw[k][None, :] + table
        logw -= logw.max(axis=1, keepdims=True)
        w = np.exp(logw)
        w /= w.sum(axis=1, keepdims=True)
        cdf = np.cumsum(w, axis=1)
        us = rng.random(M)
        sel = (cdf < us[:, None]).sum(axis=1).clip(0, N - 1)
        draws[:, k] = hist_x[k][sel]
    return ParticleResult(
        loglik=float(loglik),
        draws=draws,
        means=draws.mean(axis=0),
        variances=draws.var(axis=0),
    )
