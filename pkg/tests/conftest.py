import numpy as np
import pytest

from varsmooth.gaussian import (
    BetaParams,
    chain_next_pair,
    marginal_theta_x,
    pair_from_moments,
)
from varsmooth.models import make_lgssm, make_stochvol

# informative prior used by the stochastic-volatility fixtures; the model
# default is deliberately diffuse, which desk-scale data cannot pin down
SV_PRIOR = dict(
    prior_mean=(0.0, 0.5, -1.0),
    prior_cov=((1.0, 0.0, 0.0), (0.0, 0.25, 0.0), (0.0, 0.0, 1.0)),
)


@pytest.fixture
def scalar_lgssm():
    return make_lgssm(
        A=[[0.5]], Q=[[1.0]], H=[[1.0]], R=[[1.0]], m1=[0.0], P1=[[1.0]]
    )


@pytest.fixture
def two_state_lgssm():
    return make_lgssm(
        A=[[0.9, 0.1], [0.0, 0.8]],
        Q=[[0.3, 0.05], [0.05, 0.2]],
        H=[[1.0, 0.0]],
        R=[[0.4]],
        m1=[0.0, 0.0],
        P1=[[1.0, 0.0], [0.0, 1.0]],
    )


@pytest.fixture
def lgssm_theta():
    # scalar model with the transition coefficient and log noise scale free
    return make_lgssm(
        A=[[0.7]],
        Q=[[0.25]],
        H=[[1.0]],
        R=[[0.5]],
        m1=[0.0],
        P1=[[1.0]],
        theta_entries=(("A", 0, 0), ("log_sqrt_q", 0)),
        theta_prior_mean=[0.5, -0.5],
        theta_prior_cov=[[0.25, 0.0], [0.0, 0.25]],
    )


@pytest.fixture
def sv_model():
    return make_stochvol(**SV_PRIOR)


def random_feasible_beta(rng, ntheta, nx, T, scale=0.4):
    """Consistent chain of pairwise joints with random blocks."""
    p = ntheta + 2 * nx
    G = scale * rng.standard_normal((p, p))
    cov = G @ G.T + np.eye(p)
    mean = rng.standard_normal(p)
    pairs = [pair_from_moments(mean, cov, ntheta, nx)]
    for _ in range(T - 1):
        C = 0.2 * rng.standard_normal((ntheta, nx))
        E = 0.2 * rng.standard_normal((nx, nx))
        F = np.triu(0.2 * rng.standard_normal((nx, nx)))
        F[np.diag_indices(nx)] = 0.6 + rng.random(nx)
        pairs.append(
            chain_next_pair(pairs[-1], rng.standard_normal(nx), C, E, F)
        )
    return BetaParams(pairs=pairs)


def dense_joint(beta, nt, nx):
    """Mean and covariance of (theta, x_1..x_{T+1}) implied by a chain.

    Composes each pair's conditional p(x_{k+2} | theta, x_{k+1}) onto the
    running joint, which is exact when the chain is overlap-consistent.
    """
    T = len(beta.pairs)
    d = nt + (T + 1) * nx
    mean = np.zeros(d)
    cov = np.zeros((d, d))
    first = marginal_theta_x(beta.pairs[0], "first")
    mean[: nt + nx] = first.mean
    cov[: nt + nx, : nt + nx] = first.cov
    for k, p in enumerate(beta.pairs):
        U = np.zeros((nt + 2 * nx, nt + 2 * nx))
        U[:nt, :nt] = p.A
        U[:nt, nt : nt + nx] = p.B
        U[:nt, nt + nx :] = p.C
        U[nt : nt + nx, nt : nt + nx] = p.D
        U[nt : nt + nx, nt + nx :] = p.E
        U[nt + nx :, nt + nx :] = p.F
        S = U.T @ U
        S11 = S[: nt + nx, : nt + nx]
        S12 = S[: nt + nx, nt + nx :]
        S22 = S[nt + nx :, nt + nx :]
        gain = np.linalg.solve(S11, S12).T
        cond_cov = S22 - gain @ S12
        pm = np.concatenate([p.mu_theta, p.mu_xk])
        bidx = np.r_[np.arange(nt), nt + k * nx + np.arange(nx)]
        nidx = nt + (k + 1) * nx + np.arange(nx)
        mean[nidx] = p.mu_xk1 + gain @ (mean[bidx] - pm)
        full = np.arange(d)
        cov[np.ix_(nidx, full)] = gain @ cov[np.ix_(bidx, full)]
        cov[np.ix_(full, nidx)] = cov[np.ix_(nidx, full)].T
        cov[np.ix_(nidx, nidx)] = cond_cov + gain @ cov[np.ix_(bidx, bidx)] @ gain.T
    return mean, cov
