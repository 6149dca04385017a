"""Rotary (Furuta) pendulum driven by a DC motor.

State x = [arm angle, pendulum angle, arm rate, pendulum rate]; input is
the motor voltage.  The discrete model applies two Euler substeps of the
rigid-body dynamics per 8 ms sample and is disturbed by noise that is
jointly Gaussian across the state update and the three measurements
(both angles plus motor current), covariance Pi (7 x 7).

Pi can be held fixed or estimated as a point value through a log
Cholesky vector eta.  Unknown physical parameters are selected by name
from (Jr, Jp, km, Rm, Dp, Dr).
"""

from __future__ import annotations

import numpy as np

from .._jax import jnp
from ..errors import ConfigurationError
from .base import ModelSpec, mvn_logpdf

PARAM_NAMES = ("Jr", "Jp", "km", "Rm", "Dp", "Dr")

DEFAULTS = {
    "mp": 0.024,
    "lp": 0.129,
    "lr": 0.085,
    "g": 9.81,
    "Jr": 5.72e-5,
    "Jp": 3.33e-5,
    "km": 0.042,
    "Rm": 8.4,
    "Dr": 0.0015,
    "Dp": 0.0005,
}

_DET_FLOOR = 1e-12
_M11_FLOOR = 1e-9

_IU7, _JU7 = np.triu_indices(7)
_DIAG7 = np.flatnonzero(_IU7 == _JU7)
NETA_PI = _IU7.shape[0]  # 28


def mass_matrix(alpha, pars):
    """Generalized inertia matrix of the arm/pendulum pair."""
    mp, lp, lr = pars["mp"], pars["lp"], pars["lr"]
    sa = jnp.sin(alpha)
    ca = jnp.cos(alpha)
    m11 = pars["Jr"] + mp * lr**2 + 0.25 * mp * lp**2 * sa * sa
    m12 = 0.5 * mp * lp * lr * ca * ca
    m22 = pars["Jp"] + 0.25 * mp * lp**2
    return m11, m12, m22


def _accelerations(x, vm, pars):
    """Angular accelerations and a positive-definiteness flag.

    Solves the 2 x 2 inertia system in closed form; when the matrix is
    not safely positive definite at the evaluation point the returned
    flag is False and the (well-defined, finite) values are meaningless.
    """
    alpha, dth, dal = x[1], x[2], x[3]
    mp, lp, lr, g = pars["mp"], pars["lp"], pars["lr"], pars["g"]
    sa = jnp.sin(alpha)
    ca = jnp.cos(alpha)
    m11, m12, m22 = mass_matrix(alpha, pars)
    det = m11 * m22 - m12 * m12
    ok = (m11 > _M11_FLOOR) & (det > _DET_FLOOR)
    safe_det = jnp.where(ok, det, 1.0)
    tau = pars["km"] * (vm - pars["km"] * dth) / pars["Rm"]
    c1 = 0.5 * mp * lp**2 * sa * ca * dth * dal - 0.5 * mp * lp * lr * sa * dal**2
    c2 = -0.25 * mp * lp**2 * ca * sa * dth**2
    rhs1 = tau - pars["Dr"] * dth - c1
    rhs2 = -pars["Dp"] * dal - 0.5 * mp * lp * g * sa - c2
    ddth = (m22 * rhs1 - m12 * rhs2) / safe_det
    ddal = (m11 * rhs2 - m12 * rhs1) / safe_det
    return ddth, ddal, ok


def euler_step(x, vm, pars, dt=0.008, substeps=2):
    """Discrete transition: explicit Euler substeps over one sample."""
    h = dt / substeps
    ok = True
    for _ in range(substeps):
        ddth, ddal, ok_i = _accelerations(x, vm, pars)
        x = jnp.stack(
            [x[0] + h * x[2], x[1] + h * x[3], x[2] + h * ddth, x[3] + h * ddal]
        )
        ok = ok & ok_i
    return x, ok


def measure(x, vm, pars):
    """Angles straight off the encoders plus the motor current."""
    current = (vm - pars["km"] * x[2]) / pars["Rm"]
    return jnp.stack([x[0], x[1], current])


def pi_from_eta(eta):
    """Pi = U^T U from the packed upper triangle, log diagonal."""
    vals = eta.at[_DIAG7].set(jnp.exp(eta[_DIAG7]))
    U = jnp.zeros((7, 7)).at[_IU7, _JU7].set(vals)
    return U.T @ U


def eta_from_pi(Pi):
    """Inverse packing of a positive definite Pi."""
    Pi = np.asarray(Pi, dtype=float)
    import scipy.linalg

    U = scipy.linalg.cholesky(Pi, lower=False)
    vals = U[_IU7, _JU7]
    vals[_DIAG7] = np.log(vals[_DIAG7])
    return vals


def make_pendulum(
    theta_names=("Jr", "Jp"),
    Pi=None,
    pi_mode="fixed",
    dt=0.008,
    substeps=2,
    theta_prior_mean=None,
    theta_prior_cov=None,
    x1_mean=None,
    P1=None,
    params=None,
    name="pendulum",
):
    """Build the pendulum ModelSpec.

    theta_names selects which physical constants are unknown; the rest
    stay at their nominal values (overridable through params).  With
    pi_mode="eta" the noise covariance is parameterised by a 28-entry
    log-Cholesky vector whose initial value encodes Pi.
    """
    base = dict(DEFAULTS)
    if params:
        unknown = set(params) - set(base)
        if unknown:
            raise ConfigurationError(f"unknown pendulum params: {sorted(unknown)}")
        base.update({k: float(v) for k, v in params.items()})
    theta_names = tuple(theta_names)
    for nm in theta_names:
        if nm not in PARAM_NAMES:
            raise ConfigurationError(
                f"unknown parameter {nm!r}; choose from {PARAM_NAMES}"
            )
    ntheta = len(theta_names)

    if Pi is None:
        Pi = np.diag([1e-9, 1e-9, 1e-7, 1e-7, 1e-6, 1e-6, 1e-8])
    Pi = np.asarray(Pi, dtype=float)
    if Pi.shape != (7, 7) or not np.allclose(Pi, Pi.T):
        raise ConfigurationError("Pi must be a symmetric 7 x 7 matrix")
    try:
        Lpi = np.linalg.cholesky(Pi)
    except np.linalg.LinAlgError as exc:
        raise ConfigurationError("Pi must be positive definite") from exc
    if pi_mode not in ("fixed", "eta"):
        raise ConfigurationError("pi_mode must be 'fixed' or 'eta'")
    neta = NETA_PI if pi_mode == "eta" else 0
    eta0 = eta_from_pi(Pi) if pi_mode == "eta" else np.zeros(0)

    nominal = np.array([base[nm] for nm in theta_names])
    if theta_prior_mean is None:
        theta_prior_mean = nominal.copy()
    theta_prior_mean = np.asarray(theta_prior_mean, dtype=float)
    if theta_prior_cov is None:
        theta_prior_cov = np.diag((0.5 * np.abs(theta_prior_mean)) ** 2 + 1e-18)
    theta_prior_cov = np.asarray(theta_prior_cov, dtype=float)
    if theta_prior_mean.shape != (ntheta,) or theta_prior_cov.shape != (ntheta, ntheta):
        raise ConfigurationError("theta prior has inconsistent shape")

    x1m = np.zeros(4) if x1_mean is None else np.asarray(x1_mean, dtype=float)
    P1m = 1e-4 * np.eye(4) if P1 is None else np.asarray(P1, dtype=float)
    if x1m.shape != (4,) or P1m.shape != (4, 4):
        raise ConfigurationError("x1 prior has inconsistent shape")

    def build_pars(theta):
        pars = {k: v for k, v in base.items()}
        for l, nm in enumerate(theta_names):
            pars[nm] = theta[l]
        return pars

    def predict(x, theta, u):
        pars = build_pars(theta)
        vm = u[0]
        xn, ok = euler_step(x, vm, pars, dt=dt, substeps=substeps)
        yv = measure(x, vm, pars)
        return xn, yv, ok

    def noise_cov(eta):
        if pi_mode == "eta":
            return pi_from_eta(eta)
        return jnp.asarray(Pi)

    def joint_logpdf(x_next, y, x, theta, eta, u, k):
        xn, yv, ok = predict(x, theta, u)
        r = jnp.concatenate([x_next - xn, y - yv])
        cov = noise_cov(eta)
        L = jnp.linalg.cholesky(cov)
        z = jnp.linalg.solve(L, r)
        val = (
            -0.5 * (z @ z)
            - jnp.sum(jnp.log(jnp.diagonal(L)))
            - 3.5 * jnp.log(2.0 * jnp.pi)
        )
        return jnp.where(ok, val, -jnp.inf)

    def residual_fn(x_next, y, x, theta, eta, u, k):
        xn, yv, _ = predict(x, theta, u)
        r = jnp.concatenate([x_next - xn, y - yv])
        return r, noise_cov(eta)

    prior_mean = np.concatenate([theta_prior_mean, x1m])
    prior_cov = np.zeros((ntheta + 4, ntheta + 4))
    prior_cov[:ntheta, :ntheta] = theta_prior_cov
    prior_cov[ntheta:, ntheta:] = P1m

    def prior_logpdf(x1, theta):
        z = jnp.concatenate([theta, x1])
        return mvn_logpdf(z, jnp.asarray(prior_mean), jnp.asarray(prior_cov))

    L1 = np.linalg.cholesky(P1m)

    def sample_initial(rng, theta):
        return x1m + L1 @ rng.standard_normal(4)

    def sample_step(rng, x, theta, u, k):
        xn, yv, ok = predict(jnp.asarray(x), jnp.asarray(theta), jnp.asarray(u))
        if not bool(ok):
            raise ConfigurationError("inertia matrix lost definiteness in simulation")
        z = Lpi @ rng.standard_normal(7)
        return np.asarray(xn) + z[:4], np.asarray(yv) + z[4:]

    def transition_mean(x, theta, eta, u, k):
        xn, _, _ = predict(jnp.asarray(x), jnp.asarray(theta), jnp.asarray(u))
        return np.asarray(xn)

    chol_theta = np.linalg.cholesky(theta_prior_cov).T if ntheta else np.zeros((0, 0))
    return ModelSpec(
        name=name,
        ntheta=ntheta,
        nx=4,
        ny=3,
        nu=1,
        neta=neta,
        eta0=eta0,
        joint_logpdf=joint_logpdf,
        prior_logpdf=prior_logpdf,
        gaussian_prior=(prior_mean, prior_cov),
        theta_prior_mean=theta_prior_mean,
        theta_prior_chol=chol_theta,
        sample_initial=sample_initial,
        sample_step=sample_step,
        transition_mean=transition_mean,
        x1_mean=lambda theta: x1m.copy(),
        residual_fn=residual_fn,
        extra={"theta_names": theta_names, "base": base, "Pi": Pi, "dt": dt},
    )
