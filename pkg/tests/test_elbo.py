"""Bound evaluation: dense-joint oracle, overlap residuals, derivatives."""

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from conftest import SV_PRIOR, dense_joint, random_feasible_beta
from varsmooth.elbo import (
    ElboEngine,
    constraint_residual,
    elbo,
    elbo_breakdown,
    elbo_gradient,
    junction_dims,
)
from varsmooth.errors import ConfigurationError
from varsmooth.models import (
    Dataset,
    make_lgssm,
    make_pendulum,
    make_stochvol,
    simulate,
)
from varsmooth.quadrature import SchemeConfig, expect, generate
from varsmooth.reference import kalman_smoother, smoother_to_pairwise


def dense_bound(model, ds, beta, cfg):
    """Full-joint E_q[log p] + H(q) computed from the dense Gaussian.

    Every log-density term is integrated with the same quadrature rule,
    but over marginals of the composed joint rather than pair blocks, so
    the value is independent of the pairwise decomposition path.
    """
    nt, nx, T = model.ntheta, model.nx, ds.T
    mean, cov = dense_joint(beta, nt, nx)
    total = multivariate_normal(mean=mean, cov=cov).entropy()
    y, u = ds.y, ds.inputs()
    eta = model.eta0

    def term(idx, f):
        m = mean[idx]
        C = cov[np.ix_(idx, idx)]
        return expect(generate(m, np.linalg.cholesky(C), cfg), f)

    th = np.arange(nt)

    def xs(k):  # 1-based state index -> dense coordinates
        return nt + (k - 1) * nx + np.arange(nx)

    total += term(
        np.r_[th, xs(1)], lambda v: float(model.prior_logpdf(v[nt:], v[:nt]))
    )
    for k in range(1, T + 1):
        yv, uv = y[k - 1], u[k - 1]
        total += term(
            np.r_[th, xs(k)],
            lambda v, yv=yv, uv=uv, k=k: float(
                model.measurement_logpdf(yv, v[nt:], v[:nt], eta, uv, k - 1)
            ),
        )
        total += term(
            np.r_[th, xs(k), xs(k + 1)],
            lambda v, uv=uv, k=k: float(
                model.transition_logpdf(
                    v[nt + nx :], v[nt : nt + nx], v[:nt], eta, uv, k - 1
                )
            ),
        )
    return total


class TestDenseDecomposition:
    @pytest.mark.parametrize("kind", ["unscented", "cubature5"])
    def test_scalar_fixed_parameters(self, scalar_lgssm, kind):
        rng = np.random.default_rng(11)
        T = 3
        _, y = simulate(scalar_lgssm, np.zeros(0), T, rng)
        ds = Dataset(y=y)
        cfg = SchemeConfig(kind=kind)
        for _ in range(3):
            beta = random_feasible_beta(rng, 0, 1, T)
            got = elbo(scalar_lgssm, ds, beta, cfg)
            want = dense_bound(scalar_lgssm, ds, beta, cfg)
            assert got == pytest.approx(want, abs=1e-8)

    def test_two_state_fixed_parameters(self, two_state_lgssm):
        rng = np.random.default_rng(12)
        T = 5
        _, y = simulate(two_state_lgssm, np.zeros(0), T, rng)
        ds = Dataset(y=y)
        cfg = SchemeConfig(kind="cubature5")
        beta = random_feasible_beta(rng, 0, 2, T)
        got = elbo(two_state_lgssm, ds, beta, cfg)
        want = dense_bound(two_state_lgssm, ds, beta, cfg)
        assert got == pytest.approx(want, abs=1e-8)

    def test_free_transition_coefficient(self):
        # With only the transition matrix entry free the integrands are
        # quartic polynomials, which the fifth-order rule handles exactly,
        # so the dense comparison stays a strict oracle.
        model = make_lgssm(
            A=[[0.7]],
            Q=[[0.25]],
            H=[[1.0]],
            R=[[0.5]],
            m1=[0.0],
            P1=[[1.0]],
            theta_entries=(("A", 0, 0),),
            theta_prior_mean=[0.5],
            theta_prior_cov=[[0.25]],
        )
        rng = np.random.default_rng(13)
        T = 3
        _, y = simulate(model, np.array([0.7]), T, rng)
        ds = Dataset(y=y)
        cfg = SchemeConfig(kind="cubature5")
        for _ in range(3):
            beta = random_feasible_beta(rng, 1, 1, T)
            got = elbo(model, ds, beta, cfg)
            want = dense_bound(model, ds, beta, cfg)
            assert got == pytest.approx(want, abs=1e-8)


class TestConstraints:
    def test_smoother_pairs_are_feasible(self, two_state_lgssm):
        rng = np.random.default_rng(14)
        _, y = simulate(two_state_lgssm, np.zeros(0), 12, rng)
        ds = Dataset(y=y)
        beta = smoother_to_pairwise(kalman_smoother(two_state_lgssm, ds))
        res = constraint_residual(two_state_lgssm, ds, beta)
        assert res.max_abs <= 1e-10

    def test_junction_blocks_localize_perturbations(self, sv_model):
        rng = np.random.default_rng(15)
        T = 4
        _, y = simulate(sv_model, np.array([0.1, 0.9, -1.2]), T, rng)
        ds = Dataset(y=y)
        beta = random_feasible_beta(rng, 3, 1, T)
        res = constraint_residual(sv_model, ds, beta)
        assert res.n_junctions == T - 1
        assert res.max_abs <= 1e-9

        # moving one pair's theta mean must break exactly the junctions
        # touching that pair, in the theta_mean block only
        pairs = list(beta.pairs)
        p = pairs[2]
        pairs[2] = type(p)(
            mu_theta=np.asarray(p.mu_theta) + 0.5,
            mu_xk=p.mu_xk,
            mu_xk1=p.mu_xk1,
            A=p.A,
            B=p.B,
            C=p.C,
            D=p.D,
            E=p.E,
            F=p.F,
        )
        bumped = type(beta)(pairs=pairs)
        res2 = constraint_residual(sv_model, ds, bumped)
        touched = {1, 2}
        for j in range(res2.n_junctions):
            blocks = res2.junction(j)
            for name, vals in blocks.items():
                expect_hit = j in touched and name == "theta_mean"
                if expect_hit:
                    assert np.max(np.abs(vals)) > 0.4
                else:
                    assert np.max(np.abs(vals)) <= 1e-9

        dims = junction_dims(3, 1)
        assert res2.junction_size == sum(dims.values())
        assert res2.values.size == res2.n_junctions * res2.junction_size
        with pytest.raises(ConfigurationError):
            res2.junction(res2.n_junctions)
        with pytest.raises(ConfigurationError):
            res2.block(0, "nope")


class TestDerivatives:
    def _fd_check(self, model, theta_true, T, seed, n_idx=40):
        rng = np.random.default_rng(seed)
        _, y = simulate(model, theta_true, T, rng)
        ds = Dataset(y=y)
        eng = ElboEngine(model, ds, SchemeConfig(kind="unscented"))
        beta = random_feasible_beta(rng, model.ntheta, model.nx, T)
        z = eng.pack(beta)
        _, g = eng.value_and_grad(z)
        g = -g  # engine differentiates the minimisation objective
        idx = rng.choice(z.size, size=min(n_idx, z.size), replace=False)
        for i in idx:
            h = 1e-5 * max(1.0, abs(z[i]))
            zp, zm = z.copy(), z.copy()
            zp[i] += h
            zm[i] -= h
            fd = (eng.elbo_value(zp) - eng.elbo_value(zm)) / (2 * h)
            scale = max(abs(fd), abs(g[i]), 1e-8)
            assert abs(fd - g[i]) / scale < 5e-6, (i, fd, g[i])

    def test_gradient_matches_fd_lgssm(self, lgssm_theta):
        self._fd_check(lgssm_theta, np.array([0.7, np.log(0.5)]), 3, 16)

    def test_gradient_matches_fd_stochvol(self, sv_model):
        self._fd_check(sv_model, np.array([0.1, 0.9, -1.2]), 3, 17)

    def test_constraint_jvp_matches_fd(self, sv_model):
        rng = np.random.default_rng(18)
        T = 3
        _, y = simulate(sv_model, np.array([0.1, 0.9, -1.2]), T, rng)
        ds = Dataset(y=y)
        eng = ElboEngine(sv_model, ds, SchemeConfig(kind="unscented"))
        beta = random_feasible_beta(rng, 3, 1, T)
        z = eng.pack(beta)
        v = rng.standard_normal(z.size)
        got = eng.constraints_jvp(z, v)
        h = 1e-6
        fd = (eng.constraints(z + h * v) - eng.constraints(z - h * v)) / (2 * h)
        np.testing.assert_allclose(got, fd, rtol=1e-5, atol=1e-7)
        # vjp consistency: w . J v == (J^T w) . v
        w = rng.standard_normal(got.size)
        assert float(w @ got) == pytest.approx(
            float(eng.constraints_vjp(z, w) @ v), rel=1e-9
        )


class TestEvaluationEdges:
    def test_minus_inf_propagates_without_nan(self):
        model = make_pendulum()
        rng = np.random.default_rng(19)
        T = 2
        u = np.zeros((T, 1))
        _, y = simulate(model, np.array([5.72e-5, 3.33e-5]), T, rng, u=u)
        ds = Dataset(y=y, u=u)
        eng = ElboEngine(model, ds, SchemeConfig(kind="unscented"))
        beta = random_feasible_beta(rng, 2, 4, T, scale=0.1)
        pairs = []
        for p in beta.pairs:
            pairs.append(
                type(p)(
                    mu_theta=np.array([-0.01, 3.3e-5]),  # negative inertia
                    mu_xk=p.mu_xk,
                    mu_xk1=p.mu_xk1,
                    A=1e-6 * np.eye(2),
                    B=np.zeros((2, 4)),
                    C=np.zeros((2, 4)),
                    D=p.D,
                    E=p.E,
                    F=p.F,
                )
            )
        bad = type(beta)(pairs=pairs)
        val = elbo(model, ds, bad, SchemeConfig(kind="unscented"))
        assert val == -np.inf

    def test_engine_rejects_wrong_length(self, scalar_lgssm):
        rng = np.random.default_rng(20)
        _, y = simulate(scalar_lgssm, np.zeros(0), 3, rng)
        ds = Dataset(y=y)
        eng = ElboEngine(scalar_lgssm, ds, SchemeConfig(kind="unscented"))
        with pytest.raises(ConfigurationError):
            eng.elbo_value(np.zeros(7))

    def test_breakdown_terms_add_up(self, sv_model):
        rng = np.random.default_rng(21)
        T = 4
        _, y = simulate(sv_model, np.array([0.1, 0.9, -1.2]), T, rng)
        ds = Dataset(y=y)
        beta = random_feasible_beta(rng, 3, 1, T)
        bd = elbo_breakdown(sv_model, ds, beta)
        assert bd.total == pytest.approx(bd.i1 + bd.i23 - bd.i4, abs=1e-10)
        assert bd.i23_steps.shape == (T,)
        assert bd.i23 == pytest.approx(float(np.sum(bd.i23_steps)), abs=1e-10)
        assert bd.total == pytest.approx(elbo(sv_model, ds, beta), abs=1e-12)
        g = elbo_gradient(sv_model, ds, beta)
        assert np.all(np.isfinite(g))
