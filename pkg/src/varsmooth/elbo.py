"""Evidence lower bound over pairwise joints, with exact derivatives.

The bound splits into a prior term (pair 1 only), a sum of per-step
quadrature terms and entropy bookkeeping that cancels the overlap
between neighbouring pairs:

    L = i1 + i23 - i4,
    i4 = sum_k -H(pair_k) + sum_{k>=2} H(first slot of pair_k).

Because every term touches exactly one pair, the objective is separable;
all coupling between pairs enters through the overlap-consistency
constraints.  Everything here is built on a flat parameter vector (see
PairLayout) so gradients, Hessian-vector products and per-pair Hessian
blocks come straight from jax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._jax import jax, jnp
from .errors import ConfigurationError, EvaluationError
from .gaussian import LOG_2PI, BetaParams, PairLayout
from .quadrature import SchemeConfig, unit_points


@dataclass(frozen=True)
class ElboBreakdown:
    """Value of the bound and its three components; i23_steps is per pair."""

    i1: float
    i23: float
    i4: float
    total: float
    i23_steps: np.ndarray


def junction_dims(ntheta, nx):
    """Sizes of the named constraint blocks at one pair junction."""
    return {
        "theta_mean": ntheta,
        "state_mean": nx,
        "theta_chol": ntheta * (ntheta + 1) // 2,
        "cross": ntheta * nx,
        "state_cov": nx * (nx + 1) // 2,
    }


@dataclass(frozen=True)
class ConstraintResidual:
    """Stacked overlap residuals, one contiguous group per junction."""

    values: np.ndarray
    n_junctions: int
    ntheta: int
    nx: int

    @property
    def junction_size(self):
        return sum(junction_dims(self.ntheta, self.nx).values())

    @property
    def max_abs(self):
        return 0.0 if self.values.size == 0 else float(np.max(np.abs(self.values)))

    @property
    def norm(self):
        return float(np.linalg.norm(self.values))

    def junction(self, k):
        """Residual blocks of junction k (between pairs k+1 and k+2)."""
        if not 0 <= k < self.n_junctions:
            raise ConfigurationError(f"junction index {k} out of range")
        dims = junction_dims(self.ntheta, self.nx)
        out = {}
        off = k * self.junction_size
        for name, d in dims.items():
            out[name] = self.values[off : off + d].copy()
            off += d
        return out

    def block(self, k, name):
        blocks = self.junction(k)
        if name not in blocks:
            raise ConfigurationError(f"unknown constraint block {name!r}")
        return blocks[name]


class ElboEngine:
    """Compiled evaluation of the bound, constraints and derivatives.

    Construction fixes the model, data and quadrature scheme; all public
    methods take and return numpy arrays against the flat layout in
    ``self.layout``.
    """

    def __init__(self, model, dataset, scheme=None):
        self.model = model
        self.dataset = dataset
        self.scheme = scheme if scheme is not None else SchemeConfig()
        if dataset.ny != model.ny:
            raise ConfigurationError(
                f"dataset has ny={dataset.ny} but model expects {model.ny}"
            )
        if dataset.nu != model.nu:
            raise ConfigurationError(
                f"dataset has nu={dataset.nu} but model expects {model.nu}"
            )
        self.T = dataset.T
        self.n_pairs = max(self.T, 1)
        nt, nx = model.ntheta, model.nx
        self.layout = PairLayout(nt, nx, self.n_pairs, model.neta)
        lay = self.layout
        p, d1 = lay.p, nt + nx
        self._nt, self._nx, self._d1 = nt, nx, d1

        zeta, w = unit_points(self.scheme, p)
        self._zeta = jnp.asarray(zeta)
        self._w = jnp.asarray(w)
        self._Y = jnp.asarray(dataset.y)
        self._U_in = jnp.asarray(dataset.inputs())
        self._ks = jnp.arange(self.T)
        iu, ju = jnp.asarray(lay.iu), jnp.asarray(lay.ju)
        iux, jux = np.triu_indices(nx)
        iut, jut = np.triu_indices(nt)
        self._mjun = sum(junction_dims(nt, nx).values())

        def unpack_pair(zk):
            mean = zk[:p]
            U = jnp.zeros((p, p)).at[iu, ju].set(zk[p:])
            return mean, U

        def split(z):
            zp = z[: self.n_pairs * lay.per_pair].reshape(self.n_pairs, lay.per_pair)
            eta = z[self.n_pairs * lay.per_pair :]
            return zp, eta

        # --- per-step quadrature term -----------------------------------
        def pair_logpdfs(zk, eta, y, u, k):
            mean, U = unpack_pair(zk)
            pts = mean[None, :] + self._zeta @ U
            fn = lambda pt: model.joint_logpdf(
                pt[d1:], y, pt[nt:d1], pt[:nt], eta, u, k
            )
            return jax.vmap(fn)(pts)

        def pair_i23(zk, eta, y, u, k):
            vals = pair_logpdfs(zk, eta, y, u, k)
            finite = jnp.where(jnp.isneginf(vals), 0.0, vals)
            bad = jnp.any(jnp.isneginf(vals) & (self._w != 0.0))
            return jnp.where(bad, -jnp.inf, self._w @ finite)

        def i23_steps_fn(z):
            if self.T == 0:
                return jnp.zeros(0)
            zp, eta = split(z)
            return jax.vmap(
                lambda zk, y, u, k: pair_i23(zk, eta, y, u, k)
            )(zp, self._Y, self._U_in, self._ks)

        # --- entropy bookkeeping ----------------------------------------
        def pair_i4_terms(zk, overlap_mask):
            _, U = unpack_pair(zk)
            d = jnp.diagonal(U)
            h_full = 0.5 * p * (1.0 + LOG_2PI) + jnp.sum(jnp.log(d))
            h_first = 0.5 * d1 * (1.0 + LOG_2PI) + jnp.sum(jnp.log(d[:d1]))
            return -h_full + overlap_mask * h_first

        if self.T == 0:
            def i4_fn(z):
                zp, _ = split(z)
                _, U = unpack_pair(zp[0])
                d = jnp.diagonal(U)
                return -(0.5 * d1 * (1.0 + LOG_2PI) + jnp.sum(jnp.log(d[:d1])))
        else:
            ov_mask = jnp.asarray((np.arange(self.n_pairs) >= 1).astype(float))

            def i4_fn(z):
                zp, _ = split(z)
                return jnp.sum(jax.vmap(pair_i4_terms)(zp, ov_mask))

        # --- prior term --------------------------------------------------
        if model.gaussian_prior is not None:
            pm, pc = model.gaussian_prior
            Ls = np.linalg.cholesky(pc)
            logdet_s = 2.0 * float(np.sum(np.log(np.diag(Ls))))
            Ls_j = jnp.asarray(Ls)
            pm_j = jnp.asarray(pm)

            def pair_i1(zk):
                mean, U = unpack_pair(zk)
                Ud = U[:d1, :d1]
                dev = mean[:d1] - pm_j
                a = jax.scipy.linalg.solve_triangular(Ls_j, dev, lower=True)
                Bm = jax.scipy.linalg.solve_triangular(Ls_j, Ud.T, lower=True)
                return -0.5 * (
                    a @ a + jnp.sum(Bm * Bm) + d1 * LOG_2PI + logdet_s
                )
        else:
            zeta1, w1 = unit_points(self.scheme, d1)
            zeta1_j, w1_j = jnp.asarray(zeta1), jnp.asarray(w1)

            def pair_i1(zk):
                mean, U = unpack_pair(zk)
                pts = mean[None, :d1] + zeta1_j @ U[:d1, :d1]
                vals = jax.vmap(lambda pt: model.prior_logpdf(pt[nt:], pt[:nt]))(pts)
                finite = jnp.where(jnp.isneginf(vals), 0.0, vals)
                bad = jnp.any(jnp.isneginf(vals) & (w1_j != 0.0))
                return jnp.where(bad, -jnp.inf, w1_j @ finite)

        def i1_fn(z):
            zp, _ = split(z)
            return pair_i1(zp[0])

        def elbo_fn(z):
            return i1_fn(z) + jnp.sum(i23_steps_fn(z)) - i4_fn(z)

        def neg_elbo(z):
            return -elbo_fn(z)

        # --- constraints --------------------------------------------------
        def junction_residual(za, zb):
            ma, Ua = unpack_pair(za)
            mb, Ub = unpack_pair(zb)
            th = ma[:nt] - mb[:nt]
            st = ma[d1:] - mb[nt:d1]
            a_blk = (Ua[:nt, :nt] - Ub[:nt, :nt])[iut, jut]
            cross = (Ua[:nt, d1:] - Ub[:nt, nt:d1]).ravel()
            Ca, Ea, Fa = Ua[:nt, d1:], Ua[nt:d1, d1:], Ua[d1:, d1:]
            Bb, Db = Ub[:nt, nt:d1], Ub[nt:d1, nt:d1]
            s2 = Ca.T @ Ca + Ea.T @ Ea + Fa.T @ Fa
            s1 = Bb.T @ Bb + Db.T @ Db
            cov = (s2 - s1)[iux, jux]
            return jnp.concatenate([th, st, a_blk, cross, cov])

        def constraints_fn(z):
            if self.n_pairs <= 1:
                return jnp.zeros(0)
            zp, _ = split(z)
            rows = jax.vmap(junction_residual)(zp[:-1], zp[1:])
            return rows.ravel()

        self.n_constraints = (self.n_pairs - 1) * self._mjun

        # --- merit (augmented Lagrangian of f = -elbo) ---------------------
        def merit_fn(z, lam, rho):
            c = constraints_fn(z)
            return neg_elbo(z) - lam @ c + 0.5 * rho * (c @ c)

        self._elbo_v = jax.jit(elbo_fn)
        self._parts = jax.jit(
            lambda z: (i1_fn(z), i23_steps_fn(z), i4_fn(z))
        )
        self._f_vg = jax.jit(jax.value_and_grad(neg_elbo))
        self._cons = jax.jit(constraints_fn)
        self._cons_jvp = jax.jit(
            lambda z, v: jax.jvp(constraints_fn, (z,), (v,))[1]
        )
        self._cons_vjp = jax.jit(
            lambda z, wv: jax.vjp(constraints_fn, z)[1](wv)[0]
        )
        self._cons_hvp = jax.jit(
            lambda z, lam, v: jax.jvp(
                lambda zz: jax.vjp(constraints_fn, zz)[1](lam)[0], (z,), (v,)
            )[1]
        )
        self._merit_vg = jax.jit(jax.value_and_grad(merit_fn))
        self._merit_hvp = jax.jit(
            lambda z, lam, rho, v: jax.jvp(
                lambda zz: jax.grad(merit_fn)(zz, lam, rho), (z,), (v,)
            )[1]
        )
        if self.n_pairs > 1:
            self._jun_jac = jax.jit(
                jax.vmap(jax.jacfwd(junction_residual, argnums=(0, 1)))
            )
        else:
            self._jun_jac = None

        # --- Gauss-Newton curvature for the quadrature term ----------------
        if model.residual_fn is not None and self.T > 0:
            def pair_resid(zk, eta, y, u, k):
                mean, U = unpack_pair(zk)
                pts = mean[None, :] + self._zeta @ U
                fn = lambda pt: model.residual_fn(
                    pt[d1:], y, pt[nt:d1], pt[:nt], eta, u, k
                )
                return jax.vmap(fn)(pts)

            def resid_stack(z):
                zp, eta = split(z)
                r, _ = jax.vmap(
                    lambda zk, y, u, k: pair_resid(zk, eta, y, u, k)
                )(zp, self._Y, self._U_in, self._ks)
                return r

            def pi_stack(z):
                zp, eta = split(z)
                _, Pi = jax.vmap(
                    lambda zk, y, u, k: pair_resid(zk, eta, y, u, k)
                )(zp, self._Y, self._U_in, self._ks)
                return Pi

            def gn_hvp_fn(z, lam, rho, v):
                Pi = pi_stack(z)
                _, dr = jax.jvp(resid_stack, (z,), (v,))
                s = jnp.linalg.solve(Pi, dr[..., None])[..., 0]
                s = s * self._w[None, :, None]
                g1 = jax.vjp(resid_stack, z)[1](s)[0]
                rest = lambda zz: merit_fn(zz, lam, rho) + jnp.sum(
                    i23_steps_fn(zz)
                )
                g2 = jax.jvp(lambda zz: jax.grad(rest)(zz), (z,), (v,))[1]
                return g1 + g2

            self._gn_hvp = jax.jit(gn_hvp_fn)
        else:
            self._gn_hvp = None

        # --- per-pair curvature blocks (frozen neighbours) ------------------
        first_mask = jnp.asarray(
            (np.arange(self.n_pairs) == 0).astype(float)
        )
        if self.T == 0:
            def local_obj(zk, zp_, zn_, lp_, lc_, mp_, mn_, mf_, mo_, y, u, k, rho, eta):
                _, U = unpack_pair(zk)
                d = jnp.diagonal(U)
                h_first = 0.5 * d1 * (1.0 + LOG_2PI) + jnp.sum(jnp.log(d[:d1]))
                return -pair_i1(zk) - h_first
        else:
            def local_obj(zk, zp_, zn_, lp_, lc_, mp_, mn_, mf_, mo_, y, u, k, rho, eta):
                f_k = -pair_i23(zk, eta, y, u, k) - mf_ * pair_i1(zk)
                f_k = f_k + pair_i4_terms(zk, mo_)
                r_prev = junction_residual(zp_, zk)
                r_next = junction_residual(zk, zn_)
                f_k = f_k + mp_ * (-lp_ @ r_prev + 0.5 * rho * (r_prev @ r_prev))
                f_k = f_k + mn_ * (-lc_ @ r_next + 0.5 * rho * (r_next @ r_next))
                return f_k

        self._local_obj = local_obj
        self._first_mask = first_mask
        self._hess_blocks = None  # compiled lazily, needs eta closure
        if model.neta and self.T > 0:
            def eta_block_fn(z):
                zp, eta = split(z)
                per = jax.vmap(
                    lambda zk, y, u, k: jax.hessian(
                        lambda e: -pair_i23(zk, e, y, u, k)
                    )(eta)
                )(zp, self._Y, self._U_in, self._ks)
                return jnp.sum(per, axis=0)

            self._eta_block = jax.jit(eta_block_fn)
        else:
            self._eta_block = None

        self._pair_logpdfs = None
        if self.T > 0:
            self._pair_logpdfs = jax.jit(
                lambda z: jax.vmap(
                    lambda zk, y, u, k: pair_logpdfs(zk, split(z)[1], y, u, k)
                )(split(z)[0], self._Y, self._U_in, self._ks)
            )

    # -- public wrappers (numpy in / numpy out) ---------------------------

    def _z(self, z):
        z = np.asarray(z, dtype=float)
        if z.shape != (self.layout.n_free,):
            raise ConfigurationError(
                f"flat vector has shape {z.shape}, expected ({self.layout.n_free},)"
            )
        return jnp.asarray(z)

    def elbo_value(self, z):
        return float(self._elbo_v(self._z(z)))

    def breakdown(self, z) -> ElboBreakdown:
        i1v, steps, i4v = self._parts(self._z(z))
        steps = np.asarray(steps)
        i23v = float(np.sum(steps)) if steps.size else 0.0
        return ElboBreakdown(
            i1=float(i1v),
            i23=i23v,
            i4=float(i4v),
            total=float(i1v) + i23v - float(i4v),
            i23_steps=steps,
        )

    def value_and_grad(self, z):
        f, g = self._f_vg(self._z(z))
        return float(f), np.asarray(g)

    def constraints(self, z):
        return np.asarray(self._cons(self._z(z)))

    def constraint_residual(self, z) -> ConstraintResidual:
        return ConstraintResidual(
            values=self.constraints(z),
            n_junctions=self.n_pairs - 1,
            ntheta=self._nt,
            nx=self._nx,
        )

    def constraints_jvp(self, z, v):
        return np.asarray(self._cons_jvp(self._z(z), jnp.asarray(v, dtype=float)))

    def constraints_vjp(self, z, wv):
        return np.asarray(self._cons_vjp(self._z(z), jnp.asarray(wv, dtype=float)))

    def constraints_hvp(self, z, lam, v):
        """Contraction sum_i lam_i * H(c_i) applied to v."""
        return np.asarray(
            self._cons_hvp(
                self._z(z), jnp.asarray(lam, dtype=float), jnp.asarray(v, dtype=float)
            )
        )

    def merit_value_grad(self, z, lam, rho):
        m, g = self._merit_vg(
            self._z(z), jnp.asarray(lam, dtype=float), float(rho)
        )
        return float(m), np.asarray(g)

    def merit_hvp(self, z, lam, rho, v, kind="exact"):
        args = (
            self._z(z),
            jnp.asarray(lam, dtype=float),
            float(rho),
            jnp.asarray(v, dtype=float),
        )
        if kind == "gauss-newton" and self._gn_hvp is not None:
            return np.asarray(self._gn_hvp(*args))
        return np.asarray(self._merit_hvp(*args))

    def hessian_blocks(self, z, lam, rho):
        """Per-pair Hessians of the merit with neighbours frozen.

        Returns an array (n_pairs, per_pair, per_pair); when eta is
        present its own block is returned separately as the second item.
        """
        zj = self._z(z)
        lay = self.layout
        zp = np.asarray(zj[: self.n_pairs * lay.per_pair]).reshape(
            self.n_pairs, lay.per_pair
        )
        eta = np.asarray(zj[self.n_pairs * lay.per_pair :])
        if self._hess_blocks is None:
            self._hess_blocks = jax.jit(
                jax.vmap(
                    jax.hessian(self._local_obj, argnums=0),
                    in_axes=(0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, None, None),
                )
            )
        T_p = self.n_pairs
        per = lay.per_pair
        zprev = np.vstack([np.zeros((1, per)), zp[:-1]])
        znext = np.vstack([zp[1:], np.zeros((1, per))])
        lam = np.asarray(lam, dtype=float).reshape(-1, self._mjun) if np.size(lam) else np.zeros((0, self._mjun))
        lam_prev = np.vstack([np.zeros((1, self._mjun)), lam])
        lam_cur = np.vstack([lam, np.zeros((1, self._mjun))])
        mask_prev = (np.arange(T_p) > 0).astype(float)
        mask_next = (np.arange(T_p) < T_p - 1).astype(float)
        mask_first = (np.arange(T_p) == 0).astype(float)
        mask_ov = (np.arange(T_p) >= 1).astype(float)
        Y = self.dataset.y if self.T else np.zeros((1, self.model.ny))
        Uin = self.dataset.inputs() if self.T else np.zeros((1, self.model.nu))
        ks = np.arange(T_p)
        blocks = self._hess_blocks(
            jnp.asarray(zp),
            jnp.asarray(zprev),
            jnp.asarray(znext),
            jnp.asarray(lam_prev),
            jnp.asarray(lam_cur),
            jnp.asarray(mask_prev),
            jnp.asarray(mask_next),
            jnp.asarray(mask_first),
            jnp.asarray(mask_ov),
            jnp.asarray(Y),
            jnp.asarray(Uin),
            jnp.asarray(ks),
            float(rho),
            jnp.asarray(eta),
        )
        eta_block = (
            np.asarray(self._eta_block(zj)) if self._eta_block is not None else None
        )
        return np.asarray(blocks), eta_block

    def junction_jacobians(self, z):
        """Jacobians of each junction residual with respect to its two pairs.

        Returns (Ja, Jb) of shape (n_junctions, junction_size, per_pair):
        d r_k / d z_k and d r_k / d z_{k+1}.  eta never enters the
        constraints.
        """
        if self._jun_jac is None:
            per = self.layout.per_pair
            return (np.zeros((0, self._mjun, per)), np.zeros((0, self._mjun, per)))
        zj = self._z(z)
        zp = zj[: self.n_pairs * self.layout.per_pair].reshape(
            self.n_pairs, self.layout.per_pair
        )
        Ja, Jb = self._jun_jac(zp[:-1], zp[1:])
        return np.asarray(Ja), np.asarray(Jb)

    def diagnose(self, z):
        """Locate non-finite step log densities: list of (k, j, value)."""
        if self._pair_logpdfs is None:
            return []
        vals = np.asarray(self._pair_logpdfs(self._z(z)))
        out = []
        for k, j in zip(*np.nonzero(~np.isfinite(vals))):
            out.append((int(k), int(j), float(vals[k, j])))
        return out

    # -- BetaParams conveniences ------------------------------------------

    def pack(self, beta: BetaParams):
        return self.layout.pack(beta)

    def unpack(self, z) -> BetaParams:
        return self.layout.unpack(np.asarray(z, dtype=float))


def _engine(model, dataset, scheme):
    return ElboEngine(model, dataset, scheme)


def elbo(model, dataset, beta, scheme=None) -> float:
    """Value of the bound for one BetaParams (convenience wrapper)."""
    eng = _engine(model, dataset, scheme)
    return eng.elbo_value(eng.pack(beta))


def elbo_breakdown(model, dataset, beta, scheme=None) -> ElboBreakdown:
    eng = _engine(model, dataset, scheme)
    return eng.breakdown(eng.pack(beta))


def elbo_gradient(model, dataset, beta, scheme=None):
    """Gradient of the bound with respect to the flat parameter vector."""
    eng = _engine(model, dataset, scheme)
    f, g = eng.value_and_grad(eng.pack(beta))
    return -g


def constraint_residual(model, dataset, beta, scheme=None) -> ConstraintResidual:
    eng = _engine(model, dataset, scheme)
    return eng.constraint_residual(eng.pack(beta))
