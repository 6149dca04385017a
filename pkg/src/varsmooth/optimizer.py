"""Equality-constrained maximisation of the bound.

The default method is an augmented-Lagrangian outer loop around a
preconditioned trust-region Newton inner solver.  Positive Cholesky
diagonals are maintained by optimising a softplus-shifted copy of each
diagonal entry, which doubles as an automatic log-scaling of small
diagonals.  The objective Hessian is block separable per pair and the
constraints couple only neighbouring pairs, which the preconditioner
(inverse of the per-pair merit Hessian blocks) exploits directly.

A basic sequential quadratic programming method is available as an
alternative; it assembles the exact block-diagonal Lagrangian Hessian
and the sparse constraint Jacobian into one KKT system per step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from types import SimpleNamespace

import numpy as np
import scipy.optimize
import scipy.sparse
import scipy.sparse.linalg

from .elbo import ElboBreakdown, ElboEngine, junction_dims
from .errors import ConfigurationError
from .gaussian import BetaParams, PairwiseGaussian
from .quadrature import SchemeConfig

_ACCEPT_RATIO = 0.01
_STALL_STEP = 1e-14
# hard cap on any single coordinate move: diagonal coordinates live on a log
# scale under the softplus map, and an uncapped near-null preconditioner
# direction can carry one of them so deep into saturation that its gradient
# underflows and the coordinate becomes unrecoverable; exp-family merit terms
# also break the quadratic model beyond a couple of units
_STEP_CAP = 2.0


@dataclass(frozen=True)
class SolverOptions:
    """Knobs for solve(); defaults aim at tight, reproducible solves."""

    method: str = "augmented-lagrangian"
    max_outer: int = 30
    max_inner: int = 200
    tol_grad: float = 1e-6
    tol_constraint: float = 1e-8
    hessian: str = "exact"
    penalty_growth: float = 10.0
    bijection_floor: float = 1e-12
    penalty0: float = 10.0
    multiplier_init: str = "least-squares"
    trust_radius0: float = 1.0
    precond_refresh: int = 5
    cg_max: int = 200
    eliminate_linear: bool = False

    def __post_init__(self):
        if self.method not in ("augmented-lagrangian", "sqp"):
            raise ConfigurationError(f"unknown method {self.method!r}")
        if self.eliminate_linear and self.method != "sqp":
            # the reduction shares coordinates across pairs, which breaks
            # the per-pair block preconditioner of the multiplier loop
            raise ConfigurationError("eliminate_linear requires method='sqp'")
        if self.hessian not in ("exact", "gauss-newton"):
            raise ConfigurationError(f"unknown hessian kind {self.hessian!r}")
        if self.multiplier_init not in ("least-squares", "zero"):
            raise ConfigurationError(
                f"unknown multiplier_init {self.multiplier_init!r}"
            )
        if self.tol_grad <= 0 or self.tol_constraint <= 0:
            raise ConfigurationError("tolerances must be positive")
        if self.penalty_growth <= 1.0:
            raise ConfigurationError("penalty_growth must exceed 1")
        if self.bijection_floor <= 0 or self.penalty0 <= 0:
            raise ConfigurationError("floors and penalties must be positive")


@dataclass
class SolveReport:
    """Outcome of one solve run.

    trace holds one (elbo, constraint_max_abs) tuple per outer iteration;
    inner_merits holds, per outer iteration, the merit value (in
    maximisation form, so it must be non-decreasing) after every accepted
    inner step including the starting point.
    """

    status: str
    breakdown: ElboBreakdown
    constraint_norm: float
    lagrangian_grad_norm: float
    n_outer: int
    n_inner: int
    trace: list = field(default_factory=list)
    inner_merits: list = field(default_factory=list)
    message: str = ""

    @property
    def converged(self):
        return self.status == "converged"


def initialize(model, dataset, scheme=None, scale=1.0) -> BetaParams:
    """Feasible starting point from a deterministic prior-mean rollout.

    All pairs share the prior theta factor; state factors are diagonal
    with the given scale, cross blocks zero, so neighbouring marginals
    agree exactly by construction.
    """
    nt, nx = model.ntheta, model.nx
    theta0 = (
        np.asarray(model.theta_prior_mean, dtype=float)
        if model.theta_prior_mean is not None
        else np.zeros(nt)
    )
    A = (
        np.asarray(model.theta_prior_chol, dtype=float)
        if model.theta_prior_chol is not None
        else np.eye(nt)
    )
    x1 = (
        np.asarray(model.x1_mean(theta0), dtype=float)
        if model.x1_mean is not None
        else np.zeros(nx)
    )
    T = dataset.T
    u = dataset.inputs()
    means = [x1]
    if model.transition_mean is not None:
        for k in range(max(T, 1)):
            uk = u[k] if k < T else np.zeros(model.nu)
            means.append(
                np.asarray(
                    model.transition_mean(means[-1], theta0, model.eta0, uk, k),
                    dtype=float,
                )
            )
    else:
        means.extend([x1.copy() for _ in range(max(T, 1))])
    eye = scale * np.eye(nx)
    zero = np.zeros((nt, nx))
    pairs = [
        PairwiseGaussian(
            mu_theta=theta0,
            mu_xk=means[k],
            mu_xk1=means[k + 1],
            A=A.copy(),
            B=zero.copy(),
            C=zero.copy(),
            D=eye.copy(),
            E=np.zeros((nx, nx)),
            F=eye.copy(),
        )
        for k in range(max(T, 1))
    ]
    return BetaParams(pairs=pairs, eta=model.eta0.copy())


class _Bijection:
    """Softplus shift on the factor-diagonal coordinates."""

    def __init__(self, layout, floor):
        self.di = layout.diag_indices
        self.floor = floor

    @staticmethod
    def _softplus(t):
        with np.errstate(over="ignore"):
            return np.where(t > 0, t + np.log1p(np.exp(-t)), np.log1p(np.exp(t)))

    @staticmethod
    def _softplus_inv(d):
        # t with softplus(t) = d, stable for small and large d
        with np.errstate(divide="ignore"):
            return np.where(d > 30, d, np.log(np.expm1(np.maximum(d, 1e-300))))

    def to_raw(self, w):
        z = w.copy()
        z[self.di] = self.floor + self._softplus(w[self.di])
        return z

    def from_raw(self, z):
        d = z[self.di] - self.floor
        if np.any(d <= 0):
            raise ConfigurationError("factor diagonals must exceed the floor")
        w = z.copy()
        w[self.di] = self._softplus_inv(d)
        return w

    def jac(self, w):
        j = np.ones_like(w)
        with np.errstate(over="ignore"):
            j[self.di] = 1.0 / (1.0 + np.exp(-w[self.di]))
        return j

    def curv(self, w):
        # second derivative of softplus at the diagonal coordinates
        with np.errstate(over="ignore"):
            s = 1.0 / (1.0 + np.exp(-w[self.di]))
        return s * (1.0 - s)


class _MeritSpace:
    """Merit/constraint evaluations in the bijected coordinate system."""

    def __init__(self, engine: ElboEngine, opts: SolverOptions):
        self.eng = engine
        self.opts = opts
        self.bij = _Bijection(engine.layout, opts.bijection_floor)

    def value_grad(self, w, lam, rho):
        z = self.bij.to_raw(w)
        m, gz = self.eng.merit_value_grad(z, lam, rho)
        return m, gz * self.bij.jac(w), gz

    def hvp(self, w, lam, rho, v, gz):
        z = self.bij.to_raw(w)
        j = self.bij.jac(w)
        hv = self.eng.merit_hvp(z, lam, rho, j * v, kind=self.opts.hessian)
        hv = j * hv
        di = self.bij.di
        hv[di] = hv[di] + gz[di] * self.bij.curv(w) * v[di]
        return hv

    def constraints(self, w):
        return self.eng.constraints(self.bij.to_raw(w))

    def cons_jvp(self, w, v):
        return self.eng.constraints_jvp(self.bij.to_raw(w), self.bij.jac(w) * v)

    def cons_vjp(self, w, lam):
        return self.bij.jac(w) * self.eng.constraints_vjp(self.bij.to_raw(w), lam)

    def cons_hvp(self, w, lam, v):
        """Apply sum_i lam_i * H(c_i) in bijected coordinates."""
        z = self.bij.to_raw(w)
        j = self.bij.jac(w)
        hv = j * self.eng.constraints_hvp(z, lam, j * v)
        gz_c = self.eng.constraints_vjp(z, lam)
        di = self.bij.di
        hv[di] = hv[di] + gz_c[di] * self.bij.curv(w) * v[di]
        return hv

    @property
    def n_cons(self):
        return self.eng.n_constraints

    def raw_full(self, w):
        return self.bij.to_raw(w)

    def from_raw_start(self, z0):
        return self.bij.from_raw(z0)

    def full_constraints(self, w):
        return self.constraints(w)

    def cons_jac_sparse(self, w):
        return _sparse_cons_jac(self, w)

    def blocks(self, w, lam, rho, gz):
        """Per-pair merit Hessian blocks mapped into bijected coordinates."""
        z = self.bij.to_raw(w)
        blocks, eta_block = self.eng.hessian_blocks(z, lam, rho)
        j = self.bij.jac(w)
        lay = self.eng.layout
        pp = lay.per_pair
        curv = np.zeros_like(w)
        curv[self.bij.di] = gz[self.bij.di] * self.bij.curv(w)
        out = []
        for k in range(blocks.shape[0]):
            jk = j[k * pp : (k + 1) * pp]
            Bk = blocks[k] * jk[None, :] * jk[:, None]
            Bk[np.diag_indices(pp)] += curv[k * pp : (k + 1) * pp]
            out.append(Bk)
        return out, eta_block


class _ReducedSpace:
    """Merit/constraint evaluations after eliminating the linear junction rows.

    The shared theta mean and factor, the cross-block aliasing C_k = B_{k+1}
    and the chained state means are enforced by construction through a 0/1
    selection map z = S v; only the quadratic covariance rows survive as
    constraints.  Presents the same surface as _MeritSpace so the SQP core
    can run on either.
    """

    def __init__(self, engine: ElboEngine, opts: SolverOptions):
        self.eng = engine
        self.opts = opts
        lay = engine.layout
        nt, nx, T, neta = lay.ntheta, lay.nx, lay.T, lay.neta
        p, d1 = lay.p, nt + nx
        ntri_t = nt * (nt + 1) // 2
        ntri_x = nx * (nx + 1) // 2
        ntnx = nt * nx
        loc_pp = 2 * ntri_x + nx * nx  # D, E, F of one pair
        o_a = nt
        o_mx = o_a + ntri_t
        o_g = o_mx + (T + 1) * nx
        o_loc = o_g + (T + 1) * ntnx
        o_eta = o_loc + T * loc_pp
        self.n_v = o_eta + neta
        # triangle-internal offsets, counted in the row-major (iu, ju) order
        a_pos, d_pos, f_pos = {}, {}, {}
        for t in range(lay.n_tri):
            i, j = int(lay.iu[t]), int(lay.ju[t])
            if j < nt:
                a_pos[(i, j)] = len(a_pos)
            elif nt <= i < d1 and nt <= j < d1:
                d_pos[(i - nt, j - nt)] = len(d_pos)
            elif i >= d1:
                f_pos[(i - d1, j - d1)] = len(f_pos)
        sel = np.empty(lay.n_free, dtype=np.intp)
        diag_v = set()
        for k in range(T):
            off = k * lay.per_pair
            sel[off : off + nt] = np.arange(nt)
            sel[off + nt : off + d1] = o_mx + k * nx + np.arange(nx)
            sel[off + d1 : off + p] = o_mx + (k + 1) * nx + np.arange(nx)
            for t in range(lay.n_tri):
                i, j = int(lay.iu[t]), int(lay.ju[t])
                if j < nt:
                    tgt = o_a + a_pos[(i, j)]
                elif i < nt and j < d1:
                    tgt = o_g + k * ntnx + i * nx + (j - nt)
                elif i < nt:
                    tgt = o_g + (k + 1) * ntnx + i * nx + (j - d1)
                elif j < d1:
                    tgt = o_loc + k * loc_pp + d_pos[(i - nt, j - nt)]
                elif i < d1:
                    tgt = o_loc + k * loc_pp + ntri_x + (i - nt) * nx + (j - d1)
                else:
                    tgt = o_loc + k * loc_pp + ntri_x + nx * nx + f_pos[(i - d1, j - d1)]
                sel[off + p + t] = tgt
                if i == j:
                    diag_v.add(tgt)
        if neta:
            sel[T * lay.per_pair :] = o_eta + np.arange(neta)
        self.sel = sel
        self.S = scipy.sparse.csr_matrix(
            (np.ones(lay.n_free), (np.arange(lay.n_free), sel)),
            shape=(lay.n_free, self.n_v),
        )
        self.bij = _Bijection(
            SimpleNamespace(diag_indices=np.array(sorted(diag_v), dtype=np.intp)),
            opts.bijection_floor,
        )
        mjun = sum(junction_dims(nt, nx).values())
        n_jun = max(engine.n_pairs - 1, 0)
        self.keep = (
            np.arange(n_jun)[:, None] * mjun
            + (mjun - ntri_x + np.arange(ntri_x))[None, :]
        ).ravel()
        self.n_cons = n_jun * ntri_x
        self._n_full = n_jun * mjun

    def _expand_lam(self, lam):
        full = np.zeros(self._n_full)
        full[self.keep] = lam
        return full

    def _contract(self, gz):
        return np.bincount(self.sel, weights=gz, minlength=self.n_v)

    def raw_full(self, w):
        return self.bij.to_raw(w)[self.sel]

    def from_raw_start(self, z0):
        # conflicting writes resolve to the last occurrence; for a start
        # satisfying the linear rows all occurrences agree anyway
        v0 = np.zeros(self.n_v)
        v0[self.sel] = z0
        return self.bij.from_raw(v0)

    def value_grad(self, w, lam, rho):
        z = self.raw_full(w)
        m, gz = self.eng.merit_value_grad(z, self._expand_lam(lam), rho)
        gv = self._contract(gz)
        return m, gv * self.bij.jac(w), gv

    def hvp(self, w, lam, rho, v, gv):
        jw = self.bij.jac(w)
        dz = (jw * v)[self.sel]
        hz = self.eng.merit_hvp(
            self.raw_full(w), self._expand_lam(lam), rho, dz, kind=self.opts.hessian
        )
        hv = jw * self._contract(hz)
        di = self.bij.di
        hv[di] = hv[di] + gv[di] * self.bij.curv(w) * v[di]
        return hv

    def constraints(self, w):
        return self.eng.constraints(self.raw_full(w))[self.keep]

    def full_constraints(self, w):
        return self.eng.constraints(self.raw_full(w))

    def cons_hvp(self, w, lam, v):
        lam_full = self._expand_lam(lam)
        jw = self.bij.jac(w)
        z = self.raw_full(w)
        hz = self.eng.constraints_hvp(z, lam_full, (jw * v)[self.sel])
        hv = jw * self._contract(hz)
        gv_c = self._contract(self.eng.constraints_vjp(z, lam_full))
        di = self.bij.di
        hv[di] = hv[di] + gv_c[di] * self.bij.curv(w) * v[di]
        return hv

    def cons_jac_sparse(self, w):
        J = _sparse_cons_jac_raw(self.eng, self.raw_full(w))[self.keep]
        return (J @ self.S @ scipy.sparse.diags(self.bij.jac(w))).tocsr()


class _BlockPrecond:
    """Inverse of eigenvalue-clipped per-pair blocks (plus an eta block)."""

    def __init__(self, blocks, eta_block, per_pair, n_free):
        self.per_pair = per_pair
        self.facs = [self._factor(B) for B in blocks]
        self.neta = n_free - len(self.facs) * per_pair
        self.eta_fac = self._factor(eta_block) if eta_block is not None else None

    @staticmethod
    def _factor(B):
        # absolute-value eigenvalue clip: keeps the scale of negative
        # curvature directions instead of flooring them to ~0, which
        # would blow up the first preconditioned direction
        B = 0.5 * (B + B.T)
        vals, vecs = np.linalg.eigh(B)
        floor = max(1e-6 * float(np.max(np.abs(vals), initial=0.0)), 1e-12)
        vals = np.maximum(np.abs(vals), floor)
        return vals, vecs

    def apply(self, r):
        out = np.empty_like(r)
        pp = self.per_pair
        for k, (vals, vecs) in enumerate(self.facs):
            rk = r[k * pp : (k + 1) * pp]
            out[k * pp : (k + 1) * pp] = vecs @ ((vecs.T @ rk) / vals)
        if self.neta:
            if self.eta_fac is not None:
                vals, vecs = self.eta_fac
                out[-self.neta :] = vecs @ ((vecs.T @ r[-self.neta :]) / vals)
            else:
                out[-self.neta :] = r[-self.neta :]
        return out


def _steihaug(g, hvp, precond, delta, cg_max, forcing):
    """Preconditioned Steihaug-CG for min g's + 0.5 s'Hs, ||s||_M <= delta.

    Returns (s, Hs, on_boundary, iters).  The preconditioned norm is
    tracked with the standard recurrences so no extra M-products are
    needed.
    """
    n = g.shape[0]
    s = np.zeros(n)
    Hs = np.zeros(n)
    r = g.copy()
    y = precond.apply(r)
    d = -y
    ry = r @ y
    gnorm = np.linalg.norm(g)
    tol = forcing * gnorm
    sMs, sMd, dMd = 0.0, 0.0, ry

    def to_boundary(tau_s, tau_d, dd):
        disc = max(tau_d * tau_d + dd * (delta**2 - tau_s), 0.0)
        return (-tau_d + np.sqrt(disc)) / max(dd, 1e-300)

    for it in range(cg_max):
        Hd = hvp(d)
        kappa = d @ Hd
        if kappa <= 0:
            tau = to_boundary(sMs, sMd, dMd)
            return s + tau * d, Hs + tau * Hd, True, it + 1
        alpha = ry / kappa
        sMs_new = sMs + 2.0 * alpha * sMd + alpha * alpha * dMd
        if sMs_new >= delta**2:
            tau = to_boundary(sMs, sMd, dMd)
            return s + tau * d, Hs + tau * Hd, True, it + 1
        s = s + alpha * d
        Hs = Hs + alpha * Hd
        r = r + alpha * Hd
        if np.linalg.norm(r) <= tol:
            return s, Hs, False, it + 1
        y = precond.apply(r)
        ry_new = r @ y
        beta = ry_new / ry
        sMd = beta * (sMd + alpha * dMd)
        dMd = ry_new + beta * beta * dMd
        sMs = sMs_new
        d = -y + beta * d
        ry = ry_new
    return s, Hs, False, cg_max


def _lsq_multipliers(space, w, n_cons):
    """Least-squares fit of the multipliers: argmin ||grad f - J' lam||."""
    if n_cons == 0:
        return np.zeros(0)
    _, gw, _ = space.value_grad(w, np.zeros(n_cons), 0.0)
    jt = space.cons_jac_sparse(w).T.tocsr()
    res = scipy.sparse.linalg.lsqr(jt, gw, atol=1e-13, btol=1e-13, iter_lim=20 * n_cons)
    lam = res[0]
    if not np.all(np.isfinite(lam)) or np.linalg.norm(lam) > 1e8:
        return np.zeros(n_cons)
    return lam


def _solve_auglag(engine, opts, w0):
    space = _MeritSpace(engine, opts)
    w = w0.copy()
    n_cons = engine.n_constraints
    m0, gw, gz = space.value_grad(w, np.zeros(n_cons), 0.0)
    if not np.isfinite(m0):
        return w, SolveReport(
            status="numerical-failure",
            breakdown=engine.breakdown(space.bij.to_raw(w)),
            constraint_norm=float("nan"),
            lagrangian_grad_norm=float("nan"),
            n_outer=0,
            n_inner=0,
            message="objective not finite at the starting point",
        )
    if opts.multiplier_init == "least-squares":
        lam = _lsq_multipliers(space, w, n_cons)
    else:
        lam = np.zeros(n_cons)
    rho = opts.penalty0
    omega = max(1.0 / rho, opts.tol_grad)
    eta = max(1.0 / rho**0.1, opts.tol_constraint)
    delta = opts.trust_radius0
    trace = []
    inner_merits = []
    total_inner = 0
    status, message = "max-iter", ""
    lag_norm = float("inf")
    cmax = float("inf")

    stall_strikes = 0
    for outer in range(1, opts.max_outer + 1):
        # ---- inner trust-region Newton on the current merit ----
        delta = max(delta, opts.trust_radius0)  # fresh merit, fresh radius
        m, gw, gz = space.value_grad(w, lam, rho)
        merits = [-m]
        precond = None
        stalled = False
        diverged = False
        w_start = w.copy()
        c_start = space.constraints(w_start)
        funnel = max(
            1.0, 10.0 * (float(np.max(np.abs(c_start))) if c_start.size else 0.0)
        )
        for it in range(opts.max_inner):
            if np.linalg.norm(gw) <= omega:
                break
            if precond is None or it % opts.precond_refresh == 0:
                blocks, eta_block = space.blocks(w, lam, rho, gz)
                precond = _BlockPrecond(
                    blocks, eta_block, engine.layout.per_pair, engine.layout.n_free
                )
            hvp = lambda v: space.hvp(w, lam, rho, v, gz)
            forcing = min(0.1, np.sqrt(np.linalg.norm(gw)))
            s, Hs, boundary, _ = _steihaug(
                gw, hvp, precond, delta, opts.cg_max, forcing
            )
            smax = np.max(np.abs(s)) if s.size else 0.0
            if smax > _STEP_CAP:
                scale = _STEP_CAP / smax
                s = scale * s
                Hs = scale * Hs
                boundary = True
            snorm = np.linalg.norm(s)
            if snorm < _STALL_STEP:
                stalled = True
                break
            pred = -(gw @ s + 0.5 * (s @ Hs))
            noise = 1e-13 * (1.0 + abs(m))
            if pred <= noise:
                # predicted decrease is below merit rounding error: the
                # ratio test can no longer certify progress at this scale
                stalled = True
                break
            m_trial, gw_trial, gz_trial = space.value_grad(w + s, lam, rho)
            ared = m - m_trial
            ratio = -np.inf if not np.isfinite(m_trial) else ared / pred
            if ratio >= _ACCEPT_RATIO and ared > -noise:
                w = w + s
                m, gw, gz = m_trial, gw_trial, gz_trial
                merits.append(-m)
                c_now = space.constraints(w)
                cmax_now = float(np.max(np.abs(c_now))) if c_now.size else 0.0
                if cmax_now > funnel or not np.all(np.isfinite(gw)):
                    # runaway along an infeasible descent direction: this
                    # penalty is too weak to hold the iterates near the
                    # constraint manifold
                    diverged = True
                    break
            else:
                precond = None  # curvature model was off; rebuild
            if ratio < 0.25:
                delta = 0.25 * delta
                if delta < 1e-13:
                    stalled = True
                    break
            elif ratio > 0.75 and boundary:
                delta = min(2.0 * delta, 1e3)
            total_inner += 1
        inner_merits.append(merits)

        if diverged:
            w = w_start  # discard the runaway trajectory
            rho = rho * opts.penalty_growth
            omega = max(1.0 / rho, opts.tol_grad)
            eta = max(1.0 / rho**0.1, opts.tol_constraint)
            if rho > 1e14:
                status, message = "numerical-failure", "penalty growth exhausted"
                c = space.constraints(w)
                cmax = float(np.max(np.abs(c))) if c.size else 0.0
                lag_norm = float("inf")
                break
            trace.append((engine.elbo_value(space.bij.to_raw(w)), funnel))
            continue

        c = space.constraints(w)
        cmax = float(np.max(np.abs(c))) if c.size else 0.0
        elbo_now = engine.elbo_value(space.bij.to_raw(w))
        trace.append((elbo_now, cmax))
        if stalled:
            # a stall at a stationary, feasible point is convergence
            _, g_lag, _ = space.value_grad(w, lam - rho * c, 0.0)
            first_norm = float(np.linalg.norm(g_lag))
            if first_norm <= opts.tol_grad and cmax <= opts.tol_constraint:
                lam = lam - rho * c
                lag_norm = first_norm
                status = "converged"
                break
            if cmax <= opts.tol_constraint:
                # the first-order multiplier estimate may lag; test with the
                # minimal-norm one before treating the stall as a failure
                lam_fit = _lsq_multipliers(space, w, n_cons)
                _, g_fit, _ = space.value_grad(w, lam_fit, 0.0)
                fit_norm = float(np.linalg.norm(g_fit))
                if fit_norm <= opts.tol_grad:
                    lam = lam_fit
                    lag_norm = fit_norm
                    status = "converged"
                    break
                if fit_norm <= 0.5 * first_norm:
                    # retry on the refreshed merit from a fresh radius at a
                    # mild penalty: with near-exact multipliers and c ~ 0 a
                    # large rho only shadows the true residual with J'c
                    # noise and crushes the certifiable progress left in
                    # the tangential directions
                    lam = lam_fit
                    rho = opts.penalty0
                    omega = opts.tol_grad
                    eta = max(eta, opts.tol_constraint)
                    delta = opts.trust_radius0
                    continue
            stall_strikes += 1
            if stall_strikes >= 3 or rho > 1e12:
                status, message = "numerical-failure", "inner step collapsed"
                lam = lam - rho * c
                lag_norm = first_norm
                break
            # not at a solution: change the merit landscape and retry
        else:
            stall_strikes = 0
        if cmax <= max(eta, opts.tol_constraint):
            lam = lam - rho * c
            _, g_lag, _ = space.value_grad(w, lam, 0.0)
            lag_norm = float(np.linalg.norm(g_lag))
            if lag_norm <= opts.tol_grad and cmax <= opts.tol_constraint:
                status = "converged"
                break
            omega = max(omega / rho, opts.tol_grad)
            eta = max(eta / rho**0.9, opts.tol_constraint)
        else:
            rho = rho * opts.penalty_growth
            omega = max(1.0 / rho, opts.tol_grad)
            eta = max(1.0 / rho**0.1, opts.tol_constraint)
    else:
        c = space.constraints(w)
        lam_final = lam - rho * c if c.size else lam
        _, g_lag, _ = space.value_grad(w, lam_final, 0.0)
        lag_norm = float(np.linalg.norm(g_lag))

    z = space.bij.to_raw(w)
    report = SolveReport(
        status=status,
        breakdown=engine.breakdown(z),
        constraint_norm=cmax,
        lagrangian_grad_norm=lag_norm,
        n_outer=len(trace),
        n_inner=total_inner,
        trace=trace,
        inner_merits=inner_merits,
        message=message,
    )
    return w, report


def _sparse_cons_jac_raw(eng, z):
    """Bidiagonal-block constraint Jacobian in raw coordinates."""
    lay = eng.layout
    pp = lay.per_pair
    Tp = eng.n_pairs
    n = lay.n_free
    if Tp <= 1:
        return scipy.sparse.csr_matrix((0, n))
    Ja, Jb = eng.junction_jacobians(z)
    mjun = Ja.shape[1] if Ja.size else 0
    rows, cols, vals = [], [], []
    for k in range(Tp - 1):
        for (Jk, col0) in ((Ja[k], k * pp), (Jb[k], (k + 1) * pp)):
            r, cidx = np.nonzero(Jk)
            rows.append(k * mjun + r)
            cols.append(col0 + cidx)
            vals.append(Jk[r, cidx])
    if not rows:
        return scipy.sparse.csr_matrix(((Tp - 1) * mjun, n))
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    return scipy.sparse.csr_matrix(
        (vals, (rows, cols)), shape=((Tp - 1) * mjun, n)
    )


def _sparse_cons_jac(space, w):
    """Bidiagonal-block constraint Jacobian in bijected coordinates."""
    J = _sparse_cons_jac_raw(space.eng, space.bij.to_raw(w))
    return (J @ scipy.sparse.diags(space.bij.jac(w))).tocsr()


def _solve_sqp(engine, opts, z0):
    """Equality-constrained trust-region SQP (Byrd-Omojokun composite step).

    Delegates the globalization to scipy's trust-constr machinery while
    supplying exact sparse constraint Jacobians and Hessian-vector products
    from the engine.  Handles indefinite curvature far more gracefully than
    the multiplier loop, at the price of denser linear algebra per step.
    With eliminate_linear the same core runs on the reduced variables.
    """
    if opts.eliminate_linear:
        space = _ReducedSpace(engine, opts)
    else:
        space = _MeritSpace(engine, opts)
    w0 = space.from_raw_start(z0)
    n_cons = space.n_cons
    n = w0.shape[0]
    zeros = np.zeros(n_cons)
    m0, _, _ = space.value_grad(w0, zeros, 0.0)
    if not np.isfinite(m0):
        return z0, SolveReport(
            status="numerical-failure",
            breakdown=engine.breakdown(space.raw_full(w0)),
            constraint_norm=float("nan"),
            lagrangian_grad_norm=float("nan"),
            n_outer=0,
            n_inner=0,
            message="objective not finite at the starting point",
        )

    cache = {}

    def _vg(w):
        key = w.tobytes()
        if key not in cache:
            cache.clear()
            m, gw, gz = space.value_grad(w, zeros, 0.0)
            cache[key] = (m, gw, gz)
        return cache[key]

    def obj_hess(w):
        _, _, gz = _vg(w)
        return scipy.sparse.linalg.LinearOperator(
            (n, n),
            matvec=lambda v: space.hvp(w, zeros, 0.0, np.asarray(v).ravel(), gz),
        )

    def cons_hess(w, v):
        lam = -np.asarray(v).ravel()  # scipy's L = f + v'c; ours is f - lam'c
        return scipy.sparse.linalg.LinearOperator(
            (n, n),
            matvec=lambda p: -space.cons_hvp(w, lam, np.asarray(p).ravel()),
        )

    trace = []

    def callback(wk, state):
        trace.append((float(-state.fun), float(state.constr_violation)))
        return False

    constraints = []
    if n_cons:
        constraints.append(
            scipy.optimize.NonlinearConstraint(
                space.constraints,
                0.0,
                0.0,
                jac=space.cons_jac_sparse,
                hess=cons_hess,
            )
        )
    res = scipy.optimize.minimize(
        lambda w: _vg(w)[0],
        w0,
        jac=lambda w: _vg(w)[1],
        hess=obj_hess,
        method="trust-constr",
        constraints=constraints,
        callback=callback,
        options={
            "maxiter": opts.max_outer,
            "gtol": 0.25 * opts.tol_grad,
            "xtol": 1e-14,
            "initial_tr_radius": opts.trust_radius0,
        },
    )
    w = np.asarray(res.x, dtype=float)
    c = space.full_constraints(w)
    cmax = float(np.max(np.abs(c))) if c.size else 0.0
    # judge stationarity with the minimal-norm multiplier, not the possibly
    # stale internal estimate
    lam_fit = _lsq_multipliers(space, w, n_cons)
    _, g_lag, _ = space.value_grad(w, lam_fit, 0.0)
    lag_norm = float(np.linalg.norm(g_lag))
    if lag_norm <= opts.tol_grad and cmax <= opts.tol_constraint:
        status, message = "converged", ""
    elif res.status == 0:
        status, message = "max-iter", ""
    else:
        status = "numerical-failure" if res.status == 4 else "max-iter"
        message = str(res.message)
        if res.status == 2 and np.linalg.norm(res.x - w0) < _STALL_STEP:
            status, message = "numerical-failure", "inner step collapsed"
    z = space.raw_full(w)
    return z, SolveReport(
        status=status,
        breakdown=engine.breakdown(z),
        constraint_norm=cmax,
        lagrangian_grad_norm=lag_norm,
        n_outer=len(trace),
        n_inner=int(res.nit),
        trace=trace,
        inner_merits=[[]],
        message=message,
    )


def solve(model, dataset, scheme=None, opts=None, beta0=None, engine=None):
    """Maximise the bound subject to overlap consistency.

    Returns (BetaParams, SolveReport).  A prebuilt engine may be passed
    to reuse its compiled functions across solves on the same data.
    """
    opts = opts if opts is not None else SolverOptions()
    scheme = scheme if scheme is not None else SchemeConfig()
    if engine is None:
        engine = ElboEngine(model, dataset, scheme)
    if beta0 is None:
        beta0 = initialize(model, dataset, scheme)
    z0 = engine.pack(beta0)
    if opts.method == "sqp":
        z_hat, report = _solve_sqp(engine, opts, z0)
    else:
        bij = _Bijection(engine.layout, opts.bijection_floor)
        w, report = _solve_auglag(engine, opts, bij.from_raw(z0))
        z_hat = bij.to_raw(w)
    return engine.unpack(z_hat), report
