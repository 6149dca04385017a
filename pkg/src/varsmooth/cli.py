"""Command-line front end.

Subcommands: simulate, fit, marginals, oracle, compare.  simulate/fit/
oracle read a JSON config; marginals/compare operate on output files.
Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 solver
failure.  Thread count comes from the VI_SSM_THREADS environment
variable, then the "threads" config key, then the processor count, and
is exported to the BLAS pools before any numerical import happens.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_SOLVER = 4

_TOP_KEYS = {"seed", "threads", "model", "quadrature", "solver", "data", "output", "init", "oracle"}
_MODEL_KEYS = {
    "lgssm": {
        "kind", "A", "Q", "H", "R", "m1", "P1", "b", "c",
        "theta_entries", "theta_prior_mean", "theta_prior_cov",
    },
    "stochvol": {"kind", "prior_mean", "prior_cov", "nonstationary_var"},
    "pendulum": {
        "kind", "theta_names", "Pi", "pi_mode", "dt", "substeps",
        "theta_prior_mean", "theta_prior_cov", "x1_mean", "P1", "params",
    },
}
_DATA_KEYS = {"path", "simulate"}
_SIM_KEYS = {"T", "theta", "u"}
_OUTPUT_KEYS = {"dataset", "truth", "posterior", "report", "oracle"}
_ORACLE_KEYS = {"kind", "theta", "n_particles", "n_draws"}
_INIT_KEYS = {"scale"}


class _ConfigError(Exception):
    pass


def _check_keys(section, allowed, where):
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise _ConfigError(f"unknown key(s) {unknown} in {where}")


def _load_config(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc}") from exc
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise _ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise _ConfigError(f"config {path} must hold a JSON object")
    _check_keys(cfg, _TOP_KEYS, "config")
    return cfg


def _apply_threads(cfg):
    raw = os.environ.get("VI_SSM_THREADS") or cfg.get("threads") or os.cpu_count() or 1
    try:
        n = int(raw)
    except (TypeError, ValueError):
        raise _ConfigError(f"thread count must be an integer, got {raw!r}")
    if n < 1:
        raise _ConfigError(f"thread count must be >= 1, got {n}")
    for var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        os.environ[var] = str(n)
    return n


def _build_model(cfg):
    from . import errors, models

    section = cfg.get("model")
    if not isinstance(section, dict) or "kind" not in section:
        raise _ConfigError('config needs a "model" section with a "kind"')
    kind = section["kind"]
    if kind not in _MODEL_KEYS:
        raise _ConfigError(f"unknown model kind {kind!r}; choose from {sorted(_MODEL_KEYS)}")
    _check_keys(section, _MODEL_KEYS[kind], f'model section (kind "{kind}")')
    kwargs = {k: v for k, v in section.items() if k != "kind"}
    try:
        if kind == "lgssm":
            if "theta_entries" in kwargs:
                kwargs["theta_entries"] = [tuple(e) for e in kwargs["theta_entries"]]
            return models.make_lgssm(**kwargs)
        if kind == "stochvol":
            return models.make_stochvol(**kwargs)
        return models.make_pendulum(**kwargs)
    except errors.ConfigurationError as exc:
        raise _ConfigError(str(exc)) from exc


def _build_scheme(cfg):
    import dataclasses

    from . import errors, quadrature

    section = cfg.get("quadrature", {})
    allowed = {f.name for f in dataclasses.fields(quadrature.SchemeConfig)}
    _check_keys(section, allowed, "quadrature section")
    try:
        return quadrature.SchemeConfig(**section)
    except errors.ConfigurationError as exc:
        raise _ConfigError(str(exc)) from exc


def _build_solver(cfg):
    import dataclasses

    from . import errors, optimizer

    section = cfg.get("solver", {})
    allowed = {f.name for f in dataclasses.fields(optimizer.SolverOptions)}
    _check_keys(section, allowed, "solver section")
    try:
        return optimizer.SolverOptions(**section)
    except errors.ConfigurationError as exc:
        raise _ConfigError(str(exc)) from exc


def _simulate_from_spec(cfg, model):
    import numpy as np

    from .models import Dataset, simulate

    spec = cfg["data"]["simulate"]
    _check_keys(spec, _SIM_KEYS, "data.simulate section")
    if "T" not in spec or "theta" not in spec:
        raise _ConfigError('data.simulate needs "T" and "theta"')
    T = int(spec["T"])
    theta = np.asarray(spec["theta"], dtype=float)
    u = None
    if spec.get("u") is not None:
        u = np.asarray(spec["u"], dtype=float)
        if u.ndim == 1:
            u = u[:, None]
    rng = np.random.default_rng(int(cfg.get("seed", 0)))
    x, y = simulate(model, theta, T, rng, u=u)
    return x, y, u, theta, Dataset(y=y, u=u)


def _get_dataset(cfg, model):
    from . import serialize

    section = cfg.get("data")
    if not isinstance(section, dict):
        raise _ConfigError('config needs a "data" section')
    _check_keys(section, _DATA_KEYS, "data section")
    if ("path" in section) == ("simulate" in section):
        raise _ConfigError('data section needs exactly one of "path" or "simulate"')
    if "path" in section:
        return serialize.load_dataset(section["path"])
    return _simulate_from_spec(cfg, model)[4]


def cmd_simulate(cfg, chash):
    from . import serialize

    model = _build_model(cfg)
    section = cfg.get("data", {})
    _check_keys(section, _DATA_KEYS, "data section")
    if "simulate" not in section:
        raise _ConfigError('simulate needs a data.simulate section')
    x, y, u, theta, dataset = _simulate_from_spec(cfg, model)
    out = cfg.get("output", {})
    _check_keys(out, _OUTPUT_KEYS, "output section")
    serialize.save_dataset(out.get("dataset", "dataset.csv"), dataset, chash)
    serialize.save_truth(out.get("truth", "truth.csv"), x, theta, chash)
    return EXIT_OK


def cmd_fit(cfg, chash):
    from . import serialize
    from .optimizer import initialize, solve

    model = _build_model(cfg)
    dataset = _get_dataset(cfg, model)
    if dataset.y.shape[1] != model.ny:
        raise _ConfigError(
            f"dataset has {dataset.y.shape[1]} measurement columns, model wants {model.ny}"
        )
    scheme = _build_scheme(cfg)
    opts = _build_solver(cfg)
    init_section = cfg.get("init", {})
    _check_keys(init_section, _INIT_KEYS, "init section")
    beta0 = initialize(model, dataset, scheme, scale=float(init_section.get("scale", 1.0)))
    beta, report = solve(model, dataset, scheme, opts, beta0=beta0)
    out = cfg.get("output", {})
    _check_keys(out, _OUTPUT_KEYS, "output section")
    serialize.save_posterior(
        out.get("posterior", "posterior.json"), beta, extra={"config_hash": chash}
    )
    serialize.save_report(
        out.get("report", "report.json"), report, extra={"config_hash": chash}
    )
    print(f"status: {report.status}  elbo: {report.breakdown.total:.6f}")
    if report.status == "converged":
        return EXIT_OK
    return EXIT_SOLVER


def cmd_oracle(cfg, chash):
    import numpy as np

    from . import serialize
    from .reference import kalman_smoother, particle_smoother, smoother_to_pairwise

    model = _build_model(cfg)
    dataset = _get_dataset(cfg, model)
    section = cfg.get("oracle")
    if not isinstance(section, dict) or "kind" not in section:
        raise _ConfigError('oracle needs an "oracle" section with a "kind"')
    _check_keys(section, _ORACLE_KEYS, "oracle section")
    out = cfg.get("output", {})
    _check_keys(out, _OUTPUT_KEYS, "output section")
    path = out.get("oracle", "oracle_out")
    kind = section["kind"]
    if kind == "kalman":
        result = kalman_smoother(model, dataset)
        beta = smoother_to_pairwise(result)
        serialize.save_posterior(
            path if path.endswith(".json") else path + ".json",
            beta,
            extra={"config_hash": chash, "loglik": result.loglik},
        )
        return EXIT_OK
    if kind == "particle":
        if "theta" not in section:
            raise _ConfigError("particle oracle needs oracle.theta")
        theta = np.asarray(section["theta"], dtype=float)
        rng = np.random.default_rng(int(cfg.get("seed", 0)))
        result = particle_smoother(
            model,
            dataset,
            theta,
            rng,
            n_particles=int(section.get("n_particles", 1000)),
            n_draws=int(section.get("n_draws", 500)),
        )
        csv_path = path if path.endswith(".csv") else path + ".csv"
        with open(csv_path, "w") as fh:
            fh.write(f"# config_hash: {chash}\n")
            fh.write(f"# loglik: {float(result.loglik)!r}\n")
            nx = result.means.shape[1]
            cols = ["k"] + [f"mean_{j+1}" for j in range(nx)] + [f"var_{j+1}" for j in range(nx)]
            fh.write(",".join(cols) + "\n")
            for k in range(result.means.shape[0]):
                row = [str(k + 1)]
                row += [repr(float(v)) for v in result.means[k]]
                row += [repr(float(v)) for v in result.variances[k]]
                fh.write(",".join(row) + "\n")
        return EXIT_OK
    raise _ConfigError(f"unknown oracle kind {kind!r}; choose kalman or particle")


def cmd_marginals(args):
    import numpy as np

    from . import serialize

    beta, _doc = serialize.load_posterior(args.posterior)
    chash = serialize.config_hash(
        {
            "command": "marginals",
            "posterior": os.path.basename(args.posterior),
            "what": args.what,
            "k": args.k,
            "i": args.i,
            "j": args.j,
            "resolution": args.resolution,
        }
    )
    res = args.resolution

    def density_rows(fh, labels, mean, cov):
        fh.write(f"# config_hash: {chash}\n")
        fh.write("# mean: " + ",".join(repr(float(v)) for v in mean) + "\n")
        for r in np.atleast_2d(cov):
            fh.write("# cov_row: " + ",".join(repr(float(v)) for v in r) + "\n")
        fh.write("coord,value,density\n")
        for idx, lab in enumerate(labels):
            mu, var = mean[idx], cov[idx, idx]
            sd = float(np.sqrt(var))
            grid = np.linspace(mu - 4 * sd, mu + 4 * sd, res)
            pdf = np.exp(-0.5 * ((grid - mu) / sd) ** 2) / (sd * np.sqrt(2 * np.pi))
            for g, d in zip(grid, pdf):
                fh.write(f"{lab},{float(g)!r},{float(d)!r}\n")

    if args.what == "theta":
        p = beta.pairs[0]
        mean, cov = p.mu_theta, p.A.T @ p.A
        labels = [f"theta_{i+1}" for i in range(beta.ntheta)]
        with open(args.out, "w") as fh:
            density_rows(fh, labels, mean, cov)
        return EXIT_OK

    if args.what == "state":
        if args.k is None:
            raise _ConfigError("state marginals need --k")
        k = args.k
        if not 1 <= k <= beta.T + 1:
            raise _ConfigError(f"k={k} out of range 1..{beta.T + 1}")
        if k <= beta.T:
            p = beta.pairs[k - 1]
            mean, cov = p.mu_xk, p.B.T @ p.B + p.D.T @ p.D
        else:
            p = beta.pairs[-1]
            mean, cov = p.mu_xk1, p.C.T @ p.C + p.E.T @ p.E + p.F.T @ p.F
        labels = [f"x_{i+1}" for i in range(beta.nx)]
        with open(args.out, "w") as fh:
            density_rows(fh, labels, mean, cov)
        return EXIT_OK

    # pairwise theta ellipses
    if args.i is None or args.j is None:
        raise _ConfigError("pair marginals need --i and --j")
    i, j = args.i - 1, args.j - 1
    if not (0 <= i < beta.ntheta and 0 <= j < beta.ntheta and i != j):
        raise _ConfigError(f"invalid theta pair ({args.i}, {args.j}) for ntheta={beta.ntheta}")
    p = beta.pairs[0]
    S = p.A.T @ p.A
    mean = np.array([p.mu_theta[i], p.mu_theta[j]])
    cov = np.array([[S[i, i], S[i, j]], [S[j, i], S[j, j]]])
    L = np.linalg.cholesky(cov)
    phi = np.linspace(0.0, 2 * np.pi, 64, endpoint=False)
    circle = np.stack([np.cos(phi), np.sin(phi)])
    with open(args.out, "w") as fh:
        fh.write(f"# config_hash: {chash}\n")
        fh.write("# mean: " + ",".join(repr(float(v)) for v in mean) + "\n")
        for r in cov:
            fh.write("# cov_row: " + ",".join(repr(float(v)) for v in r) + "\n")
        fh.write(f"sigma,index,theta_{args.i},theta_{args.j}\n")
        for level in (1, 2, 3):
            pts = mean[:, None] + level * (L @ circle)
            for idx in range(pts.shape[1]):
                fh.write(f"{level},{idx},{float(pts[0, idx])!r},{float(pts[1, idx])!r}\n")
    return EXIT_OK


def cmd_compare(args):
    import numpy as np

    from . import serialize

    _, da = serialize.load_posterior(args.first)
    _, db = serialize.load_posterior(args.second)
    for field in ("ntheta", "nx", "T"):
        if da.get(field) != db.get(field):
            raise _ConfigError(
                f"posteriors differ in {field}: {da.get(field)} vs {db.get(field)}"
            )
    worst = 0.0
    fields = ["mu_theta", "mu_xk", "mu_xk1", "A", "B", "C", "D", "E", "F"]
    for field in fields:
        dev = 0.0
        for pa, pb in zip(da["pairs"], db["pairs"]):
            dev = max(dev, float(np.max(np.abs(np.asarray(pa[field]) - np.asarray(pb[field])))))
        print(f"{field}: max abs deviation {dev:.3e}")
        worst = max(worst, dev)
    ea, eb = np.asarray(da.get("eta", [])), np.asarray(db.get("eta", []))
    if ea.size or eb.size:
        dev = float(np.max(np.abs(ea - eb))) if ea.size == eb.size else float("inf")
        print(f"eta: max abs deviation {dev:.3e}")
        worst = max(worst, dev)
    print(f"overall: {worst:.3e}")
    return EXIT_OK


def _parser():
    ap = argparse.ArgumentParser(prog="varsmooth", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("simulate", "fit", "oracle"):
        p = sub.add_parser(name)
        p.add_argument("config", help="path to JSON run config")
    pm = sub.add_parser("marginals")
    pm.add_argument("posterior", help="posterior JSON produced by fit")
    pm.add_argument("--what", choices=("theta", "state", "pair"), default="theta")
    pm.add_argument("--k", type=int, default=None, help="state index (1-based)")
    pm.add_argument("--i", type=int, default=None, help="first theta coordinate (1-based)")
    pm.add_argument("--j", type=int, default=None, help="second theta coordinate (1-based)")
    pm.add_argument("--resolution", type=int, default=101)
    pm.add_argument("--out", default="marginals.csv")
    pc = sub.add_parser("compare")
    pc.add_argument("first")
    pc.add_argument("second")
    return ap


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        if args.command in ("simulate", "fit", "oracle"):
            cfg = _load_config(args.config)
            _apply_threads(cfg)
            from . import serialize

            chash = serialize.config_hash(cfg)
            handler = {"simulate": cmd_simulate, "fit": cmd_fit, "oracle": cmd_oracle}
            return handler[args.command](cfg, chash)
        if args.command == "marginals":
            return cmd_marginals(args)
        return cmd_compare(args)
    except _ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # package errors map onto the exit contract
        from . import errors

        if isinstance(exc, errors.ConfigurationError):
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        if isinstance(exc, errors.UnsupportedOperationError):
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        if isinstance(exc, (errors.NumericalError, errors.EvaluationError)):
            print(f"solver failure: {exc}", file=sys.stderr)
            return EXIT_SOLVER
        raise


if __name__ == "__main__":
    sys.exit(main())
