"""File formats: posterior/report JSON and dataset/truth CSV.

JSON floats go through Python's shortest round-trip repr, so a posterior
written and re-read evaluates to bit-identical numbers.  CSV files start
with '#' comment lines (config hash, theta for truth files) followed by
a header row.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

from .errors import ConfigurationError
from .gaussian import BetaParams, PairwiseGaussian
from .models import Dataset


def config_hash(config: dict) -> str:
    """12-hex digest of the canonical JSON form of a config dict."""
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


def _mat(a):
    return np.asarray(a, dtype=float).tolist()


def posterior_to_dict(beta: BetaParams, extra: dict | None = None) -> dict:
    out = {
        "ntheta": int(beta.ntheta),
        "nx": int(beta.nx),
        "neta": int(beta.eta.shape[0]),
        "T": int(beta.T),
        "eta": _mat(beta.eta),
        "pairs": [
            {
                "mu_theta": _mat(p.mu_theta),
                "mu_xk": _mat(p.mu_xk),
                "mu_xk1": _mat(p.mu_xk1),
                "A": _mat(p.A),
                "B": _mat(p.B),
                "C": _mat(p.C),
                "D": _mat(p.D),
                "E": _mat(p.E),
                "F": _mat(p.F),
            }
            for p in beta.pairs
        ],
    }
    if extra:
        out.update(extra)
    return out


def posterior_from_dict(doc: dict) -> BetaParams:
    try:
        nt, nx = int(doc["ntheta"]), int(doc["nx"])
        # empty JSON lists lose their matrix shape, so rebuild explicitly
        pairs = [
            PairwiseGaussian(
                mu_theta=np.asarray(p["mu_theta"], dtype=float).reshape(nt),
                mu_xk=np.asarray(p["mu_xk"], dtype=float).reshape(nx),
                mu_xk1=np.asarray(p["mu_xk1"], dtype=float).reshape(nx),
                A=np.asarray(p["A"], dtype=float).reshape(nt, nt),
                B=np.asarray(p["B"], dtype=float).reshape(nt, nx),
                C=np.asarray(p["C"], dtype=float).reshape(nt, nx),
                D=np.asarray(p["D"], dtype=float).reshape(nx, nx),
                E=np.asarray(p["E"], dtype=float).reshape(nx, nx),
                F=np.asarray(p["F"], dtype=float).reshape(nx, nx),
            )
            for p in doc["pairs"]
        ]
    except KeyError as exc:
        raise ConfigurationError(f"posterior file is missing field {exc}") from exc
    except ValueError as exc:
        raise ConfigurationError(f"posterior file is malformed: {exc}") from exc
    return BetaParams(pairs=pairs, eta=np.asarray(doc.get("eta", []), dtype=float))


def save_posterior(path, beta: BetaParams, extra: dict | None = None):
    with open(path, "w") as fh:
        json.dump(posterior_to_dict(beta, extra), fh, indent=1)
        fh.write("\n")


def load_posterior(path):
    """Returns (BetaParams, full document dict)."""
    with open(path) as fh:
        doc = json.load(fh)
    return posterior_from_dict(doc), doc


def report_to_dict(report) -> dict:
    b = report.breakdown
    return {
        "status": report.status,
        "message": report.message,
        "elbo": {
            "i1": b.i1,
            "i23": b.i23,
            "i4": b.i4,
            "total": b.total,
            "i23_steps": _mat(b.i23_steps),
        },
        "constraint_norm": report.constraint_norm,
        "lagrangian_grad_norm": report.lagrangian_grad_norm,
        "n_outer": int(report.n_outer),
        "n_inner": int(report.n_inner),
        "trace": [[float(a), float(b_)] for a, b_ in report.trace],
        "inner_merits": [[float(v) for v in seq] for seq in report.inner_merits],
    }


def save_report(path, report, extra: dict | None = None):
    doc = report_to_dict(report)
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def save_dataset(path, dataset: Dataset, chash: str | None = None):
    """CSV with columns k, y_1.., u_1..; k runs from 1 to T."""
    y = np.atleast_2d(np.asarray(dataset.y, dtype=float))
    u = dataset.u
    ny = y.shape[1] if y.size else (y.shape[1] if y.ndim == 2 else 1)
    nu = 0 if u is None else np.asarray(u).shape[1]
    cols = ["k"] + [f"y_{j + 1}" for j in range(ny)] + [f"u_{j + 1}" for j in range(nu)]
    with open(path, "w") as fh:
        if chash:
            fh.write(f"# config_hash: {chash}\n")
        fh.write(",".join(cols) + "\n")
        for k in range(y.shape[0]):
            row = [str(k + 1)] + [repr(float(v)) for v in y[k]]
            if nu:
                row += [repr(float(v)) for v in np.asarray(u, dtype=float)[k]]
            fh.write(",".join(row) + "\n")


def load_dataset(path) -> Dataset:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise ConfigurationError(f"{path}: empty dataset file")
    header = lines[0].split(",")
    if header[0] != "k":
        raise ConfigurationError(f"{path}: first column must be 'k', got {header[0]!r}")
    ny = sum(1 for h in header if h.startswith("y_"))
    nu = sum(1 for h in header if h.startswith("u_"))
    if 1 + ny + nu != len(header):
        raise ConfigurationError(f"{path}: unrecognized columns in {header}")
    rows = [[float(v) for v in ln.split(",")] for ln in lines[1:]]
    data = np.asarray(rows, dtype=float).reshape(len(rows), len(header))
    y = data[:, 1 : 1 + ny]
    u = data[:, 1 + ny :] if nu else None
    return Dataset(y=y, u=u)


def save_truth(path, x, theta, chash: str | None = None):
    """States for k = 1..T+1 plus the generating theta as a comment."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    with open(path, "w") as fh:
        if chash:
            fh.write(f"# config_hash: {chash}\n")
        fh.write("# theta: " + ",".join(repr(float(v)) for v in np.asarray(theta)) + "\n")
        fh.write(",".join(["k"] + [f"x_{j + 1}" for j in range(x.shape[1])]) + "\n")
        for k in range(x.shape[0]):
            fh.write(",".join([str(k + 1)] + [repr(float(v)) for v in x[k]]) + "\n")


def load_truth(path):
    """Returns (states array, theta array or None)."""
    theta = None
    rows = []
    with open(path) as fh:
        for ln in fh:
            ln = ln.strip()
            if not ln:
                continue
            if ln.startswith("# theta:"):
                theta = np.asarray(
                    [float(v) for v in ln.split(":", 1)[1].split(",")], dtype=float
                )
            elif ln.startswith("#") or ln.startswith("k,"):
                continue
            else:
                rows.append([float(v) for v in ln.split(",")])
    x = np.asarray(rows, dtype=float)
    return (x[:, 1:] if x.size else x), theta
