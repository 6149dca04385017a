"""End-to-end command-line checks run through subprocesses."""

import json
import os
import subprocess
import sys

import numpy as np
import pytest

from conftest import SV_PRIOR, random_feasible_beta
from varsmooth.serialize import (
    config_hash,
    load_dataset,
    load_posterior,
    save_posterior,
)

SV_MODEL_SECTION = {
    "kind": "stochvol",
    "prior_mean": list(SV_PRIOR["prior_mean"]),
    "prior_cov": [list(r) for r in SV_PRIOR["prior_cov"]],
}


def run_cli(*args, env_extra=None, cwd=None):
    env = dict(os.environ)
    env.pop("VI_SSM_THREADS", None)
    if env_extra:
        env.update(env_extra)
    return subprocess.run(
        [sys.executable, "-m", "varsmooth.cli", *map(str, args)],
        capture_output=True,
        text=True,
        env=env,
        cwd=cwd,
    )


def write_config(path, cfg):
    path.write_text(json.dumps(cfg, indent=1))
    return path


@pytest.fixture(scope="module")
def sv_fit(tmp_path_factory):
    """One simulate -> fit pipeline shared by the read-only checks."""
    d = tmp_path_factory.mktemp("svfit")
    sim_cfg = {
        "seed": 3,
        "model": SV_MODEL_SECTION,
        "data": {"simulate": {"T": 8, "theta": [0.1, 0.9, -1.2]}},
        "output": {
            "dataset": str(d / "dataset.csv"),
            "truth": str(d / "truth.csv"),
        },
    }
    r = run_cli("simulate", write_config(d / "sim.json", sim_cfg))
    assert r.returncode == 0, r.stderr
    fit_cfg = {
        "model": SV_MODEL_SECTION,
        "quadrature": {"kind": "unscented"},
        "solver": {"method": "sqp", "max_outer": 300},
        "data": {"path": str(d / "dataset.csv")},
        "output": {
            "posterior": str(d / "posterior.json"),
            "report": str(d / "report.json"),
        },
    }
    r = run_cli("fit", write_config(d / "fit.json", fit_cfg))
    return d, fit_cfg, r


class TestSimulate:
    def test_reruns_are_byte_identical(self, tmp_path):
        outs = []
        for sub in ("a", "b"):
            (tmp_path / sub).mkdir()
            cfg = {
                "seed": 11,
                "model": SV_MODEL_SECTION,
                "data": {"simulate": {"T": 12, "theta": [0.1, 0.9, -1.2]}},
                "output": {
                    "dataset": str(tmp_path / sub / "d.csv"),
                    "truth": str(tmp_path / sub / "t.csv"),
                },
            }
            r = run_cli("simulate", write_config(tmp_path / f"{sub}.json", cfg))
            assert r.returncode == 0, r.stderr
            outs.append(
                (
                    (tmp_path / sub / "d.csv").read_text(),
                    (tmp_path / sub / "t.csv").read_text(),
                )
            )
        # identical seeds give identical bytes; the hash comment differs
        # only through the output paths inside the config
        strip = lambda s: [ln for ln in s.splitlines() if not ln.startswith("#")]
        assert strip(outs[0][0]) == strip(outs[1][0])
        assert strip(outs[0][1]) == strip(outs[1][1])

    def test_header_carries_config_hash(self, tmp_path):
        cfg = {
            "seed": 1,
            "model": SV_MODEL_SECTION,
            "data": {"simulate": {"T": 3, "theta": [0.1, 0.9, -1.2]}},
            "output": {
                "dataset": str(tmp_path / "d.csv"),
                "truth": str(tmp_path / "t.csv"),
            },
        }
        r = run_cli("simulate", write_config(tmp_path / "c.json", cfg))
        assert r.returncode == 0, r.stderr
        first = (tmp_path / "d.csv").read_text().splitlines()[0]
        assert first == f"# config_hash: {config_hash(cfg)}"

    def test_zero_length_writes_header_only(self, tmp_path):
        cfg = {
            "model": SV_MODEL_SECTION,
            "data": {"simulate": {"T": 0, "theta": [0.1, 0.9, -1.2]}},
            "output": {
                "dataset": str(tmp_path / "d.csv"),
                "truth": str(tmp_path / "t.csv"),
            },
        }
        r = run_cli("simulate", write_config(tmp_path / "c.json", cfg))
        assert r.returncode == 0, r.stderr
        rows = [
            ln
            for ln in (tmp_path / "d.csv").read_text().splitlines()
            if ln and not ln.startswith("#")
        ]
        assert rows == ["k,y_1"]


class TestFit:
    def test_converged_fit_exits_zero(self, sv_fit):
        _, _, r = sv_fit
        assert r.returncode == 0, r.stderr
        assert "status: converged" in r.stdout

    def test_posterior_rescores_to_reported_value(self, sv_fit):
        d, fit_cfg, _ = sv_fit
        from varsmooth.elbo import elbo
        from varsmooth.models import make_stochvol
        from varsmooth.quadrature import SchemeConfig

        beta, doc = load_posterior(d / "posterior.json")
        report = json.loads((d / "report.json").read_text())
        assert doc["config_hash"] == config_hash(fit_cfg)
        assert report["config_hash"] == config_hash(fit_cfg)
        ds = load_dataset(d / "dataset.csv")
        model = make_stochvol(**SV_PRIOR)
        val = elbo(model, ds, beta, SchemeConfig(kind="unscented"))
        assert val == pytest.approx(report["elbo"]["total"], abs=1e-10)

    def test_budget_exhaustion_exits_four(self, tmp_path):
        cfg = {
            "seed": 5,
            "model": SV_MODEL_SECTION,
            "quadrature": {"kind": "unscented"},
            "solver": {"method": "sqp", "max_outer": 2},
            "data": {"simulate": {"T": 6, "theta": [0.1, 0.9, -1.2]}},
            "output": {
                "posterior": str(tmp_path / "p.json"),
                "report": str(tmp_path / "r.json"),
            },
        }
        r = run_cli("fit", write_config(tmp_path / "c.json", cfg))
        assert r.returncode == 4
        report = json.loads((tmp_path / "r.json").read_text())
        assert report["status"] != "converged"

    def test_measurement_width_mismatch(self, tmp_path):
        (tmp_path / "d.csv").write_text("k,y_1,y_2\n1,0.0,0.0\n")
        cfg = {
            "model": SV_MODEL_SECTION,
            "data": {"path": str(tmp_path / "d.csv")},
        }
        r = run_cli("fit", write_config(tmp_path / "c.json", cfg))
        assert r.returncode == 2
        assert "measurement columns" in r.stderr


class TestConfigValidation:
    @pytest.mark.parametrize(
        "cfg,needle",
        [
            ({"quadratur": {}, "model": SV_MODEL_SECTION}, "quadratur"),
            ({"model": dict(SV_MODEL_SECTION, AA=1)}, "AA"),
            (
                {
                    "model": SV_MODEL_SECTION,
                    "solver": {"stepsize": 0.1},
                    "data": {"simulate": {"T": 2, "theta": [0, 0.5, -1]}},
                },
                "stepsize",
            ),
            ({"model": SV_MODEL_SECTION, "data": {"file": "x.csv"}}, "file"),
            (
                {
                    "model": SV_MODEL_SECTION,
                    "data": {"simulate": {"T": 2, "theta": [0, 0.5, -1], "len": 3}},
                },
                "len",
            ),
        ],
    )
    def test_unknown_keys_are_named(self, tmp_path, cfg, needle):
        base = {"data": {"simulate": {"T": 2, "theta": [0.0, 0.5, -1.0]}}}
        base.update(cfg)
        r = run_cli("fit", write_config(tmp_path / "c.json", base))
        assert r.returncode == 2, r.stderr
        assert needle in r.stderr

    def test_unknown_model_kind(self, tmp_path):
        cfg = {"model": {"kind": "arma"}}
        r = run_cli("fit", write_config(tmp_path / "c.json", cfg))
        assert r.returncode == 2
        assert "arma" in r.stderr

    def test_missing_config_file_is_io_error(self, tmp_path):
        r = run_cli("fit", tmp_path / "absent.json")
        assert r.returncode == 3

    def test_invalid_json_is_config_error(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{not json")
        r = run_cli("fit", p)
        assert r.returncode == 2

    def test_missing_dataset_is_io_error(self, tmp_path):
        cfg = {
            "model": SV_MODEL_SECTION,
            "data": {"path": str(tmp_path / "absent.csv")},
        }
        r = run_cli("fit", write_config(tmp_path / "c.json", cfg))
        assert r.returncode == 3

    def test_bad_thread_count_is_config_error(self, tmp_path):
        cfg = {
            "model": SV_MODEL_SECTION,
            "data": {"simulate": {"T": 2, "theta": [0.0, 0.5, -1.0]}},
            "output": {
                "dataset": str(tmp_path / "d.csv"),
                "truth": str(tmp_path / "t.csv"),
            },
        }
        p = write_config(tmp_path / "c.json", cfg)
        r = run_cli("simulate", p, env_extra={"VI_SSM_THREADS": "abc"})
        assert r.returncode == 2
        assert "thread" in r.stderr
        r = run_cli("simulate", p, env_extra={"VI_SSM_THREADS": "2"})
        assert r.returncode == 0, r.stderr


class TestMarginals:
    def test_theta_density_grid(self, sv_fit, tmp_path):
        d, _, _ = sv_fit
        out = tmp_path / "theta.csv"
        r = run_cli(
            "marginals", d / "posterior.json", "--what", "theta", "--out", out
        )
        assert r.returncode == 0, r.stderr
        rows = [
            ln for ln in out.read_text().splitlines() if not ln.startswith("#")
        ]
        assert rows[0] == "coord,value,density"
        assert len(rows) == 1 + 3 * 101  # three parameters, default grid
        assert {ln.split(",")[0] for ln in rows[1:]} == {
            "theta_1",
            "theta_2",
            "theta_3",
        }

    def test_state_marginals_cover_both_slots(self, sv_fit, tmp_path):
        d, _, _ = sv_fit
        for k in (1, 9):  # first state and the final (second-slot) state
            out = tmp_path / f"state{k}.csv"
            r = run_cli(
                "marginals",
                d / "posterior.json",
                "--what",
                "state",
                "--k",
                k,
                "--resolution",
                11,
                "--out",
                out,
            )
            assert r.returncode == 0, r.stderr
            rows = [
                ln
                for ln in out.read_text().splitlines()
                if not ln.startswith("#")
            ]
            assert len(rows) == 1 + 11

    def test_state_index_out_of_range(self, sv_fit, tmp_path):
        d, _, _ = sv_fit
        r = run_cli(
            "marginals",
            d / "posterior.json",
            "--what",
            "state",
            "--k",
            "99",
            "--out",
            tmp_path / "x.csv",
        )
        assert r.returncode == 2
        assert "out of range" in r.stderr

    def test_identity_covariance_gives_unit_circle(self, tmp_path):
        rng = np.random.default_rng(70)
        beta = random_feasible_beta(rng, 2, 1, 3)
        pairs = []
        for p in beta.pairs:
            pairs.append(
                type(p)(
                    mu_theta=np.array([1.5, -2.0]),
                    mu_xk=p.mu_xk,
                    mu_xk1=p.mu_xk1,
                    A=np.eye(2),
                    B=np.zeros((2, 1)),
                    C=np.zeros((2, 1)),
                    D=p.D,
                    E=p.E,
                    F=p.F,
                )
            )
        save_posterior(tmp_path / "p.json", type(beta)(pairs=pairs))
        out = tmp_path / "pair.csv"
        r = run_cli(
            "marginals",
            tmp_path / "p.json",
            "--what",
            "pair",
            "--i",
            1,
            "--j",
            2,
            "--out",
            out,
        )
        assert r.returncode == 0, r.stderr
        rows = [
            ln for ln in out.read_text().splitlines() if not ln.startswith("#")
        ]
        assert rows[0] == "sigma,index,theta_1,theta_2"
        body = [ln.split(",") for ln in rows[1:]]
        assert len(body) == 3 * 64
        mean = np.array([1.5, -2.0])
        for level in (1, 2, 3):
            pts = np.array(
                [
                    [float(r_[2]), float(r_[3])]
                    for r_ in body
                    if int(r_[0]) == level
                ]
            )
            assert pts.shape == (64, 2)
            radii = np.linalg.norm(pts - mean, axis=1)
            np.testing.assert_allclose(radii, level, atol=1e-12)
        # first 1-sigma point sits at mean + (1, 0)
        np.testing.assert_allclose(
            [float(body[0][2]), float(body[0][3])], mean + [1.0, 0.0], atol=1e-12
        )

    def test_pair_needs_two_distinct_coordinates(self, sv_fit, tmp_path):
        d, _, _ = sv_fit
        r = run_cli(
            "marginals",
            d / "posterior.json",
            "--what",
            "pair",
            "--i",
            2,
            "--j",
            2,
            "--out",
            tmp_path / "x.csv",
        )
        assert r.returncode == 2


class TestCompareAndOracle:
    def test_compare_posterior_with_itself(self, sv_fit):
        d, _, _ = sv_fit
        r = run_cli("compare", d / "posterior.json", d / "posterior.json")
        assert r.returncode == 0, r.stderr
        assert "overall: 0.000e+00" in r.stdout

    def test_compare_rejects_shape_mismatch(self, sv_fit, tmp_path):
        d, _, _ = sv_fit
        rng = np.random.default_rng(71)
        save_posterior(tmp_path / "other.json", random_feasible_beta(rng, 3, 1, 4))
        r = run_cli("compare", d / "posterior.json", tmp_path / "other.json")
        assert r.returncode == 2
        assert "differ" in r.stderr

    def test_kalman_oracle_writes_loglik(self, tmp_path):
        cfg = {
            "seed": 2,
            "model": {
                "kind": "lgssm",
                "A": [[0.5]],
                "Q": [[1.0]],
                "H": [[1.0]],
                "R": [[1.0]],
                "m1": [0.0],
                "P1": [[1.0]],
            },
            "data": {"simulate": {"T": 6, "theta": []}},
            "oracle": {"kind": "kalman"},
            "output": {"oracle": str(tmp_path / "kalman.json")},
        }
        r = run_cli("oracle", write_config(tmp_path / "c.json", cfg))
        assert r.returncode == 0, r.stderr
        beta, doc = load_posterior(tmp_path / "kalman.json")
        assert np.isfinite(doc["loglik"])
        assert len(beta.pairs) == 6

    def test_particle_oracle_writes_summary(self, tmp_path):
        cfg = {
            "seed": 2,
            "model": SV_MODEL_SECTION,
            "data": {"simulate": {"T": 6, "theta": [0.1, 0.9, -1.2]}},
            "oracle": {
                "kind": "particle",
                "theta": [0.1, 0.9, -1.2],
                "n_particles": 100,
                "n_draws": 20,
            },
            "output": {"oracle": str(tmp_path / "pf.csv")},
        }
        r = run_cli("oracle", write_config(tmp_path / "c.json", cfg))
        assert r.returncode == 0, r.stderr
        text = (tmp_path / "pf.csv").read_text().splitlines()
        assert any(ln.startswith("# loglik:") for ln in text[:3])
        rows = [ln for ln in text if ln and not ln.startswith("#")]
        assert rows[0] == "k,mean_1,var_1"
        assert len(rows) == 1 + 7  # T+1 state summaries
