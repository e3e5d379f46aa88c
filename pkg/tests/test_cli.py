import json
import subprocess
import sys

import pytest

from nirom import cli, snapstore


GEN_SPEC = {
    "kind": "linear_system", "n_dof": 40, "n_samples": 50, "dt": 0.1,
    "seed": 5, "params": {"eigenvalues": [0.98, [0.95, 0.12]]},
}


@pytest.fixture()
def workdir(tmp_path):
    (tmp_path / "gen.json").write_text(json.dumps(GEN_SPEC))
    return tmp_path


def run_cli(*argv):
    return cli.main([str(a) for a in argv])


class TestWorkflow:
    def test_gen_dmd_predict_eval(self, workdir, capsys):
        data = workdir / "lin.nsnp"
        assert run_cli("gen", "--spec", workdir / "gen.json", "--out", data) == 0
        assert snapstore.load(data).n_cols == 50

        model = workdir / "lin.ndmd"
        spectrum = workdir / "spec.csv"
        assert run_cli("dmd-fit", "--data", data, "--rank", "3", "--out", model,
                       "--spectrum", spectrum) == 0
        assert spectrum.read_text().startswith("re_lambda")

        pred = workdir / "pred.nsnp"
        assert run_cli("predict", "--model", model, "--times", "0:4.9:0.1",
                       "--out", pred) == 0

        err = workdir / "err.csv"
        assert run_cli("eval", "--truth", data, "--pred", pred, "--out", err) == 0
        rows = err.read_text().strip().splitlines()
        assert rows[0] == "time,field,rmse,rel_err"
        worst = max(float(r.split(",")[2]) for r in rows[1:])
        assert worst < 1e-8

    def test_eval_scaled_space(self, workdir):
        from nirom import snapstore
        data = workdir / "lin.nsnp"
        run_cli("gen", "--spec", workdir / "gen.json", "--out", data)
        snap = snapstore.load(data)
        params = snapstore.fit_scaling(snap, (0, 1), "per-field")
        (workdir / "scaling.json").write_text(
            json.dumps(snapstore.scaling_to_dict(params)))
        err = workdir / "err_scaled.csv"
        assert run_cli("eval", "--truth", data, "--pred", data,
                       "--scaled", workdir / "scaling.json", "--out", err) == 0
        rows = err.read_text().strip().splitlines()
        assert all(float(r.split(",")[2]) == 0.0 for r in rows[1:])

    def test_pod_node_rbf_lane(self, workdir):
        data = workdir / "lin.nsnp"
        run_cli("gen", "--spec", workdir / "gen.json", "--out", data)
        latent = workdir / "lin.nlat"
        assert run_cli("pod", "--data", data, "--modes", "3", "--out",
                       workdir / "lin.npod", "--latent-out", latent) == 0

        node_cfg = workdir / "node.json"
        node_cfg.write_text(json.dumps({
            "hidden": [16], "activation": "tanh", "epochs": 30,
            "optimizer": "adam", "lr": 0.01,
            "schedule": {"kind": "constant"}, "solver": {"method": "rk4"},
            "seed": 4,
        }))
        node_model = workdir / "node.nnet"
        assert run_cli("node-train", "--latent", latent, "--config", node_cfg,
                       "--out", node_model, "--history", workdir / "nh.csv") == 0
        assert (workdir / "nh.csv").read_text().startswith("epoch,loss,lr")

        node_pred = workdir / "node_pred.nlat"
        assert run_cli("predict", "--model", node_model, "--latent", latent,
                       "--times", "0:4.9:0.1", "--out", node_pred) == 0

        rbf_model = workdir / "m.nrbf"
        assert run_cli("rbf-fit", "--latent", latent, "--kernel", "gaussian",
                       "--shape-c", "1.0", "--out", rbf_model) == 0

    def test_run_and_compare(self, workdir):
        cfg = {
            "schema_version": 1,
            "seed": 3,
            "output_dir": str(workdir / "run1"),
            "data": {"source": "generator", "generator": GEN_SPEC},
            "training_window": {"start": 0.0, "end": 4.9},
            "prediction_window": {"start": 0.0, "end": 4.9, "dt": 0.1},
            "scaling": None,
            "reducer": {"kind": "pod", "criterion": {"kind": "fixed", "m": 3},
                        "per_field": False},
            "propagator": {"kind": "dmd", "rank": 3},
        }
        cfg_path = workdir / "cfg1.json"
        cfg_path.write_text(json.dumps(cfg))
        assert run_cli("run", cfg_path) == 0
        assert (workdir / "run1" / "summary.json").exists()

        cfg2 = dict(cfg, output_dir=str(workdir / "run2"))
        cfg2_path = workdir / "cfg2.json"
        cfg2_path.write_text(json.dumps(cfg2))
        out_csv = workdir / "cmp.csv"
        assert run_cli("compare", cfg_path, cfg2_path, "--out", out_csv) == 0
        assert out_csv.read_text().startswith("time,")


class TestDiagnostics:
    def test_missing_file_exit_code_and_stage_tag(self, workdir, capsys):
        rc = run_cli("dmd-fit", "--data", workdir / "nope.nsnp", "--rank", "2",
                     "--out", workdir / "x.ndmd")
        captured = capsys.readouterr()
        assert rc != 0
        assert captured.err.startswith("[stage:dmd-fit] io_failure:")

    def test_pipeline_stage_tag(self, workdir, capsys):
        cfg = {
            "schema_version": 1,
            "seed": 0,
            "output_dir": str(workdir / "bad"),
            "data": {"source": "file", "path": str(workdir / "missing.nsnp")},
            "training_window": {"start": 0, "end": 1},
            "prediction_window": {"start": 0, "end": 1, "dt": 0.5},
            "reducer": {"kind": "pod", "criterion": {"kind": "fixed", "m": 1}},
            "propagator": {"kind": "dmd", "rank": 1},
        }
        p = workdir / "bad.json"
        p.write_text(json.dumps(cfg))
        rc = run_cli("run", p)
        captured = capsys.readouterr()
        assert rc != 0
        assert captured.err.startswith("[stage:data]")

    def test_console_script_installed(self, workdir):
        proc = subprocess.run([sys.executable, "-m", "nirom.cli", "gen",
                               "--spec", str(workdir / "gen.json"),
                               "--out", str(workdir / "sub.nsnp")],
                              capture_output=True, text=True)
        assert proc.returncode == 0
        assert (workdir / "sub.nsnp").exists()
