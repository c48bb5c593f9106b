import json

import jsonschema
import numpy as np
import pandas as pd
import pytest

from ivgae.cli import main
from ivgae.errors import ConfigError
from ivgae.experiment import REPORT_SCHEMA, ExperimentSpec, expand_grid, load_dataset, run_experiment, run_suite
from ivgae.metrics import EVALUATE_SCHEMA

SYNTH = {"synth": {"kind": "factor", "n": 40, "p": 5, "seed": 0}}
QUICK = {"train.epochs": 30, "encoder.hidden": 16, "vgae.latent": 8, "head.hidden": 16}


class TestSpec:
    def test_validation(self):
        with pytest.raises(ConfigError):
            ExperimentSpec(SYNTH, seeds=())
        with pytest.raises(ConfigError):
            ExperimentSpec(SYNTH, rate=1.0)
        with pytest.raises(ConfigError):
            ExperimentSpec(SYNTH, mechanism="mixed")
        with pytest.raises(ConfigError):
            ExperimentSpec({"nowhere": 1})
        with pytest.raises(ConfigError):
            ExperimentSpec.from_json({"dataset": SYNTH, "colour": "red"})

    def test_json_round_trip_drops_out(self):
        spec = ExperimentSpec(SYNTH, "MAR", 0.3, (1, 2), "knn", {"k": 3}, out="/tmp/x")
        payload = spec.to_json()
        assert "out" not in payload and payload["mechanism"] == "mar"
        assert ExperimentSpec.from_json(payload) == ExperimentSpec(SYNTH, "mar", 0.3, (1, 2), "knn", {"k": 3})

    def test_grid(self):
        specs = expand_grid({"dataset": SYNTH, "mechanism": ["mcar", "mnar"], "rate": [0.1, 0.3],
                             "method": ["mean", "knn"], "method_config": {"knn": {"k": 2}}, "out": "o"})
        assert len(specs) == 8
        knn = [s for s in specs if s.method == "knn"][0]
        assert knn.method_config == {"k": 2} and knn.out.endswith("mcar_0.1_knn")

    def test_bad_synth(self):
        with pytest.raises(ConfigError):
            load_dataset({"synth": {"kind": "spiral"}})
        with pytest.raises(ConfigError):
            load_dataset({"synth": {"kind": "factor", "colour": 1}})


class TestRunExperiment:
    def test_two_seeds(self, tmp_path):
        report = run_experiment(ExperimentSpec(SYNTH, seeds=(0, 1), method="mean", out=str(tmp_path)))
        assert [e["seed"] for e in report["per_seed"]] == [0, 1]
        jsonschema.validate(json.loads((tmp_path / "metrics.json").read_text()), REPORT_SCHEMA)
        tidy = pd.read_csv(tmp_path / "tidy.csv")
        assert list(tidy.columns) == ["mechanism", "rate", "seed", "method", "column", "avg_err"]
        assert len(tidy) == 10
        for name in ("mask_seed0.csv", "imputed_seed1.csv", "timing.json", "avg_err.png"):
            assert (tmp_path / name).exists()

    def test_byte_identical(self, tmp_path):
        texts = []
        for k in range(2):
            out = tmp_path / f"run{k}"
            run_experiment(ExperimentSpec(SYNTH, "mar", 0.3, (0, 1), "ivgae", QUICK, out=str(out)), figures=False)
            texts.append((out / "metrics.json").read_bytes())
        assert texts[0] == texts[1]

    def test_failed_seed_recorded(self, tmp_path):
        spec = ExperimentSpec({"path": str(tmp_path / "missing.csv")}, seeds=(0,), method="mean", out=str(tmp_path / "o"))
        report = run_experiment(spec)
        assert report["per_seed"][0]["status"].startswith("failed") and report["aggregate"]["n_failed"] == 1
        jsonschema.validate(json.loads((tmp_path / "o" / "metrics.json").read_text()), REPORT_SCHEMA)

    @pytest.mark.slow
    def test_ivgae_beats_mean_on_rank_one(self):
        data = {"synth": {"kind": "factor", "n": 80, "p": 6, "rank": 1, "noise": 0.01, "seed": 0}}
        cfg = {"train.epochs": 1000}
        iv = run_experiment(ExperimentSpec(data, seeds=(0, 1, 2), method="ivgae", method_config=cfg), figures=False)
        mean = run_experiment(ExperimentSpec(data, seeds=(0, 1, 2), method="mean"), figures=False)
        for a, b in zip(iv["per_seed"], mean["per_seed"]):
            assert a["macro"] < b["macro"], (a["seed"], a["macro"], b["macro"])

    def test_worker_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("IVGAE_THREADS", "zero")
        with pytest.raises(ConfigError):
            run_experiment(ExperimentSpec(SYNTH, method="mean"))

    def test_suite_combined_tidy(self, tmp_path):
        run_suite({"dataset": SYNTH, "method": ["mean", "knn"], "out": str(tmp_path)})
        tidy = pd.read_csv(tmp_path / "tidy.csv")
        assert set(tidy["method"]) == {"mean", "knn"} and (tmp_path / "summary.png").exists()


class TestCLI:
    @pytest.fixture
    def table(self, tmp_path):
        assert main(["synth", "--kind", "mixed", "--n", "40", "--p", "3", "--out", str(tmp_path), "--name", "t.csv"]) == 0
        return tmp_path / "t.csv", tmp_path / "t.schema.json"

    def test_generate_missing(self, tmp_path, table, capsys):
        data, schema = table
        code = main(["generate-missing", "--mechanism", "mcar", "--rate", "0.3", "--seed", "7",
                     str(data), "--schema", str(schema), "--out", str(tmp_path)])
        assert code == 0
        mask = pd.read_csv(tmp_path / "t_mask.csv").to_numpy()
        assert (mask == 0).sum() == int(0.3 * mask.size)
        assert json.loads((tmp_path / "t_mask.csv.json").read_text())["seed"] == 7

    def test_global_flags_before_subcommand(self, tmp_path, table):
        data, schema = table
        assert main(["--seed", "3", "--out", str(tmp_path / "g"), "generate-missing", str(data), "--schema", str(schema)]) == 0
        assert (tmp_path / "g" / "t_mask.csv").exists()

    @pytest.mark.parametrize("method", ["mean", "knn", "ivgae"])
    def test_impute_evaluate(self, tmp_path, table, method):
        data, schema = table
        main(["generate-missing", str(data), "--schema", str(schema), "--out", str(tmp_path)])
        out = tmp_path / method
        args = ["impute", str(data), "--mask", str(tmp_path / "t_mask.csv"), "--schema", str(schema),
                "--method", method, "--out", str(out)]
        if method == "ivgae":
            cfg = tmp_path / "cfg.json"
            cfg.write_text(json.dumps({"encoder": {"hidden": 8}, "vgae.latent": 4}))
            args += ["--epochs", "5", "--config", str(cfg)]
        assert main(args) == 0
        imputed = pd.read_csv(out / "imputed.csv")
        truth = pd.read_csv(data)
        mask = pd.read_csv(tmp_path / "t_mask.csv").to_numpy() == 1
        assert (imputed.astype(str).to_numpy()[mask] == truth.astype(str).to_numpy()[mask]).all()
        assert main(["evaluate", "--truth", str(data), "--imputed", str(out / "imputed.csv"),
                     "--mask", str(tmp_path / "t_mask.csv"), "--schema", str(schema), "--out", str(out)]) == 0
        jsonschema.validate(json.loads((out / "metrics.json").read_text()), EVALUATE_SCHEMA)
        if method == "ivgae":
            assert (out / "model.npz").exists() and (out / "progress.csv").exists() and (out / "loss.png").exists()

    def test_experiment_command(self, tmp_path):
        cfg = tmp_path / "exp.json"
        cfg.write_text(json.dumps({"dataset": SYNTH, "method": "mean", "seeds": [0, 1]}))
        assert main(["experiment", "--config", str(cfg), "--out", str(tmp_path / "e"), "--no-figures"]) == 0
        report = json.loads((tmp_path / "e" / "metrics.json").read_text())
        jsonschema.validate(report, REPORT_SCHEMA)

    def test_grad_check(self, capsys):
        assert main(["grad-check"]) == 0
        out = capsys.readouterr().out
        assert "L_imp[hetero]" in out and "FAIL" not in out

    @pytest.mark.parametrize("argv", [["frobnicate"], ["impute"], ["synth", "--bogus"], [], ["evaluate", "--truth", "x"]])
    def test_usage_errors(self, argv, capsys):
        assert main(argv) == 1
        assert capsys.readouterr().err

    def test_runtime_error(self, tmp_path, capsys):
        assert main(["generate-missing", str(tmp_path / "absent.csv")]) == 2
        assert "LoadError" in capsys.readouterr().err

    def test_unknown_config_key(self, tmp_path, table):
        data, _ = table
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"colour": "red"}))
        assert main(["generate-missing", str(data), "--config", str(cfg)]) == 1

    def test_synth_files(self, tmp_path):
        assert main(["synth", "--kind", "factor", "--n", "30", "--p", "4", "--out", str(tmp_path)]) == 0
        frame = pd.read_csv(tmp_path / "synth.csv")
        assert frame.shape == (30, 4) and np.isfinite(frame.to_numpy()).all()
