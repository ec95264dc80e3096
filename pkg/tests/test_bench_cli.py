import json
import os
import subprocess
import sys

import jsonschema
import numpy as np
import pytest

from sida.bench import DEFAULT_CONFIG, load_bundle_schema, merge_config, run_benchmark
from sida.cli import main
from sida.corpus import load_corpus
from sida.errors import ContractError

MICRO_CONFIG = {
    "seed": 5,
    "k_grid": [4],
    "corpus": {
        "vocab_size": 48,
        "num_sequences": 120,
        "min_len": 4,
        "max_len": 8,
        "num_classes": 3,
        "beta": 0.9,
    },
    "eval_corpus": {"num_sequences": 24},
    "moe": {
        "d_model": 16,
        "num_layers": 2,
        "expert_hidden": 12,
        "max_seq_len": 12,
        "routing_k": 1,
    },
    "train_moe": {"epochs": 2, "lr": 5e-3, "balance_coeff": 0.01, "batch_size": 16},
    "predictor": {
        "compress_dim": 8,
        "lstm_hidden": 12,
        "top_t": 30,
        "lambda_ce": 0.005,
        "lr": 2e-3,
        "batch_size": 16,
        "max_steps": 120,
    },
    "serve": {
        "modes": ["standard", "oracle", "sida"],
        "budget_fracs": [0.5, 1.0],
        "eval_top_k": 1,
        "batch_size": 1,
        "max_batches": 12,
        "selection_overhead_s": 0.0,
        "bandwidth_bytes_per_s": 1e9,
        "per_transfer_latency_s": 1e-5,
        "queue_capacity": 4,
    },
    "sparsity_probe": {
        "enabled": True,
        "mode": "token",
        "probe_layer": 0,
        "p_grid": [0.3, 0.6, 0.9],
        "positions": 2,
        "trials": 40,
    },
}


@pytest.fixture(scope="module")
def micro_bundle(tmp_path_factory):
    out = tmp_path_factory.mktemp("bench")
    bundle = run_benchmark(MICRO_CONFIG, out)
    return bundle, out


class TestMergeConfig:
    def test_defaults_round(self):
        cfg = merge_config(None)
        assert cfg == DEFAULT_CONFIG

    def test_unknown_key_rejected(self):
        with pytest.raises(ContractError):
            merge_config({"nonsense": 1})

    def test_nested_override(self):
        cfg = merge_config({"serve": {"eval_top_k": 3}})
        assert cfg["serve"]["eval_top_k"] == 3
        assert cfg["serve"]["modes"] == DEFAULT_CONFIG["serve"]["modes"]


class TestRunBenchmark:
    def test_bundle_validates_against_published_schema(self, micro_bundle):
        bundle, out = micro_bundle
        schema = load_bundle_schema()
        jsonschema.validate(bundle, schema)
        on_disk = json.loads((out / "bundle.json").read_text())
        jsonschema.validate(on_disk, schema)

    def test_no_stage_errors(self, micro_bundle):
        bundle, _ = micro_bundle
        assert bundle["errors"] == []
        assert len(bundle["cells"]) == 6  # 3 modes x 2 budgets

    def test_oracle_fidelity_is_one(self, micro_bundle):
        bundle, _ = micro_bundle
        oracle_cells = [c for c in bundle["cells"] if c["mode"] == "oracle"]
        assert oracle_cells
        for cell in oracle_cells:
            assert cell["fidelity"] == pytest.approx(1.0)

    def test_cell_artifacts_written(self, micro_bundle):
        bundle, out = micro_bundle
        for cell in bundle["cells"]:
            assert (out / cell["report_json"]).exists()
            assert (out / cell["report_csv"]).exists()
        assert (out / "series_throughput_vs_budget.csv").exists()

    def test_sparsity_probe_section(self, micro_bundle):
        bundle, _ = micro_bundle
        probe = bundle["sparsity_probe"]
        assert probe is not None
        assert len(probe["c_hat"]) == 2
        assert all(isinstance(c, int) for c in probe["c_hat"])

    def test_partial_bundle_on_stage_failure(self, tmp_path):
        bad = dict(MICRO_CONFIG)
        bad = json.loads(json.dumps(MICRO_CONFIG))
        bad["k_grid"] = [4, 100000]  # second K cannot train (vocab too small etc.)
        bad["corpus"]["num_sequences"] = 60
        bad["predictor"]["max_steps"] = 40
        bad["sparsity_probe"]["enabled"] = False
        bundle = run_benchmark(bad, tmp_path)
        stages = [e["stage"] for e in bundle["errors"]]
        assert any("k100000" in s for s in stages)
        assert [c for c in bundle["cells"] if c["num_experts"] == 4]


class TestCli:
    def run_cli(self, *argv):
        return main(list(argv))

    def test_gen_train_serve_round_trip(self, tmp_path):
        corpus_path = tmp_path / "corpus.npz"
        ckpt = tmp_path / "model.ckpt"
        report = tmp_path / "report.json"
        assert self.run_cli(
            "gen-corpus", "--out", str(corpus_path), "--vocab-size", "32",
            "--num-sequences", "60", "--min-len", "4", "--max-len", "7",
            "--num-classes", "2", "--seed", "3",
        ) == 0
        corpus = load_corpus(corpus_path)
        assert len(corpus) == 60
        assert self.run_cli(
            "train-moe", "--corpus", str(corpus_path), "--out", str(ckpt),
            "--num-experts", "4", "--epochs", "1", "--seed", "3",
            "--config", str(self._micro_moe_config(tmp_path)),
        ) == 0
        assert ckpt.exists()
        assert self.run_cli(
            "serve", "--mode", "standard", "--checkpoint", str(ckpt),
            "--corpus", str(corpus_path), "--report", str(report),
            "--max-batches", "6",
        ) == 0
        data = json.loads(report.read_text())
        assert data["mode"] == "standard"
        assert data["aggregate"]["total_samples"] == 6

    def _micro_moe_config(self, tmp_path):
        import yaml

        path = tmp_path / "moe.yaml"
        path.write_text(yaml.safe_dump({
            "moe": {"d_model": 12, "num_layers": 1, "expert_hidden": 8,
                    "max_seq_len": 8},
            "train_moe": {"epochs": 1, "lr": 3e-3, "balance_coeff": 0.01,
                          "batch_size": 16},
        }))
        return path

    def test_trace_and_predictor_flow(self, tmp_path):
        corpus_path = tmp_path / "c.npz"
        ckpt = tmp_path / "m.ckpt"
        pred = tmp_path / "p.ckpt"
        traces = tmp_path / "t.npz"
        self.run_cli("gen-corpus", "--out", str(corpus_path), "--vocab-size", "24",
                     "--num-sequences", "40", "--min-len", "4", "--max-len", "6",
                     "--num-classes", "2", "--seed", "1")
        self.run_cli("train-moe", "--corpus", str(corpus_path), "--out", str(ckpt),
                     "--num-experts", "3", "--epochs", "1", "--seed", "1",
                     "--config", str(self._micro_moe_config(tmp_path)))
        assert self.run_cli("trace", "--checkpoint", str(ckpt), "--corpus",
                            str(corpus_path), "--out", str(traces)) == 0
        data = np.load(traces)
        assert data["probs"].shape[0] == 1  # one layer
        report_path = tmp_path / "pred_report.json"
        assert self.run_cli(
            "train-predictor", "--checkpoint", str(ckpt), "--corpus",
            str(corpus_path), "--out", str(pred), "--max-steps", "30",
            "--batch-size", "8", "--seed", "1", "--report", str(report_path),
        ) == 0
        assert pred.exists() and report_path.exists()
        report = tmp_path / "sida_report.json"
        assert self.run_cli(
            "serve", "--mode", "sida", "--checkpoint", str(ckpt),
            "--predictor", str(pred), "--corpus", str(corpus_path),
            "--report", str(report), "--max-batches", "4", "--top-k", "2",
        ) == 0
        assert json.loads(report.read_text())["eval_top_k"] == 2

    def test_probe_sparsity_cli(self, tmp_path):
        corpus_path = tmp_path / "c.npz"
        ckpt = tmp_path / "m.ckpt"
        out = tmp_path / "probe.json"
        self.run_cli("gen-corpus", "--out", str(corpus_path), "--vocab-size", "24",
                     "--num-sequences", "20", "--min-len", "6", "--max-len", "6",
                     "--num-classes", "2", "--seed", "2")
        self.run_cli("train-moe", "--corpus", str(corpus_path), "--out", str(ckpt),
                     "--num-experts", "3", "--epochs", "1", "--seed", "2",
                     "--config", str(self._micro_moe_config(tmp_path)))
        assert self.run_cli(
            "probe-sparsity", "--checkpoint", str(ckpt), "--corpus", str(corpus_path),
            "--out", str(out), "--positions", "2", "--trials", "30",
            "--p-grid", "0.3,0.6",
        ) == 0
        data = json.loads(out.read_text())
        assert len(data["positions"]) == 2
        assert all("c_hat" in p for p in data["positions"])

    def test_sida_seed_env_override(self, tmp_path, monkeypatch):
        out_a = tmp_path / "a.npz"
        out_b = tmp_path / "b.npz"
        monkeypatch.setenv("SIDA_SEED", "77")
        self.run_cli("gen-corpus", "--out", str(out_a), "--vocab-size", "16",
                     "--num-sequences", "10", "--min-len", "3", "--max-len", "4",
                     "--num-classes", "2", "--seed", "1")
        monkeypatch.delenv("SIDA_SEED")
        self.run_cli("gen-corpus", "--out", str(out_b), "--vocab-size", "16",
                     "--num-sequences", "10", "--min-len", "3", "--max-len", "4",
                     "--num-classes", "2", "--seed", "77")
        a = load_corpus(out_a)
        b = load_corpus(out_b)
        assert a.content_bytes() == b.content_bytes()

    def test_console_entrypoint(self):
        proc = subprocess.run(
            [sys.executable, "-m", "sida.cli", "--help"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0
        assert "gen-corpus" in proc.stdout
