"""Command-line interface: gen/train/eval subcommands and exit codes."""

import json
import os
import subprocess
import sys

import numpy as np
import pytest

from amber_mini.cli import main

TOY_CONFIG = {
    "corpus": {
        "n_concepts": 8,
        "languages": [
            {"id": "l0", "reorder": "identity", "mono_size": 60},
            {"id": "l1", "reorder": "adjacent-swap", "mono_size": 40},
        ],
        "parallel": [{"src": "l0", "tgt": "l1", "size": 40}],
        "heldout_cap": 10,
        "heldout_mono": 10,
    },
    "model": {"layers": 1, "heads": 2, "hidden": 16, "ffn_dim": 32,
              "max_positions": 40},
    "train": {"steps": 8, "warmup_steps": 2, "batch_size": 4},
}


@pytest.fixture
def toy_config_path(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(TOY_CONFIG))
    return path


@pytest.fixture
def toy_data_dir(tmp_path, toy_config_path):
    data_dir = tmp_path / "data"
    rc = main(["gen", "--config", str(toy_config_path),
               "--out", str(data_dir)])
    assert rc == 0
    return data_dir


class TestGen:
    def test_writes_expected_files(self, toy_data_dir):
        names = {p.name for p in toy_data_dir.iterdir()}
        assert {"mono.l0.txt", "mono.l1.txt", "heldout.l0.txt",
                "para.l0-l1.src.txt", "para.l0-l1.tgt.txt",
                "para.l0-l1.align.txt", "heldout.para.l0-l1.src.txt",
                "meta.json", "config.json"} <= names

    def test_line_counts_match_config(self, toy_data_dir):
        mono0 = (toy_data_dir / "mono.l0.txt").read_text().splitlines()
        mono1 = (toy_data_dir / "mono.l1.txt").read_text().splitlines()
        assert len(mono0) == 60 and len(mono1) == 40
        held = (toy_data_dir / "heldout.para.l0-l1.src.txt").read_text().splitlines()
        train = (toy_data_dir / "para.l0-l1.src.txt").read_text().splitlines()
        assert len(held) + len(train) == 40

    def test_same_seed_byte_identical(self, tmp_path, toy_config_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert main(["gen", "--config", str(toy_config_path),
                         "--out", str(out)]) == 0
            outs.append(out)
        for path in sorted(outs[0].glob("*.txt")):
            assert path.read_bytes() == (outs[1] / path.name).read_bytes()

    def test_corpus_text_format(self, toy_data_dir):
        first = (toy_data_dir / "mono.l0.txt").read_text().splitlines()[0]
        parts = first.split()
        assert parts[0] == "l0"
        assert all(tok.startswith("l0:w") for tok in parts[1:])


class TestTrain:
    def test_mlm_only_metrics_columns_zero(self, tmp_path, toy_config_path,
                                           toy_data_dir):
        out = tmp_path / "run"
        rc = main(["train", "--config", str(toy_config_path),
                   "--data", str(toy_data_dir), "--out", str(out),
                   "--objectives", "mlm"])
        assert rc == 0
        recs = [json.loads(l) for l in
                (out / "metrics.jsonl").read_text().splitlines()]
        assert len(recs) == 8
        assert all(r["sa"] == 0.0 and r["wa"] == 0.0 for r in recs)
        assert (out / "checkpoint.bin").exists()
        assert (out / "training_curve.png").exists()

    def test_zero_steps_checkpoints_initialization(self, tmp_path,
                                                   toy_config_path,
                                                   toy_data_dir):
        out = tmp_path / "run0"
        rc = main(["train", "--config", str(toy_config_path),
                   "--data", str(toy_data_dir), "--out", str(out),
                   "--steps", "0"])
        assert rc == 0
        from amber_mini.trainer import load_checkpoint
        state = load_checkpoint(out / "checkpoint.bin")
        assert state.step == 0 and state.adam_t == 0
        # parameters equal a freshly initialized model with the same seed
        from amber_mini.encoder import Encoder
        fresh = Encoder(state.model_config, seed=state.seed)
        for name, arr in state.params.items():
            np.testing.assert_array_equal(arr, fresh.params[name].data)

    def test_phase2_warm_start(self, tmp_path, toy_config_path, toy_data_dir):
        first = tmp_path / "phase1"
        assert main(["train", "--config", str(toy_config_path),
                     "--data", str(toy_data_dir), "--out", str(first),
                     "--objectives", "mlm"]) == 0
        second = tmp_path / "phase2"
        rc = main(["train", "--config", str(toy_config_path),
                   "--data", str(toy_data_dir), "--out", str(second),
                   "--objectives", "mlm,tlm,wa,sa",
                   "--phase2-from", str(first / "checkpoint.bin")])
        assert rc == 0


class TestEval:
    @pytest.fixture
    def trained_run(self, tmp_path, toy_config_path, toy_data_dir):
        out = tmp_path / "run"
        assert main(["train", "--config", str(toy_config_path),
                     "--data", str(toy_data_dir), "--out", str(out)]) == 0
        return out

    @pytest.mark.parametrize("task,files", [
        ("retrieve", ["retrieval.tsv", "retrieval.png", "retrieve.json"]),
        ("align", ["alignment.tsv", "alignment.png", "align.json"]),
        ("transfer", ["transfer.tsv", "transfer_summary.tsv", "transfer.png",
                      "transfer.json"]),
    ])
    def test_tasks_write_reports_and_figures(self, tmp_path, toy_data_dir,
                                             trained_run, task, files):
        out = tmp_path / f"eval_{task}"
        rc = main(["eval", "--checkpoint", str(trained_run / "checkpoint.bin"),
                   "--task", task, "--data", str(toy_data_dir),
                   "--out", str(out)])
        assert rc == 0
        for name in files:
            assert (out / name).exists(), name

    def test_transfer_report_schema(self, tmp_path, toy_data_dir, trained_run):
        out = tmp_path / "eval_t"
        main(["eval", "--checkpoint", str(trained_run / "checkpoint.bin"),
              "--task", "transfer", "--data", str(toy_data_dir),
              "--out", str(out)])
        payload = json.loads((out / "transfer.json").read_text())
        assert set(payload) == {"mean_target", "per_language"}
        assert set(payload["per_language"]) == {"l0", "l1"}
        assert all(0.0 <= v <= 1.0 for v in payload["per_language"].values())

    def test_retrieval_tsv_schema(self, tmp_path, toy_data_dir, trained_run):
        out = tmp_path / "eval_r"
        main(["eval", "--checkpoint", str(trained_run / "checkpoint.bin"),
              "--task", "retrieve", "--data", str(toy_data_dir),
              "--out", str(out)])
        lines = (out / "retrieval.tsv").read_text().splitlines()
        assert lines[0].split("\t") == ["pair", "accuracy", "candidates",
                                        "ties"]
        row = lines[1].split("\t")
        assert row[0] == "l0-l1" and 0.0 <= float(row[1]) <= 1.0


class TestExitCodes:
    def test_config_error_is_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"train": {"unknown_knob": 1}}))
        rc = main(["gen", "--config", str(bad), "--out", str(tmp_path / "d")])
        assert rc == 2
        assert "ERROR:config:" in capsys.readouterr().err

    def test_missing_config_file_is_2(self, tmp_path):
        rc = main(["gen", "--config", str(tmp_path / "nope.json"),
                   "--out", str(tmp_path / "d")])
        assert rc == 2

    def test_missing_data_dir_is_3(self, tmp_path, toy_config_path, capsys):
        rc = main(["train", "--config", str(toy_config_path),
                   "--data", str(tmp_path / "nodata"),
                   "--out", str(tmp_path / "run")])
        assert rc == 3
        assert "ERROR:data:" in capsys.readouterr().err

    def test_corrupt_checkpoint_is_3(self, tmp_path, toy_data_dir):
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"NOTMAGIC" + b"\x00" * 32)
        rc = main(["eval", "--checkpoint", str(bad), "--task", "retrieve",
                   "--data", str(toy_data_dir), "--out", str(tmp_path / "o")])
        assert rc == 3

    def test_vocab_mismatch_is_3(self, tmp_path, toy_config_path,
                                 toy_data_dir):
        other_cfg = json.loads(json.dumps(TOY_CONFIG))
        other_cfg["corpus"]["n_concepts"] = 6
        cfg_path = tmp_path / "other.json"
        cfg_path.write_text(json.dumps(other_cfg))
        other_data = tmp_path / "otherdata"
        assert main(["gen", "--config", str(cfg_path),
                     "--out", str(other_data)]) == 0
        run = tmp_path / "run"
        assert main(["train", "--config", str(toy_config_path),
                     "--data", str(toy_data_dir), "--out", str(run)]) == 0
        rc = main(["eval", "--checkpoint", str(run / "checkpoint.bin"),
                   "--task", "retrieve", "--data", str(other_data),
                   "--out", str(tmp_path / "o")])
        assert rc == 3


class TestThreadCap:
    def test_env_var_caps_blas_pools(self):
        code = ("import os; os.environ['AMBER_MINI_THREADS'] = '1'; "
                "import amber_mini.cli; "
                "print(os.environ['OMP_NUM_THREADS'], "
                "os.environ['OPENBLAS_NUM_THREADS'])")
        env = {k: v for k, v in os.environ.items()
               if k not in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS")}
        out = subprocess.run([sys.executable, "-c", code], env=env,
                             capture_output=True, text=True, check=True)
        assert out.stdout.split() == ["1", "1"]
