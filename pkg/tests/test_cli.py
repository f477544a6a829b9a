"""Command line surface: data generation, training, eval, predict, sweep."""

import csv
import json

import pytest
from click.testing import CliRunner

from sedt.cli import main, parse_config
from sedt.data import load_manifest


TINY_CONFIG = {
    "batch_size": 4,
    "epochs_learning": 2,
    "epochs_finetune": 1,
    "lr_learning": 1e-3,
    "lr_finetune": 1e-4,
    "seed": 0,
    "val_every": 100,
    "d_model": 32,
    "n_heads": 4,
    "n_encoder_blocks": 1,
    "n_decoder_blocks": 1,
    "ffn_width": 64,
    "n_queries": 4,
    "dropout": 0.0,
    "backbone": [[8, 2, 2], [16, 2, 2]],
    "lambda_at": 3.0,
    "epsilon": 1.0,
    "alpha": 1.0,
    "sample_rate": 16000,
    "win_len": 512,
    "hop": 1600,
    "n_mels": 64,
}


def test_parse_config_splits_field_groups():
    bundle = parse_config(dict(TINY_CONFIG, train_manifest="m.jsonl", classes=["x"]))
    assert bundle.train.batch_size == 4
    assert bundle.train.weights.lambda_at == 3.0
    assert bundle.train.finetune.epsilon == 1.0
    assert bundle.model_kwargs["d_model"] == 32
    assert bundle.features.hop == 1600
    assert bundle.train_manifest == "m.jsonl"
    assert bundle.classes == ["x"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A generated dataset, a config file, and a trained tiny checkpoint."""
    root = tmp_path_factory.mktemp("cli")
    runner = CliRunner()
    scene = {
        "templates": [
            {"label": "low_tone", "kind": "tone",
             "duration_range_s": [0.8, 1.5], "freq_range_hz": [200, 400]},
            {"label": "noise_burst", "kind": "noise",
             "duration_range_s": [0.8, 1.5], "freq_range_hz": [0, 8000]},
        ],
        "events_per_clip": [1, 2],
        "snr_db": [10, 20],
        "clip_len_s": 3.0,
        "sample_rate": 16000,
    }
    (root / "scene.json").write_text(json.dumps(scene))
    result = runner.invoke(main, [
        "generate-data", "--spec", str(root / "scene.json"),
        "--out", str(root / "data"), "--num-clips", "8", "--seed", "3",
        "--weak-fraction", "0.25",
    ])
    assert result.exit_code == 0, result.output

    config = dict(TINY_CONFIG, train_manifest=str(root / "data" / "manifest.jsonl"))
    (root / "config.json").write_text(json.dumps(config))
    result = runner.invoke(main, [
        "train", "--config", str(root / "config.json"),
        "--stage", "learning", "--out", str(root / "run"),
    ])
    assert result.exit_code == 0, result.output
    return root


class TestGenerateData:
    def test_manifest_and_audio_exist(self, workspace):
        records = load_manifest(workspace / "data" / "manifest.jsonl")
        assert len(records) == 8
        weak = [r for r in records if r.annotation.supervision == "weak"]
        assert len(weak) == 2
        for rec in records:
            assert (workspace / rec.audio).exists() or rec.audio.startswith("/")


class TestTrain:
    def test_checkpoint_and_log_written(self, workspace):
        assert (workspace / "run" / "learning.pt").exists()
        assert (workspace / "run" / "learning.json").exists()
        log_lines = (workspace / "run" / "train_log.jsonl").read_text().splitlines()
        records = [json.loads(line) for line in log_lines]
        assert records[0].keys() >= {"epoch", "step", "lr", "loc", "cls", "tag", "total"}
        assert records[-1]["epoch"] == 1

    def test_finetune_from_checkpoint(self, workspace):
        runner = CliRunner()
        result = runner.invoke(main, [
            "train", "--config", str(workspace / "config.json"),
            "--stage", "finetune", "--from", str(workspace / "run" / "learning.pt"),
            "--out", str(workspace / "run_ft"),
        ])
        assert result.exit_code == 0, result.output
        assert (workspace / "run_ft" / "finetune.pt").exists()


class TestEval:
    def test_prints_table_and_writes_report(self, workspace):
        runner = CliRunner()
        report_path = workspace / "report.json"
        result = runner.invoke(main, [
            "eval", "--ckpt", str(workspace / "run" / "learning.pt"),
            "--manifest", str(workspace / "data" / "manifest.jsonl"),
            "--fusion", "1", "--report", str(report_path),
        ])
        assert result.exit_code == 0, result.output
        header = result.output.splitlines()[0]
        assert header.index("Eb[%]") < header.index("Sb[%]") < header.index("At[%]")
        report = json.loads(report_path.read_text())
        assert set(report) >= {"event_based", "segment_based", "tagging"}


class TestPredict:
    def test_manifest_input(self, workspace):
        runner = CliRunner()
        out_path = workspace / "preds.jsonl"
        result = runner.invoke(main, [
            "predict", "--ckpt", str(workspace / "run" / "learning.pt"),
            "--input", str(workspace / "data" / "manifest.jsonl"),
            "--out", str(out_path),
        ])
        assert result.exit_code == 0, result.output
        lines = out_path.read_text().splitlines()
        assert len(lines) == 8
        rec = json.loads(lines[0])
        assert set(rec) == {"clip_id", "events", "tags"}

    def test_single_wav_input(self, workspace):
        runner = CliRunner()
        records = load_manifest(workspace / "data" / "manifest.jsonl")
        wav_path = records[0].audio
        out_path = workspace / "single.jsonl"
        result = runner.invoke(main, [
            "predict", "--ckpt", str(workspace / "run" / "learning.pt"),
            "--input", wav_path, "--out", str(out_path),
        ])
        assert result.exit_code == 0, result.output
        rec = json.loads(out_path.read_text().splitlines()[0])
        assert rec["clip_id"] == records[0].annotation.clip_id


class TestSweep:
    def test_writes_csv_grid(self, workspace):
        runner = CliRunner()
        out_path = workspace / "sweep.csv"
        result = runner.invoke(main, [
            "sweep", "--ckpt", str(workspace / "run" / "learning.pt"),
            "--config", str(workspace / "config.json"),
            "--epsilons", "0.5,1", "--alphas", "1,all",
            "--strategies", "none,1", "--out", str(out_path),
        ])
        assert result.exit_code == 0, result.output
        with out_path.open() as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 2 * 2 * 2
        assert rows[0]["strategy"] == "none"
        assert {row["alpha"] for row in rows} == {"1.0", "all"}
