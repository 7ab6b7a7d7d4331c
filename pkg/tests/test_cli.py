import json

import numpy as np
import pytest

from ttmatch.cli import main
from ttmatch.io import load_manifest, load_scores, save_scores
from ttmatch.synth import SynthConfig, generate


def run_cli(*argv):
    return main(list(argv))


@pytest.fixture()
def synth_dir(tmp_path):
    out = tmp_path / "data"
    code = run_cli(
        "synth",
        "--groups", "12",
        "--shape", "2,2",
        "--dim", "16",
        "--sigma", "2.0",
        "--seed", "3",
        "--out", str(out),
    )
    assert code == 0
    return out


def test_synth_writes_loadable_artifacts(synth_dir):
    dataset = load_manifest(synth_dir / "manifest.json")
    assert len(dataset.groups) == 12
    assert (synth_dir / "embeddings.json").exists()
    assert (synth_dir / "embeddings.bin").exists()


def test_synth_matches_library_generate(synth_dir):
    dataset = load_manifest(synth_dir / "manifest.json")
    expected, _ = generate(
        SynthConfig(n_groups=12, dim=16, noise=2.0, seed=3)
    )
    assert dataset == expected


def test_eval_with_embeddings(synth_dir, capsys):
    code = run_cli(
        "eval", str(synth_dir / "manifest.json"),
        "--embeddings", str(synth_dir / "embeddings.json"),
    )
    assert code == 0
    out = capsys.readouterr().out
    assert "group_score" in out and "group_match" in out


def test_eval_requires_a_source(synth_dir, capsys):
    code = run_cli("eval", str(synth_dir / "manifest.json"))
    assert code == 1
    assert "error" in capsys.readouterr().err


def test_eval_with_scores(synth_dir, tmp_path, capsys):
    dataset = load_manifest(synth_dir / "manifest.json")
    store = {g.id: np.array([[0.9, 0.1], [0.2, 0.8]]) for g in dataset.groups}
    csv_path = tmp_path / "scores.csv"
    save_scores(store, dataset, csv_path)
    code = run_cli(
        "eval", str(synth_dir / "manifest.json"),
        "--scores", str(csv_path),
        "--metric", "group-match",
    )
    assert code == 0
    out = capsys.readouterr().out
    assert "group_match" in out and "100.00" in out


def test_simple_match_overfit_flag(synth_dir, capsys):
    code = run_cli(
        "simple-match", str(synth_dir / "manifest.json"),
        "--embeddings", str(synth_dir / "embeddings.json"),
        "--overfit-check",
    )
    assert code == 0
    out = capsys.readouterr().out
    assert "simple match" in out and "overfit group_score" in out


def test_ttm_runs_and_writes_report(synth_dir, tmp_path, capsys):
    report_path = tmp_path / "report.json"
    code = run_cli(
        "ttm", str(synth_dir / "manifest.json"),
        "--embeddings", str(synth_dir / "embeddings.json"),
        "--calibrate-frac", "0.25",
        "--iters", "2",
        "--epochs", "1",
        "--batch", "6",
        "--seed", "1",
        "--out", str(report_path),
    )
    assert code == 0
    payload = json.loads(report_path.read_text())
    assert payload["seed"] == 1
    assert len(payload["iterations"]) == 2
    assert "wall_clock_seconds" not in payload
    out = capsys.readouterr().out
    assert "calibrated tau_start" in out and "final:" in out


def test_ttm_score_only_rejected(synth_dir, tmp_path, capsys):
    dataset = load_manifest(synth_dir / "manifest.json")
    store = {g.id: np.zeros((2, 2)) for g in dataset.groups}
    csv_path = tmp_path / "scores.csv"
    save_scores(store, dataset, csv_path)
    code = run_cli(
        "ttm", str(synth_dir / "manifest.json"),
        "--embeddings", str(csv_path),
        "--tau-start", "1.0",
    )
    assert code == 3  # a CSV is not an embedding sidecar


def test_ttm_requires_threshold(synth_dir, capsys):
    code = run_cli(
        "ttm", str(synth_dir / "manifest.json"),
        "--embeddings", str(synth_dir / "embeddings.json"),
    )
    assert code == 1
    assert "tau-start" in capsys.readouterr().err


def test_ttm_global_runs(synth_dir, capsys):
    code = run_cli(
        "ttm-global", str(synth_dir / "manifest.json"),
        "--embeddings", str(synth_dir / "embeddings.json"),
        "--percentile-start", "0.5",
        "--iters", "2",
        "--epochs", "1",
        "--seed", "0",
    )
    assert code == 0
    out = capsys.readouterr().out
    assert "one-shot assignment accuracy" in out
    assert "final:" in out


def test_missing_manifest_is_io_error(tmp_path, capsys):
    code = run_cli(
        "eval", str(tmp_path / "nope.json"), "--scores", str(tmp_path / "s.csv")
    )
    assert code == 3


def test_validate_props_quick(capsys):
    code = run_cli("validate-props", "--max-k", "2", "--trials", "20000", "--seed", "0")
    assert code == 0
    out = capsys.readouterr().out
    assert "2x2" in out and "ok" in out


def test_reports_into_directory_are_timestamped(synth_dir, tmp_path):
    out_dir = tmp_path / "reports"
    out_dir.mkdir()
    code = run_cli(
        "ttm", str(synth_dir / "manifest.json"),
        "--embeddings", str(synth_dir / "embeddings.json"),
        "--tau-start", "0.5",
        "--iters", "1",
        "--epochs", "1",
        "--seed", "7",
        "--out", str(out_dir),
    )
    assert code == 0
    written = list(out_dir.glob("report_*_seed7.json"))
    assert len(written) == 1
