import json
import shutil

import pytest

from kgalign.cli import main

SMALL = ["--set", "synth.n_matchable=60", "--set", "synth.n_dangling_src=15", "--set", "synth.n_dangling_tgt=15",
         "--set", "synth.noise_sigma=0.0", "--set", "train.total_steps=30"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert main(["synth", "--out", str(d), "--seed", "0"] + SMALL) == 0
    return d


def run_pipeline(data_dir, out, *extra):
    return main(["pipeline", "--data", str(data_dir), "--gold", str(data_dir / "gold"), "--out", str(out)]
                + SMALL + list(extra))


def error_of(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_synth_layout(data_dir):
    for side in ("src", "tgt"):
        for name in ("entities.txt", "triples.tsv", "embeddings.tsv"):
            assert (data_dir / side / name).exists()
    for part in ("train", "test", "all"):
        assert (data_dir / "gold" / f"{part}_pairs.tsv").exists()
    manifest = json.loads((data_dir / "manifest_synth.json").read_text())
    assert manifest["config"]["seed"] == 0 and manifest["outputs"]


def test_pipeline_zero_noise_and_deterministic(data_dir, tmp_path):
    assert run_pipeline(data_dir, tmp_path / "a") == 0
    assert run_pipeline(data_dir, tmp_path / "b") == 0
    a = (tmp_path / "a" / "metrics.json").read_bytes()
    assert a == (tmp_path / "b" / "metrics.json").read_bytes()
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    m = json.loads(a)
    assert m["matching_hits1"] == 1.0 and m["ded_f1"] == 1.0
    for stage in ("mine", "train", "calibrate", "align", "eval"):
        man = json.loads((tmp_path / "a" / f"manifest_{stage}.json").read_text())
        assert man["stage"] == stage and "versions" in man


def test_resume_skips_current_stages(data_dir, tmp_path, caplog):
    out = tmp_path / "r"
    assert run_pipeline(data_dir, out) == 0
    before = (out / "metrics.json").stat().st_mtime_ns
    with caplog.at_level("INFO"):
        assert run_pipeline(data_dir, out, "--resume", "-v") == 0
    assert (out / "metrics.json").stat().st_mtime_ns == before
    assert "skip" in caplog.text


@pytest.mark.parametrize("mode", ["no_Lg", "no_decay", "no_otp", "no_empty", "daa", "ued_star",
                                  "distance_baseline", "gold_alpha_beta"])
def test_every_mode_runs(data_dir, tmp_path, mode):
    assert run_pipeline(data_dir, tmp_path / mode, "--mode", mode) == 0
    m = json.loads((tmp_path / mode / "metrics.json").read_text())
    assert m["matching_hits1"] is not None


def test_missing_artifact_names_producer(data_dir, tmp_path, capsys):
    rc = main(["align", "--data", str(data_dir), "--out", str(tmp_path / "empty")] + SMALL)
    assert rc == 2
    err = error_of(capsys)
    assert err["error"] == "missing_artifact" and err["producer"] in ("train", "calibrate")


def test_contradictory_modes_fail_before_work(data_dir, tmp_path, capsys):
    out = tmp_path / "bad"
    assert run_pipeline(data_dir, out, "--mode", "no_otp", "--mode", "daa") == 2
    assert error_of(capsys)["error"] == "ModeError"
    assert not out.exists() or not any(out.iterdir())


def test_supervised_mode_needs_gold(data_dir, tmp_path, capsys):
    bare = tmp_path / "bare"
    for side in ("src", "tgt"):
        shutil.copytree(data_dir / side, bare / side)
    rc = main(["pipeline", "--data", str(bare), "--out", str(tmp_path / "x"), "--mode", "ued_star"] + SMALL)
    assert rc == 2 and "gold_dir" in error_of(capsys)["message"]


def test_unknown_config_key(data_dir, tmp_path, capsys):
    rc = main(["mine", "--data", str(data_dir), "--out", str(tmp_path / "y"), "--set", "nonsense=1"])
    assert rc == 2 and error_of(capsys)["error"] == "ConfigError"


def test_config_file_and_override(data_dir, tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"data_dir": str(data_dir), "epsilon": 0.95}))
    out = tmp_path / "cfg"
    assert main(["mine", "--config", str(cfg), "--out", str(out), "--epsilon", "0.9"]) == 0
    man = json.loads((out / "manifest_mine.json").read_text())
    assert man["config"]["epsilon"] == 0.9
