import json

import pytest

from palm.cli import EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, main

SCENE = {"table_size": 32, "chain_length": 3, "seed": 3}
TRAIN = {"preset": "tiny", "train": {"epochs": 1, "batch_size": 64}}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "scene.json").write_text(json.dumps(SCENE))
    (d / "train.json").write_text(json.dumps(TRAIN))
    assert main(["gen-data", "--config", str(d / "scene.json"), "--episodes", "2", "--out", str(d / "data")]) == EXIT_OK
    assert main(["train", "--data", str(d / "data"), "--config", str(d / "train.json"), "--out", str(d / "ck")]) == EXIT_OK
    return d


def test_gen_data_manifest(workdir):
    m = json.loads((workdir / "data" / "manifest.json").read_text())
    assert len(m["episodes"]) == 2 and m["scene"]["table_size"] == 32


def test_train_eval_plot(workdir, capsys):
    ck = workdir / "ck" / "model.palmckpt"
    assert ck.is_file() and (workdir / "ck" / "metrics.jsonl").is_file()
    assert main(["eval", "--ckpt", str(ck), "--episodes", "2", "--out", str(workdir / "ev")]) == EXIT_OK
    assert "Avg. Len." in capsys.readouterr().out
    assert main(["eval", "--ckpt", str(ck), "--episodes", "1", "--perturb", "lighting", "--phi", "0.7",
                 "--sample-steps", "2", "--out", str(workdir / "ev2")]) == EXIT_OK
    rep = json.loads((workdir / "ev2" / "report.json").read_text())
    assert rep["perturbation"] == "lighting" and rep["phi"] == 0.7
    assert main(["plot", "--report", str(workdir / "ev" / "report.json"), "--out", str(workdir / "pl")]) == EXIT_OK
    assert (workdir / "pl" / "success_in_row.svg").stat().st_size > 0


def test_palm_seed_changes_training(workdir, monkeypatch):
    monkeypatch.setenv("PALM_SEED", "5")
    out = workdir / "ck_seed5"
    assert main(["train", "--data", str(workdir / "data"), "--config", str(workdir / "train.json"), "--out", str(out)]) == 0
    a = (workdir / "ck" / "metrics.jsonl").read_text()
    b = (out / "metrics.jsonl").read_text()
    assert a != b
    monkeypatch.setenv("PALM_SEED", "x")
    assert main(["train", "--data", str(workdir / "data"), "--config", str(workdir / "train.json"),
                 "--out", str(out)]) == EXIT_VALIDATION


def test_validation_exit_codes(workdir, tmp_path):
    ck = str(workdir / "ck" / "model.palmckpt")
    assert main(["eval", "--ckpt", ck, "--phi", "1.5"]) == EXIT_VALIDATION
    assert main(["eval", "--ckpt", str(tmp_path / "missing.palmckpt")]) == EXIT_VALIDATION
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"table_size": 8}))
    assert main(["gen-data", "--config", str(bad), "--episodes", "1", "--out", str(tmp_path / "d")]) == EXIT_VALIDATION
    bad.write_text(json.dumps({"train": {"learning_rate": 1}}))
    assert main(["train", "--data", str(workdir / "data"), "--config", str(bad), "--out", str(tmp_path / "c")]) == EXIT_VALIDATION
    bad.write_text("{not json")
    assert main(["plot", "--report", str(bad), "--out", str(tmp_path / "p")]) == EXIT_VALIDATION
    with pytest.raises(SystemExit) as e:
        main(["eval"])
    assert e.value.code == 2


def test_runtime_failure_exit_code(workdir, tmp_path):
    ck = workdir / "ck" / "model.palmckpt"
    truncated = tmp_path / "trunc.palmckpt"
    truncated.write_bytes(ck.read_bytes()[:-100])
    assert main(["eval", "--ckpt", str(truncated), "--episodes", "1"]) == EXIT_RUNTIME


def test_ablate_grid(workdir, tmp_path):
    grid = {
        "variants": {"full": {}, "no_progress": {"no_progress": True}},
        "seeds": [0],
        "episodes": 2,
        "preset": "tiny",
        "data": str(workdir / "data"),
        "train": {"epochs": 1},
    }
    (tmp_path / "grid.json").write_text(json.dumps(grid))
    assert main(["ablate", "--ckpt-dir", str(tmp_path / "ab"), "--grid", str(tmp_path / "grid.json")]) == EXIT_OK
    res = json.loads((tmp_path / "ab" / "ablation.json").read_text())
    assert [r["variant"] for r in res["summary"]] == ["full", "no_progress"]
    assert (tmp_path / "ab" / "no_progress" / "seed_0" / "model.palmckpt").is_file()
    (tmp_path / "grid.json").write_text(json.dumps({**grid, "variants": {"x": {"no_wheels": True}}}))
    assert main(["ablate", "--ckpt-dir", str(tmp_path / "ab"), "--grid", str(tmp_path / "grid.json")]) == EXIT_VALIDATION
