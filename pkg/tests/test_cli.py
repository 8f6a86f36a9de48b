import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from bbsfda.cli import main

SMOKE = str(Path(__file__).parents[1] / "configs" / "smoke.yaml")


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["run-all", "-c", SMOKE, "-o", str(out)]) == 0
    return out


def test_unknown_flag_is_usage_error(capsys):
    assert main(["run-all", "--no-such-flag"]) == 2
    assert "usage" in capsys.readouterr().err
    assert main([]) == 2


def test_bad_override_is_config_error(tmp_path, capsys):
    assert main(["run-all", "-c", SMOKE, "-o", str(tmp_path), "--set", "optimizer.stage1.epochs=0"]) == 2
    assert "epochs" in capsys.readouterr().err
    assert not (tmp_path / "source").exists()


def test_missing_data_is_data_error(tmp_path, smoke_run):
    assert main(["evaluate", "--checkpoint", str(smoke_run / "stage1" / "model.ckpt"),
                 "--data", str(tmp_path / "nowhere")]) == 3


def test_missing_checkpoint_caught_before_compute(tmp_path, capsys):
    code = main(["run-all", "-c", SMOKE, "-o", str(tmp_path), "--set", "stages=[stage1, stage2]"])
    assert code == 2
    assert "source checkpoint" in capsys.readouterr().err
    assert not (tmp_path / "stage1").exists()


def test_run_all_outputs(smoke_run):
    for stage in ("source", "stage1", "stage2_noaug", "stage2_aug"):
        assert (smoke_run / stage / "model.ckpt").exists()
        rep = json.loads((smoke_run / stage / "report.json").read_text())
        assert rep["metrics"] is not None and all(np.isfinite(rep["step_losses"]))
    table = (smoke_run / "metrics.md").read_text().splitlines()
    assert [line.split(" | ")[0] for line in table[1:]] == ["source only", "stage I", "stage II w/o aug",
                                                             "stage II w/ aug"]
    manifest = json.loads((smoke_run / "manifest.json").read_text())
    assert {"config_hash", "seed", "derived_seeds", "versions"} <= set(manifest)
    assert (smoke_run / "config.yaml").exists()
    stage1 = json.loads((smoke_run / "stage1" / "report.json").read_text())
    assert stage1["query_count"] == 8 and stage1["extra"]["blackbox_queries"] == 8
    for variant in ("stage2_noaug", "stage2_aug"):
        rep = json.loads((smoke_run / variant / "report.json").read_text())
        assert rep["query_count"] == 0 and rep["extra"]["blackbox_queries"] == 0


def test_gen_data_then_run_all_from_disk(tmp_path, smoke_run):
    data = tmp_path / "data"
    assert main(["gen-data", "-c", SMOKE, "--out", str(data)]) == 0
    for dom in ("source", "target"):
        for split in ("train", "test"):
            assert len(list((data / dom / split / "images").glob("*.png"))) == (8 if split == "train" else 4)
    out = tmp_path / "run"
    assert main(["run-all", "-c", SMOKE, "-o", str(out), "--set", f"data.root={data}"]) == 0
    assert (out / "metrics.md").exists()
    # 8-bit quantization of the saved images is the only difference from the in-memory run
    a = json.loads((out / "metrics.json").read_text())
    b = json.loads((smoke_run / "metrics.json").read_text())
    assert a.keys() == b.keys()


def test_step_by_step_commands_match_run_all(tmp_path, smoke_run):
    out = str(tmp_path)
    assert main(["train-source", "-c", SMOKE, "-o", out]) == 0
    assert main(["precompute-labels", "-c", SMOKE, "-o", out]) == 0
    assert main(["train-stage1", "-c", SMOKE, "-o", out]) == 0
    assert main(["train-stage2", "-c", SMOKE, "-o", out]) == 0
    assert main(["train-stage2", "-c", SMOKE, "-o", out, "--no-aug"]) == 0
    for f in ("source/model.ckpt", "pseudo_labels.bin", "stage1/model.ckpt", "stage2_aug/model.ckpt",
              "stage2_noaug/model.ckpt"):
        assert (tmp_path / f).read_bytes() == (smoke_run / f).read_bytes(), f
    assert (tmp_path / "metrics.md").read_text() == (smoke_run / "metrics.md").read_text()


def test_precompute_against_remote_service(tmp_path, smoke_run):
    from bbsfda.blackbox import serve_predictor, wrap_as_blackbox
    from bbsfda.models import load_checkpoint

    predictor = wrap_as_blackbox(load_checkpoint(smoke_run / "source" / "model.ckpt"))
    with serve_predictor(predictor) as service:
        host, port = service.address
        assert main(["precompute-labels", "-c", SMOKE, "-o", str(tmp_path), "--remote", f"{host}:{port}"]) == 0
    assert predictor.query_count == 8
    assert (tmp_path / "pseudo_labels.bin").read_bytes() == (smoke_run / "pseudo_labels.bin").read_bytes()


def test_resume_skips_source_training(tmp_path, smoke_run, monkeypatch):
    import shutil

    import bbsfda.experiment as experiment

    shutil.copytree(smoke_run / "source", tmp_path / "source")

    def refuse(*a, **k):
        raise AssertionError("source model retrained")

    monkeypatch.setattr(experiment, "train_source", refuse)
    assert main(["run-all", "-c", SMOKE, "-o", str(tmp_path), "--set", "stages=[stage1, stage2]"]) == 0
    assert (tmp_path / "stage1" / "model.ckpt").read_bytes() == (smoke_run / "stage1" / "model.ckpt").read_bytes()


def test_source_only_config(tmp_path):
    assert main(["train-source", "-c", SMOKE, "-o", str(tmp_path)]) == 0
    assert sorted(p.name for p in tmp_path.glob("*/model.ckpt")) == ["model.ckpt"]
    assert [p.parent.name for p in tmp_path.glob("*/report.json")] == ["source"]


def test_evaluate_writes_report(tmp_path, smoke_run):
    data = tmp_path / "data"
    assert main(["gen-data", "-c", SMOKE, "--out", str(data)]) == 0
    out = tmp_path / "eval.json"
    ckpt = smoke_run / "stage2_aug" / "model.ckpt"
    assert main(["evaluate", "--checkpoint", str(ckpt), "--data", str(data / "target" / "test"),
                 "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert len(rep["case_ids"]) == 4 and len(rep["dice"][0]) == 2 and "summary" in rep


def test_report_on_full_run(tmp_path, smoke_run, capsys):
    import shutil

    run = tmp_path / "run"
    shutil.copytree(smoke_run, run)
    assert main(["report", str(run)]) == 0
    plots = run / "plots"
    assert (plots / "loss_curves.png").exists() and (plots / "ablation_bars.png").exists()
    summary = json.loads((run / "report_summary.json").read_text())
    entry = next(iter(summary["runs"].values()))
    assert list(entry["rows"]) == ["source only", "stage I", "stage II w/o aug", "stage II w/ aug"]
    assert summary["warnings"] == []
    overlays = sorted((plots / "overlays").glob("*_stage1.png"))
    assert overlays
    for p in overlays:
        assert Image.open(p).size == (16, 16)


def test_report_partial_run_warns(tmp_path, smoke_run, capsys):
    import shutil

    run = tmp_path / "run"
    shutil.copytree(smoke_run, run)
    shutil.rmtree(run / "stage2_aug")
    with pytest.warns(UserWarning, match="missing stage outputs"):
        assert main(["report", str(run)]) == 0
    summary = json.loads((run / "report_summary.json").read_text())
    entry = next(iter(summary["runs"].values()))
    assert list(entry["rows"]) == ["source only", "stage I", "stage II w/o aug"]
    assert "warning" in capsys.readouterr().err


def test_report_empty_dir(tmp_path, capsys):
    with pytest.warns(UserWarning, match="no completed runs"):
        assert main(["report", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "report_summary.json").read_text()) == {"runs": {}, "warnings": [
        f"no completed runs under {tmp_path}"]}
