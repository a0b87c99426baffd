import json

import pytest

from dcq.cli import main
from dcq.field import load_manifest


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One CLI run of the whole flow at tiny scale, reused across tests."""
    root = tmp_path_factory.mktemp("cliws")
    d = root / "data"
    assert main(["gen-synthetic", "--dims", "24,24,24", "--timesteps", "4",
                 "--seed", "7", "--outdir", str(d)]) == 0
    assert main(["label", "--manifest", str(d / "manifest.json"), "--eb-points", "5",
                 "--blocks-per-volume", "3", "--block-dims", "12,12,12",
                 "--seed", "7", "--outdir", str(root / "labels"), "--workers", "1"]) == 0
    assert main(["train-backbone", "--labels", str(root / "labels" / "labels.csv"),
                 "--manifest", str(d / "manifest.json"), "--epochs", "4",
                 "--seed", "7", "--outdir", str(root / "bb")]) == 0
    assert main(["train-head", "--model", str(root / "bb" / "model.dcqm"),
                 "--labels", str(root / "labels" / "labels.csv"),
                 "--manifest", str(d / "manifest.json"), "--codec", "pred-eb",
                 "--metric", "cr", "--epochs", "4", "--seed", "7",
                 "--outdir", str(root / "head")]) == 0
    model = root / "bb" / "model.dcqm"
    for codec in ("pred-eb", "xform-eb"):
        for metric in ("cr", "psnr", "ssim"):
            assert main(["train-head", "--model", str(model), "--labels",
                         str(root / "labels" / "labels.csv"),
                         "--manifest", str(d / "manifest.json"),
                         "--codec", codec, "--metric", metric, "--epochs", "2",
                         "--seed", "7", "--outdir", str(root / "multi")]) == 0
            model = root / "multi" / "model.dcqm"
    return root


def test_gen_synthetic_outputs(workspace):
    d = workspace / "data"
    manifest = load_manifest(d / "manifest.json")
    assert manifest.field_names() == ["field0"]
    assert manifest.timesteps("field0") == [0, 1, 2, 3]
    for ts in range(4):
        path = manifest.volume_path("field0", ts)
        assert path.exists()
        assert path.stat().st_size == 4 * 24**3
    assert (d / "config.json").exists()


def test_gen_synthetic_deterministic(tmp_path):
    for sub in ("a", "b"):
        assert main(["gen-synthetic", "--dims", "12,12,12", "--timesteps", "2",
                     "--seed", "3", "--outdir", str(tmp_path / sub)]) == 0
    va = (tmp_path / "a" / "field0_t1.f32").read_bytes()
    vb = (tmp_path / "b" / "field0_t1.f32").read_bytes()
    assert va == vb


def test_label_outputs(workspace):
    lines = (workspace / "labels" / "labels.csv").read_text().splitlines()
    assert lines[0].startswith("field,timestep,block_id,codec")
    assert len(lines) == 1 + 4 * 3 * 2 * 5
    prov = json.loads((workspace / "labels" / "labels.provenance.json").read_text())
    assert prov["seed"] == 7 and prov["blocks_per_volume"] == 3


def test_config_echo_roundtrip(workspace, tmp_path):
    # re-running from the echoed config reproduces identical label bytes
    echoed = workspace / "labels" / "config.json"
    cfg = json.loads(echoed.read_text())
    assert cfg["subcommand"] == "label" and cfg["seed"] == 7
    assert main(["label", "--config", str(echoed), "--outdir", str(tmp_path)]) == 0
    assert (tmp_path / "labels.csv").read_bytes() == (workspace / "labels" / "labels.csv").read_bytes()


def test_predict_json(workspace, capsys):
    rc = main(["predict", "--model", str(workspace / "head" / "model.dcqm"),
               "--codec", "pred-eb", "--metric", "cr", "--eb", "1e-3",
               "--input", str(workspace / "data" / "field0_t0.f32"),
               "--dims", "24,24,24", "--block-dims", "12,12,12",
               "--blocks", "4", "--seed", "5"])
    assert rc == 0
    doc = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert doc["codec"] == "pred-eb" and doc["metric"] == "cr"
    assert doc["prediction"] > 0


def test_predict_deterministic(workspace, capsys):
    args = ["predict", "--model", str(workspace / "head" / "model.dcqm"),
            "--codec", "pred-eb", "--metric", "cr", "--eb", "2e-3",
            "--input", str(workspace / "data" / "field0_t1.f32"),
            "--dims", "24,24,24", "--block-dims", "12,12,12", "--blocks", "4",
            "--seed", "5"]
    assert main(args) == 0
    first = capsys.readouterr().out
    assert main(args) == 0
    second = capsys.readouterr().out
    assert first == second


def test_eval_and_plotdata(workspace, tmp_path):
    model = workspace / "multi" / "model.dcqm"
    out = tmp_path / "eval"
    assert main(["eval", "--model", str(model),
                 "--labels", str(workspace / "labels" / "labels.csv"),
                 "--manifest", str(workspace / "data" / "manifest.json"),
                 "--outdir", str(out), "--seed", "7"]) == 0
    report = json.loads((out / "report.json").read_text())
    assert len(report["mape"]) == 6
    curves = sorted(out.glob("pred_*.csv"))
    assert len(curves) == 6  # 2 codecs x 3 metrics x 1 field
    for path in curves:
        lines = path.read_text().splitlines()
        assert lines[0] == "eb_rel,ground_truth,prediction,pe"
        assert len(lines) >= 2
        for line in lines[1:]:
            for cell in line.split(","):
                if cell:
                    float(cell)  # parses as a finite number


def test_eval_rerun_identical(workspace, tmp_path):
    model = workspace / "multi" / "model.dcqm"
    outs = []
    for sub in ("e1", "e2"):
        out = tmp_path / sub
        assert main(["eval", "--model", str(model),
                     "--labels", str(workspace / "labels" / "labels.csv"),
                     "--manifest", str(workspace / "data" / "manifest.json"),
                     "--outdir", str(out), "--seed", "7"]) == 0
        outs.append((out / "report.json").read_bytes())
    assert outs[0] == outs[1]


def test_time_sweep_cli(workspace, tmp_path):
    out = tmp_path / "ts"
    assert main(["time-sweep", "--model", str(workspace / "multi" / "model.dcqm"),
                 "--manifest", str(workspace / "data" / "manifest.json"),
                 "--codec", "pred-eb", "--metric", "cr", "--eb-points", "3",
                 "--k-blocks", "3", "--block-dims", "12,12,12",
                 "--repetitions", "2", "--seed", "7", "--outdir", str(out)]) == 0
    files = sorted(out.glob("timing_rep*.csv"))
    assert len(files) == 2
    summary = json.loads((out / "timing_summary.json").read_text())
    assert len(summary["gt_per_eb_s"]) == 2
    lines = files[0].read_text().splitlines()
    assert "nondeterministic" in lines[0]
    assert len(lines) == 2 + 3


def test_ablate_moe_cli(workspace, tmp_path):
    out = tmp_path / "ab"
    assert main(["ablate-moe", "--model", str(workspace / "bb" / "model.dcqm"),
                 "--labels", str(workspace / "labels" / "labels.csv"),
                 "--manifest", str(workspace / "data" / "manifest.json"),
                 "--epochs", "2", "--seed", "7", "--outdir", str(out)]) == 0
    lines = (out / "ablation_moe.csv").read_text().splitlines()
    assert lines[0] == "codec,metric,field,B,M"
    assert len(lines) == 1 + 6


def test_inspect_model(workspace, capsys):
    assert main(["inspect-model", "--model", str(workspace / "head" / "model.dcqm")]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["backbone"]["parameters"] > 0
    assert doc["heads"][0]["codec"] == "pred-eb"


def test_usage_errors_exit_2(capsys):
    assert main(["no-such-command"]) == 2
    assert main(["label", "--no-such-flag", "1"]) == 2
    capsys.readouterr()


def test_domain_errors_exit_1(tmp_path, capsys):
    rc = main(["label", "--manifest", str(tmp_path / "missing.json"),
               "--outdir", str(tmp_path)])
    assert rc == 1
    err = capsys.readouterr().err
    assert err.startswith("error:")


def test_missing_required_flag(tmp_path, capsys):
    rc = main(["label", "--outdir", str(tmp_path)])
    assert rc == 1
    assert "error:argument" in capsys.readouterr().err


def test_env_seed_fallback(workspace, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("DCQ_SEED", "7")
    assert main(["gen-synthetic", "--dims", "12,12,12", "--timesteps", "1",
                 "--outdir", str(tmp_path / "env")]) == 0
    cfg = json.loads((tmp_path / "env" / "config.json").read_text())
    assert cfg["seed"] == 7


def test_help_lists_flags(capsys):
    assert main(["label", "--help"]) == 0
    out = capsys.readouterr().out
    for flag in ("--seed", "--outdir", "--eb-preset", "--block-dims", "--workers"):
        assert flag in out
