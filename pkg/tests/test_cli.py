import json
import shutil

import numpy as np
import pytest
import yaml
from PIL import Image

from histomorph import cli
from histomorph.checkpoint import load_checkpoint
from histomorph.config import ConfigError, build_config, load_config


@pytest.fixture(scope="module")
def trained(workspace):
    """One end-to-end tiny training run through the CLI."""
    rc = cli.main(["train", "--config", str(workspace / "config.yaml"), "--output-dir", "cli_run"])
    assert rc == 0
    return workspace / "cli_run"


# -- config --------------------------------------------------------------------

def test_config_defaults_and_env_override(tmp_path):
    (tmp_path / "c.yaml").write_text("preset: tiny\nseed: 3\ntraining:\n  lr: 1.0e-3\n")
    cfg = load_config(tmp_path / "c.yaml", env={"HISTOMORPH_SEED": "9", "HISTOMORPH_TRAINING__PATIENCE": "2"})
    assert cfg.seed == 9 and cfg.training.patience == 2 and cfg.training.lr == 1e-3
    assert cfg.training.finetune_lr == 2e-5 and cfg.training.max_epochs == 100


def test_config_accepts_exponent_without_dot(tmp_path):
    (tmp_path / "c.yaml").write_text("training:\n  lr: 1e-4\n")
    assert load_config(tmp_path / "c.yaml", env={}).training.lr == 1e-4


def test_unknown_key_reports_line(tmp_path):
    (tmp_path / "c.yaml").write_text("preset: tiny\ntraining:\n  lr: 0.001\n  momentum: 0.9\n")
    with pytest.raises(ConfigError, match=r"line 4: training\.momentum: unknown key"):
        load_config(tmp_path / "c.yaml", env={})


def test_bad_augmentation_range_names_field(tmp_path):
    (tmp_path / "c.yaml").write_text("augmentation:\n  mode: extreme\n  hue_frac: 0.5\n")
    with pytest.raises(ConfigError, match=r"line 3: augmentation\.hue_frac"):
        load_config(tmp_path / "c.yaml", env={})


def test_type_errors_reported():
    with pytest.raises(ConfigError, match="seed"):
        build_config({"seed": "abc"}, env={})
    with pytest.raises(ConfigError, match="crop_size"):
        build_config({"training": {"crop_size": 100}}, env={})


def test_classification_plan_needs_segnet_checkpoint():
    with pytest.raises(ConfigError, match="segnet_checkpoint"):
        build_config({"plan": "classification"}, env={})


# -- commands ----------------------------------------------------------------------

def test_train_outputs(trained):
    for name in ("final.pt", "run.json", "metrics.jsonl", "training_curves.png"):
        assert (trained / name).exists(), name
    run = json.loads((trained / "run.json").read_text())
    assert [p["name"] for p in run["plans"]] == ["segmentation", "classification"]
    ck = load_checkpoint(trained / "final.pt")
    assert {"segnet_provider", "clsnet"} <= set(ck.states) and ck.extra["categories"]


def test_train_refuses_existing_output(trained, workspace, capsys):
    rc = cli.main(["train", "--config", str(workspace / "config.yaml"), "--output-dir", "cli_run"])
    assert rc == 1
    assert "--resume or --force" in capsys.readouterr().err


def test_train_resume_reuses_stages(trained, workspace):
    before = load_checkpoint(trained / "final.pt").weights_fingerprint
    rc = cli.main(["train", "--config", str(workspace / "config.yaml"), "--output-dir", "cli_run", "--resume"])
    assert rc == 0
    assert load_checkpoint(trained / "final.pt").weights_fingerprint == before


def test_train_invalid_augmentation_exits_1(workspace, tmp_path, capsys):
    cfg = yaml.safe_load((workspace / "config.yaml").read_text())
    cfg["augmentation"] = {"mode": "extreme", "rotation_deg": 720}
    cfg["manifests"] = {k: str(workspace / v) for k, v in cfg["manifests"].items()}
    (tmp_path / "bad.yaml").write_text(yaml.safe_dump(cfg))
    assert cli.main(["train", "--config", str(tmp_path / "bad.yaml")]) == 1
    assert "rotation_deg" in capsys.readouterr().err


def test_usage_error_exits_1():
    assert cli.main(["train"]) == 1
    assert cli.main(["evaluate", "--checkpoint", "x.pt", "--manifest", "m.json", "--task", "bogus"]) == 1


def test_internal_error_exits_2(monkeypatch, workspace):
    def boom(*a, **kw):
        raise RuntimeError("bug")

    monkeypatch.setattr(cli, "load_manifest", boom)
    assert cli.main(["extract-features", "--checkpoint", "x.pt", "--manifest", "m.json", "--out", "f.npz"]) == 2


def test_evaluate_report_carries_checkpoint_fingerprint(trained, workspace, tmp_path):
    rc = cli.main(["evaluate", "--checkpoint", str(trained / "final.pt"), "--task", "classification",
                   "--manifest", str(workspace / "classification_val" / "manifest.json"), "--out", str(tmp_path)])
    assert rc == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["config_fingerprint"] == load_checkpoint(trained / "final.pt").fingerprint
    assert (tmp_path / "confusion.png").exists()
    text = (tmp_path / "report.txt").read_text()
    assert "balanced_accuracy\t" in text


def test_evaluate_segmentation_report(trained, workspace, tmp_path):
    rc = cli.main(["evaluate", "--checkpoint", str(trained / "final.pt"), "--task", "segmentation",
                   "--manifest", str(workspace / "segmentation_val" / "manifest.json"), "--out", str(tmp_path)])
    assert rc == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert {"dice", "binary_pq", "multi_pq"} <= set(report["metrics"])
    assert (tmp_path / "per_class_pq.png").exists()


def test_evaluate_category_mismatch(trained, tmp_path):
    from histomorph.synthetic import write_classification_dataset

    write_classification_dataset(tmp_path / "six", n=6, categories=6)
    rc = cli.main(["evaluate", "--checkpoint", str(trained / "final.pt"), "--task", "classification",
                   "--manifest", str(tmp_path / "six" / "manifest.json")])
    assert rc == 1


def test_infer_batch_continues_past_bad_file(trained, workspace, tmp_path, capsys):
    good = workspace / "classification" / "img_0000.png"
    (tmp_path / "broken.png").write_bytes(b"not an image")
    rc = cli.main(["infer", "--checkpoint", str(trained / "final.pt"), str(tmp_path / "broken.png"), str(good),
                   "--out", str(tmp_path / "o"), "--overlays"])
    assert rc == 1
    recs = [json.loads(l) for l in (tmp_path / "o" / "predictions.jsonl").read_text().splitlines()]
    assert "error" in recs[0] and "category" in recs[1] and not recs[1]["padded"]
    assert (tmp_path / "o" / "img_0000_overlay.png").exists()


def test_infer_arbitrary_size_flag(trained, tmp_path):
    Image.fromarray(np.full((50, 70, 3), 180, np.uint8)).save(tmp_path / "odd.png")
    args = ["infer", "--checkpoint", str(trained / "final.pt"), str(tmp_path / "odd.png")]
    assert cli.main(args) == 1
    assert cli.main(args + ["--arbitrary-size"]) == 0


def test_extract_features_then_fit_linear(trained, workspace, tmp_path, capsys):
    out = tmp_path / "f.npz"
    assert cli.main(["extract-features", "--checkpoint", str(trained / "final.pt"),
                     "--manifest", str(workspace / "classification" / "manifest.json"), "--out", str(out)]) == 0
    with np.load(out) as z:
        assert z["features"].shape == (8, 160)
        assert z["ids"][0] == "img_0000.png"
    test = tmp_path / "t.npz"
    cli.main(["extract-features", "--checkpoint", str(trained / "final.pt"),
              "--manifest", str(workspace / "classification_val" / "manifest.json"), "--out", str(test)])
    capsys.readouterr()
    assert cli.main(["fit-linear", "--train", str(out), "--test", str(test), "--out", str(tmp_path / "lin")]) == 0
    assert capsys.readouterr().out.startswith("metric\tvalue")
    assert (tmp_path / "lin" / "linear_protocol.json").exists()


def test_harmonize_and_preview_commands(tmp_path):
    from histomorph.synthetic import write_raw_dataset

    write_raw_dataset(tmp_path / "raw", n=2, size=64)
    assert cli.main(["harmonize", "--manifest", str(tmp_path / "raw" / "manifest.json"),
                     "--out", str(tmp_path / "h")]) == 0
    png = next((tmp_path / "h").glob("*.png"))
    assert cli.main(["augment-preview", "--in", str(png), "--n", "4", "--out", str(tmp_path / "p")]) == 0
    assert (tmp_path / "p" / "augment_preview.png").exists()
    assert cli.main(["harmonize", "--manifest", str(tmp_path / "nope.json"), "--out", str(tmp_path / "x")]) == 1


def test_force_clears_previous_run(workspace, tmp_path):
    shutil.copy(workspace / "config.yaml", tmp_path / "config.yaml")
    cfg = yaml.safe_load((tmp_path / "config.yaml").read_text())
    cfg["manifests"] = {k: str(workspace / v) for k, v in cfg["manifests"].items()}
    cfg["plan"] = "segmentation"
    (tmp_path / "config.yaml").write_text(yaml.safe_dump(cfg))
    (tmp_path / "run").mkdir()
    (tmp_path / "run" / "keep.txt").write_text("user data")
    args = ["train", "--config", str(tmp_path / "config.yaml"), "--force"]
    assert cli.main(args) == 1  # not a histomorph run: left alone
    assert (tmp_path / "run" / "keep.txt").exists()
    (tmp_path / "run" / "keep.txt").unlink()
    assert cli.main(args[:-1]) == 0
    assert cli.main(args) == 0
