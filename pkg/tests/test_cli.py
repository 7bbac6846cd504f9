import hashlib
import json
import shutil
from pathlib import Path

import numpy as np
import pytest
import torch
import yaml

from msfiqa.checkpoint import save_checkpoint
from msfiqa.cli import main
from msfiqa.data import read_image
from msfiqa.inference import TTAPlan, predict_image
from msfiqa.metrics import read_report
from msfiqa.model import MultiStageIQA

from conftest import small_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def tree_digest(root: Path) -> dict:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "synth"
    assert main(["synth", str(CONFIGS / "synth_fixture.yaml"), "--out", str(out)]) == 0
    return out


def train_args(out, *extra):
    return ["train", str(CONFIGS / "train_fixture.yaml"), "--manifest", str(out.parent / "synth" / "manifest.csv"),
            "--output-dir", str(out), *extra]


# -- synth -------------------------------------------------------------------

def test_synth_fixture_count(synth_dir, capsys):
    rows = (synth_dir / "manifest.csv").read_text().splitlines()
    assert len(rows) - 1 == 2 * 2 * 3
    assert (synth_dir / "mos_hist.png").exists()


def test_synth_rerun_identical(synth_dir, tmp_path):
    again = tmp_path / "synth"
    assert main(["synth", str(CONFIGS / "synth_fixture.yaml"), "--out", str(again)]) == 0
    assert tree_digest(again) == tree_digest(synth_dir)


def test_synth_missing_spec(tmp_path, caplog):
    missing = tmp_path / "nope.yaml"
    assert main(["synth", str(missing)]) == 1
    assert str(missing) in caplog.text


def test_synth_bad_spec_key(tmp_path):
    (tmp_path / "s.yaml").write_text("n_references: 2\nflavour: 1\n")
    assert main(["synth", str(tmp_path / "s.yaml"), "--out", str(tmp_path / "o")]) == 1


def test_usage_errors_exit_one(capsys):
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 1
    with pytest.raises(SystemExit) as e:
        main(["--help"])
    assert e.value.code == 0


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv("MSFIQA_OUTPUT_ROOT", str(tmp_path / "root"))
    spec = tmp_path / "tiny.yaml"
    shutil.copy(CONFIGS / "synth_fixture.yaml", spec)
    assert main(["synth", str(spec)]) == 0
    assert (tmp_path / "root" / "tiny" / "manifest.csv").exists()


# -- train -------------------------------------------------------------------

def test_train_smoke(synth_dir, capsys):
    out = synth_dir.parent / "train"
    assert main(train_args(out)) == 0
    for name in ("best.ckpt", "last.ckpt", "history.jsonl", "config.yaml", "training_curves.png"):
        assert (out / name).exists(), name
    records = [json.loads(x) for x in (out / "history.jsonl").read_text().splitlines()]
    assert len(records) == 3
    for r in records:
        assert abs(r["total"] - (r["reg"] + r["rank"])) <= 1e-12
    resolved = yaml.safe_load((out / "config.yaml").read_text())
    assert resolved["train"]["total_epochs"] == 3 and resolved["model"]["input_height"] == 32


def test_train_rerun_byte_identical(synth_dir, tmp_path):
    out = synth_dir.parent / "rerun"
    assert main(train_args(out)) == 0
    first = tree_digest(out)
    assert main(train_args(out)) == 0
    assert tree_digest(out) == first


def test_train_invalid_key_fails_before_training(tmp_path, synth_dir):
    cfg = yaml.safe_load((CONFIGS / "train_fixture.yaml").read_text())
    cfg["train"]["learning_rate"] = 0.1
    (tmp_path / "bad.yaml").write_text(yaml.safe_dump(cfg))
    out = tmp_path / "never"
    assert main(["train", str(tmp_path / "bad.yaml"), "--output-dir", str(out)]) == 1
    assert not out.exists()


def test_train_flag_overrides_config(synth_dir):
    out = synth_dir.parent / "override"
    assert main(train_args(out, "--epochs", "2", "--seed", "5")) == 0
    resolved = yaml.safe_load((out / "config.yaml").read_text())
    assert resolved["train"]["total_epochs"] == 2 and resolved["seed"] == 5
    assert len((out / "history.jsonl").read_text().splitlines()) == 2


def test_train_resume(synth_dir):
    full = synth_dir.parent / "full"
    part = synth_dir.parent / "part"
    assert main(train_args(full)) == 0
    assert main(train_args(part, "--stop-after-epoch", "1")) == 0
    assert len((part / "history.jsonl").read_text().splitlines()) == 1
    assert main(train_args(part, "--resume")) == 0
    assert (part / "history.jsonl").read_bytes() == (full / "history.jsonl").read_bytes()
    assert (part / "last.ckpt").read_bytes() == (full / "last.ckpt").read_bytes()


def test_train_missing_manifest_is_runtime_error(tmp_path):
    out = tmp_path / "o"
    assert main(["train", str(CONFIGS / "train_fixture.yaml"), "--manifest", str(tmp_path / "none.csv"),
                 "--output-dir", str(out)]) == 2


# -- eval --------------------------------------------------------------------

@pytest.fixture(scope="module")
def oracle_stub(synth_dir):
    """Checkpoint plus a manifest whose labels are exactly that model's center-crop predictions."""
    torch.manual_seed(0)
    model = MultiStageIQA(small_config()).double()
    ck = synth_dir.parent / "stub.ckpt"
    save_checkpoint(ck, model)
    plan = TTAPlan("center", (32, 32), resize_to=(32, 32))
    rows = ["path,mos"]
    for p in sorted((synth_dir / "images").glob("*.png")):
        rows.append(f"{p},{predict_image(model, read_image(p), plan)!r}")
    manifest = synth_dir.parent / "stub.csv"
    manifest.write_text("\n".join(rows) + "\n")
    return ck, manifest


def test_eval_oracle_stub(oracle_stub, tmp_path, capsys):
    ck, manifest = oracle_stub
    assert main(["eval", str(ck), str(manifest), "--center", "--resize", "32", "--out", str(tmp_path)]) == 0
    rep = read_report(tmp_path / "report.txt")
    assert float(rep["srcc"]) == 1.0
    assert float(rep["plcc"]) == pytest.approx(1.0, abs=1e-12)
    assert float(rep["main_score"]) == float(rep["srcc"]) + float(rep["plcc"])
    assert len((tmp_path / "scatter.csv").read_text().splitlines()) == 13
    assert (tmp_path / "scatter.png").exists()
    assert "main_score" in capsys.readouterr().out


def test_eval_tta_flags_change_plan(oracle_stub, tmp_path, caplog):
    ck, manifest = oracle_stub
    assert main(["eval", str(ck), str(manifest), "--resize", "40", "--out", str(tmp_path / "five")]) == 0
    assert main(["eval", str(ck), str(manifest), "--center", "--resize", "40", "--out", str(tmp_path / "one")]) == 0
    five = read_report(tmp_path / "five" / "report.txt")["setting.tta"]
    one = read_report(tmp_path / "one" / "report.txt")["setting.tta"]
    assert "five_crop" in five and "center" in one
    assert five in caplog.text and one in caplog.text


def test_eval_rerun_identical(oracle_stub, tmp_path):
    ck, manifest = oracle_stub
    for d in ("a", "b"):
        assert main(["eval", str(ck), str(manifest), "--resize", "40", "--out", str(tmp_path / d)]) == 0
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")


def test_eval_flags_undecodable(oracle_stub, tmp_path):
    ck, manifest = oracle_stub
    broken = tmp_path / "broken.png"
    broken.write_bytes(b"not a png")
    m = tmp_path / "m.csv"
    m.write_text(manifest.read_text() + f"{broken},0.5\n")
    assert main(["eval", str(ck), str(m), "--center", "--resize", "32", "--out", str(tmp_path / "o")]) == 0
    text = (tmp_path / "o" / "report.txt").read_text()
    assert text.startswith("# WARNING") and "broken.png" in text


def test_eval_missing_checkpoint(tmp_path, oracle_stub):
    assert main(["eval", str(tmp_path / "x.ckpt"), str(oracle_stub[1])]) == 2


# -- predict -----------------------------------------------------------------

def test_predict_single_and_ensemble(oracle_stub, synth_dir, tmp_path):
    ck, _ = oracle_stub
    img = str(sorted((synth_dir / "images").glob("*.png"))[0])
    out = tmp_path / "single.csv"
    assert main(["predict", img, "--checkpoint", str(ck), "--resize", "40", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "image_path,score" and len(lines) == 2
    (tmp_path / "ens.yaml").write_text(yaml.safe_dump(
        {"crop_size": [32, 32], "strategy": "five_crop", "members": [{"checkpoint": str(ck), "resize_to": [40, 40]}]}))
    ens = tmp_path / "ens.csv"
    assert main(["predict", img, "--ensemble", str(tmp_path / "ens.yaml"), "--out", str(ens)]) == 0
    assert ens.read_bytes() == out.read_bytes()


def test_predict_deterministic_random_crops(oracle_stub, synth_dir, tmp_path):
    ck, _ = oracle_stub
    imgs = [str(p) for p in sorted((synth_dir / "images").glob("*.png"))[:3]]
    outs = []
    for name, seed in (("a", "7"), ("b", "7"), ("c", "8")):
        out = tmp_path / f"{name}.csv"
        assert main(["predict", *imgs, "--checkpoint", str(ck), "--tta", "random_crops", "--n-crops", "4",
                     "--resize", "40", "--seed", seed, "--out", str(out)]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1] and outs[0] != outs[2]


def test_predict_argument_errors(oracle_stub, tmp_path):
    ck, _ = oracle_stub
    assert main(["predict", "x.png"]) == 1
    assert main(["predict", "--checkpoint", str(ck)]) == 1
    (tmp_path / "bad.yaml").write_text("members: []\n")
    assert main(["predict", "x.png", "--ensemble", str(tmp_path / "bad.yaml")]) == 1
