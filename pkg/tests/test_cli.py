import hashlib
import json

import numpy as np
import pytest
from PIL import Image

from attcdcnet.checkpoint import save_checkpoint
from attcdcnet.cli import main
from attcdcnet.model import build_model
from attcdcnet.training import Adam, TrainConfig, make_checkpoint

from conftest import tiny_config


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def tiny_ckpt(tmp_path):
    model = build_model(tiny_config(attention=True), seed=0)
    extra = {"class_names": ["a", "b", "c", "d"], "input_size": 32, "mean": 0.5, "std": 0.25}
    ckpt = make_checkpoint(model, Adam(model.parameters(), TrainConfig()), 1, [], TrainConfig(), extra)
    save_checkpoint(tmp_path / "tiny.ckpt", ckpt)
    img = (np.random.default_rng(0).random((40, 48)) * 255).astype(np.uint8)
    Image.fromarray(img).save(tmp_path / "img.png")
    return tmp_path / "tiny.ckpt", tmp_path / "img.png"


def test_params_counts(capsys):
    code, out, _ = run(capsys, "params", "--model", "baseline")
    assert code == 0 and out.strip().endswith("parameters: 6957956")
    assert run(capsys, "params", "--model", "baseline", "--classes", 1000)[1].strip().endswith("parameters: 7978856")
    code, out, _ = run(capsys, "params", "--json")
    rows = json.loads(out.split("\n", 1)[1].rsplit("parameters:", 1)[0])
    assert sum(r["params"] for r in rows) == 5_430_324 < 6_957_956


def test_params_rejects_bad_reduction(capsys):
    code, _, err = run(capsys, "params", "--attention-reduction", 7)
    assert code == 2 and "error" in err


def test_unknown_flag_exits_2(capsys):
    assert run(capsys, "params", "--bogus")[0] == 2


def test_synth_counts_and_determinism(capsys, tmp_path):
    code, out, _ = run(capsys, "synth", "--preset", "imbalanced", "--out", tmp_path / "a", "--seed", 4)
    assert code == 0 and "counts: 74/120/204/27" in out
    run(capsys, "synth", "--preset", "imbalanced", "--out", tmp_path / "b", "--seed", 4)
    digest = [hashlib.sha256((tmp_path / d / "manifest.csv").read_bytes()).hexdigest() for d in "ab"]
    assert digest[0] == digest[1]
    code, _, err = run(capsys, "synth", "--preset", "imbalanced", "--out", tmp_path / "a")
    assert code == 2 and "error" in err
    assert run(capsys, "synth", "--preset", "imbalanced", "--out", tmp_path / "a", "--force")[0] == 0


def test_config_file_layering(capsys, tmp_path):
    cfg = tmp_path / "params.cfg"
    cfg.write_text("# comment\nmodel = baseline\nclasses=1000\n")
    code, out, _ = run(capsys, "params", "--config", cfg)
    assert code == 0 and out.strip().endswith("parameters: 7978856")
    settings = json.loads(out.splitlines()[0].split(": ", 1)[1])
    assert settings["model"] == "baseline" and settings["classes"] == 1000
    # flags beat the file
    code, out, _ = run(capsys, "params", "--config", cfg, "--classes", 4)
    assert out.strip().endswith("parameters: 6957956")
    cfg.write_text("learning_rate = 0.1\n")
    code, _, err = run(capsys, "params", "--config", cfg)
    assert code == 2 and "learning_rate" in err
    assert run(capsys, "params", "--config", tmp_path / "nope.cfg")[0] == 2


def test_train_input_errors(capsys, tmp_path):
    assert run(capsys, "train", "--data", tmp_path / "missing", "--out", tmp_path / "o")[0] == 2
    assert run(capsys, "train", "--out", tmp_path / "o")[0] == 2
    assert run(capsys, "train", "--synth", "easy", "--fractions", "0.5,0.5", "--out", tmp_path / "o")[0] == 2


def test_evaluate_requires_arguments(capsys, tiny_ckpt, tmp_path):
    assert run(capsys, "evaluate", "--data", tmp_path)[0] == 2
    assert run(capsys, "evaluate", "--checkpoint", tmp_path / "missing.ckpt", "--data", tmp_path)[0] == 2


def test_evaluate_class_count_mismatch(capsys, tiny_ckpt, tmp_path):
    ckpt, _ = tiny_ckpt
    for cls in ("x", "y"):
        for i in range(5):
            (tmp_path / "two" / cls).mkdir(parents=True, exist_ok=True)
            Image.fromarray(np.full((8, 8), i * 20, np.uint8)).save(tmp_path / "two" / cls / f"{i}.png")
    code, _, err = run(capsys, "evaluate", "--checkpoint", ckpt, "--data", tmp_path / "two")
    assert code == 2 and "classes" in err


def test_gradcam_predicted_matches_explicit(capsys, tiny_ckpt, tmp_path):
    ckpt, img = tiny_ckpt
    code, out, _ = run(capsys, "gradcam", "--checkpoint", ckpt, "--image", img, "--out", tmp_path / "p.png",
                       "--heatmap-csv", tmp_path / "h.csv")
    assert code == 0
    predicted = int(out.split("predicted class ")[1].split()[0])
    run(capsys, "gradcam", "--checkpoint", ckpt, "--image", img, "--class", predicted, "--out", tmp_path / "e.png")
    assert (tmp_path / "p.png").read_bytes() == (tmp_path / "e.png").read_bytes()
    with Image.open(tmp_path / "p.png") as im:
        assert im.size == (48, 40)
    assert len((tmp_path / "h.csv").read_text().splitlines()) == 32


def test_gradcam_errors(capsys, tiny_ckpt, tmp_path):
    ckpt, img = tiny_ckpt
    base = ("gradcam", "--checkpoint", ckpt, "--image", img)
    assert run(capsys, *base, "--class", 4, "--out", tmp_path / "o.png")[0] == 2
    assert run(capsys, *base, "--class", "most", "--out", tmp_path / "o.png")[0] == 2
    assert run(capsys, *base, "--out", tmp_path / "no_dir" / "o.png")[0] == 2
    assert run(capsys, *base, "--layer", "nowhere", "--out", tmp_path / "o.png")[0] == 2
    assert not (tmp_path / "o.png").exists()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_failure_exits_3(capsys, tmp_path):
    code, _, err = run(capsys, "train", "--synth", "easy", "--input-size", 32, "--epochs", 1, "--lr", 1e30,
                       "--out", tmp_path / "run")
    assert code == 3 and "batch index" in err
