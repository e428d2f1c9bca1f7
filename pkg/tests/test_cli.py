import csv

import numpy as np
import pytest

from structaug.cli import main, parse_args
from structaug.geoflow import load_flow
from structaug.pipeline import ConfigError
from structaug.tensor_core import Image, load_image, read_tensor, save_image, write_tensor


@pytest.fixture(scope="module")
def demo(tmp_path_factory):
    root = tmp_path_factory.mktemp("demo")
    code = main(["demo-train", "--out", str(root / "ckpt"), "--count", "300", "--epochs", "150",
                 "--export-samples", "8"])
    assert code == 0
    return root / "ckpt"


def read_log(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_demo_train_writes_checkpoint_and_samples(demo):
    assert (demo / "manifest.json").exists() and (demo / "W.saug").exists()
    samples = sorted((demo / "samples").glob("*.png"))
    assert len(samples) == 8
    assert len(read_log(demo / "samples" / "labels.csv")) == 8


@pytest.mark.parametrize("transform", ["flow", "recolor"])
def test_augment_with_classifier(demo, tmp_path, transform, capsys):
    out = tmp_path / "out"
    code = main(["augment", transform, "--in", str(demo / "samples"), "--out", str(out),
                 "--grad", f"tiny:{demo}", "--labels", str(demo / "samples" / "labels.csv"),
                 "--prob", "1", "--save-flow"])
    assert code == 0
    rows = read_log(out / "augment_log.csv")
    assert len(rows) == 8 and all(r["applied"] == "1" for r in rows)
    changed = sum(load_image(out / r["name"]) != load_image(demo / "samples" / r["name"]) for r in rows)
    assert changed == 8
    flows = list(out.glob("*.flow.saug"))
    assert len(flows) == (8 if transform == "flow" else 0)
    assert "8/8 images augmented" in capsys.readouterr().out


def test_pass_through_is_byte_identical(demo, tmp_path):
    out = tmp_path / "out"
    assert main(["augment", "flow", "--in", str(demo / "samples"), "--out", str(out),
                 "--grad", f"tiny:{demo}", "--prob", "0"]) == 0
    for src in (demo / "samples").glob("*.png"):
        assert (out / src.name).read_bytes() == src.read_bytes()


def test_trajectory_export(demo, tmp_path):
    out = tmp_path / "out"
    assert main(["augment", "flow", "--in", str(demo / "samples"), "--out", str(out),
                 "--grad", f"tiny:{demo}", "--prob", "1", "--iterations", "3", "--cap", "1"]) == 0
    stem = "sample0000"
    frames = sorted(out.glob(f"{stem}_step*.png"))
    assert len(frames) == 4
    assert frames[-1].read_bytes() == (out / f"{stem}.png").read_bytes()
    rows = read_log(out / f"{stem}_trajectory.csv")
    assert [int(r["step"]) for r in rows] == [0, 1, 2, 3]
    assert float(rows[-1]["loss"]) > float(rows[0]["loss"])


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# flow settings\nalpha = 0.5\ngamma=2\nin=/data/x\nout=/data/y\nlambda=3\n")
    args = parse_args(["augment", "flow", "--config", str(cfg), "--gamma", "4"])
    assert args.alpha == 0.5 and args.gamma == 4.0 and args.lam == 3.0
    assert args.input == "/data/x" and args.output == "/data/y"


def test_config_errors_exit_2(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("colour=blue\n")
    assert main(["augment", "flow", "--config", str(cfg), "--in", "a", "--out", "b"]) == 2
    cfg.write_text("alpha\n")
    assert main(["augment", "flow", "--config", str(cfg), "--in", "a", "--out", "b"]) == 2
    cfg.write_text("flow_mode=sideways\n")
    assert main(["augment", "flow", "--config", str(cfg), "--in", "a", "--out", "b"]) == 2
    with pytest.raises(ConfigError):
        parse_args(["augment", "flow", "--config", str(tmp_path / "bad.cfg")])
    assert "config error" in capsys.readouterr().err


def test_invalid_parameters_exit_2(demo, tmp_path):
    base = ["augment", "flow", "--in", str(demo / "samples"), "--out", str(tmp_path / "o")]
    assert main(base + ["--alpha", "-1"]) == 2
    assert main(base + ["--prob", "2"]) == 2
    assert main(base + ["--grad", "oracle:x"]) == 2
    assert main(["augment", "flow"]) == 2


def test_missing_inputs_exit_4(tmp_path):
    assert main(["augment", "flow", "--in", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 4
    assert main(["eigen", str(tmp_path / "nope.png")]) == 4
    assert main(["augment", "flow", "--config", str(tmp_path / "nope.cfg"), "--in", "a", "--out", "b"]) == 4


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_training_failure_exits_3(tmp_path):
    code = main(["demo-train", "--out", str(tmp_path / "c"), "--count", "30", "--epochs", "20",
                 "--lr", "1e308", "--hidden", "0"])
    assert code == 3


def test_file_gradients(demo, tmp_path):
    grads = tmp_path / "grads"
    grads.mkdir()
    for p in (demo / "samples").glob("*.png"):
        write_tensor(grads / f"{p.stem}.saug", np.full(load_image(p).data.shape, 1.0, np.float32))
    out = tmp_path / "out"
    assert main(["augment", "recolor", "--in", str(demo / "samples"), "--out", str(out),
                 "--grad", f"files:{grads}", "--prob", "1"]) == 0
    (grads / "sample0003.saug").unlink()
    assert main(["augment", "recolor", "--in", str(demo / "samples"), "--out", str(tmp_path / "o2"),
                 "--grad", f"files:{grads}", "--prob", "1"]) == 4


def test_eigen_and_precompute(demo, tmp_path, capsys):
    img = demo / "samples" / "sample0000.png"
    out = tmp_path / "eig"
    assert main(["eigen", str(img), "--k", "3", "--out", str(out)]) == 0
    values = np.loadtxt(out / "eigenvalues.txt")
    assert values.shape == (3,) and np.all(np.diff(values) >= 0)
    assert read_tensor(out / "eigvec00.saug").shape == (3, 8, 8)

    cache = tmp_path / "cache"
    assert main(["precompute", "flow", "--cache", str(cache), "--dims", "8x8", "--dims", "4x6"]) == 0
    assert "2 new, 0 existing" in capsys.readouterr().out
    assert main(["precompute", "flow", "--cache", str(cache), "--in", str(demo / "samples")]) == 0
    assert "0 new, 1 existing" in capsys.readouterr().out
    assert main(["precompute", "recolor", "--cache", str(cache), "--in", str(demo / "samples")]) == 0
    assert "8 new" in capsys.readouterr().out
    assert main(["precompute", "flow", "--cache", str(cache), "--dims", "8by8"]) == 2
    assert main(["precompute", "flow", "--dims", "8x8"]) == 2


def test_overlay(demo, tmp_path):
    out = tmp_path / "out"
    assert main(["augment", "flow", "--in", str(demo / "samples"), "--out", str(out),
                 "--grad", f"tiny:{demo}", "--prob", "1", "--save-flow"]) == 0
    flow = out / "sample0001.flow.saug"
    assert load_flow(flow).shape == (8, 8)
    png = tmp_path / "ov.png"
    assert main(["overlay", str(demo / "samples" / "sample0001.png"), str(flow), "--out", str(png)]) == 0
    assert png.exists() and png.stat().st_size > 0
    other = tmp_path / "small.png"
    save_image(Image(np.zeros((3, 4, 4))), other)
    assert main(["overlay", str(other), str(flow)]) == 2
