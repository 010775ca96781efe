import numpy as np
import pytest

import fireyolo.cli as cli
from fireyolo.checkpoint import save_model
from fireyolo.cli import (
    EXIT_DIVERGED,
    EXIT_FINDINGS,
    EXIT_OK,
    EXIT_USAGE,
    UsageError,
    main,
    parse_args,
    read_config_file,
)
from fireyolo.detector import ModelConfig, build_model
from fireyolo.imageio import write_ppm
from fireyolo.training import DivergenceError


def resolved(out, command):
    lines = (out / f"{command}.resolved.txt").read_text().splitlines()
    return dict(line.split(" = ", 1) if " = " in line else (line.rstrip(" ="), "") for line in lines)


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("ck") / "tiny.ckpt"
    save_model(build_model(ModelConfig.preset("n", input_size=64), seed=0), path)
    return path


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    assert main(["dataset", "synth", "--count", "6", "--size", "64", "--out", str(root), "--quiet"]) == EXIT_OK
    return root


def test_version_and_help(capsys):
    assert main(["--version"]) == EXIT_OK
    assert "fireyolo" in capsys.readouterr().out
    assert main([]) == EXIT_USAGE
    assert main(["train", "--bogus"]) == EXIT_USAGE


def test_config_file_parsing(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("# comment\nlr = 0.002\nlambda-box = 5  # inline\n\n")
    assert read_config_file(p) == {"lr": "0.002", "lambda_box": "5"}
    p.write_text("no equals sign\n")
    with pytest.raises(UsageError, match="c.txt:1"):
        read_config_file(p)


def test_config_precedence(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("lr = 0.002\nepochs = 7\nreduction = sum\n")
    args = parse_args(["train", "--config", str(cfg), "--epochs", "3"])
    assert (args.lr, args.epochs, args.reduction, args.batch) == (0.002, 3, "sum", 64)


def test_config_unknown_key(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("learning_rate = 0.1\n")
    assert main(["train", "--config", str(cfg)]) == EXIT_USAGE


def test_config_booleans_and_lists(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("quiet = yes\ncompare = a.ckpt b.ckpt\n")
    args = parse_args(["eval", "--config", str(cfg)])
    assert args.quiet is True and args.compare == ["a.ckpt", "b.ckpt"]


def test_dataset_validate_and_split(synth, tmp_path):
    out = tmp_path / "v"
    assert main(["dataset", "validate", "--data", str(synth), "--out", str(out)]) == EXIT_OK
    assert (out / "rejections.csv").read_text() == "filename,reason\n"
    assert "data" in resolved(out, "dataset")
    write_ppm(synth / "images" / "zz_extra.ppm", np.zeros((4, 4, 3), np.uint8))
    try:
        assert main(["dataset", "validate", "--data", str(synth), "--out", str(out)]) == EXIT_FINDINGS
        assert "zz_extra.ppm" in (out / "rejections.csv").read_text()
    finally:
        (synth / "images" / "zz_extra.ppm").unlink()
    assert main(["dataset", "split", "--data", str(synth), "--out", str(out)]) == EXIT_OK
    assert len((out / "split.txt").read_text().split()) >= 6


def test_dataset_missing_dirs(tmp_path):
    assert main(["dataset", "validate", "--data", str(tmp_path / "nope"), "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["dataset", "validate", "--out", str(tmp_path)]) == EXIT_USAGE


def test_train_synthetic(tmp_path, capsys):
    out = tmp_path / "t"
    code = main(["train", "--synthetic", "8", "--size", "64", "--epochs", "1", "--batch", "16",
                 "--out", str(out), "--quiet"])
    assert code == EXIT_OK
    for name in ("history.csv", "last.ckpt", "best.ckpt", "split.txt", "train.resolved.txt"):
        assert (out / name).exists(), name
    assert resolved(out, "train")["batch"] == "16"  # requested value echoed; run clamps it
    assert "trained 1 epochs" in capsys.readouterr().out


def test_train_divergence_exit(tmp_path, monkeypatch, capsys):
    def blow_up(*a, **k):
        raise DivergenceError(0, 1, float("nan"))

    monkeypatch.setattr(cli, "train", blow_up)
    code = main(["train", "--synthetic", "4", "--size", "64", "--epochs", "1", "--batch", "2",
                 "--out", str(tmp_path), "--quiet"])
    assert code == EXIT_DIVERGED
    assert "error" in capsys.readouterr().err


def test_eval_and_compare(ckpt, synth, tmp_path, capsys):
    out = tmp_path / "e"
    assert main(["eval", "--checkpoint", str(ckpt), "--data", str(synth), "--out", str(out)]) == EXIT_OK
    assert (out / "report.txt").exists() and (out / "p_vs_r.svg").exists()
    cmp_out = tmp_path / "c"
    assert main(["eval", "--compare", str(ckpt), str(ckpt), "--data", str(synth), "--out", str(cmp_out)]) == EXIT_OK
    assert (cmp_out / "comparison.csv").read_text().startswith("metric,tiny,tiny")
    assert (cmp_out / "0_tiny" / "report.txt").exists() and (cmp_out / "1_tiny" / "report.txt").exists()


def test_eval_mismatch_names_field(ckpt, synth, tmp_path, capsys):
    code = main(["eval", "--checkpoint", str(ckpt), "--data", str(synth), "--size", "96", "--out", str(tmp_path)])
    assert code == EXIT_USAGE
    assert "input_size" in capsys.readouterr().err
    code = main(["eval", "--checkpoint", str(ckpt), "--data", str(synth), "--classes", "2", "--out", str(tmp_path)])
    assert code == EXIT_USAGE
    assert "num_classes" in capsys.readouterr().err
    assert main(["eval", "--data", str(synth), "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["eval", "--checkpoint", str(ckpt), "--synthetic", "4", "--out", str(tmp_path)]) == EXIT_USAGE
    assert "--size" in capsys.readouterr().err
    assert main(["eval", "--checkpoint", str(tmp_path / "no.ckpt"), "--data", str(synth),
                 "--out", str(tmp_path)]) == EXIT_USAGE


def test_detect(ckpt, synth, tmp_path):
    out = tmp_path / "d"
    code = main(["detect", "--checkpoint", str(ckpt), "--source", str(synth / "images"), "--overlay",
                 "--conf", "0.01", "--out", str(out)])
    assert code == EXIT_OK
    assert (out / "detections.csv").read_text().startswith("frame,class_id,confidence,x1,y1,x2,y2\n")
    assert (out / "timing.csv").read_text().splitlines()[1].startswith("6,")
    svgs = sorted((out / "overlays").glob("*.svg"))
    assert len(svgs) == 6 and "data:image/png;base64," in svgs[0].read_text()


def test_detect_no_readable_frames(ckpt, tmp_path):
    frames = tmp_path / "frames"
    frames.mkdir()
    (frames / "bad.ppm").write_bytes(b"junk")
    assert main(["detect", "--checkpoint", str(ckpt), "--source", str(frames), "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["detect", "--checkpoint", str(ckpt), "--source", str(tmp_path / "x"),
                 "--out", str(tmp_path)]) == EXIT_USAGE


def test_bench(ckpt, tmp_path, capsys):
    assert main(["bench", "--checkpoint", str(ckpt), "--frames", "3", "--size", "64", "--out", str(tmp_path)]) == EXIT_OK
    line = capsys.readouterr().out.strip().splitlines()[-1]
    fields = dict(kv.split("=") for kv in line.split())
    assert fields["frames"] == "3"
    rows = (tmp_path / "timing.csv").read_text().splitlines()
    assert rows[0] == "frames,total_s,mean_s,median_s,max_s,fps"
