import filecmp
import time

import pytest

from pillid.cli import build_parser, main, resolve
from pillid.dataset import read_manifest, load_split
from pillid.postprocess import Detection, format_detections

SYNTH = ["--classes", "4", "--train", "8", "--val", "4", "--size", "32", "--seed", "3"]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["synth", *SYNTH, "--out", str(out)]) == 0
    return out


def test_synth_is_deterministic(data, tmp_path):
    assert main(["synth", *SYNTH, "--out", str(tmp_path / "again")]) == 0
    for sub in ("", "images", "labels"):
        a, b = data / sub, tmp_path / "again" / sub
        names = sorted(p.name for p in a.iterdir() if p.is_file())
        _, mismatch, errors = filecmp.cmpfiles(a, b, names, shallow=False)
        assert not mismatch and not errors


def test_usage_errors_exit_2(tmp_path, capsys):
    assert main(["train"]) == 2
    assert "--data is required" in capsys.readouterr().err
    assert main(["train", "--epochs", "many"]) == 2
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("colour=red\n")
    assert main(["synth", "--config", str(cfg)]) == 2


def test_runtime_failure_exit_1(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "missing")]) == 1
    assert "pillid train" in capsys.readouterr().err


def test_help_shows_defaults_and_tags():
    sub = build_parser()._subparsers._group_actions[0].choices["train"]
    text = " ".join(sub.format_help().split())
    assert "(default: 0.001; reference recipe)" in text
    assert "(default: 32; reference recipe)" in text
    assert "implementation choice" in text


def test_config_file_then_flag(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nepochs=7\nlr=0.01\n")
    rc = resolve("train", {"data": "d", "config": str(cfg), "lr": 0.5})
    assert rc.epochs == 7 and rc.source["epochs"] == "file"
    assert rc.lr == 0.5 and rc.source["lr"] == "flag"
    assert rc.batch == 32 and rc.source["batch"] == "default"


def test_seed_and_config_echoed(data, tmp_path, capsys):
    main(["synth", *SYNTH, "--out", str(tmp_path / "x")])
    err = capsys.readouterr().err
    assert "seed=3" in err and "classes=4 (flag)" in err


def test_eval_ground_truth_as_detections(data, tmp_path, capsys):
    samples = load_split(read_manifest(data), "val")
    text = ""
    for s in samples:
        h, w = s.image.shape[:2]
        boxes = s.boxes.xyxy() * [w, h, w, h]
        text += format_detections(s.image_id, [Detection(int(c), 1.0, tuple(b)) for c, b in zip(s.boxes.cls, boxes)])
    dump = tmp_path / "gt.txt"
    dump.write_text(text)
    assert main(["eval", "--data", str(data), "--detections", str(dump)]) == 0
    out = capsys.readouterr().out
    assert "100.0%  100.0%  100.0%" in out


def test_train_eval_detect_quantize(data, tmp_path, capsys):
    ck = tmp_path / "m.ckpt"
    t0 = time.perf_counter()
    rc = main(["train", "--data", str(data), "--epochs", "2", "--decay-epoch", "1", "--batch", "4",
               "--stage-channels", "4,8,8", "--out", str(ck)])
    assert rc == 0 and time.perf_counter() - t0 < 60
    assert (ck / "train_log.csv").read_text().startswith("epoch,lr,")
    assert main(["eval", "--data", str(data), "--model", str(ck)]) == 0
    img = next((data / "images").iterdir())
    assert main(["detect", "--model", str(ck), "--image", str(img), "--announce", "--conf", "0.01"]) == 0
    assert main(["quantize", "--model", str(ck), "--calib", str(data), "--out", str(tmp_path / "q")]) == 0
    assert main(["bench", "--model", str(ck), "--qmodel", str(tmp_path / "q"), "--n", "3"]) == 0
    out = capsys.readouterr().out
    assert "size_ratio" in out and "speedup" in out
