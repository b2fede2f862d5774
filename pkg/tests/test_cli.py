import hashlib
from pathlib import Path

import numpy as np
import pytest

from videodepth.cli import main
from videodepth.config import DEFAULTS, Config, ConfigError
from videodepth.metrics import read_pgm
from videodepth.tensor import load_tensor, save_tensor

SMALL = """
# tiny settings so each command runs in seconds
[net]
channels = 8
spatial_blocks = 1
[data]
realistic_count = 5
synthetic_count = 3
eval_count = 2
long_count = 1
long_length = 40
[stage1]
iterations = 4
[stage2]
iterations = 3
[stage3]
iterations = 3
"""


def tree_digest(root: Path) -> dict:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.ini"
    cfg.write_text(SMALL)
    assert main(["gen-data", "--config", str(cfg), "--out", str(root / "data")]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / "runs")]) == 0
    return root, cfg


# ---------------------------------------------------------------- config


def test_defaults_round_trip(tmp_path):
    c = Config()
    p = c.echo(tmp_path)
    again = Config.load(p)
    assert again.values == c.values


def test_unknown_key_named(tmp_path):
    p = tmp_path / "bad.ini"
    p.write_text("[net]\nchanels = 3\n")
    with pytest.raises(ConfigError, match="net.chanels"):
        Config.load(p)
    p.write_text("[nets]\nchannels = 3\n")
    with pytest.raises(ConfigError, match="nets"):
        Config.load(p)


@pytest.mark.parametrize("override", [{"infer.overlap": 40}, {"stage3.min_length": 4}, {"edm.steps": 0}, {"eval.dataset": "mars"}])
def test_invalid_values_rejected(override):
    with pytest.raises(ConfigError):
        Config.load(None, override)


def test_every_section_has_defaults():
    assert set(DEFAULTS) >= {"edm", "codec", "net", "stage1", "stage2", "stage3", "infer", "eval", "paths"}
    assert DEFAULTS["edm"]["pmean"] == 0.7 and DEFAULTS["edm"]["pstd"] == 1.6


def test_flag_overrides_file(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[infer]\nwindow = 16\n")
    assert Config.load(p, {"infer.window": 20})["infer.window"] == 20


# ---------------------------------------------------------------- commands


def test_gen_data_layout_and_determinism(run, tmp_path):
    root, cfg = run
    for style in ("realistic", "synthetic", "eval", "long"):
        assert (root / "data" / style / "manifest.tsv").exists()
    assert (root / "data" / "config.ini").exists()
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "again")]) == 0
    assert tree_digest(tmp_path / "again") == tree_digest(root / "data")


def test_gen_data_bad_style_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as e:
        main(["gen-data", "--style", "cartoon", "--out", str(tmp_path)])
    assert e.value.code == 2


def test_bad_config_exit_code(tmp_path):
    p = tmp_path / "bad.ini"
    p.write_text("[edm]\nsigmamax = 3\n")
    assert main(["gen-data", "--config", str(p), "--out", str(tmp_path / "d")]) == 2


def test_train_outputs(run):
    root, _ = run
    for sid in (1, 2, 3):
        d = root / "runs" / f"stage{sid}"
        assert (d / "manifest.txt").exists() and (d / "loss.tsv").exists() and (d / "config.ini").exists()


def test_train_single_stage_and_resume(run, tmp_path):
    root, cfg = run
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(tmp_path / "s1"), "--stages", "1"]) == 0
    assert (tmp_path / "s1" / "stage1").exists() and not (tmp_path / "s1" / "stage2").exists()
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(tmp_path / "rest"),
                 "--stages", "2,3", "--resume", str(tmp_path / "s1" / "stage1")]) == 0
    for name in ("loss.tsv", "t0.w.dcrf", "in.w.dcrf"):
        assert (tmp_path / "rest" / "stage3" / name).read_bytes() == (root / "runs" / "stage3" / name).read_bytes()


def test_train_missing_data_exit_code(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nothing"), "--out", str(tmp_path / "r")]) == 3


@pytest.mark.parametrize("steps", [1, 25])
@pytest.mark.parametrize("T", [1, 7])
def test_infer_single_video(run, tmp_path, steps, T):
    root, cfg = run
    video = load_tensor(root / "data" / "eval" / "eval000" / "video.dcrf")[:T]
    save_tensor(tmp_path / "v.dcrf", video)
    rc = main(["infer", "--config", str(cfg), "--checkpoint", str(root / "runs" / "stage3"), "--input", str(tmp_path / "v.dcrf"),
               "--output", str(tmp_path / "d.dcrf"), "--steps", str(steps)])
    assert rc == 0
    assert load_tensor(tmp_path / "d.dcrf").shape == (T, 32, 32)
    assert (tmp_path / "d.config.ini").exists()


def test_infer_bad_shape_exit_code(run, tmp_path):
    root, cfg = run
    save_tensor(tmp_path / "v.dcrf", np.zeros((3, 30, 32, 3), np.float32))
    rc = main(["infer", "--config", str(cfg), "--checkpoint", str(root / "runs" / "stage3"), "--input", str(tmp_path / "v.dcrf"),
               "--output", str(tmp_path / "d.dcrf")])
    assert rc == 3
    save_tensor(tmp_path / "v2.dcrf", np.zeros((3, 32, 32), np.float32))
    assert main(["infer", "--config", str(cfg), "--checkpoint", str(root / "runs" / "stage3"), "--input", str(tmp_path / "v2.dcrf"),
                 "--output", str(tmp_path / "d.dcrf")]) == 3


def test_infer_eval_report_and_profiles(run, tmp_path):
    root, cfg = run
    ck = str(root / "runs" / "stage3")
    assert main(["infer", "--config", str(cfg), "--checkpoint", ck, "--input", str(root / "data" / "eval"), "--output", str(tmp_path / "pred")]) == 0
    assert main(["eval", "--config", str(cfg), "--pred", str(tmp_path / "pred"), "--gt", str(root / "data" / "eval"), "--profile-row", "16"]) == 0
    lines = (tmp_path / "pred" / "report.tsv").read_text().splitlines()
    assert lines[0].split("\t") == ["id", "absrel", "delta1", "scale", "shift", "excluded"]
    assert [l.split("\t")[0] for l in lines[1:]] == ["eval000", "eval001", "mean"]
    img = read_pgm(tmp_path / "pred" / "profiles" / "eval000.pgm")
    assert img.shape == (24, 32)


def test_eval_mismatched_sets(run, tmp_path, caplog):
    root, cfg = run
    (tmp_path / "pred" / "eval000").mkdir(parents=True)
    save_tensor(tmp_path / "pred" / "eval000" / "depth.dcrf", np.ones((24, 32, 32), np.float32))
    rc = main(["eval", "--config", str(cfg), "--pred", str(tmp_path / "pred"), "--gt", str(root / "data" / "eval")])
    assert rc == 3
    assert "eval001" in caplog.text


def test_ablate_stitch_report(run, tmp_path):
    root, cfg = run
    args = ["ablate-stitch", "--config", str(cfg), "--checkpoint", str(root / "runs" / "stage3"), "--data", str(root / "data" / "long")]
    assert main(args + ["--output", str(tmp_path / "a.tsv")]) == 0
    assert main(args + ["--output", str(tmp_path / "b.tsv")]) == 0
    text = (tmp_path / "a.tsv").read_text()
    assert text == (tmp_path / "b.tsv").read_text()
    assert [l.split("\t")[0] for l in text.splitlines()] == ["variant", "baseline", "init", "full"]
    assert main(args + ["--variant", "baseline", "--output", str(tmp_path / "c.tsv")]) == 0
    assert len((tmp_path / "c.tsv").read_text().splitlines()) == 2
