import json

import numpy as np
import pytest

from ifa import cli
from ifa.campipe import read_cam


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Full CLI workflow on a tiny refnet: gen -> train -> dump."""
    root = tmp_path_factory.mktemp("cli")
    dataset = root / "dataset.npz"
    model = root / "refnet.bin"
    archive = root / "archive"
    assert cli.main(["refnet", "gen", "--seed", "5", "--n", "40", "--out", str(dataset)]) == 0
    assert cli.main([
        "refnet", "train", "--dataset", str(dataset), "--epochs", "2",
        "--out", str(model),
    ]) == 0
    assert cli.main([
        "refnet", "dump", "--dataset", str(dataset), "--model", str(model),
        "--out", str(archive),
    ]) == 0
    return root


def test_validate_ok(workspace, capsys):
    assert cli.main(["validate", "--archive", str(workspace / "archive")]) == 0
    out = capsys.readouterr().out
    assert "40 samples, 0 findings" in out


def test_stats_and_cam_common(workspace):
    stats = workspace / "stats.json"
    assert cli.main([
        "stats", "--archive", str(workspace / "archive"), "--scheme", "grad-cam",
        "--out", str(stats),
    ]) == 0
    doc = json.loads(stats.read_text())
    assert doc["count"] == 40 * 64
    cams = workspace / "cams_common"
    assert cli.main([
        "cam", "--archive", str(workspace / "archive"), "--scale", "common",
        "--stats", str(stats), "--target-size", "32x32", "--out", str(cams),
    ]) == 0
    index = json.loads((cams / "index.json").read_text())
    assert len(index["samples"]) == 40
    first = read_cam(cams / "cams" / "00000000.camf32")
    assert first.map.shape == (32, 32)
    assert np.abs(first.map).max() < 1.0


def test_cam_common_without_stats_is_usage_error(workspace):
    assert cli.main([
        "cam", "--archive", str(workspace / "archive"), "--scale", "common",
        "--out", str(workspace / "nope"),
    ]) == cli.EXIT_USAGE


def test_im_mask_and_fs_cam(workspace):
    im_csv = workspace / "im.csv"
    assert cli.main([
        "im", "--archive", str(workspace / "archive"), "--unified", "--out", str(im_csv),
    ]) == 0
    assert im_csv.exists() and im_csv.with_suffix(".meta.json").exists()
    header = im_csv.read_text().splitlines()[0]
    assert header == "feature,rectangle,disc"

    mask_json = workspace / "mask.json"
    assert cli.main([
        "mask", "--im", str(im_csv), "--rule", "top_pct", "--k", "25",
        "--out", str(mask_json),
    ]) == 0
    doc = json.loads(mask_json.read_text())
    assert doc["num_features"] == 16
    assert all(len(c["selected"]) == 4 for c in doc["classes"])  # ceil(25% of 16)

    fs_cams = workspace / "cams_fs"
    assert cli.main([
        "cam", "--archive", str(workspace / "archive"), "--class", "0",
        "--mask", str(mask_json), "--scale", "raw", "--out", str(fs_cams),
    ]) == 0
    assert json.loads((fs_cams / "index.json").read_text())["samples"][0]["label"] == "FS-grad-cam"


def test_eval_consistency(workspace, capsys):
    cams = workspace / "cams_raw"
    assert cli.main([
        "cam", "--archive", str(workspace / "archive"), "--class", "0", "--scale", "raw",
        "--out", str(cams),
    ]) == 0
    out_dir = workspace / "eval"
    assert cli.main([
        "eval", "consistency", "--cams", str(cams),
        "--archive", str(workspace / "archive"), "--out", str(out_dir),
    ]) == 0
    doc = json.loads((out_dir / "consistency.json").read_text())
    # raw grad-cam sums reproduce the logit up to the head bias: r = 1
    assert doc["pearson"] == pytest.approx(1.0, abs=1e-6)
    assert (out_dir / "consistency.csv").exists()


def test_eval_mask_acc(workspace, capsys):
    assert cli.main([
        "eval", "mask-acc", "--archive", str(workspace / "archive"),
        "--im", str(workspace / "im.csv"), "--top-pct", "25",
        "--out", str(workspace / "mask_acc.json"),
    ]) == 0
    doc = json.loads((workspace / "mask_acc.json").read_text())
    assert set(doc) >= {"accuracy_all", "accuracy_principal", "accuracy_nonprincipal"}


def test_eval_incdrop_round_trip(workspace, capsys):
    out = workspace / "incdrop"
    assert cli.main([
        "eval", "incdrop", "emit", "--cams", str(workspace / "cams_raw"),
        "--archive", str(workspace / "archive"), "--out", str(out),
    ]) == 0
    manifest = json.loads((out / "jobs" / "manifest.json").read_text())
    assert len(manifest["jobs"]) == 40
    results = workspace / "results.json"
    results.write_text(json.dumps([
        {"sample_id": 0, "Y": 0.8, "O": 0.6},
        {"sample_id": 1, "Y": 0.5, "O": 0.7},
    ]))
    assert cli.main([
        "eval", "incdrop", "collect", "--results", str(results),
        "--out", str(workspace / "incdrop.json"),
    ]) == 0
    doc = json.loads((workspace / "incdrop.json").read_text())
    assert doc["average_drop"] == pytest.approx(12.5)
    assert doc["average_increase"] == pytest.approx(50.0)


def test_render_and_overlay(workspace):
    out = workspace / "pngs"
    assert cli.main([
        "render", "--cams", str(workspace / "cams_common"), "--out", str(out),
    ]) == 0
    pngs = sorted(out.glob("*.png"))
    assert len(pngs) == 40
    assert pngs[0].read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    over = workspace / "overlays"
    assert cli.main([
        "render", "--cams", str(workspace / "cams_common"),
        "--archive", str(workspace / "archive"), "--overlay", "0.5", "--out", str(over),
    ]) == 0
    assert len(list(over.glob("*.png"))) == 40


def test_config_defaults_flags_win(workspace, tmp_path):
    cfg = tmp_path / "config.json"
    cfg.write_text(json.dumps({
        "archive": str(workspace / "archive"),
        "scheme": "xgrad-cam",
        "out": str(tmp_path / "from_config.json"),
    }))
    assert cli.main(["stats", "--config", str(cfg)]) == 0
    doc = json.loads((tmp_path / "from_config.json").read_text())
    assert doc["scheme"] == "xgrad_cam"
    # explicit flag beats the config value
    assert cli.main([
        "stats", "--config", str(cfg), "--scheme", "grad-cam",
        "--out", str(tmp_path / "override.json"),
    ]) == 0
    assert json.loads((tmp_path / "override.json").read_text())["scheme"] == "grad_cam"


def test_exit_codes(workspace, tmp_path, capsys):
    # usage: unknown scheme inside our validation -> data error path is scheme error
    assert cli.main(["stats", "--archive", str(workspace / "archive"),
                     "--scheme", "score-cam", "--out", str(tmp_path / "x.json")]) == cli.EXIT_DATA
    # data: missing archive (no manifest.json)
    assert cli.main(["validate", "--archive", str(tmp_path / "missing")]) == cli.EXIT_DATA
    # I/O: output path is an existing directory
    assert cli.main(["stats", "--archive", str(workspace / "archive"),
                     "--out", str(tmp_path)]) == cli.EXIT_IO
    # usage: bad --class value
    assert cli.main(["stats", "--archive", str(workspace / "archive"),
                     "--class", "fish", "--out", str(tmp_path / "y.json")]) == cli.EXIT_USAGE
    capsys.readouterr()


def test_argparse_usage_exit_code():
    with pytest.raises(SystemExit) as exc_info:
        cli.main(["no-such-command"])
    assert exc_info.value.code == 2
