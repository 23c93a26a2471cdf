import json

import numpy as np
import pytest
from PIL import Image

from cdre.cli import EXIT_CHECKPOINT, EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from cdre.config import RunConfig
from cdre.distortion import deserialize
from cdre.evaluation import RateTaskCurve

TINY = {
    "dataset": {"n_train": 16, "n_eval": 10},
    "training": {"steps": 3, "pretrain_steps": 2, "batch_size": 4},
}


def _kv(out):
    return dict(line.split("=", 1) for line in out.strip().splitlines() if "=" in line)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["train", "--config", str(cfg), "--out", str(d / "ck.pt")]) == EXIT_OK
    return d, cfg


def test_gen_data_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        assert main(["gen-data", "--n", "5", "--seed", "4", "--out", str(tmp_path / name)]) == EXIT_OK
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == sorted(p.name for p in (tmp_path / "b").iterdir())
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    lines = (tmp_path / "a" / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == 5
    assert "config_hash" in json.loads((tmp_path / "a" / "dataset.json").read_text())


def test_gen_data_with_quality_writes_pairs(tmp_path):
    assert main(["gen-data", "--n", "2", "--quality", "10", "--out", str(tmp_path)]) == EXIT_OK
    from cdre.codec import load_external_pairs

    pairs = list(load_external_pairs(tmp_path / "manifest.jsonl"))
    assert len(pairs) == 2 and all(p.base_bpp > 0 for p in pairs)


def test_gen_data_usage_errors(tmp_path, capsys):
    assert main(["gen-data", "--n", "0", "--out", str(tmp_path)]) == EXIT_USAGE
    assert "--n must be positive" in capsys.readouterr().err
    assert main(["gen-data", "--out", str(tmp_path)]) == EXIT_USAGE


def test_train_needs_config(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path / "x.pt")]) == EXIT_USAGE
    assert main(["train", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "x.pt")]) == EXIT_USAGE
    (tmp_path / "bad.json").write_text('{"training": {"lamda": 1}}')
    assert main(["train", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path / "x.pt")]) == EXIT_USAGE


def test_train_fd_keeps_backbone(trained, tmp_path, capsys):
    d, cfg = trained
    from cdre.training import group_hashes, prepare

    bundle, _ = prepare(RunConfig.from_dict(TINY))
    pre = group_hashes(bundle, ("backbone",))["backbone"][:16]
    capsys.readouterr()
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "again.pt")]) == EXIT_OK
    kv = _kv(capsys.readouterr().out)
    assert kv["backbone_hash"] == pre and kv["step"] == "3"


def test_train_resume_continues(trained, tmp_path, capsys):
    _, cfg = trained
    assert main(["train", "--config", str(cfg), "--until", "1", "--out", str(tmp_path / "h.pt")]) == EXIT_OK
    assert _kv(capsys.readouterr().out)["step"] == "1"
    assert main(["train", "--config", str(cfg), "--resume", str(tmp_path / "h.pt"), "--out", str(tmp_path / "f.pt")]) == 0
    full = _kv(capsys.readouterr().out)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "s.pt")]) == 0
    straight = _kv(capsys.readouterr().out)
    assert full["step"] == "3" and full["loss"] == straight["loss"]


def _pair(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (70, 100, 3), dtype=np.uint8)
    Image.fromarray(img).save(tmp_path / "o.png")
    Image.fromarray(np.clip(img.astype(int) + 3, 0, 255).astype(np.uint8)).save(tmp_path / "c.png")
    return tmp_path / "o.png", tmp_path / "c.png"


def test_encode_decode_roundtrip(trained, tmp_path, capsys):
    d, _ = trained
    o, c = _pair(tmp_path)
    ck = str(d / "ck.pt")
    assert main(["encode-dist", "--original", str(o), "--compressed", str(c), "--checkpoint", ck,
                 "--out", str(tmp_path / "s.cdrd")]) == EXIT_OK
    kv = _kv(capsys.readouterr().out)
    assert kv["bytes"] == str((tmp_path / "s.cdrd").stat().st_size) and kv["shape"] == "6x3x4"
    assert kv["side_bpp"] == f"{72 / 7000:.6g}"
    assert "config_hash" in json.loads((tmp_path / "s.cdrd.json").read_text())
    assert main(["decode-dist", "--input", str(tmp_path / "s.cdrd"), "--checkpoint", ck,
                 "--out", str(tmp_path / "d.npz")]) == EXIT_OK
    with np.load(tmp_path / "d.npz") as z:
        rep = deserialize((tmp_path / "s.cdrd").read_bytes())
        assert np.array_equal(z["bits"], rep.bits)
        assert z["d0"].shape == (16, 18, 25)
        assert str(z["config_hash"]) == kv["config_hash"]


def test_corrupt_inputs(trained, tmp_path, capsys):
    d, _ = trained
    ck = str(d / "ck.pt")
    (tmp_path / "bad.cdrd").write_bytes(b"CDRX" + bytes(20))
    assert main(["decode-dist", "--input", str(tmp_path / "bad.cdrd"), "--checkpoint", ck,
                 "--out", str(tmp_path / "d.npz")]) == EXIT_DATA
    assert "malformed distortion bitstream" in capsys.readouterr().err
    (tmp_path / "bad.png").write_bytes(b"junk")
    o, _ = _pair(tmp_path)
    assert main(["encode-dist", "--original", str(o), "--compressed", str(tmp_path / "bad.png"),
                 "--checkpoint", ck, "--out", str(tmp_path / "x.cdrd")]) == EXIT_DATA
    (tmp_path / "bad.pt").write_bytes(b"junk")
    assert main(["eval", "--checkpoint", str(tmp_path / "bad.pt"), "--out", str(tmp_path / "c.json")]) == EXIT_CHECKPOINT


def test_eval_emits_curve_file(trained, tmp_path, capsys):
    d, _ = trained
    out, base = tmp_path / "cdre.csv", tmp_path / "base.csv"
    assert main(["eval", "--checkpoint", str(d / "ck.pt"), "--qualities", "10,30,50,70",
                 "--out", str(out), "--baseline-out", str(base)]) == EXIT_OK
    cdre_curve, base_curve = RateTaskCurve.load(out), RateTaskCurve.load(base)
    assert len(cdre_curve.points) == 4 and cdre_curve.config_hash
    np.testing.assert_allclose(cdre_curve.bpp - base_curve.bpp, 6 * 4 / 4096)
    assert main(["eval", "--checkpoint", str(d / "ck.pt"), "--qualities", "10,30",
                 "--include-side-channel", "off", "--out", str(tmp_path / "off.json")]) == EXIT_OK
    np.testing.assert_allclose(RateTaskCurve.load(tmp_path / "off.json").bpp, base_curve.bpp[:2])


def test_bdrate_identical_prints_zero(tmp_path, capsys):
    c = RateTaskCurve([(0.2, 30), (0.4, 33), (0.8, 36), (1.6, 39)], "a")
    c.save(tmp_path / "a.csv")
    c.save(tmp_path / "b.json")
    assert main(["bdrate", str(tmp_path / "a.csv"), str(tmp_path / "b.json")]) == EXIT_OK
    assert capsys.readouterr().out.strip() == "bd_rate_percent=0.00"
    RateTaskCurve([(b * 2, m) for b, m in c.points]).save(tmp_path / "d.csv")
    assert main(["bdrate", str(tmp_path / "a.csv"), str(tmp_path / "d.csv")]) == EXIT_OK
    assert capsys.readouterr().out.strip() == "bd_rate_percent=100.00"
    assert main(["bdrate", str(tmp_path / "a.csv"), str(tmp_path / "missing.csv")]) == EXIT_DATA


def test_overhead_prints_groups(capsys):
    assert main(["overhead"]) == EXIT_OK
    kv = _kv(capsys.readouterr().out)
    assert kv["params.extractor"] == "4824" and kv["encoder_params"] == "15258"
    assert 400 <= float(kv["encoder_macs_per_pixel"]) <= 1500
    assert "macs_per_pixel.dist_enc" in kv and kv["frame"] == "1280x720"


def test_overhead_frame_size(capsys):
    assert main(["overhead", "--height", "64", "--width", "64"]) == EXIT_OK
    assert _kv(capsys.readouterr().out)["side_bpp"] == f"{24 / 4096:.6g}"


def test_bad_flag_is_usage_error(capsys):
    assert main(["eval", "--checkpoint", "x", "--out", "y", "--include-side-channel", "maybe"]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
