import math

import pytest
import torch

from cdre.config import RunConfig
from cdre.errors import CheckpointError
from cdre.pipeline import Bundle
from cdre.tasks import SplitData
from cdre.training import (
    Trainer,
    cdre_loss,
    group_hashes,
    load_bundle,
    prepare,
    read_checkpoint,
    save_checkpoint,
    train,
)
from conftest import pyramid


def _loss_oracle(task, fo, fc, lam):
    """Scalar loops over batch, scales and locations."""
    b = fo[0].shape[0]
    regs = []
    for a_lvl, c_lvl in zip(fo, fc):
        _, c, h, w = a_lvl.shape
        tot = 0.0
        for n in range(b):
            for y in range(h):
                for x in range(w):
                    u = [float(a_lvl[n, k, y, x]) for k in range(c)]
                    v = [float(c_lvl[n, k, y, x]) for k in range(c)]
                    dot = sum(p * q for p, q in zip(u, v))
                    den = math.sqrt(sum(p * p for p in u)) * math.sqrt(sum(q * q for q in v))
                    tot += dot / max(den, 1e-8)
        regs.append(1.0 + tot / (b * h * w))
    return task + lam * sum(regs), regs


def _small_cfg(**over):
    base = {
        "dataset.n_train": 40,
        "training.batch_size": 8,
        "training.pretrain_steps": 5,
        "training.steps": 10,
        "codec.train_qualities": [10],
    }
    base.update(over)
    return RunConfig().replace(**base)


@pytest.fixture(scope="module")
def small_data():
    return SplitData.generate(123, 40)


# --- loss ----------------------------------------------------------------------------


def test_identity_pyramid_gives_two_per_scale():
    fo = pyramid(0)
    out = cdre_loss(1.5, fo, [f.clone() for f in fo], 0.1)
    torch.testing.assert_close(out.distortion_reg, torch.full((3,), 2.0, dtype=torch.float64))
    assert abs(out.total.item() - (1.5 + 6 * 0.1)) < 1e-12


def test_orthogonal_gives_one():
    a = torch.zeros(2, 4, 4, dtype=torch.float64)
    b = torch.zeros_like(a)
    a[0], b[1] = 1.0, 1.0
    out = cdre_loss(0.0, [a] * 3, [b] * 3, 1.0)
    assert out.distortion_reg.tolist() == [1.0, 1.0, 1.0] and out.total.item() == 3.0


@pytest.mark.parametrize("lam", [0.0, 0.1, 4.0])
def test_loss_matches_scalar_oracle(lam):
    fo, fc = pyramid(20, batch=2, size=8), pyramid(21, batch=2, size=8)
    out = cdre_loss(0.75, fo, fc, lam)
    total, regs = _loss_oracle(0.75, fo, fc, lam)
    assert abs(out.total.item() - total) < 1e-6
    for got, ref in zip(out.distortion_reg.tolist(), regs):
        assert abs(got - ref) < 1e-6 and 0.0 <= got <= 2.0


def test_reg_independent_of_lambda():
    fo, fc = pyramid(30), pyramid(31)
    outs = [cdre_loss(1.0, fo, fc, lam) for lam in (0.0, 0.1, 4.0)]
    for o in outs[1:]:
        assert torch.equal(o.distortion_reg, outs[0].distortion_reg)
    s = outs[0].distortion_reg.sum().item()
    for o, lam in zip(outs, (0.0, 0.1, 4.0)):
        assert abs(o.total.item() - (1.0 + lam * s)) < 1e-12


def test_loss_errors():
    with pytest.raises(ValueError, match="lambda"):
        cdre_loss(1.0, pyramid(0), pyramid(1), -0.1)
    with pytest.raises(ValueError):
        cdre_loss(1.0, pyramid(0), pyramid(1, channels=(8, 16, 32)), 0.1)


def test_loss_without_cosine_still_reports_reg():
    fo, fc = pyramid(2), pyramid(3)
    out = cdre_loss(1.25, fo, fc, 4.0, use_cosine=False)
    assert out.total.item() == 1.25 and out.distortion_reg.shape == (3,)


# --- regimes -------------------------------------------------------------------------


def test_fd_freezes_downstream(small_data):
    cfg = _small_cfg()
    bundle, _ = prepare(cfg, small_data)
    before = group_hashes(bundle)
    train(cfg, bundle, small_data)
    after = group_hashes(bundle)
    assert before["backbone"] == after["backbone"] and before["head"] == after["head"]
    for g in ("extractor", "dist_enc", "modulation", "dist_dec", "transform", "embed"):
        assert before[g] != after[g], g


def test_joint_updates_everything(small_data):
    cfg = _small_cfg(**{"training.regime": "joint"})
    bundle, _ = prepare(cfg, small_data)
    before = group_hashes(bundle)
    train(cfg, bundle, small_data)
    after = group_hashes(bundle)
    assert all(before[g] != after[g] for g in before)


def test_joint_overfits_one_batch():
    data = SplitData.generate(0, 8)
    cfg = _small_cfg(**{"training.regime": "joint", "training.pretrain_steps": 0, "seed": 0})
    torch.manual_seed(0)
    bundle = Bundle.from_config(cfg)
    tr = Trainer(cfg, bundle, data)
    idx = list(range(8))
    x, xh, y = data.tensors(idx, 10)
    start = tr.loss(x, xh, y).total.item()
    tr.run(10)
    bundle.train()
    end = tr.loss(x, xh, y).total.item()
    assert end < start


def test_gradient_reaches_encoder_first_layer(small_data):
    cfg = _small_cfg()
    bundle, _ = prepare(cfg, small_data)
    tr = Trainer(cfg, bundle, small_data)
    tr.train_step()
    # zero-init projections block the task gradient on the first step only
    assert not bundle.cdre.dist_enc.blocks[0][0].weight.grad.any()
    tr.train_step()
    g = bundle.cdre.dist_enc.blocks[0][0].weight.grad
    assert g is not None and g.abs().sum() > 0
    assert bundle.cdre.extractor.blocks[0].conv.weight.grad.abs().sum() > 0


def test_training_deterministic(small_data):
    cfg = _small_cfg()
    hashes = []
    for _ in range(2):
        bundle, _ = prepare(cfg, small_data)
        train(cfg, bundle, small_data)
        hashes.append(group_hashes(bundle))
    assert hashes[0] == hashes[1]


def test_resume_matches_uninterrupted(small_data, tmp_path):
    cfg = _small_cfg(**{"training.steps": 20})
    bundle, _ = prepare(cfg, small_data)
    save_checkpoint(tmp_path / "init.pt", bundle, cfg, stage="pretrained")
    straight = train(cfg, bundle, small_data)
    full = group_hashes(straight.bundle)

    half = train(cfg, resume=tmp_path / "init.pt", data=small_data, until=10)
    save_checkpoint(tmp_path / "half.pt", half.bundle, cfg, half)
    resumed = train(cfg, resume=tmp_path / "half.pt", data=small_data)
    assert resumed.step == 20
    assert group_hashes(resumed.bundle) == full


def test_missing_component(small_data):
    cfg = _small_cfg()
    bundle = Bundle.from_config(cfg)
    del bundle.cdre.embed
    with pytest.raises(ValueError, match="missing components: embed"):
        train(cfg, bundle, small_data)


# --- checkpoints --------------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    cfg = _small_cfg()
    torch.manual_seed(0)
    bundle = Bundle.from_config(cfg)
    save_checkpoint(tmp_path / "c.pt", bundle, cfg)
    loaded, cfg2, ck = load_bundle(tmp_path / "c.pt")
    assert cfg2 == cfg and ck["config_hash"] == cfg.hash()
    assert group_hashes(loaded) == group_hashes(bundle)


def test_checkpoint_errors(tmp_path):
    (tmp_path / "junk.pt").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "junk.pt")
    torch.save({"format": "other"}, tmp_path / "other.pt")
    with pytest.raises(CheckpointError, match="not a CDRE checkpoint"):
        read_checkpoint(tmp_path / "other.pt")
    torch.save({"format": "cdre-checkpoint", "version": 99}, tmp_path / "v.pt")
    with pytest.raises(CheckpointError, match="version"):
        read_checkpoint(tmp_path / "v.pt")
    torch.save({"format": "cdre-checkpoint", "version": 1, "groups": {}}, tmp_path / "g.pt")
    with pytest.raises(CheckpointError, match="missing groups"):
        read_checkpoint(tmp_path / "g.pt")
    with pytest.raises(FileNotFoundError):
        read_checkpoint(tmp_path / "absent.pt")


def test_checkpoint_architecture_mismatch(tmp_path):
    cfg = _small_cfg()
    save_checkpoint(tmp_path / "c.pt", Bundle.from_config(cfg), cfg)
    other = cfg.replace(**{"cdre.latent_channels": 3})
    with pytest.raises(CheckpointError, match="architecture"):
        train(other, resume=tmp_path / "c.pt")
