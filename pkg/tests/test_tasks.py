import math

import numpy as np
import pytest
import torch

from cdre import tasks
from cdre.tasks import NUM_CLASSES, SplitData, gen_dataset, task_loss, task_metric


def test_gen_dataset_deterministic():
    a, b = gen_dataset(7, 100), gen_dataset(7, 100)
    for s, t in zip(a, b):
        assert s.label == t.label and s.seed == t.seed and np.array_equal(s.image, t.image)
    assert not np.array_equal(gen_dataset(8, 100)[0].image, a[0].image)


def test_regenerable_from_sample_seed():
    s = gen_dataset(3, 5)[2]
    assert np.array_equal(tasks.render(s.label, s.seed), s.image)
    assert s.image.shape == (3, 64, 64) and s.image.dtype == np.uint8


def test_class_balance():
    counts = np.bincount([s.label for s in gen_dataset(11, 1000)], minlength=NUM_CLASSES)
    assert counts.min() >= 99 and counts.max() <= 101


def test_gen_dataset_rejects_nonpositive():
    with pytest.raises(ValueError):
        gen_dataset(0, 0)
    with pytest.raises(ValueError):
        tasks.render(10, 0)


def test_task_loss_uniform_is_ln10():
    assert abs(task_loss(torch.zeros(10), 3).item() - math.log(10)) < 1e-6


def test_task_loss_confident_correct():
    lg = torch.zeros(10, dtype=torch.float64)
    lg[4] = 1e3
    assert task_loss(lg, 4).item() < 1e-12


def test_task_loss_scalar_oracle(rng):
    logits = rng.normal(size=(6, 10)) * 3
    labels = rng.integers(0, 10, 6)
    ref = 0.0
    for row, y in zip(logits, labels):
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        ref += lse - row[y]
    ref /= len(labels)
    got = task_loss(torch.from_numpy(logits), labels).item()
    assert abs(got - ref) < 1e-6


def test_task_loss_errors():
    with pytest.raises(ValueError, match="out of range"):
        task_loss(torch.zeros(10), 10)
    with pytest.raises(ValueError, match="out of range"):
        task_loss(torch.zeros(2, 10), [-1, 0])
    with pytest.raises(ValueError):
        task_loss(torch.zeros(2, 10), [1])


def test_task_metric_examples():
    y = np.arange(10)
    assert task_metric(y, y) == 1.0
    assert task_metric((y + 1) % 10, y) == 0.0
    assert task_metric(np.r_[y[:7], (y[7:] + 1) % 10], y) == pytest.approx(0.7)
    logits = torch.eye(10)
    assert task_metric(logits, torch.arange(10)) == 1.0
    with pytest.raises(ValueError, match="empty input"):
        task_metric([], [])
    with pytest.raises(ValueError, match="length mismatch"):
        task_metric([1, 2], [1])


def test_split_data_cache_roundtrip(tmp_path, monkeypatch):
    monkeypatch.setenv("CDRE_DATA_DIR", str(tmp_path))
    d = SplitData.generate(5, 12)
    dec, bpp = d.compressed(10)
    assert (tmp_path / f"{d.tag}-q10.npz").exists()
    again = SplitData.generate(5, 12).compressed(10)
    assert np.array_equal(again[0], dec) and np.array_equal(again[1], bpp)
    x, xh, y = d.tensors(np.arange(4), 10)
    assert x.shape == xh.shape == (4, 3, 64, 64) and y.tolist() == d.labels[:4].tolist()


def test_compression_removes_texture_not_silhouette():
    d = SplitData.generate(9, 20)
    dec = d.compressed(10)[0].astype(float)
    orig = d.images.astype(float)
    # block means survive exactly up to rounding; high frequencies do not
    bm = lambda a: a.reshape(20, 3, 8, 8, 8, 8).mean(axis=(3, 5))
    assert np.abs(bm(dec) - bm(orig)).max() < 1.0
    assert np.abs(dec - orig).mean() > 2.0
