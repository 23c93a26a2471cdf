"""Loss, training regimes and checkpoint I/O.

Two regimes are supported. ``fd`` freezes the downstream backbone and head
and trains only the CDRE modules; ``joint`` updates everything, with a
smaller learning rate on the downstream model. Each step draws its batch
and base-codec quality from a generator seeded by ``(seed, step)``, so a run
resumed from a checkpoint replays exactly the batches an uninterrupted run
would have seen.
"""

from __future__ import annotations

import hashlib
import io
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, derive_seed
from .errors import CheckpointError
from .extractor import scale_cosines
from .pipeline import CDRE_GROUPS, GROUPS, Bundle
from .tasks import SplitData, task_loss

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "cdre-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class LossBreakdown:
    total: torch.Tensor
    task: torch.Tensor
    distortion_reg: torch.Tensor  # [L], each 1 + mean cosine, in [0, 2]

    def floats(self):
        return {
            "total": self.total.item(),
            "task": self.task.item(),
            "distortion_reg": self.distortion_reg.tolist(),
        }


def cdre_loss(task, feats_o, feats_c, lam: float, use_cosine: bool = True) -> LossBreakdown:
    """``task + lam * sum_i (1 + cos_i)`` with ``cos_i`` the mean per-location cosine at scale ``i``.

    For batched pyramids the cosine is averaged over the batch as well.
    ``use_cosine=False`` still reports the regularizer but leaves it out of the
    total (extractor ablation).
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    cos = scale_cosines(feats_o, feats_c)
    if cos.dim() == 2:
        cos = cos.mean(dim=0)
    reg = 1.0 + cos
    task = torch.as_tensor(task, dtype=reg.dtype)
    total = task + lam * reg.sum() if use_cosine else task
    return LossBreakdown(total, task, reg)


def param_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def group_hashes(bundle: Bundle, groups=GROUPS):
    return {g: param_hash(bundle.group(g)) for g in groups}


def _step_rng(seed, step):
    return np.random.default_rng([seed, step])


# --- downstream pretraining --------------------------------------------------


def pretrain_downstream(bundle: Bundle, data: SplitData, steps, lr, batch_size, seed):
    """Fit backbone + head on uncompressed images (the off-the-shelf task model)."""
    model = bundle.downstream
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(1, steps))
    for step in range(steps):
        idx = _step_rng(seed, step).choice(len(data), batch_size, replace=False)
        x, _, y = data.tensors(idx)
        loss = task_loss(model(x)[1], y)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if step % 200 == 0:
            log.info("pretrain step %d loss %.4f", step, loss.item())
    model.eval()


# --- CDRE training -------------------------------------------------------------


class Trainer:
    """Owns the optimizer and step counter for one regime."""

    def __init__(self, cfg: RunConfig, bundle: Bundle, data: SplitData):
        self.cfg = cfg
        self.bundle = bundle
        self.data = data
        self.step = 0
        self.seed = derive_seed(cfg.seed, "train")
        self.history = []
        t = cfg.training
        groups = [{"params": list(bundle.cdre.parameters()), "lr": t.lr}]
        if t.regime == "joint":
            bundle.downstream.requires_grad_(True)
            groups.append({"params": list(bundle.downstream.parameters()), "lr": t.backbone_lr})
        else:
            bundle.downstream.requires_grad_(False)
        self.opt = torch.optim.Adam(groups)

    def batch(self, step):
        rng = _step_rng(self.seed, step)
        q = int(rng.choice(self.cfg.codec.train_qualities))
        idx = rng.choice(len(self.data), self.cfg.training.batch_size, replace=False)
        return self.data.tensors(idx, q)

    def loss(self, x, x_hat, y) -> LossBreakdown:
        logits, _, feats_o, feats_c = self.bundle.cdre_logits(x, x_hat)
        return cdre_loss(
            task_loss(logits, y), feats_o, feats_c, self.cfg.training.lam, self.cfg.cdre.cosine
        )

    def train_step(self):
        b = self.bundle
        b.cdre.train()
        # downstream has no batch-dependent layers; eval() keeps fd a pure function
        b.downstream.train(self.cfg.training.regime == "joint")
        out = self.loss(*self.batch(self.step))
        self.opt.zero_grad()
        out.total.backward()
        self.opt.step()
        self.step += 1
        rec = {"step": self.step, **out.floats()}
        self.history.append(rec)
        if self.step % self.cfg.training.log_every == 0:
            log.info("step %d total %.4f task %.4f", self.step, rec["total"], rec["task"])
        return out

    def run(self, until=None):
        until = self.cfg.training.steps if until is None else until
        while self.step < until:
            self.train_step()
        b = self.bundle
        b.eval()
        return self

    # checkpoint state ---------------------------------------------------------

    def state(self):
        return {
            "step": self.step,
            "optimizer": self.opt.state_dict(),
            "history": self.history,
        }

    def load_state(self, st):
        self.step = int(st["step"])
        self.opt.load_state_dict(st["optimizer"])
        self.history = list(st.get("history", []))


def prepare(cfg: RunConfig, data: SplitData | None = None):
    """Build a seeded bundle, pretrain its downstream model; returns ``(bundle, data)``."""
    if data is None:
        data = SplitData.generate(derive_seed(cfg.seed, "train-data"), cfg.dataset.n_train, cfg.dataset.image_size)
    torch.manual_seed(derive_seed(cfg.seed, "init"))
    bundle = Bundle.from_config(cfg)
    t = cfg.training
    if t.pretrain_steps:
        pretrain_downstream(
            bundle, data, t.pretrain_steps, t.pretrain_lr, t.batch_size, derive_seed(cfg.seed, "pretrain")
        )
    bundle.eval()
    return bundle, data


def train(cfg: RunConfig, bundle: Bundle | None = None, data: SplitData | None = None, resume=None, until=None):
    """Train CDRE modules (and the downstream model in ``joint``).

    Returns the :class:`Trainer`; ``save_checkpoint(path, trainer)`` persists it.
    ``resume`` is a checkpoint path or dict to continue from.
    """
    if resume is not None:
        ck = resume if isinstance(resume, dict) else read_checkpoint(resume)
        bundle = bundle or Bundle.from_config(cfg)
        apply_checkpoint(bundle, ck, cfg)
    if bundle is None:
        bundle, data = prepare(cfg, data)
    missing = [g for g in GROUPS if not _has_group(bundle, g)]
    if missing:
        raise ValueError(f"model bundle is missing components: {', '.join(missing)}")
    if data is None:
        data = SplitData.generate(derive_seed(cfg.seed, "train-data"), cfg.dataset.n_train, cfg.dataset.image_size)
    trainer = Trainer(cfg, bundle, data)
    if resume is not None and ck.get("trainer"):
        trainer.load_state(ck["trainer"])
    return trainer.run(until)


def _has_group(bundle, g):
    try:
        bundle.group(g)
    except (KeyError, AttributeError):
        return False
    return True


# --- checkpoints -------------------------------------------------------------------


def make_checkpoint(bundle: Bundle, cfg: RunConfig, trainer: Trainer | None = None, stage="trained"):
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "stage": stage,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "groups": {g: bundle.group(g).state_dict() for g in GROUPS},
        "trainer": trainer.state() if trainer is not None else None,
    }


def save_checkpoint(path, bundle: Bundle, cfg: RunConfig, trainer: Trainer | None = None, stage="trained"):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(make_checkpoint(bundle, cfg, trainer, stage), buf)
    path.write_bytes(buf.getvalue())
    return path


def read_checkpoint(path) -> dict:
    try:
        ck = torch.load(Path(path), map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise
    except Exception as exc:  # torch raises assorted types on garbage input
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(ck, dict) or ck.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a CDRE checkpoint")
    if ck.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {ck.get('version')}")
    missing = [g for g in GROUPS if g not in ck.get("groups", {})]
    if missing:
        raise CheckpointError(f"checkpoint missing groups: {', '.join(missing)}")
    return ck


def apply_checkpoint(bundle: Bundle, ck: dict, cfg: RunConfig | None = None):
    if cfg is not None:
        arch = ("backbone", "cdre", "dataset")
        saved = {k: ck["config"].get(k) for k in arch}
        now = {k: cfg.to_dict()[k] for k in arch}
        if saved != now:
            raise CheckpointError("checkpoint architecture does not match the config")
    for g in GROUPS:
        try:
            bundle.group(g).load_state_dict(ck["groups"][g])
        except RuntimeError as exc:
            raise CheckpointError(f"group {g!r}: {exc}") from exc
    bundle.eval()
    return bundle


def load_bundle(path):
    """``(bundle, config, checkpoint)`` from a checkpoint file."""
    ck = read_checkpoint(path)
    cfg = RunConfig.from_dict(ck["config"])
    return apply_checkpoint(Bundle.from_config(cfg), ck), cfg, ck

