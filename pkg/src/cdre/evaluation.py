"""Rate-task curves, Bjontegaard delta rate, ablations and overhead accounting."""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .config import RunConfig
from .distortion import side_bpp_for
from .pipeline import ENCODER_SIDE, GROUPS, Bundle
from .tasks import SplitData, task_metric

log = logging.getLogger(__name__)


# --- rate-task curves ---------------------------------------------------------


@dataclass
class RateTaskCurve:
    points: list  # [(bpp, metric)]
    label: str = ""
    config_hash: str = ""

    def __post_init__(self):
        pts = [(float(b), float(m)) for b, m in self.points]
        for b, m in pts:
            if not b > 0:
                raise ValueError(f"bpp must be > 0, got {b}")
            if not math.isfinite(m):
                raise ValueError(f"metric must be finite, got {m}")
        self.points = pts

    def sorted(self):
        """Points ordered by bpp; bpp must be strictly increasing afterwards."""
        pts = sorted(self.points)
        for (b0, _), (b1, _) in zip(pts, pts[1:]):
            if not b1 > b0:
                raise ValueError(f"duplicate bpp {b1} in curve {self.label!r}")
        return pts

    @property
    def bpp(self):
        return np.array([p[0] for p in self.points])

    @property
    def metric(self):
        return np.array([p[1] for p in self.points])

    def shifted(self, dbpp):
        return RateTaskCurve([(b + dbpp, m) for b, m in self.points], self.label, self.config_hash)

    # --- I/O -----------------------------------------------------------------

    def to_dict(self):
        return {
            "label": self.label,
            "config_hash": self.config_hash,
            "points": [{"bpp": b, "metric": m} for b, m in self.points],
        }

    @classmethod
    def from_dict(cls, d):
        try:
            pts = [(p["bpp"], p["metric"]) for p in d["points"]]
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed curve: {exc}") from exc
        return cls(pts, d.get("label", ""), d.get("config_hash", ""))

    def to_csv(self):
        buf = io.StringIO()
        buf.write(f"# label={self.label} config_hash={self.config_hash}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bpp", "metric"])
        for b, m in self.points:
            w.writerow([repr(b), repr(m)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        meta = {}
        rows = []
        for line in text.splitlines():
            if line.startswith("#"):
                for tok in line[1:].split():
                    k, _, v = tok.partition("=")
                    meta[k] = v
            elif line.strip():
                rows.append(line)
        reader = csv.DictReader(rows)
        if reader.fieldnames is None or not {"bpp", "metric"} <= set(reader.fieldnames):
            raise ValueError("curve CSV needs 'bpp' and 'metric' columns")
        try:
            pts = [(float(r["bpp"]), float(r["metric"])) for r in reader]
        except (TypeError, ValueError) as exc:
            raise ValueError(f"malformed curve CSV: {exc}") from exc
        return cls(pts, meta.get("label", ""), meta.get("config_hash", ""))

    def save(self, path):
        path = Path(path)
        text = self.to_csv() if path.suffix == ".csv" else json.dumps(self.to_dict(), indent=2) + "\n"
        path.write_text(text)
        return path

    @classmethod
    def load(cls, path):
        path = Path(path)
        text = path.read_text()
        if path.suffix == ".csv":
            return cls.from_csv(text)
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: not a curve file ({exc})") from exc


@torch.no_grad()
def accuracy(bundle: Bundle, data: SplitData, quality=None, use_cdre=False, batch_size=250):
    """Top-1 over ``data``; on originals when ``quality`` is None."""
    bundle.eval()
    preds = []
    for start in range(0, len(data), batch_size):
        idx = np.arange(start, min(start + batch_size, len(data)))
        x, x_hat, _ = data.tensors(idx, quality)
        if x_hat is None:
            logits = bundle.downstream(x)[1]
        elif use_cdre:
            logits = bundle.cdre_logits(x, x_hat)[0]
        else:
            logits = bundle.baseline_logits(x_hat)
        preds.append(logits.argmax(1))
    return task_metric(torch.cat(preds), data.labels)


def rate_task_curve(
    bundle: Bundle,
    data: SplitData,
    qualities,
    include_side_channel=True,
    use_cdre=True,
    label="",
    latent_channels=None,
    batch_size=250,
    config_hash="",
) -> RateTaskCurve:
    """One ``(bpp, top-1)`` point per base-codec quality.

    With ``use_cdre`` the side-channel rate (fixed for a given frame size) is
    added to every point unless ``include_side_channel`` is off.
    """
    qualities = [int(q) for q in qualities]
    if not qualities:
        raise ValueError("at least one quality is required")
    h, w = data.images.shape[-2:]
    c = latent_channels if latent_channels is not None else bundle.cdre.dist_enc.latent_channels
    extra = side_bpp_for(h, w, c) if use_cdre and include_side_channel else 0.0
    pts = []
    for q in qualities:
        acc = accuracy(bundle, data, q, use_cdre, batch_size)
        pts.append((data.mean_bpp(q) + extra, acc))
        log.info("%s q=%d bpp=%.4f acc=%.4f", label or "curve", q, pts[-1][0], acc)
    return RateTaskCurve(pts, label or ("cdre" if use_cdre else "baseline"), config_hash)


# --- Bjontegaard delta rate ---------------------------------------------------------


def _bd_points(curve: RateTaskCurve, name):
    if len(curve.points) < 4:
        raise ValueError(f"{name} curve needs >= 4 points, got {len(curve.points)}")
    pts = curve.sorted()
    metric = np.array([p[1] for p in pts])
    if not np.all(np.diff(metric) > 0):
        raise ValueError(f"{name} curve metric is not strictly increasing with bpp (non-monotonic metric)")
    return np.log10([p[0] for p in pts]), metric


def bd_rate(anchor: RateTaskCurve, test: RateTaskCurve) -> float:
    """Average bitrate change (percent) of ``test`` vs ``anchor`` at equal metric.

    Cubic fit of log10(bpp) as a function of the metric for each curve,
    integrated over the overlap of the two metric ranges. Negative means
    ``test`` needs fewer bits.
    """
    r1, m1 = _bd_points(anchor, "anchor")
    r2, m2 = _bd_points(test, "test")
    lo, hi = max(m1.min(), m2.min()), min(m1.max(), m2.max())
    if not hi > lo:
        raise ValueError("disjoint quality ranges")
    p1 = np.polyint(np.polyfit(m1, r1, 3))
    p2 = np.polyint(np.polyfit(m2, r2, 3))
    int1 = np.polyval(p1, hi) - np.polyval(p1, lo)
    int2 = np.polyval(p2, hi) - np.polyval(p2, lo)
    avg = (int2 - int1) / (hi - lo)
    return float((10.0**avg - 1.0) * 100.0)


# --- parameter and compute accounting -------------------------------------------


def count_params(obj, group=None) -> int:
    """Scalar parameter count of a module, or of named group(s) of a bundle."""
    if group is None:
        return sum(p.numel() for p in obj.parameters())
    names = [group] if isinstance(group, str) else list(group)
    if not isinstance(obj, Bundle):
        raise TypeError("named groups need a Bundle")
    for g in names:
        if g not in GROUPS:
            raise KeyError(f"unknown parameter group {g!r} (known: {', '.join(GROUPS)})")
    return sum(p.numel() for g in names for p in obj.group(g).parameters())


@dataclass(frozen=True)
class LayerSpec:
    """One multiply-accumulate-bearing layer at a concrete input size.

    ``kind`` is ``conv``, ``deconv`` or ``linear``; for ``linear`` the
    ``in_h * in_w`` product is the number of positions the layer is applied to.
    """

    kind: str
    in_ch: int
    out_ch: int
    kernel: int = 1
    stride: int = 1
    groups: int = 1
    in_h: int = 1
    in_w: int = 1
    out_h: int = 1
    out_w: int = 1
    name: str = ""
    group: str = ""

    @classmethod
    def conv(cls, in_ch, out_ch, kernel, stride, in_h, in_w, padding=None, groups=1, **kw):
        p = kernel // 2 if padding is None else padding
        out_h = (in_h + 2 * p - kernel) // stride + 1
        out_w = (in_w + 2 * p - kernel) // stride + 1
        return cls("conv", in_ch, out_ch, kernel, stride, groups, in_h, in_w, out_h, out_w, **kw)

    @property
    def macs(self) -> int:
        if self.kind == "conv":
            return self.out_h * self.out_w * self.out_ch * (self.in_ch // self.groups) * self.kernel**2
        if self.kind == "deconv":
            return self.in_h * self.in_w * self.in_ch * (self.out_ch // self.groups) * self.kernel**2
        if self.kind == "linear":
            return self.in_h * self.in_w * self.in_ch * self.out_ch
        raise ValueError(f"unknown layer kind {self.kind!r}")

    def to_dict(self):
        return dict(self.__dict__)


def macs_per_pixel(specs, h, w) -> float:
    """Total MACs of ``specs`` (laid out for an ``h x w`` source) per source pixel."""
    if h * w <= 0:
        raise ValueError("H*W must be positive")
    return sum(s.macs for s in specs) / (h * w)


def _group_of(path):
    parts = path.split(".")
    if parts[0] == "cdre":
        return parts[1]
    if parts[:2] == ["downstream", "backbone"]:
        return "backbone"
    if parts[:2] == ["downstream", "head"]:
        return "head"
    return parts[0]


def trace_layers(bundle: Bundle, h, w, with_downstream=True):
    """Layer specs of every conv/linear a CDRE inference at ``h x w`` executes.

    Runs on the ``meta`` device, so it costs no real compute at any size.
    Modules called twice (the extractor sees both images) appear twice.
    """
    model = copy.deepcopy(bundle).to("meta")
    specs = []
    hooks = []

    def make_hook(path):
        def hook(m, args, out):
            x = args[0]
            if isinstance(m, nn.Conv2d):
                s = LayerSpec(
                    "conv", m.in_channels, m.out_channels, m.kernel_size[0], m.stride[0], m.groups,
                    x.shape[-2], x.shape[-1], out.shape[-2], out.shape[-1],
                )
            elif isinstance(m, nn.ConvTranspose2d):
                s = LayerSpec(
                    "deconv", m.in_channels, m.out_channels, m.kernel_size[0], m.stride[0], m.groups,
                    x.shape[-2], x.shape[-1], out.shape[-2], out.shape[-1],
                )
            else:
                pos = x.numel() // x.shape[0] // m.in_features
                s = LayerSpec("linear", m.in_features, m.out_features, in_h=pos, in_w=1, out_h=pos, out_w=1)
            specs.append(LayerSpec(**{**s.to_dict(), "name": path, "group": _group_of(path)}))

        return hook

    for path, mod in model.named_modules():
        if isinstance(mod, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            hooks.append(mod.register_forward_hook(make_hook(path)))
    x = torch.zeros(1, 3, h, w, device="meta")
    try:
        with torch.no_grad():
            if with_downstream:
                model.cdre_logits(x, x)
            else:
                model.cdre.encode(x, x)
    finally:
        for hk in hooks:
            hk.remove()
    # nn.MultiheadAttention calls its projections functionally; count them here
    for path, mod in model.named_modules():
        if isinstance(mod, nn.MultiheadAttention):
            specs.extend(_mha_specs(path, mod, specs, h, w))
    return specs


def _mha_specs(path, mod, specs, h, w):
    # token count of the enclosing stage: same as the out_proj-less block's MLP input
    mlp = [s for s in specs if s.name.startswith(path.rsplit(".", 1)[0] + ".mlp.0")]
    if not mlp:
        return []
    n = mlp[0].in_h
    d = mod.embed_dim
    g = _group_of(path)
    return [
        LayerSpec("linear", d, 3 * d, in_h=n, out_h=n, name=path + ".in_proj", group=g),
        LayerSpec("linear", d, d, in_h=n, out_h=n, name=path + ".out_proj", group=g),
    ]


@dataclass
class OverheadReport:
    params_by_group: dict = field(default_factory=dict)
    macs_per_pixel_by_group: dict = field(default_factory=dict)
    side_bpp: float = 0.0
    height: int = 0
    width: int = 0

    def __post_init__(self):
        vals = list(self.params_by_group.values()) + list(self.macs_per_pixel_by_group.values())
        if any(v < 0 for v in vals) or self.side_bpp < 0:
            raise ValueError("overhead entries must be nonnegative")

    def total_params(self, groups=ENCODER_SIDE):
        return sum(self.params_by_group[g] for g in groups)

    def total_macs(self, groups=ENCODER_SIDE):
        return sum(self.macs_per_pixel_by_group.get(g, 0.0) for g in groups)

    def to_dict(self):
        return {
            "params_by_group": dict(self.params_by_group),
            "macs_per_pixel_by_group": dict(self.macs_per_pixel_by_group),
            "side_bpp": self.side_bpp,
            "height": self.height,
            "width": self.width,
        }


def overhead_report(bundle: Bundle, h=720, w=1280) -> OverheadReport:
    """Per-group parameters and MACs/pixel at ``h x w`` plus the side-channel rate.

    Attention score/value products are not counted, only convolutions and
    linear projections.
    """
    specs = trace_layers(bundle, h, w)
    macs = {g: 0.0 for g in GROUPS}
    for s in specs:
        macs[s.group] = macs.get(s.group, 0.0) + s.macs / (h * w)
    return OverheadReport(
        {g: count_params(bundle, g) for g in GROUPS},
        macs,
        side_bpp_for(h, w, bundle.cdre.dist_enc.latent_channels),
        h,
        w,
    )


# --- ablations -----------------------------------------------------------------------

CHANNEL_SWEEP = (1, 3, 6, 10, 16)
DEPTH_SWEEP = (1, 2, 3, 4)
# (multi_scale, cosine, modulation); anchor is the full model
EXTRACTOR_SWEEP = (
    (True, False, True),
    (False, True, True),
    (False, False, True),
    (True, True, False),
)
ABLATIONS = ("extractor_parts", "embedding_depth", "channels")


def ablation_variants(kind, base: RunConfig):
    """``[(row label, overrides)]`` for one ablation table."""
    if kind == "channels":
        return [(f"C_y={c}", {"cdre.latent_channels": c}) for c in CHANNEL_SWEEP]
    if kind == "embedding_depth":
        return [(f"depth={d}", {"cdre.embedding_depth": d}) for d in DEPTH_SWEEP]
    if kind == "extractor_parts":
        rows = []
        for ms, cos, mod in EXTRACTOR_SWEEP:
            lab = f"multi_scale={int(ms)} cosine={int(cos)} modulation={int(mod)}"
            rows.append((lab, {"cdre.multi_scale": ms, "cdre.cosine": cos, "cdre.modulation": mod}))
        return rows
    raise ValueError(f"unknown ablation kind {kind!r} (known: {', '.join(ABLATIONS)})")


@dataclass
class AblationRow:
    label: str
    overrides: dict
    config_hash: str
    bd_rate: float | None
    curve: RateTaskCurve


def run_ablation(kind, base: RunConfig, train_data=None, eval_data=None):
    """Train and evaluate each variant under the same seeds.

    Every variant shares one pretrained downstream model. The BD-rate anchor is
    the full model for ``extractor_parts`` and the plain downstream model on
    compressed inputs otherwise. Returns ``(anchor_curve, rows)``.
    """
    from .config import derive_seed
    from .training import prepare, train

    variants = ablation_variants(kind, base)
    bundle, train_data = prepare(base, train_data)
    if eval_data is None:
        eval_data = SplitData.generate(derive_seed(base.seed, "eval-data"), base.dataset.n_eval, base.dataset.image_size)
    pretrained = copy.deepcopy(bundle.downstream.state_dict())
    qualities = base.eval.qualities

    def fit(cfg):
        torch.manual_seed(derive_seed(cfg.seed, "init"))
        b = Bundle.from_config(cfg)
        b.downstream.load_state_dict(pretrained)
        train(cfg, b, train_data)
        return rate_task_curve(
            b, eval_data, qualities, cfg.eval.include_side_channel, True, config_hash=cfg.hash()
        )

    if kind == "extractor_parts":
        anchor = fit(base)
        anchor.label = "full"
    else:
        anchor = rate_task_curve(bundle, eval_data, qualities, use_cdre=False, config_hash=base.hash())
    rows = []
    for label, overrides in variants:
        cfg = base.replace(**overrides)
        curve = fit(cfg)
        curve.label = label
        try:
            bd = bd_rate(anchor, curve)
        except ValueError as exc:
            log.warning("%s: BD-rate undefined (%s)", label, exc)
            bd = None
        rows.append(AblationRow(label, overrides, cfg.hash(), bd, curve))
    return anchor, rows


def ablation_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "config_hash", "bd_rate_percent"])
    for r in rows:
        w.writerow([r.label, r.config_hash, "" if r.bd_rate is None else f"{r.bd_rate:.4f}"])
    return buf.getvalue()
