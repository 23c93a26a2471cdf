"""Command-line entry point.

Exit codes: 0 success, 2 usage error, 3 data error, 4 checkpoint problem.
Commands print results as ``key=value`` lines on stdout; diagnostics go to
stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_CHECKPOINT = 4

log = logging.getLogger("cdre")


class UsageError(Exception):
    pass


def _emit(**kv):
    for k, v in kv.items():
        if isinstance(v, float):
            v = f"{v:.6g}"
        print(f"{k}={v}")


def _on_off(text):
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text == "on"


def _qualities(text):
    try:
        qs = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad quality list {text!r}") from None
    if not qs:
        raise argparse.ArgumentTypeError("empty quality list")
    return qs


def load_config(args, required=False):
    from .config import RunConfig

    path = getattr(args, "config", None)
    if path is None:
        if required:
            raise UsageError("--config is required")
        cfg = RunConfig()
    else:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {p}")
        try:
            cfg = RunConfig.load(p)
        except (ValueError, TypeError) as exc:
            raise UsageError(f"bad config {p}: {exc}") from exc
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "regime", None) is not None:
        overrides["training.regime"] = args.regime
    if getattr(args, "channels", None) is not None:
        overrides["cdre.latent_channels"] = args.channels
    if getattr(args, "depth", None) is not None:
        overrides["cdre.embedding_depth"] = args.depth
    if getattr(args, "qualities", None) is not None:
        overrides["eval.qualities"] = args.qualities
    if getattr(args, "include_side_channel", None) is not None:
        overrides["eval.include_side_channel"] = args.include_side_channel
    if getattr(args, "steps", None) is not None:
        overrides["training.steps"] = args.steps
    if overrides:
        try:
            cfg = cfg.replace(**overrides)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    return cfg


# --- commands -------------------------------------------------------------------


def cmd_gen_data(args):
    from PIL import Image

    from . import codec
    from .config import derive_seed
    from .tasks import gen_dataset

    if args.n <= 0:
        raise UsageError(f"--n must be positive, got {args.n}")
    cfg = load_config(args)
    seed = derive_seed(cfg.seed, f"{args.split}-data")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create {out}: {exc}") from exc
    samples = gen_dataset(seed, args.n, cfg.dataset.image_size)
    lines = []
    for i, s in enumerate(samples):
        name = f"{args.split}_{i:06d}.png"
        Image.fromarray(s.image.transpose(1, 2, 0)).save(out / name)
        entry = {"original_path": name, "label": s.label, "seed": s.seed}
        if args.quality is not None:
            stream = codec.dct_encode(s.float_image(), args.quality)
            rec = np.rint(codec.dct_decode(stream) * 255.0).astype(np.uint8)
            cname = f"{args.split}_{i:06d}_q{args.quality}.png"
            Image.fromarray(rec.transpose(1, 2, 0)).save(out / cname)
            entry["compressed_path"] = cname
            entry["base_bpp"] = codec.measure_bpp(stream, *s.image.shape[1:])
        lines.append(json.dumps(entry, sort_keys=True))
    (out / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    meta = {"config_hash": cfg.hash(), "seed": seed, "split": args.split, "n": args.n, "quality": args.quality}
    (out / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    _emit(manifest=out / "manifest.jsonl", n=args.n, seed=seed, config_hash=cfg.hash())


def cmd_train(args):
    from .training import group_hashes, prepare, read_checkpoint, save_checkpoint, train

    cfg = load_config(args, required=True)
    if args.resume:
        ck = read_checkpoint(args.resume)
        trainer = train(cfg, resume=ck, until=args.until)
    else:
        bundle, data = prepare(cfg)
        trainer = train(cfg, bundle, data, until=args.until)
    path = save_checkpoint(args.out, trainer.bundle, cfg, trainer)
    hashes = group_hashes(trainer.bundle, ("backbone", "head"))
    last = trainer.history[-1] if trainer.history else {}
    _emit(
        checkpoint=path,
        step=trainer.step,
        regime=cfg.training.regime,
        loss=float(last.get("total", float("nan"))),
        backbone_hash=hashes["backbone"][:16],
        head_hash=hashes["head"][:16],
        config_hash=cfg.hash(),
    )


def _load_pair(args):
    from . import codec

    try:
        x = codec._load_image(Path(args.original))
        xh = codec._load_image(Path(args.compressed))
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise ValueError(f"cannot read image: {exc}") from exc
    if x.shape != xh.shape:
        raise ValueError(f"dimension mismatch {x.shape} vs {xh.shape}")
    return x, xh


def cmd_encode_dist(args):
    import torch

    from . import distortion
    from .training import load_bundle

    bundle, cfg, _ = load_bundle(args.checkpoint)
    x, xh = _load_pair(args)
    with torch.no_grad():
        y, _, _ = bundle.cdre.encode(
            torch.as_tensor(x, dtype=torch.float32)[None], torch.as_tensor(xh, dtype=torch.float32)[None]
        )
    rep = distortion.quantize(y[0], x.shape[1], x.shape[2])
    data = distortion.serialize(rep)
    out = Path(args.out)
    out.write_bytes(data)
    out.with_name(out.name + ".json").write_text(
        json.dumps({"config_hash": cfg.hash(), "checkpoint": str(args.checkpoint)}, sort_keys=True) + "\n"
    )
    _emit(out=out, bytes=len(data), side_bpp=distortion.side_bpp(rep), shape="x".join(map(str, rep.shape)),
          config_hash=cfg.hash())


def cmd_decode_dist(args):
    import torch

    from . import distortion
    from .training import load_bundle

    bundle, cfg, _ = load_bundle(args.checkpoint)
    try:
        raw = Path(args.input).read_bytes()
    except IsADirectoryError as exc:
        raise ValueError(str(exc)) from exc
    rep = distortion.deserialize(raw)
    bits = rep.tensor()[None]
    with torch.no_grad():
        dset = bundle.cdre.decode(bits, rep.source_h, rep.source_w)
    arrays = {f"d{i}": f[0].numpy() for i, f in enumerate(dset.features)}
    arrays["bits"] = rep.bits
    out = Path(args.out)
    with out.open("wb") as fh:
        np.savez(fh, config_hash=np.array(cfg.hash()), **arrays)
    _emit(out=out, source=f"{rep.source_h}x{rep.source_w}", shape="x".join(map(str, rep.shape)),
          side_bpp=distortion.side_bpp(rep), levels=len(dset.features), config_hash=cfg.hash())


def _eval_data(cfg):
    from .config import derive_seed
    from .tasks import SplitData

    return SplitData.generate(derive_seed(cfg.seed, "eval-data"), cfg.dataset.n_eval, cfg.dataset.image_size)


def cmd_eval(args):
    from .evaluation import rate_task_curve
    from .training import load_bundle

    bundle, cfg, _ = load_bundle(args.checkpoint)
    qualities = args.qualities or cfg.eval.qualities
    side = cfg.eval.include_side_channel if args.include_side_channel is None else args.include_side_channel
    data = _eval_data(cfg)
    curve = rate_task_curve(bundle, data, qualities, side, True, "cdre", config_hash=cfg.hash(),
                            batch_size=cfg.eval.batch_size)
    curve.save(args.out)
    _emit(out=args.out, config_hash=cfg.hash())
    for q, (b, m) in zip(qualities, curve.points):
        print(f"q={q} bpp={b:.6f} metric={m:.6f}")
    if args.baseline_out:
        base = rate_task_curve(bundle, data, qualities, use_cdre=False, label="baseline",
                               config_hash=cfg.hash(), batch_size=cfg.eval.batch_size)
        base.save(args.baseline_out)
        _emit(baseline_out=args.baseline_out)


def cmd_bdrate(args):
    from .evaluation import RateTaskCurve, bd_rate

    anchor = RateTaskCurve.load(args.anchor)
    test = RateTaskCurve.load(args.test)
    print(f"bd_rate_percent={bd_rate(anchor, test):.2f}")


def cmd_overhead(args):
    from .evaluation import overhead_report
    from .pipeline import ENCODER_SIDE, Bundle
    from .training import load_bundle

    if args.checkpoint:
        bundle, cfg, _ = load_bundle(args.checkpoint)
    else:
        cfg = load_config(args)
        bundle = Bundle.from_config(cfg)
    rep = overhead_report(bundle, args.height, args.width)
    for g, n in rep.params_by_group.items():
        print(f"params.{g}={n}")
    for g, m in rep.macs_per_pixel_by_group.items():
        print(f"macs_per_pixel.{g}={m:.2f}")
    _emit(
        encoder_params=rep.total_params(ENCODER_SIDE),
        encoder_macs_per_pixel=round(rep.total_macs(ENCODER_SIDE), 2),
        side_bpp=rep.side_bpp,
        frame=f"{args.width}x{args.height}",
        config_hash=cfg.hash(),
    )


def cmd_ablate(args):
    from .evaluation import ablation_csv, run_ablation

    cfg = load_config(args)
    anchor, rows = run_ablation(args.kind, cfg)
    text = f"# kind={args.kind} anchor={anchor.label} config_hash={cfg.hash()}\n" + ablation_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)


# --- parser ------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="cdre", description="Compression distortion representation embedding toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="JSON run config")
            sp.add_argument("--seed", type=int)
        return sp

    sp = common(sub.add_parser("gen-data", help="render a synthetic split to PNG files plus a manifest"))
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--split", choices=("train", "eval"), default="train")
    sp.add_argument("--quality", type=int, help="also write base-codec reconstructions at this quality")
    sp.set_defaults(func=cmd_gen_data)

    sp = common(sub.add_parser("train", help="pretrain the downstream model and train CDRE"))
    sp.add_argument("--regime", choices=("fd", "joint"))
    sp.add_argument("--channels", type=int)
    sp.add_argument("--depth", type=int)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--until", type=int, help="stop after this many steps (for later --resume)")
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("encode-dist", help="write the side-channel bitstream for an image pair")
    sp.add_argument("--original", required=True)
    sp.add_argument("--compressed", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_encode_dist)

    sp = sub.add_parser("decode-dist", help="decode a side-channel bitstream to embedding features")
    sp.add_argument("--input", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_decode_dist)

    sp = sub.add_parser("eval", help="rate-task curve on the eval split")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--qualities", type=_qualities)
    sp.add_argument("--include-side-channel", type=_on_off, metavar="{on,off}")
    sp.add_argument("--out", required=True, help="curve file (.json or .csv)")
    sp.add_argument("--baseline-out", help="also write the no-side-channel baseline curve")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bdrate", help="BD-rate of a test curve against an anchor curve")
    sp.add_argument("anchor")
    sp.add_argument("test")
    sp.set_defaults(func=cmd_bdrate)

    sp = common(sub.add_parser("overhead", help="parameters and MACs/pixel per group"))
    sp.add_argument("--checkpoint")
    sp.add_argument("--height", type=int, default=720)
    sp.add_argument("--width", type=int, default=1280)
    sp.set_defaults(func=cmd_overhead)

    sp = common(sub.add_parser("ablate", help="run one ablation table"))
    sp.add_argument("kind", choices=("extractor_parts", "embedding_depth", "channels"))
    sp.add_argument("--qualities", type=_qualities)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    from .errors import CheckpointError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"cdre {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as exc:
        print(f"cdre {args.command}: checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"cdre {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
