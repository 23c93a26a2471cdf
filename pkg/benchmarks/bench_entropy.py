"""Time the block entropy coder backends on a 720p frame's worth of coefficients.

    python benchmarks/bench_entropy.py [--quality 30] [--repeat 3]
"""

import argparse
import time

import numpy as np

from cdre import codec, entropy


def frame_levels(quality, seed=0, h=720, w=1280):
    rng = np.random.default_rng(seed)
    # smooth gradient plus noise: a mix of zero runs and nonzero levels
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    base = 0.5 + 0.3 * np.sin(6 * xx) * np.cos(4 * yy)
    img = np.clip(base[None] + rng.normal(0, 0.05, (3, h, w)), 0, 1)
    flat = codec.quantize_image(img, quality)
    per_channel = flat.shape[0] // 3
    dc = flat[:, 0].reshape(3, per_channel)
    flat[:, 0] = np.diff(dc, axis=1, prepend=0).reshape(-1)
    return flat


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--quality", type=int, default=30)
    p.add_argument("--repeat", type=int, default=3)
    args = p.parse_args(argv)

    flat = frame_levels(args.quality)
    print(f"blocks={len(flat)} quality={args.quality}")
    ref = None
    for name, mod in entropy.backends().items():
        t_enc, data = best_of(lambda: mod.encode_blocks(flat), args.repeat)
        t_dec, back = best_of(lambda: mod.decode_blocks(data, len(flat)), args.repeat)
        assert np.array_equal(back, flat)
        if ref is None:
            ref = data
        assert data == ref, "backends disagree"
        print(f"{name:7s} bytes={len(data)} encode={t_enc * 1e3:.1f}ms decode={t_dec * 1e3:.1f}ms")


if __name__ == "__main__":
    main()
