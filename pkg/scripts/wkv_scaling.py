"""Time the bidirectional WKV kernel over sequence lengths and fit a line."""

from __future__ import annotations

import argparse

from rwkv_unet.bench import fit_linear, wkv_timing


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--lengths", type=int, nargs="+", default=[256, 1024, 4096, 16384])
    ap.add_argument("--channels", type=int, default=64)
    ap.add_argument("--repeats", type=int, default=7)
    args = ap.parse_args(argv)

    rows = wkv_timing(args.lengths, args.channels, args.repeats)
    for t, sec in rows:
        print(f"T={t:>6}  {sec * 1e3:9.3f} ms  {sec / t * 1e9:8.1f} ns/token")
    fit = fit_linear(*zip(*rows))
    print(f"slope={fit.slope * 1e9:.1f} ns/token intercept={fit.intercept * 1e3:.3f} ms r2={fit.r2:.5f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
