"""MACs (and optionally forward wall-clock) against input resolution for each variant, as CSV."""

from __future__ import annotations

import argparse
import csv
import sys

from rwkv_unet.analysis import count
from rwkv_unet.bench import resolution_bench
from rwkv_unet.model import ModelVariant


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--res", type=int, nargs="+", default=[128, 256, 384, 512, 768, 1024])
    ap.add_argument("--in-channels", type=int, default=1)
    ap.add_argument("--classes", type=int, default=9)
    ap.add_argument("--time", action="store_true", help="also time one forward pass per point")
    args = ap.parse_args(argv)

    wr = csv.writer(sys.stdout, lineterminator="\n")
    wr.writerow(["variant", "resolution", "params", "macs", "macs_per_pixel", "seconds"])
    for v in ModelVariant:
        timings = {}
        if args.time:
            timings = {r: s for r, _, s in resolution_bench(v, args.res, args.in_channels, args.classes)}
        for r in args.res:
            rep = count(v, args.in_channels, r, args.classes)
            secs = f"{timings[r]:.3f}" if r in timings else ""
            wr.writerow([v.value, r, rep.params, rep.macs, f"{rep.macs / (r * r):.1f}", secs])
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
