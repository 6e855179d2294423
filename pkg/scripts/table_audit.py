"""Compare counted parameters and MACs with the published target figures.

Each row prints the counted value, the target, the relative deviation and whether
it falls inside the tolerance band. The decoder grid section lists whole-model MACs
for every decoder layout and kernel size, relative to a 3x3 c->d->c decoder.
"""

from __future__ import annotations

import argparse

from rwkv_unet.analysis import count, decoder_variant_grid
from rwkv_unet.model import ModelVariant, build

T, S, B = ModelVariant.TINY, ModelVariant.SMALL, ModelVariant.BASE

# (label, callable producing the counted value, target, relative tolerance)
ROWS = [
    ("enc-T params", lambda: count(T, 3, 224, 9).part("encoder").params, 2.6e6, 0.02),
    ("enc-S params", lambda: count(S, 3, 224, 9).part("encoder").params, 9.4e6, 0.02),
    ("enc-B params", lambda: count(B, 3, 224, 9).part("encoder").params, 16.7e6, 0.02),
    ("full-T params", lambda: build(T, 3, 9).num_parameters(), 3.3e6, 0.03),
    ("full-S params", lambda: build(S, 3, 9).num_parameters(), 9.9e6, 0.03),
    ("full-B params", lambda: build(B, 3, 9).num_parameters(), 17.4e6, 0.03),
    ("enc-T MACs@224", lambda: count(T, 3, 224, 9).part("encoder").macs, 1.9e9, 0.15),
    ("enc-S MACs@224", lambda: count(S, 3, 224, 9).part("encoder").macs, 4.8e9, 0.15),
    ("enc-B MACs@224", lambda: count(B, 3, 224, 9).part("encoder").macs, 9.0e9, 0.15),
    ("full-B 1ch/9cls MACs@224", lambda: count(B, 1, 224, 9).macs, 11.22e9, 0.15),
    ("full-B 1ch/9cls MACs@512", lambda: count(B, 1, 512, 9).macs, 58.6e9, 0.15),
    ("full-T 3ch/1cls MACs@256", lambda: count(T, 3, 256, 1).macs, 3.78e9, 0.15),
]


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--grid", action="store_true", help="also print the decoder layout/kernel grid for base")
    args = ap.parse_args(argv)

    width = max(len(r[0]) for r in ROWS)
    print(f"{'quantity':<{width}}  {'counted':>15}  {'target':>15}  {'dev':>7}  band")
    failures = 0
    for label, fn, target, tol in ROWS:
        value = fn()
        dev = (value - target) / target
        ok = abs(dev) <= tol
        failures += not ok
        print(f"{label:<{width}}  {value:>15,}  {target:>15,.0f}  {dev:>+7.1%}  "
              f"+-{tol:.0%} {'ok' if ok else 'OUT'}")

    if args.grid:
        rows = decoder_variant_grid(B)
        base = next(m for o, k, m in rows if (o, k) == ("cdc", 3))
        print("\norder  k  MACs(G)  delta vs cdc-3 (G)")
        for order, k, macs in rows:
            print(f"{order:<5} {k:>2}  {macs / 1e9:7.3f}  {(macs - base) / 1e9:+.3f}")
    print(f"\n{len(ROWS) - failures}/{len(ROWS)} inside their bands")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
