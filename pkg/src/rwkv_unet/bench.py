"""Wall-clock scaling benchmarks: WKV kernel versus sequence length, full model versus resolution."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .model import build, forward
from .nn import count_macs
from .rwkv import WkvParams, bi_wkv
from .tensor import Tensor, no_grad


@dataclass
class LinearFit:
    slope: float
    intercept: float
    r2: float


def fit_linear(x, y) -> LinearFit:
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid ** 2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return LinearFit(float(slope), float(intercept), r2)


def _best_time(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def wkv_timing(lengths=(256, 1024, 4096), channels: int = 64, repeats: int = 5, seed: int = 0):
    """Best-of-``repeats`` forward time of the WKV kernel per sequence length."""
    rng = np.random.default_rng(seed)
    p = WkvParams.create(channels, np.float64)
    rows = []
    with no_grad():
        bi_wkv(Tensor(rng.standard_normal((1, 8, channels))), Tensor(rng.standard_normal((1, 8, channels))), p)
        for t in lengths:
            k = Tensor(rng.standard_normal((1, t, channels)))
            v = Tensor(rng.standard_normal((1, t, channels)))
            rows.append((t, _best_time(lambda: bi_wkv(k, v, p), repeats)))
    return rows


def resolution_bench(variant="tiny", resolutions=(128, 256, 512), in_channels: int = 3,
                     num_classes: int = 9, repeats: int = 1, seed: int = 0):
    """(resolution, counted MACs, seconds) for one no-grad forward per resolution."""
    model = build(variant, in_channels, num_classes, seed)
    rng = np.random.default_rng(seed)
    rows = []
    with no_grad():
        for r in resolutions:
            x = Tensor(rng.standard_normal((1, in_channels, r, r)).astype(np.float32))
            with count_macs() as sink:
                forward(model, x)
            macs = sum(sink.values())
            rows.append((r, macs, _best_time(lambda: forward(model, x), repeats)))
    return rows
