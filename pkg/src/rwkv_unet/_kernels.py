"""Compiled depthwise-convolution kernels; ``None`` when numba is unavailable."""

from __future__ import annotations

import os

try:
    if os.environ.get("RWKV_UNET_NO_NUMBA", "") not in ("", "0"):
        raise ImportError("numba disabled by environment")
    import numba
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None


if numba is not None:

    @numba.njit(cache=True, nogil=True, fastmath=True)
    def dw_forward(xp, wd, s, ho, wo, out):
        n, c = xp.shape[0], xp.shape[1]
        k = wd.shape[1]
        for b in range(n):
            for ch in range(c):
                o = out[b, ch]
                x = xp[b, ch]
                for i in range(k):
                    for j in range(k):
                        wij = wd[ch, i, j]
                        for oy in range(ho):
                            row = x[oy * s + i]
                            orow = o[oy]
                            if s == 1:
                                for ox in range(wo):
                                    orow[ox] += wij * row[ox + j]
                            else:
                                for ox in range(wo):
                                    orow[ox] += wij * row[ox * s + j]

    @numba.njit(cache=True, nogil=True, fastmath=True)
    def dw_backward(xp, wd, g, s, gxp, gw, want_gx):
        n, c = xp.shape[0], xp.shape[1]
        k = wd.shape[1]
        ho, wo = g.shape[2], g.shape[3]
        for b in range(n):
            for ch in range(c):
                x = xp[b, ch]
                gp = g[b, ch]
                for i in range(k):
                    for j in range(k):
                        wij = wd[ch, i, j]
                        acc = gw[ch, i, j] * 0  # zero of the gradient dtype
                        for oy in range(ho):
                            row = x[oy * s + i]
                            grow = gp[oy]
                            if s == 1:
                                for ox in range(wo):
                                    acc += grow[ox] * row[ox + j]
                            else:
                                for ox in range(wo):
                                    acc += grow[ox] * row[ox * s + j]
                        gw[ch, i, j] += acc
                        if want_gx:
                            gx = gxp[b, ch]
                            for oy in range(ho):
                                grow = gp[oy]
                                xrow = gx[oy * s + i]
                                if s == 1:
                                    for ox in range(wo):
                                        xrow[ox + j] += wij * grow[ox]
                                else:
                                    for ox in range(wo):
                                        xrow[ox * s + j] += wij * grow[ox]

else:  # pragma: no cover
    dw_forward = dw_backward = None
