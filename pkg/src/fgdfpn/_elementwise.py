"""Single-pass compiled elementwise loops for the hottest activations."""

import numba
import numpy as np


@numba.njit(cache=True)
def leaky_forward(x, slope, out):
    xf = x.ravel()
    of = out.ravel()
    for i in range(xf.size):
        v = xf[i]
        of[i] = v if v > 0 else v * slope


@numba.njit(cache=True)
def leaky_backward(y, g, slope, out):
    # slope > 0, so sign(y) == sign(x)
    yf = y.ravel()
    gf = g.ravel()
    of = out.ravel()
    for i in range(yf.size):
        of[i] = gf[i] if yf[i] > 0 else gf[i] * slope


@numba.njit(cache=True)
def bounded_offsets(raw, flow, m, out, dtanh):
    """out[:, 2j + d] = m * tanh(raw[:, 2j + d]) + flow[:, 1 - d]; d = 0 is dy.

    ``dtanh`` receives m * (1 - tanh^2) for the backward pass.
    """
    n_b, n_off, h, w = out.shape
    one = m / m
    for b in range(n_b):
        for c in range(n_off):
            src = raw[b, c].ravel()
            fl = flow[b, 1 - c % 2].ravel()
            dst = out[b, c].ravel()
            dt = dtanh[b, c].ravel()
            for i in range(h * w):
                t = np.tanh(src[i])
                dst[i] = m * t + fl[i]
                dt[i] = m * (one - t * t)


@numba.njit(cache=True)
def bounded_offsets_backward(g, dtanh, g_raw, g_flow):
    """Fills the offset channels of ``g_raw``; ``g_flow`` must be zeroed."""
    n_b, n_off, h, w = g.shape
    for b in range(n_b):
        for c in range(n_off):
            gs = g[b, c].ravel()
            dt = dtanh[b, c].ravel()
            gr = g_raw[b, c].ravel()
            gf = g_flow[b, 1 - c % 2].ravel()
            for i in range(h * w):
                v = gs[i]
                gr[i] = v * dt[i]
                gf[i] += v
