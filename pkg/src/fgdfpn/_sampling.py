"""Compiled bilinear gather/scatter loops with clamp-to-edge borders.

Positions are in pixel units of the sampled plane (pixel centers sit on
integer coordinates).  A coordinate outside ``[0, extent - 1]`` is clamped,
which replicates the border; its positional derivative is then zero.

Layouts: ``x`` is channels-last (N, H, W, C).  Positions and modulation are
(N, L, J) for L output locations and J = G*K (group-major) sampling taps;
the C channels split evenly into the G groups.  Samples are written as
(N, L, J*Cg), index ``j*Cg + cc``, which is directly the row layout of an
im2col matrix.  Loops run serially so results are bit-reproducible.

Scalar constants (``one``, ``hmax``, ``wmax``) are passed in with the array
dtype so fp32 builds never promote to fp64.  Channel runs are accessed
through slices so the compiler sees non-negative unit-stride indexing and
emits vector loads rather than gathers.
"""

import numba
import numpy as np


@numba.njit(cache=True, fastmath={"contract"})
def sample_forward(x, ys, xs, mod, n_k, out, one, hmax, wmax):
    n_b, h, w, n_c = x.shape
    n_l, n_j = ys.shape[1], ys.shape[2]
    n_g = n_j // n_k
    cg = n_c // n_g
    zero = one - one
    for b in range(n_b):
        xb = x[b].ravel()
        for p in range(n_l):
            row = out[b, p]
            yr = ys[b, p]
            xr = xs[b, p]
            mr = mod[b, p]
            for g in range(n_g):
                base = g * cg
                for k in range(n_k):
                    j = g * n_k + k
                    py = min(max(yr[j], zero), hmax)
                    px = min(max(xr[j], zero), wmax)
                    y0f = np.floor(py)
                    x0f = np.floor(px)
                    fy = py - y0f
                    fx = px - x0f
                    y0 = int(y0f)
                    x0 = int(x0f)
                    y1 = min(y0 + 1, h - 1)
                    x1 = min(x0 + 1, w - 1)
                    m = mr[j]
                    w00 = (one - fy) * (one - fx) * m
                    w01 = (one - fy) * fx * m
                    w10 = fy * (one - fx) * m
                    w11 = fy * fx * m
                    a00 = (y0 * w + x0) * n_c + base
                    a01 = (y0 * w + x1) * n_c + base
                    a10 = (y1 * w + x0) * n_c + base
                    a11 = (y1 * w + x1) * n_c + base
                    s00 = xb[a00:a00 + cg]
                    s01 = xb[a01:a01 + cg]
                    s10 = xb[a10:a10 + cg]
                    s11 = xb[a11:a11 + cg]
                    dst = row[j * cg:(j + 1) * cg]
                    for cc in range(cg):
                        dst[cc] = w00 * s00[cc] + w01 * s01[cc] + w10 * s10[cc] + w11 * s11[cc]


@numba.njit(cache=True, fastmath={"reassoc", "contract"})
def sample_backward(x, ys, xs, mod, n_k, gout, gx, gys, gxs, gmod, one, hmax, wmax):
    """Gradients of :func:`sample_forward` given ``gout`` (N, L, J*Cg).

    ``gx`` (channels-last, like ``x``) must be zero-initialized; ``gys``,
    ``gxs`` and ``gmod`` are overwritten.
    """
    n_b, h, w, n_c = x.shape
    n_l, n_j = ys.shape[1], ys.shape[2]
    n_g = n_j // n_k
    cg = n_c // n_g
    zero = one - one
    for b in range(n_b):
        xb = x[b].ravel()
        gb = gx[b].ravel()
        for p in range(n_l):
            row = gout[b, p]
            yr = ys[b, p]
            xr = xs[b, p]
            mr = mod[b, p]
            for g in range(n_g):
                base = g * cg
                for k in range(n_k):
                    j = g * n_k + k
                    ry = yr[j]
                    rx = xr[j]
                    py = min(max(ry, zero), hmax)
                    px = min(max(rx, zero), wmax)
                    y0f = np.floor(py)
                    x0f = np.floor(px)
                    fy = py - y0f
                    fx = px - x0f
                    y0 = int(y0f)
                    x0 = int(x0f)
                    y1 = min(y0 + 1, h - 1)
                    x1 = min(x0 + 1, w - 1)
                    m = mr[j]
                    a00 = (y0 * w + x0) * n_c + base
                    a01 = (y0 * w + x1) * n_c + base
                    a10 = (y1 * w + x0) * n_c + base
                    a11 = (y1 * w + x1) * n_c + base
                    s00 = xb[a00:a00 + cg]
                    s01 = xb[a01:a01 + cg]
                    s10 = xb[a10:a10 + cg]
                    s11 = xb[a11:a11 + cg]
                    d_row = row[j * cg:(j + 1) * cg]
                    s_top = zero
                    s_bot = zero
                    s_top_dx = zero
                    s_bot_dx = zero
                    for cc in range(cg):
                        d = d_row[cc]
                        v00 = s00[cc]
                        v01 = s01[cc]
                        v10 = s10[cc]
                        v11 = s11[cc]
                        s_top += d * (v00 + fx * (v01 - v00))
                        s_bot += d * (v10 + fx * (v11 - v10))
                        s_top_dx += d * (v01 - v00)
                        s_bot_dx += d * (v11 - v10)
                    c00 = (one - fy) * (one - fx) * m
                    c01 = (one - fy) * fx * m
                    c10 = fy * (one - fx) * m
                    c11 = fy * fx * m
                    # scatter corner by corner: coincident corners at the border alias
                    t00 = gb[a00:a00 + cg]
                    for cc in range(cg):
                        t00[cc] += d_row[cc] * c00
                    t01 = gb[a01:a01 + cg]
                    for cc in range(cg):
                        t01[cc] += d_row[cc] * c01
                    t10 = gb[a10:a10 + cg]
                    for cc in range(cg):
                        t10[cc] += d_row[cc] * c10
                    t11 = gb[a11:a11 + cg]
                    for cc in range(cg):
                        t11[cc] += d_row[cc] * c11
                    gmod[b, p, j] = s_top + fy * (s_bot - s_top)
                    if ry == py and h > 1:
                        gys[b, p, j] = m * (s_bot - s_top)
                    else:
                        gys[b, p, j] = zero
                    if rx == px and w > 1:
                        gxs[b, p, j] = m * ((one - fy) * s_top_dx + fy * s_bot_dx)
                    else:
                        gxs[b, p, j] = zero
