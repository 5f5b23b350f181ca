"""Differentiable structural kernels: convolution, resampling, deformable
convolution and pixel shuffle.  All take and return (N, C, H, W) tensors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _sampling
from .tensor import Parameter, ShapeError, Tensor, make_result


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_h: int = 3
    kernel_w: int = 3
    stride: int = 1
    padding: int = 1
    groups: int = 1

    def __post_init__(self):
        if self.groups < 1 or self.in_channels % self.groups or self.out_channels % self.groups:
            raise ShapeError(
                f"channels ({self.in_channels}, {self.out_channels}) not divisible by groups={self.groups}"
            )
        if self.stride not in (1, 2):
            raise ShapeError(f"stride must be 1 or 2, got {self.stride}")
        if self.padding < 0 or self.kernel_h < 1 or self.kernel_w < 1:
            raise ShapeError("kernel extents must be >= 1 and padding >= 0")

    @property
    def weight_shape(self) -> tuple:
        return (self.out_channels, self.in_channels // self.groups, self.kernel_h, self.kernel_w)

    def output_hw(self, h: int, w: int) -> tuple:
        ho = (h + 2 * self.padding - self.kernel_h) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel_w) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv output extent < 1 for input {h}x{w} with {self}")
        return ho, wo


def _check_conv_args(x: Tensor, spec: ConvSpec, weight: Tensor, bias: Tensor | None):
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ShapeError(f"conv input {x.shape} does not have {spec.in_channels} channels")
    if weight.shape != spec.weight_shape:
        raise ShapeError(f"conv weight {weight.shape} != expected {spec.weight_shape}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ShapeError(f"conv bias {bias.shape} != ({spec.out_channels},)")


def _im2col(x: np.ndarray, spec: ConvSpec, ho: int, wo: int) -> np.ndarray:
    n, c, h, w = x.shape
    kh, kw, s, pad = spec.kernel_h, spec.kernel_w, spec.stride, spec.padding
    if kh == kw == 1 and s == 1 and pad == 0:
        return x.reshape(n, c, h * w)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, shape: tuple, spec: ConvSpec, ho: int, wo: int) -> np.ndarray:
    n, c, h, w = shape
    kh, kw, s, pad = spec.kernel_h, spec.kernel_w, spec.stride, spec.padding
    if kh == kw == 1 and s == 1 and pad == 0:
        return cols.reshape(shape)
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += cols[:, :, i, j]
    return xp[:, :, pad:pad + h, pad:pad + w] if pad else xp


def _grouped_matmul(wmat: np.ndarray, cols: np.ndarray, groups: int) -> np.ndarray:
    # wmat (Cout, K_total/groups); cols (N, K_total, L) -> (N, Cout, L)
    n, k_total, length = cols.shape
    if groups == 1:
        return np.matmul(wmat, cols)
    cout = wmat.shape[0]
    wg = wmat.reshape(groups, cout // groups, -1)
    cg = cols.reshape(n, groups, k_total // groups, length)
    return np.matmul(wg, cg).reshape(n, cout, length)


def _linear_backward(g: np.ndarray, wmat: np.ndarray, cols: np.ndarray, groups: int, need_input=True):
    """Gradients of ``out = W @ cols`` for grouped weights.  g is (N, Cout, L)."""
    n, cout, length = g.shape
    k_total = cols.shape[1]
    if groups == 1:
        gw = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0)
        gcols = np.matmul(wmat.T, g) if need_input else None
        return gw, gcols
    gg = g.reshape(n, groups, cout // groups, length)
    cg = cols.reshape(n, groups, k_total // groups, length)
    wg = wmat.reshape(groups, cout // groups, -1)
    gw = np.matmul(gg, cg.transpose(0, 1, 3, 2)).sum(axis=0).reshape(cout, -1)
    if not need_input:
        return gw, None
    gcols = np.matmul(wg.transpose(0, 2, 1), gg).reshape(n, k_total, length)
    return gw, gcols


def _conv2d_backward(g, x_shape, wmat, cols, spec, ho, wo):
    n = g.shape[0]
    g3 = g.reshape(n, spec.out_channels, ho * wo)
    gw, gcols = _linear_backward(g3, wmat, cols, spec.groups, need_input=x_shape is not None)
    gx = None if x_shape is None else _col2im(gcols, x_shape, spec, ho, wo)
    gb = g3.sum(axis=(0, 2))
    return gx, gw.reshape(spec.weight_shape), gb


def conv2d(x: Tensor, spec: ConvSpec, weight: Parameter, bias: Parameter | None = None) -> Tensor:
    """Zero-padded cross-correlation."""
    _check_conv_args(x, spec, weight, bias)
    n, _, h, w = x.shape
    ho, wo = spec.output_hw(h, w)
    cols = _im2col(x.data, spec, ho, wo)
    wmat = weight.data.reshape(spec.out_channels, -1)
    out = _grouped_matmul(wmat, cols, spec.groups)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, spec.out_channels, ho, wo)
    x_shape = x.shape if x.requires_grad else None

    def backward(g):
        gx, gw, gb = _conv2d_backward(g, x_shape, wmat, cols, spec, ho, wo)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return make_result(out, inputs, backward)


# -- bilinear resize ---------------------------------------------------------


def resize_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """(n_out, n_in) interpolation matrix, half-pixel centers, clamped."""
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    s = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    s = np.clip(s, 0.0, n_in - 1)
    i0 = np.floor(s).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = s - i0
    rows = np.arange(n_out)
    np.add.at(mat, (rows, i0), 1.0 - frac)
    np.add.at(mat, (rows, i1), frac)
    return mat.astype(dtype)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"resize target must be >= 1, got {out_h}x{out_w}")
    n, c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        return make_result(x.data.copy(), (x,), lambda g: (g,))
    ry = resize_matrix(h, out_h, x.dtype)
    rx = resize_matrix(w, out_w, x.dtype)
    y = np.matmul(np.matmul(ry, x.data), rx.T)
    return make_result(y, (x,), lambda g: (np.matmul(np.matmul(ry.T, g), rx),))


# -- flow warp -----------------------------------------------------------------


def _base_grid(h: int, w: int, dtype) -> tuple:
    gy, gx = np.meshgrid(np.arange(h, dtype=dtype), np.arange(w, dtype=dtype), indexing="ij")
    return gy, gx


def _consts(dtype, h: int, w: int) -> tuple:
    t = np.dtype(dtype).type
    return t(1.0), t(h - 1), t(w - 1)


def _channels_last(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.transpose(0, 2, 3, 1))


def flow_warp(f: Tensor, flow: Tensor) -> Tensor:
    """Sample ``f`` at ``p + flow(p)``; flow channel 0 is dx, channel 1 is dy."""
    if flow.ndim != 4 or flow.shape[1] != 2:
        raise ShapeError(f"flow must have shape (N, 2, H, W), got {flow.shape}")
    if f.ndim != 4 or (f.shape[0], *f.shape[2:]) != (flow.shape[0], *flow.shape[2:]):
        raise ShapeError(f"flow {flow.shape} does not match features {f.shape}")
    if f.dtype != flow.dtype:
        raise TypeError("flow_warp: dtype mismatch")
    n, c, h, w = f.shape
    length = h * w
    gy, gx = _base_grid(h, w, f.dtype)
    ys = (gy + flow.data[:, 1]).reshape(n, length, 1)
    xs = (gx + flow.data[:, 0]).reshape(n, length, 1)
    mod = np.ones_like(ys)
    consts = _consts(f.dtype, h, w)
    f_cl = _channels_last(f.data)
    out = np.empty((n, length, c), dtype=f.dtype)
    _sampling.sample_forward(f_cl, ys, xs, mod, 1, out, *consts)
    out = out.reshape(n, h, w, c).transpose(0, 3, 1, 2)

    def backward(g):
        g_cl = _channels_last(g).reshape(n, length, c)
        gf = np.zeros_like(f_cl)
        gys = np.empty_like(ys)
        gxs = np.empty_like(xs)
        gmod = np.empty_like(mod)
        _sampling.sample_backward(f_cl, ys, xs, mod, 1, g_cl, gf, gys, gxs, gmod, *consts)
        gflow = np.stack([gxs.reshape(n, h, w), gys.reshape(n, h, w)], axis=1)
        return gf.transpose(0, 3, 1, 2), gflow

    return make_result(np.ascontiguousarray(out), (f, flow), backward)


# -- modulated deformable convolution -----------------------------------------

_TAPS_Y = np.repeat(np.arange(-1, 2), 3)
_TAPS_X = np.tile(np.arange(-1, 2), 3)


def _tap_validity(h: int, w: int, dtype) -> np.ndarray:
    gy, gx = _base_grid(h, w, np.int64)
    ty = gy.reshape(-1) + _TAPS_Y[:, None]
    tx = gx.reshape(-1) + _TAPS_X[:, None]
    return ((ty >= 0) & (ty < h) & (tx >= 0) & (tx < w)).astype(dtype)


def deform_conv2d(
    x: Tensor,
    offsets: Tensor,
    mask: Tensor,
    spec: ConvSpec,
    deform_groups: int,
    weight: Parameter,
    bias: Parameter | None = None,
) -> Tensor:
    """Modulated deformable 3x3 convolution with border-clamped sampling.

    ``offsets`` is (N, G*18, H, W) ordered group, then tap (row-major over
    the 3x3 window), then (dy, dx); ``mask`` is (N, G*9, H, W).  Input channels
    split evenly into the G deform groups.

    A tap whose undisplaced grid position lies in the zero padding contributes
    nothing, exactly as in :func:`conv2d`; displaced sample positions are
    clamped to the image border.
    """
    if (spec.kernel_h, spec.kernel_w, spec.stride, spec.padding) != (3, 3, 1, 1):
        raise ShapeError("deform_conv2d supports 3x3 kernels with stride 1 and padding 1 only")
    if spec.groups != 1:
        raise ShapeError("deform_conv2d supports groups=1 only")
    _check_conv_args(x, spec, weight, bias)
    n, c, h, w = x.shape
    dg = int(deform_groups)
    if dg < 1 or c % dg:
        raise ShapeError(f"{c} input channels not divisible by {dg} deform groups")
    if offsets.shape != (n, dg * 18, h, w):
        raise ShapeError(f"offsets {offsets.shape} != expected {(n, dg * 18, h, w)}")
    if mask.shape != (n, dg * 9, h, w):
        raise ShapeError(f"mask {mask.shape} != expected {(n, dg * 9, h, w)}")
    if not (x.dtype == offsets.dtype == mask.dtype == weight.dtype):
        raise TypeError("deform_conv2d: dtype mismatch")
    length = h * w
    cg = c // dg
    cout = spec.out_channels
    n_j = dg * 9
    off = offsets.data.reshape(n, n_j, 2, length).transpose(0, 3, 1, 2)
    gy, gx = _base_grid(h, w, x.dtype)
    base_y = gy.reshape(-1, 1) + np.tile(_TAPS_Y, dg).astype(x.dtype)
    base_x = gx.reshape(-1, 1) + np.tile(_TAPS_X, dg).astype(x.dtype)
    ys = off[..., 0] + base_y
    xs = off[..., 1] + base_x
    valid = np.tile(_tap_validity(h, w, x.dtype).T, (1, dg))
    mod = mask.data.reshape(n, n_j, length).transpose(0, 2, 1) * valid
    consts = _consts(x.dtype, h, w)
    x_cl = _channels_last(x.data)
    # im2col rows are ordered (group, tap, channel-in-group); weights are permuted to match
    cols = np.empty((n, length, c * 9), dtype=x.dtype)
    _sampling.sample_forward(x_cl, ys, xs, mod, 9, cols, *consts)
    wmat = np.ascontiguousarray(weight.data.reshape(cout, dg, cg, 9).transpose(1, 3, 2, 0).reshape(c * 9, cout))
    out = cols.reshape(n * length, c * 9) @ wmat
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, h, w, cout).transpose(0, 3, 1, 2))

    def backward(g):
        g2 = _channels_last(g).reshape(n * length, cout)
        cols2 = cols.reshape(n * length, c * 9)
        gw = (cols2.T @ g2).reshape(dg, 9, cg, cout).transpose(3, 0, 2, 1).reshape(spec.weight_shape)
        gcols = (g2 @ wmat.T).reshape(n, length, c * 9)
        gx_cl = np.zeros_like(x_cl)
        gys = np.empty_like(ys)
        gxs = np.empty_like(xs)
        gmod = np.empty_like(mod)
        _sampling.sample_backward(x_cl, ys, xs, mod, 9, gcols, gx_cl, gys, gxs, gmod, *consts)
        goff = np.stack([gys, gxs], axis=3).transpose(0, 2, 3, 1).reshape(offsets.shape)
        gmask = (gmod * valid).transpose(0, 2, 1).reshape(mask.shape)
        grads = [gx_cl.transpose(0, 3, 1, 2), goff, gmask, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    inputs = (x, offsets, mask, weight) + ((bias,) if bias is not None else ())
    return make_result(out, inputs, backward)


# -- pixel shuffle ----------------------------------------------------------------


def _shuffle(a: np.ndarray, r: int) -> np.ndarray:
    n, c, h, w = a.shape
    oc = c // (r * r)
    return a.reshape(n, oc, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, oc, h * r, w * r)


def _unshuffle(a: np.ndarray, r: int) -> np.ndarray:
    n, c, h, w = a.shape
    oh, ow = h // r, w // r
    return a.reshape(n, c, oh, r, ow, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, oh, ow)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """(N, C*r*r, H, W) -> (N, C, H*r, W*r)."""
    if r < 1 or x.ndim != 4 or x.shape[1] % (r * r):
        raise ShapeError(f"pixel_shuffle: {x.shape} channels not divisible by r^2={r * r}")
    if r == 1:
        return make_result(x.data.copy(), (x,), lambda g: (g,))
    return make_result(_shuffle(x.data, r), (x,), lambda g: (_unshuffle(g, r),))


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Inverse of :func:`pixel_shuffle`."""
    if r < 1 or x.ndim != 4 or x.shape[2] % r or x.shape[3] % r:
        raise ShapeError(f"pixel_unshuffle: spatial dims of {x.shape} not divisible by {r}")
    if r == 1:
        return make_result(x.data.copy(), (x,), lambda g: (g,))
    return make_result(_unshuffle(x.data, r), (x,), lambda g: (_shuffle(g, r),))
