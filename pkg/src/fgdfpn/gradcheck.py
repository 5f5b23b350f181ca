"""Central finite-difference verification of every registered differentiable op.

Each registered case builder draws random fp64 inputs for one of several
shapes and returns ``(fn, inputs)``.  The analytic gradient of the scalar
projection ``sum(fn(*inputs) * R)`` (R fixed random) is compared against
central differences.  The reported error is
``max|analytic - numeric| / max(max|numeric|, max|analytic|)`` per input.

Sampling kernels are piecewise linear in position, so positional inputs
are drawn with fractional parts bounded away from the integer grid; a
perturbation of 1e-5 then never crosses a kink.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import kernels, tensor as T
from .tensor import Parameter, Tape, Tensor

STEP = 1e-5
TOLERANCE = 1e-4
N_SHAPES = 5


@dataclass
class OpResult:
    name: str
    max_rel_error: float
    cases: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _projection_loss(fn, inputs, proj):
    out = fn(*inputs)
    outs = out if isinstance(out, (list, tuple)) else [out]
    total = None
    for o, r in zip(outs, proj):
        term = T.sum_all(T.mul(o, Tensor(r, dtype=np.float64)))
        total = term if total is None else T.add(total, term)
    return total


def check_case(fn: Callable, inputs: list[Tensor], rng: np.random.Generator, step: float = STEP) -> float:
    """Largest normalized analytic-vs-numeric gradient error over all inputs."""
    with_grad = [t for t in inputs if t.requires_grad]
    probe = fn(*inputs)
    probe = probe if isinstance(probe, (list, tuple)) else [probe]
    proj = [rng.standard_normal(o.shape) for o in probe]
    for t in with_grad:
        t.grad = np.zeros_like(t.data) if isinstance(t, Parameter) else None
    with Tape() as tape:
        loss = _projection_loss(fn, inputs, proj)
    tape.backward(loss)
    worst = 0.0
    for t in with_grad:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        numeric = np.empty_like(t.data)
        flat = t.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = _projection_loss(fn, inputs, proj).item()
            flat[i] = orig - step
            down = _projection_loss(fn, inputs, proj).item()
            flat[i] = orig
            nflat[i] = (up - down) / (2 * step)
        scale = max(np.abs(numeric).max(), np.abs(analytic).max())
        if scale < 1e-12:
            continue
        worst = max(worst, float(np.abs(analytic - numeric).max() / scale))
    return worst


# -- case builders ----------------------------------------------------------

_SHAPES = [(1, 2, 4, 4), (2, 2, 5, 3), (1, 4, 6, 6), (2, 4, 8, 8), (1, 3, 7, 5)]


def _rand(rng, shape, requires_grad=True, away_from_zero=False):
    a = rng.uniform(-1.0, 1.0, size=shape)
    if away_from_zero:
        a = np.sign(a) * (0.05 + np.abs(a))
    return Tensor(a, requires_grad=requires_grad, dtype=np.float64)


def _param(rng, shape, name="p"):
    return Parameter(rng.uniform(-1.0, 1.0, size=shape), name=name, dtype=np.float64)


def _off_grid(rng, shape, magnitude):
    """Displacements whose fractional part lies in [0.15, 0.85]."""
    whole = rng.integers(-magnitude, magnitude + 1, size=shape)
    return whole + rng.uniform(0.15, 0.85, size=shape)


def _case_unary(fn, **kw):
    def build(rng, i):
        return fn, [_rand(rng, _SHAPES[i], **kw)]
    return build


def _case_binary(fn):
    def build(rng, i):
        return fn, [_rand(rng, _SHAPES[i]), _rand(rng, _SHAPES[i])]
    return build


def _case_crop(rng, i):
    n, c, h, w = _SHAPES[i]
    return (lambda x: T.crop(x, h, w)), [_rand(rng, (n, c, h + i % 2, w + 2))]


def _case_pad(rng, i):
    n, c, h, w = _SHAPES[i]
    return (lambda x: T.pad_to(x, h + 1 + i % 2, w + 3)), [_rand(rng, (n, c, h, w))]


def _case_slice(rng, i):
    n, c, h, w = _SHAPES[i]
    return (lambda x: T.channel_slice(x, 1, c + 1)), [_rand(rng, (n, c + 2, h, w))]


def _case_reshape(rng, i):
    n, c, h, w = _SHAPES[i]
    return (lambda x: T.reshape(x, (n, c * h, w))), [_rand(rng, (n, c, h, w))]


def _case_clamp(rng, i):
    # both saturated and linear elements, none within 0.05 of a bound
    a = rng.uniform(-0.4, 0.4, size=_SHAPES[i])
    a = a + np.sign(a) * np.where(rng.random(a.shape) < 0.5, 0.0, 0.6)
    return (lambda x: T.clamp(x, -0.5, 0.5)), [Tensor(a, requires_grad=True, dtype=np.float64)]


def _case_concat(rng, i):
    n, _, h, w = _SHAPES[i]
    parts = [_rand(rng, (n, c, h, w)) for c in (1, 2, 3)[: 1 + (i % 3)]]
    return (lambda *xs: T.concat_channels(xs)), parts


def _case_split(rng, i):
    n, c, h, w = _SHAPES[i]
    sizes = [1, c - 1] if c > 1 else [1]
    return (lambda x: T.split_channels(x, sizes)), [_rand(rng, (n, c, h, w))]


def _case_take(rng, i):
    n, c, h, w = _SHAPES[i]
    idx = [int(j) for j in rng.integers(0, c, size=2 * c)]
    return (lambda x: T.take_channels(x, idx)), [_rand(rng, (n, c, h, w))]


_CONV_CASES = [
    dict(cout=3, k=3, stride=1, pad=1, groups=1),
    dict(cout=2, k=3, stride=2, pad=1, groups=2),
    dict(cout=4, k=1, stride=1, pad=0, groups=1),
    dict(cout=4, k=3, stride=2, pad=1, groups=4),
    dict(cout=3, k=3, stride=1, pad=0, groups=1),
]


def _case_conv(rng, i):
    n, c, h, w = _SHAPES[i]
    cfg = _CONV_CASES[i]
    groups = cfg["groups"] if c % cfg["groups"] == 0 and cfg["cout"] % cfg["groups"] == 0 else 1
    spec = kernels.ConvSpec(c, cfg["cout"], cfg["k"], cfg["k"], cfg["stride"], cfg["pad"], groups)
    weight = _param(rng, spec.weight_shape, "w")
    bias = _param(rng, (spec.out_channels,), "b")
    return (lambda x, wt, b: kernels.conv2d(x, spec, wt, b)), [_rand(rng, (n, c, h, w)), weight, bias]


def _case_resize(rng, i):
    n, c, h, w = _SHAPES[i]
    targets = [(2, 2), (7, 3), (3, 9), (4, 8), (14, 10)]
    oh, ow = targets[i]
    return (lambda x: kernels.bilinear_resize(x, oh, ow)), [_rand(rng, (n, c, h, w))]


def _case_warp(rng, i):
    n, c, h, w = _SHAPES[i]
    flow = Tensor(_off_grid(rng, (n, 2, h, w), 2), requires_grad=True, dtype=np.float64)
    return kernels.flow_warp, [_rand(rng, (n, c, h, w)), flow]


def _case_deform(rng, i):
    n, c, h, w = _SHAPES[i]
    dg = 2 if c % 2 == 0 else 1
    cout = [2, 3, 4, 2, 3][i]
    spec = kernels.ConvSpec(c, cout)
    offsets = Tensor(_off_grid(rng, (n, dg * 18, h, w), 1), requires_grad=True, dtype=np.float64)
    mask = Tensor(rng.uniform(0.0, 1.0, size=(n, dg * 9, h, w)), requires_grad=True, dtype=np.float64)
    weight = _param(rng, spec.weight_shape, "w")
    bias = _param(rng, (cout,), "b")

    def fn(x, o, m, wt, b):
        return kernels.deform_conv2d(x, o, m, spec, dg, wt, b)

    return fn, [_rand(rng, (n, c, h, w)), offsets, mask, weight, bias]


def _case_shuffle(rng, i):
    n, _, h, w = _SHAPES[i]
    r = 2 if i % 2 == 0 else 3
    c = [1, 2, 1, 2, 1][i]
    return (lambda x: kernels.pixel_shuffle(x, r)), [_rand(rng, (n, c * r * r, h, w))]


def _case_unshuffle(rng, i):
    n, c, h, w = _SHAPES[i]
    return (lambda x: kernels.pixel_unshuffle(x, 2)), [_rand(rng, (n, c, 2 * h, 2 * w))]


def _case_refine(rng, i):
    from .model import refine_offsets

    n, _, h, w = _SHAPES[i]
    groups = 1 + i % 2
    raw = _rand(rng, (n, groups * 27, h, w))
    flow = _rand(rng, (n, 2, h, w))
    magnitude = [40.0, 20.0, 10.0, 1.0, 2.5][i]
    return (lambda r, f: list(refine_offsets(r, f, magnitude, groups))), [raw, flow]


def _case_charbonnier(rng, i):
    from .training import charbonnier_loss

    shape = _SHAPES[i]
    pred = _rand(rng, shape)
    # differences are either exactly zero or at least 0.05, since for tiny eps the
    # loss has a near-kink within a step of d = 0
    diff = rng.uniform(-1.0, 1.0, size=shape)
    target = pred.data - np.sign(diff) * (0.05 + np.abs(diff))
    same = rng.random(shape) < 1 / 3
    target[same] = pred.data[same]
    target = Tensor(target, dtype=np.float64)
    eps = [1e-6, 1e-3, 1e-2, 1e-6, 0.1][i]
    return (lambda p, t: charbonnier_loss(p, t, eps)), [pred, target]


REGISTRY: dict[str, Callable] = {
    "tanh": _case_unary(T.tanh),
    "sigmoid": _case_unary(T.sigmoid),
    "leaky_relu": _case_unary(lambda x: T.leaky_relu(x, 0.1), away_from_zero=True),
    "add": _case_binary(T.add),
    "sub": _case_binary(T.sub),
    "mul": _case_binary(T.mul),
    "concat_channels": _case_concat,
    "split_channels": _case_split,
    "take_channels": _case_take,
    "crop": _case_crop,
    "pad_to": _case_pad,
    "channel_slice": _case_slice,
    "reshape": _case_reshape,
    "neg": _case_unary(T.neg),
    "clamp": _case_clamp,
    "sum": _case_unary(T.sum_all),
    "mean": _case_unary(T.mean_all),
    "conv2d": _case_conv,
    "bilinear_resize": _case_resize,
    "flow_warp": _case_warp,
    "deform_conv2d": _case_deform,
    "pixel_shuffle": _case_shuffle,
    "pixel_unshuffle": _case_unshuffle,
    "refine_offsets": _case_refine,
    "charbonnier_loss": _case_charbonnier,
}


def run(seed: int = 0, ops: list[str] | None = None, n_shapes: int = N_SHAPES) -> list[OpResult]:
    names = list(REGISTRY) if not ops else ops
    unknown = [n for n in names if n not in REGISTRY]
    if unknown:
        raise KeyError(f"unknown op(s): {', '.join(unknown)}; known: {', '.join(REGISTRY)}")
    results = []
    for name in names:
        rng = np.random.default_rng([seed, sorted(REGISTRY).index(name)])
        worst = 0.0
        for i in range(n_shapes):
            fn, inputs = REGISTRY[name](rng, i % len(_SHAPES))
            worst = max(worst, check_case(fn, inputs, rng))
        results.append(OpResult(name, worst, n_shapes))
    return results
