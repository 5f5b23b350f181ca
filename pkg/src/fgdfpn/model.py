"""Flow-guided deformable frame predictor.

Four grayscale frames go through a flow estimator (one flow per frame),
a shared-weight three-level feature extractor, feature warping, a per-scale
offset/mask predictor, flow-guided offset refinement, grouped deformable
fusion, and a reconstructor that synthesizes the next frame directly.

Flow fields are (N, 2, H, W) with channel 0 = dx (columns) and 1 = dy (rows);
``flow_warp(f, flow)`` samples ``f`` at ``p + flow(p)``.  Deformable offsets
use (dy, dx) pairs, so refinement swaps the flow channels when tiling.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import _elementwise, tensor as T
from .kernels import ConvSpec, bilinear_resize, conv2d, deform_conv2d, flow_warp, pixel_shuffle, pixel_unshuffle
from .tensor import Parameter, ShapeError, Tensor, make_result

N_SCALES = 3
TAPS = 9
SLOPE = 0.1


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 16
    deform_groups: int = 2
    blocks: int = 2
    magnitudes: tuple = (40.0, 20.0, 10.0)
    frames: int = 4

    def __post_init__(self):
        object.__setattr__(self, "magnitudes", tuple(float(m) for m in self.magnitudes))
        if self.base_channels < 2 or self.base_channels % 2:
            raise ValueError(f"base_channels must be even and >= 2, got {self.base_channels}")
        if self.deform_groups < 1 or self.base_channels % self.deform_groups:
            raise ValueError(f"deform_groups={self.deform_groups} must divide base_channels={self.base_channels}")
        if self.blocks < 0:
            raise ValueError(f"blocks must be >= 0, got {self.blocks}")
        if len(self.magnitudes) != N_SCALES:
            raise ValueError(f"expected {N_SCALES} magnitudes, got {len(self.magnitudes)}")
        m1, m2, m3 = self.magnitudes
        if not (m3 > 0 and m1 >= m2 >= m3):
            raise ValueError(f"magnitudes must be positive and non-increasing, got {self.magnitudes}")
        if self.frames != 4:
            raise ValueError("the predictor takes exactly 4 input frames")

    def channels(self, level: int) -> int:
        """Feature channels at pyramid level 1, 2 or 3."""
        return self.base_channels * 2 ** (level - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["magnitudes"] = list(self.magnitudes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config key(s): {', '.join(sorted(unknown))}")
        return cls(**d)


@dataclass
class ScalePyramid:
    f: list
    w: list
    flows: list


@dataclass
class DeformParams:
    offsets: list = field(default_factory=list)  # [scale][frame]
    masks: list = field(default_factory=list)


# -- modules ----------------------------------------------------------------

class Module:
    """Parameter container; names follow attribute paths."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{key}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]


class Conv(Module):
    def __init__(self, rng, cin, cout, k=3, stride=1, zero=False, dtype=np.float32):
        self.spec = ConvSpec(cin, cout, k, k, stride, k // 2)
        if zero:
            w = np.zeros(self.spec.weight_shape)
        else:
            # He init for leaky ReLU
            std = math.sqrt(2.0 / (1 + SLOPE**2) / (cin * k * k))
            w = rng.standard_normal(self.spec.weight_shape) * std
        self.weight = Parameter(w, dtype=dtype)
        self.bias = Parameter(np.zeros(cout), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.spec, self.weight, self.bias)


def _act(x: Tensor) -> Tensor:
    return T.leaky_relu(x, SLOPE)


class Bottleneck(Module):
    """1x1 reduce to half width, 3x3, 1x1 expand, plus identity skip."""

    def __init__(self, rng, ch, dtype):
        self.reduce = Conv(rng, ch, ch // 2, 1, dtype=dtype)
        self.mid = Conv(rng, ch // 2, ch // 2, 3, dtype=dtype)
        self.expand = Conv(rng, ch // 2, ch, 1, dtype=dtype)

    def __call__(self, x):
        y = self.expand(_act(self.mid(_act(self.reduce(x)))))
        return _act(T.add(x, y))


def _stack(rng, ch, n, dtype):
    return [Bottleneck(rng, ch, dtype) for _ in range(n)]


def _run(blocks, x):
    for b in blocks:
        x = b(x)
    return x


class Upsample(Module):
    """Conv to 4x channels then 2x pixel shuffle."""

    def __init__(self, rng, cin, cout, dtype):
        self.conv = Conv(rng, cin, 4 * cout, 3, dtype=dtype)

    def __call__(self, x):
        return _act(pixel_shuffle(self.conv(x), 2))


class FlowEstimator(Module):
    """Stacked frames -> one flow per frame at full resolution.

    Three stride-2 stages need extents divisible by 8; other inputs are
    edge-padded internally and the flows cropped back.
    """

    def __init__(self, rng, cfg: ModelConfig, dtype):
        c = cfg.base_channels
        self.stem = Conv(rng, cfg.frames, c, dtype=dtype)
        self.down1 = Conv(rng, c, 2 * c, stride=2, dtype=dtype)
        self.down2 = Conv(rng, 2 * c, 4 * c, stride=2, dtype=dtype)
        self.down3 = Conv(rng, 4 * c, 4 * c, stride=2, dtype=dtype)
        self.blocks = _stack(rng, 4 * c, cfg.blocks, dtype)
        self.up3 = Upsample(rng, 4 * c, 2 * c, dtype)
        self.fuse3 = Conv(rng, 6 * c, 2 * c, 1, dtype=dtype)
        self.up2 = Upsample(rng, 2 * c, c, dtype)
        self.fuse2 = Conv(rng, 3 * c, c, 1, dtype=dtype)
        self.up1 = Upsample(rng, c, c, dtype)
        self.fuse1 = Conv(rng, 2 * c, c, 1, dtype=dtype)
        self.head = Conv(rng, c, 2 * cfg.frames, zero=True, dtype=dtype)
        self.frames = cfg.frames

    def __call__(self, frames: Tensor) -> list[Tensor]:
        n, t, h, w = frames.shape
        if t != self.frames:
            raise ShapeError(f"expected {self.frames} stacked frames, got shape {frames.shape}")
        if h % 4 or w % 4:
            raise ShapeError(f"frame extents must be divisible by 4, got {h}x{w}")
        ph, pw = -h % 8, -w % 8
        x = frames
        if ph or pw:
            x = Tensor(np.pad(frames.data, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge"))
        s0 = _act(self.stem(x))
        s1 = _act(self.down1(s0))
        s2 = _act(self.down2(s1))
        y = _run(self.blocks, _act(self.down3(s2)))
        y = _act(self.fuse3(T.concat_channels([self.up3(y), s2])))
        y = _act(self.fuse2(T.concat_channels([self.up2(y), s1])))
        y = _act(self.fuse1(T.concat_channels([self.up1(y), s0])))
        out = T.crop(self.head(y), h, w)
        return T.split_channels(out, [2] * self.frames)


class FeatureExtractor(Module):
    def __init__(self, rng, cfg: ModelConfig, dtype):
        c = cfg.base_channels
        self.stem = Conv(rng, 1, c, dtype=dtype)
        self.down2 = Conv(rng, c, 2 * c, stride=2, dtype=dtype)
        self.blocks2 = _stack(rng, 2 * c, cfg.blocks, dtype)
        self.down3 = Conv(rng, 2 * c, 4 * c, stride=2, dtype=dtype)
        self.blocks3 = _stack(rng, 4 * c, cfg.blocks, dtype)

    def __call__(self, frame: Tensor) -> list[Tensor]:
        if frame.ndim != 4 or frame.shape[1] != 1:
            raise ShapeError(f"expected a single-channel (N,1,H,W) frame, got {frame.shape}")
        f1 = _act(self.stem(frame))
        f2 = _run(self.blocks2, _act(self.down2(f1)))
        f3 = _run(self.blocks3, _act(self.down3(f2)))
        return [f1, f2, f3]


class ScalePredictor(Module):
    """Offset/mask encoder-decoder for one pyramid level."""

    def __init__(self, rng, ch, cfg: ModelConfig, dtype):
        # space-to-depth then 1x1: a 2x2 stride-2 conv without im2col
        self.down = Conv(rng, 8 * cfg.frames * ch, ch, 1, dtype=dtype)
        self.blocks = _stack(rng, ch, cfg.blocks, dtype)
        self.up = Upsample(rng, ch, ch, dtype)
        self.head = Conv(rng, ch, cfg.frames * cfg.deform_groups * 3 * TAPS, 1, zero=True, dtype=dtype)
        self.frames = cfg.frames

    def __call__(self, feats: list[Tensor]) -> list[Tensor]:
        x = T.concat_channels(feats)
        h, w = x.shape[2:]
        # odd levels are zero-extended for the 2x down/up path and cropped back
        x = pixel_unshuffle(T.pad_to(x, h + h % 2, w + w % 2), 2)
        y = _run(self.blocks, _act(self.down(x)))
        raw = T.crop(self.head(self.up(y)), h, w)
        return T.split_channels(raw, [raw.shape[1] // self.frames] * self.frames)


class OffsetMaskPredictor(Module):
    def __init__(self, rng, cfg: ModelConfig, dtype):
        self.scales = [ScalePredictor(rng, cfg.channels(l), cfg, dtype) for l in range(1, N_SCALES + 1)]

    def __call__(self, pyramids: list[ScalePyramid]) -> list[list[Tensor]]:
        """Raw (offset, mask) tensors indexed [scale][frame]."""
        out = []
        for l, pred in enumerate(self.scales):
            feats = [p.f[l] for p in pyramids] + [p.w[l] for p in pyramids]
            out.append(pred(feats))
        return out


class DeformFusion(Module):
    def __init__(self, rng, ch, cfg: ModelConfig, dtype):
        self.spec = ConvSpec(cfg.frames * ch, ch)
        self.groups = cfg.frames * cfg.deform_groups
        fan_in = cfg.frames * ch * TAPS
        std = math.sqrt(2.0 / (1 + SLOPE**2) / fan_in)
        self.weight = Parameter(rng.standard_normal(self.spec.weight_shape) * std, dtype=dtype)
        self.bias = Parameter(np.zeros(ch), dtype=dtype)


class Reconstructor(Module):
    def __init__(self, rng, cfg: ModelConfig, dtype):
        c = cfg.base_channels
        self.blocks3 = _stack(rng, 4 * c, cfg.blocks, dtype)
        self.up3 = Upsample(rng, 4 * c, 2 * c, dtype)
        self.fuse2 = Conv(rng, 4 * c, 2 * c, 1, dtype=dtype)
        self.blocks2 = _stack(rng, 2 * c, cfg.blocks, dtype)
        self.up2 = Upsample(rng, 2 * c, c, dtype)
        self.fuse1 = Conv(rng, 2 * c, c, 1, dtype=dtype)
        self.blocks1 = _stack(rng, c, cfg.blocks, dtype)
        self.out = Conv(rng, c, 1, dtype=dtype)

    def __call__(self, fused: list[Tensor]) -> Tensor:
        f1, f2, f3 = fused
        y = self.up3(_run(self.blocks3, f3))
        y = _run(self.blocks2, _act(self.fuse2(T.concat_channels([y, f2]))))
        y = self.up2(y)
        y = _run(self.blocks1, _act(self.fuse1(T.concat_channels([y, f1]))))
        return self.out(y)


# -- stages -----------------------------------------------------------------

def adapt_flow(flow: Tensor, level: int) -> Tensor:
    """Resize a full-resolution flow to pyramid ``level`` in that level's pixel units."""
    if level not in (1, 2, 3):
        raise ValueError(f"level must be 1, 2 or 3, got {level}")
    if level == 1:
        return flow
    _, _, h, w = flow.shape
    s = 2 ** (level - 1)
    return T.mul(bilinear_resize(flow, h // s, w // s), 1.0 / s)


def refine_offsets(raw: Tensor, flow: Tensor, magnitude: float, deform_groups: int) -> tuple[Tensor, Tensor]:
    """Bounded offsets around the tiled flow, and sigmoid masks.

    ``raw`` holds ``G*18`` offset channels (per group, per tap, (dy, dx))
    followed by ``G*9`` mask channels.
    """
    n, c, h, w = raw.shape
    n_off = deform_groups * 2 * TAPS
    if c != n_off + deform_groups * TAPS:
        raise ShapeError(f"raw has {c} channels; {deform_groups} groups need {n_off + deform_groups * TAPS}")
    if flow.shape != (n, 2, h, w):
        raise ShapeError(f"flow shape {flow.shape} does not match raw {raw.shape}")
    if raw.dtype != flow.dtype:
        raise TypeError("refine_offsets: dtype mismatch")
    m = raw.dtype.type(magnitude)
    offsets = np.empty((n, n_off, h, w), dtype=raw.dtype)
    dtanh = np.empty_like(offsets)
    _elementwise.bounded_offsets(raw.data, flow.data, m, offsets, dtanh)

    def backward(g):
        g_raw = np.zeros(raw.shape, dtype=raw.dtype)
        g_flow = np.zeros(flow.shape, dtype=flow.dtype)
        _elementwise.bounded_offsets_backward(np.ascontiguousarray(g), dtanh, g_raw, g_flow)
        return g_raw, g_flow

    offsets = make_result(offsets, (raw, flow), backward)
    mask = T.sigmoid(T.channel_slice(raw, n_off, c))
    return offsets, mask


def fuse_scale(features: list[Tensor], offsets: list[Tensor], masks: list[Tensor], fusion: DeformFusion) -> Tensor:
    x = T.concat_channels(features)
    off = T.concat_channels(offsets)
    mask = T.concat_channels(masks)
    return deform_conv2d(x, off, mask, fusion.spec, fusion.groups, fusion.weight, fusion.bias)


@dataclass
class Trace:
    """Intermediate values of one forward pass."""

    flows: list
    pyramids: list
    raw: list
    params: DeformParams
    fused: list
    output: Tensor


class FGDFPN(Module):
    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.config = cfg
        self.dtype = np.dtype(dtype)
        self.flow = FlowEstimator(rng, cfg, dtype)
        self.features = FeatureExtractor(rng, cfg, dtype)
        self.offsets = OffsetMaskPredictor(rng, cfg, dtype)
        self.fusion = [DeformFusion(rng, cfg.channels(l), cfg, dtype) for l in range(1, N_SCALES + 1)]
        self.reconstructor = Reconstructor(rng, cfg, dtype)
        for name, p in self.named_parameters():
            p.name = name

    def build_pyramids(self, frames: Tensor, flows: list[Tensor]) -> list[ScalePyramid]:
        if len(flows) != frames.shape[1]:
            raise ShapeError(f"{len(flows)} flows for {frames.shape[1]} frames")
        pyramids = []
        for i, flow in enumerate(flows):
            frame = Tensor(frames.data[:, i : i + 1])
            f = self.features(frame)
            adapted = [adapt_flow(flow, l) for l in range(1, N_SCALES + 1)]
            warped = [flow_warp(fl, fw) for fl, fw in zip(f, adapted)]
            pyramids.append(ScalePyramid(f, warped, adapted))
        return pyramids

    def trace(self, frames) -> Trace:
        if not isinstance(frames, Tensor):
            frames = Tensor(frames, dtype=self.dtype)
        if frames.dtype != self.dtype:
            raise TypeError(f"frames are {frames.dtype}, model is {self.dtype}")
        cfg = self.config
        flows = self.flow(frames)
        pyramids = self.build_pyramids(frames, flows)
        raw = self.offsets(pyramids)
        params = DeformParams()
        fused = []
        for l in range(N_SCALES):
            pairs = [
                refine_offsets(raw[l][i], p.flows[l], cfg.magnitudes[l], cfg.deform_groups)
                for i, p in enumerate(pyramids)
            ]
            params.offsets.append([o for o, _ in pairs])
            params.masks.append([m for _, m in pairs])
            feats = [p.f[l] for p in pyramids]
            fused.append(fuse_scale(feats, params.offsets[l], params.masks[l], self.fusion[l]))
        out = self.reconstructor(fused)
        return Trace(flows, pyramids, raw, params, fused, out)

    def __call__(self, frames) -> Tensor:
        """Unclamped prediction (N, 1, H, W), as used for training."""
        return self.trace(frames).output

    def predict(self, frames: np.ndarray) -> np.ndarray:
        """Inference on (N, 4, H, W) frames in [0, 1]; output clamped to [0, 1]."""
        return np.clip(self(Tensor(frames, dtype=self.dtype)).data, 0.0, 1.0)


def fgdfpn_forward(model: FGDFPN, frames) -> Tensor:
    return model(frames)
