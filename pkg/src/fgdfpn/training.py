"""Loss, optimizer and training loop."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import checkpoint
from .synth import random_crop_batch
from .tensor import Parameter, Tape, Tensor, _check_same, make_result


def charbonnier_loss(pred: Tensor, target: Tensor, eps: float = 1e-6) -> Tensor:
    """Mean of ``sqrt((pred - target)^2 + eps^2)``."""
    _check_same(pred, target, "charbonnier_loss")
    d = pred.data - target.data
    r = np.sqrt(d * d + pred.data.dtype.type(eps) ** 2)
    n = d.size

    def backward(g):
        gd = (g.reshape(()) / n) * d / r
        return gd, -gd

    return make_result(np.asarray(r.mean(dtype=np.float64), dtype=pred.dtype), (pred, target), backward)


def lr_schedule(iteration: int, lr0: float, halving_period: int) -> float:
    if iteration < 0:
        raise ValueError(f"iteration must be >= 0, got {iteration}")
    return lr0 * 0.5 ** (iteration // halving_period)


class Adam:
    """Bias-corrected Adam; moments are keyed by parameter name."""

    def __init__(self, params: list[Parameter], betas=(0.9, 0.999), eps=1e-8):
        names = [p.name for p in params]
        if len(set(names)) != len(names) or "" in names:
            raise ValueError("Adam needs uniquely named parameters")
        self.params = list(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {p.name: np.zeros_like(p.data) for p in params}
        self.v = {p.name: np.zeros_like(p.data) for p in params}

    def step(self, lr: float, clip_norm: float | None = None) -> float:
        """Apply one update, zero the grads, and return the global grad norm."""
        sq = 0.0
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient in parameter {p.name!r}")
            sq += float(np.dot(p.grad.ravel(), p.grad.ravel()))
        norm = math.sqrt(sq)
        scale = 1.0
        if clip_norm is not None and norm > clip_norm:
            scale = clip_norm / norm
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**t
        c2 = 1 - b2**t
        for p in self.params:
            dt = p.data.dtype.type
            g = p.grad if scale == 1.0 else p.grad * dt(scale)
            m, v = self.m[p.name], self.v[p.name]
            m *= dt(b1)
            m += dt(1 - b1) * g
            v *= dt(b2)
            v += dt(1 - b2) * (g * g)
            denom = np.sqrt(v / dt(c2))
            denom += dt(self.eps)
            p.data -= dt(lr / c1) * m / denom
            p.grad[...] = 0
        return norm


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    crop: int = 96
    total_iters: int = 3000
    lr0: float = 1e-4
    halving_period: int = 600
    charbonnier_eps: float = 1e-6
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 0.0  # 0 disables global-norm clipping
    checkpoint_every: int = 0  # 0 writes only the final checkpoint
    log_every: int = 1

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if self.crop < 4 or self.crop % 4:
            raise ValueError(f"crop must be a positive multiple of 4, got {self.crop}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.total_iters < 0 or self.halving_period < 1:
            raise ValueError("total_iters must be >= 0 and halving_period >= 1")
        if self.log_every < 1 or self.checkpoint_every < 0 or self.clip_norm < 0:
            raise ValueError("log_every must be >= 1; checkpoint_every and clip_norm must be >= 0")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    iteration: int
    losses: list


def batch_for(clips, cfg: TrainConfig, iteration: int):
    """The batch of one iteration; depends only on (seed, iteration)."""
    rng = np.random.default_rng([cfg.seed, iteration])
    idx = rng.choice(len(clips), size=cfg.batch_size, replace=len(clips) < cfg.batch_size)
    return random_crop_batch([clips[i] for i in idx], (cfg.crop, cfg.crop), rng)


def train_loop(
    model,
    cfg: TrainConfig,
    clips,
    optimizer: Adam | None = None,
    start: int = 0,
    log=None,
    checkpoint_path=None,
) -> TrainResult:
    """Run iterations ``start .. cfg.total_iters - 1``.

    ``log`` receives CSV lines ``iter,lr,loss,seconds``.  On a non-finite
    loss or gradient the loop raises :class:`TrainingDiverged` without
    touching ``checkpoint_path``, which keeps the last good checkpoint.
    """
    if not clips and start < cfg.total_iters:
        raise ValueError("training needs at least one clip")
    if optimizer is None:
        optimizer = Adam(model.parameters(), (cfg.beta1, cfg.beta2), cfg.adam_eps)
    losses = []
    t0 = time.perf_counter()
    for it in range(start, cfg.total_iters):
        inputs, targets = batch_for(clips, cfg, it)
        inputs = inputs.astype(model.dtype, copy=False)
        with Tape() as tape:
            loss = charbonnier_loss(model(inputs), Tensor(targets, dtype=model.dtype), cfg.charbonnier_eps)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(f"non-finite loss {value} at iteration {it}")
        tape.backward(loss)
        lr = lr_schedule(it, cfg.lr0, cfg.halving_period)
        try:
            optimizer.step(lr, cfg.clip_norm or None)
        except FloatingPointError as exc:
            raise TrainingDiverged(f"iteration {it}: {exc}") from exc
        losses.append(value)
        if log is not None and (it % cfg.log_every == 0 or it == cfg.total_iters - 1):
            log(f"{it},{lr:.6g},{value:.8g},{time.perf_counter() - t0:.3f}")
        done = it + 1
        if checkpoint_path is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
            checkpoint.save(checkpoint_path, model, optimizer, train_state(cfg, done, optimizer))
    end = max(start, cfg.total_iters)
    if checkpoint_path is not None:
        checkpoint.save(checkpoint_path, model, optimizer, train_state(cfg, end, optimizer))
    return TrainResult(end, losses)


def train_state(cfg: TrainConfig, iteration: int, optimizer: Adam) -> dict:
    return {"iteration": iteration, "adam_step": optimizer.step_count, "train_config": asdict(cfg)}
