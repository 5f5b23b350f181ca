"""Sliding-window next-frame evaluation and error maps."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .metrics import psnr, ssim, to_uint8
from .video_io import FrameSequence, save_pgm

CONTEXT = 4
# (N, 4, H, W) floats in [0, 1] -> (N, 1, H, W)
Predictor = Callable[[np.ndarray], np.ndarray]


@dataclass
class FrameScore:
    frame: int
    psnr_db: float
    ssim: float
    label: str = ""
    error_scale: float | None = None


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    baseline: list = field(default_factory=list)

    @staticmethod
    def _mean(values):
        return float(np.mean(values)) if values else math.nan

    @property
    def mean_psnr(self) -> float:
        return self._mean([r.psnr_db for r in self.rows])

    @property
    def mean_ssim(self) -> float:
        return self._mean([r.ssim for r in self.rows])

    @property
    def baseline_mean_psnr(self) -> float:
        return self._mean([r.psnr_db for r in self.baseline])

    @property
    def baseline_mean_ssim(self) -> float:
        return self._mean([r.ssim for r in self.baseline])


def _fmt(x: float) -> str:
    return "inf" if x == math.inf else repr(float(x))


def write_report(report: EvalReport, path) -> None:
    lines = ["frame,psnr_db,ssim"]
    for r in report.rows + report.baseline:
        name = f"{r.label}:{r.frame}" if r.label else str(r.frame)
        lines.append(f"{name},{_fmt(r.psnr_db)},{_fmt(r.ssim)}")
    lines.append(f"# mean_psnr_db = {_fmt(report.mean_psnr)}")
    lines.append(f"# mean_ssim = {_fmt(report.mean_ssim)}")
    if report.baseline:
        lines.append(f"# copy-last mean_psnr_db = {_fmt(report.baseline_mean_psnr)}")
        lines.append(f"# copy-last mean_ssim = {_fmt(report.baseline_mean_ssim)}")
    for r in report.rows:
        if r.error_scale is not None:
            lines.append(f"# error_map {r.frame} scale = {_fmt(r.error_scale)}")
    Path(path).write_text("\n".join(lines) + "\n")


def error_map(pred: np.ndarray, gt: np.ndarray, path=None) -> tuple[np.ndarray, float]:
    """|pred - gt| of 8-bit frames scaled so the largest error is 255.

    Returns the map and the scale factor applied (1.0 when the frames agree).
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"frame dimensions differ: {pred.shape} vs {gt.shape}")
    diff = np.abs(pred.astype(np.int64) - gt.astype(np.int64))
    peak = int(diff.max()) if diff.size else 0
    scale = 255.0 / peak if peak else 1.0
    # integer round-half-up of diff * 255 / peak
    emap = ((2 * 255 * diff + peak) // (2 * peak) if peak else diff).astype(np.uint8)
    if path is not None:
        save_pgm(emap, path)
    return emap, scale


def pad_to_multiple(frames: np.ndarray, k: int = 4) -> np.ndarray:
    """Reflect-pad the two trailing axes up to a multiple of ``k``."""
    h, w = frames.shape[-2:]
    ph, pw = -h % k, -w % k
    if not (ph or pw):
        return frames
    pad = [(0, 0)] * (frames.ndim - 2) + [(0, ph), (0, pw)]
    mode = "reflect" if min(h, w) > max(ph, pw) else "edge"
    return np.pad(frames, pad, mode=mode)


def model_predictor(model, chunk: int = 4) -> Predictor:
    def predict(window):
        h, w = window.shape[-2:]
        padded = pad_to_multiple(window)
        outs = [model.predict(padded[i : i + chunk]) for i in range(0, len(padded), chunk)]
        return np.concatenate(outs)[..., :h, :w]

    return predict


def copy_last(window: np.ndarray) -> np.ndarray:
    return window[:, CONTEXT - 1 : CONTEXT]


def windows(seq: FrameSequence):
    """(targets, inputs) for every predictable frame: frames t-4..t-1 predict t."""
    if len(seq) < CONTEXT + 1:
        raise ValueError(f"evaluation needs >= {CONTEXT + 1} frames, got {len(seq)}")
    frames = seq.frames.astype(np.float64) / 255.0
    targets = list(range(CONTEXT, len(seq)))
    inputs = np.stack([frames[t - CONTEXT : t] for t in targets])
    return targets, inputs


def evaluate_sequence(
    predictor: Predictor,
    seq: FrameSequence,
    report_path=None,
    error_map_dir=None,
    baseline: bool = False,
    batch: int = 4,
) -> EvalReport:
    targets, inputs = windows(seq)
    report = EvalReport()
    if error_map_dir is not None:
        Path(error_map_dir).mkdir(parents=True, exist_ok=True)
    for lo in range(0, len(targets), batch):
        preds = predictor(inputs[lo : lo + batch])
        for j, pred in enumerate(preds):
            t = targets[lo + j]
            p8 = to_uint8(pred[0])
            gt = seq.frames[t]
            scale = None
            if error_map_dir is not None:
                _, scale = error_map(p8, gt, Path(error_map_dir) / f"error_{t:05d}.pgm")
            report.rows.append(FrameScore(t, psnr(p8, gt), ssim(p8, gt), error_scale=scale))
    if baseline:
        for t in targets:
            prev, gt = seq.frames[t - 1], seq.frames[t]
            report.baseline.append(FrameScore(t, psnr(prev, gt), ssim(prev, gt), "copy-last"))
    if report_path is not None:
        write_report(report, report_path)
    return report
