"""Grayscale frame sources: YUV4MPEG2 luma and binary PGM."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_CHROMA_420 = {"420", "420jpeg", "420paldv", "420mpeg2"}


class FormatError(ValueError):
    pass


@dataclass
class FrameSequence:
    frames: np.ndarray  # (T, H, W) uint8
    source: str = ""

    @property
    def dims(self) -> tuple:
        return self.frames.shape[1:]

    def __len__(self) -> int:
        return self.frames.shape[0]


def parse_y4m(data: bytes, source: str = "<bytes>") -> FrameSequence:
    """Luma planes of a 4:2:0 or mono YUV4MPEG2 stream; chroma is skipped."""
    if not data.startswith(b"YUV4MPEG2"):
        raise FormatError(f"{source}: offset 0: missing YUV4MPEG2 signature")
    end = data.find(b"\n")
    if end < 0:
        end = len(data)
    header = data[:end].decode("ascii", errors="replace").split()
    width = height = None
    space = "420jpeg"
    for tag in header[1:]:
        key, val = tag[0], tag[1:]
        if key == "W":
            width = int(val)
        elif key == "H":
            height = int(val)
        elif key == "C":
            space = val
    if not width or not height:
        raise FormatError(f"{source}: offset 0: header lacks W/H tags")
    if space == "mono":
        chroma = 0
    elif space in _CHROMA_420:
        chroma = 2 * ((width + 1) // 2) * ((height + 1) // 2)
    else:
        raise FormatError(f"{source}: offset 0: unsupported colorspace C{space}")
    luma = width * height
    pos = end + 1
    frames = []
    while pos < len(data):
        if not data.startswith(b"FRAME", pos):
            raise FormatError(f"{source}: offset {pos}: expected FRAME marker")
        nl = data.find(b"\n", pos)
        if nl < 0:
            raise FormatError(f"{source}: offset {pos}: unterminated FRAME header")
        start = nl + 1
        if start + luma + chroma > len(data):
            raise FormatError(
                f"{source}: offset {start}: truncated frame payload "
                f"({len(data) - start} of {luma + chroma} bytes)"
            )
        frames.append(np.frombuffer(data, np.uint8, luma, start).reshape(height, width))
        pos = start + luma + chroma
    stack = np.array(frames, dtype=np.uint8).reshape(len(frames), height, width)
    return FrameSequence(stack, source)


def load_y4m(path) -> FrameSequence:
    return parse_y4m(Path(path).read_bytes(), str(path))


def encode_y4m(frames: np.ndarray, colorspace: str = "mono", fps: str = "25:1") -> bytes:
    """Serialize (T, H, W) uint8 luma; 4:2:0 output carries neutral chroma."""
    t, h, w = frames.shape
    out = [f"YUV4MPEG2 W{w} H{h} F{fps} Ip A1:1 C{colorspace}\n".encode("ascii")]
    chroma = b"" if colorspace == "mono" else bytes([128]) * (2 * ((w + 1) // 2) * ((h + 1) // 2))
    for f in frames:
        out += [b"FRAME\n", np.ascontiguousarray(f, dtype=np.uint8).tobytes(), chroma]
    return b"".join(out)


_PGM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def parse_pgm(data: bytes, source: str = "<bytes>") -> np.ndarray:
    if data[:2] == b"P2":
        raise FormatError(f"{source}: ASCII PGM (P2) is not supported; use binary P5")
    if data[:2] != b"P5":
        raise FormatError(f"{source}: not a binary PGM (P5) file")
    pos = 2
    fields = []
    for _ in range(3):
        m = _PGM_TOKEN.match(data, pos)
        if not m:
            raise FormatError(f"{source}: truncated PGM header")
        fields.append(m.group(1))
        pos = m.end()
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError as exc:
        raise FormatError(f"{source}: malformed PGM header") from exc
    if maxval != 255:
        raise FormatError(f"{source}: maxval {maxval} is not supported (need 255)")
    pos += 1  # single whitespace before the raster
    if len(data) - pos < width * height:
        raise FormatError(f"{source}: raster truncated ({len(data) - pos} of {width * height} bytes)")
    return np.frombuffer(data, np.uint8, width * height, pos).reshape(height, width).copy()


def load_pgm(path) -> np.ndarray:
    return parse_pgm(Path(path).read_bytes(), str(path))


def save_pgm(frame: np.ndarray, path) -> None:
    frame = np.asarray(frame)
    if frame.ndim != 2 or frame.dtype != np.uint8:
        raise ValueError(f"save_pgm needs a 2-D uint8 frame, got {frame.dtype} {frame.shape}")
    h, w = frame.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(frame).tobytes())


def load_pgm_sequence(directory) -> FrameSequence:
    """All ``*.pgm`` files of a directory in lexicographic order."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FormatError(f"{directory} is not a directory")
    paths = sorted(p for p in directory.iterdir() if p.suffix.lower() == ".pgm")
    frames = [load_pgm(p) for p in paths]
    if frames and any(f.shape != frames[0].shape for f in frames):
        raise FormatError(f"{directory}: PGM frames have differing dimensions")
    stack = np.array(frames, dtype=np.uint8) if frames else np.zeros((0, 0, 0), np.uint8)
    return FrameSequence(stack, str(directory))


def load_sequence(path) -> FrameSequence:
    """A ``.y4m`` file or a directory of PGM frames."""
    path = Path(path)
    if path.is_dir():
        return load_pgm_sequence(path)
    if not path.exists():
        raise FileNotFoundError(f"input {path} does not exist")
    return load_y4m(path)
