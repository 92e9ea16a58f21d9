"""Recursive 4x frame generation with a trained network."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import List

import numpy as np

from .io import Cut, save_frame
from .network import ParamStore, forward

MULTIPLE = 16


@dataclass
class GeneratedFrame:
    time: Fraction  # 1-based frame time
    kind: str  # original | half | quarter
    image: np.ndarray


def pad_to_multiple(img: np.ndarray, multiple: int = MULTIPLE) -> np.ndarray:
    _, h, w = img.shape
    ph, pw = -h % multiple, -w % multiple
    if not ph and not pw:
        return img
    return np.pad(img, ((0, 0), (0, ph), (0, pw)), constant_values=1.0)


def infer_pair(params: ParamStore, frame_a: np.ndarray, frame_b: np.ndarray) -> np.ndarray:
    """Network midframe of two (3, H, W) frames, clamped to [0, 1].

    Frames are padded with white up to a multiple of 16 and the output is
    cropped back to (3, H, W).
    """
    if frame_a.shape != frame_b.shape:
        raise ValueError(f"frame shapes differ: {frame_a.shape} vs {frame_b.shape}")
    _, h, w = frame_a.shape
    a = pad_to_multiple(frame_a)[None].astype(params.dtype)
    b = pad_to_multiple(frame_b)[None].astype(params.dtype)
    out = forward(params, a, b, keep=False).high[0, :, :h, :w]
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def generate_4x(cut: Cut, params: ParamStore) -> List[GeneratedFrame]:
    """Originals interleaved with generated half and quarter frames.

    Halves come from consecutive originals; quarters from an original and the
    neighbouring half. Length is ``4 * (n_f - 1) + 1``.
    """
    frames = cut.frames
    n = len(frames)
    halves = [infer_pair(params, frames[i], frames[i + 1]) for i in range(n - 1)]
    seq: List[GeneratedFrame] = []
    for i in range(n - 1):
        t = Fraction(i + 1)
        seq.append(GeneratedFrame(t, "original", frames[i]))
        seq.append(GeneratedFrame(t + Fraction(1, 4), "quarter", infer_pair(params, frames[i], halves[i])))
        seq.append(GeneratedFrame(t + Fraction(1, 2), "half", halves[i]))
        seq.append(GeneratedFrame(t + Fraction(3, 4), "quarter", infer_pair(params, halves[i], frames[i + 1])))
    seq.append(GeneratedFrame(Fraction(n), "original", frames[-1]))
    return seq


def frame_name(time: Fraction) -> str:
    """``NNNN.png`` with NNNN = 4*(t-1) + 1 for 1-based time t."""
    index = 4 * (time - 1) + 1
    return f"{int(index):04d}.png"


def write_sequence(seq: List[GeneratedFrame], out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for fr in seq:
        name = frame_name(fr.time)
        save_frame(fr.image, out_dir / name)
        lines.append(f"{name} {fr.time} {fr.kind}")
    manifest = out_dir / "sequence.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest
