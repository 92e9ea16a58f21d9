"""Image I/O, cut loading and synthetic line-art cuts."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from PIL import Image


class CutError(ValueError):
    pass


@dataclass
class Cut:
    """An ordered sequence of equally sized RGB frames in [0, 1], each (3, H, W)."""

    frames: List[np.ndarray]
    path: Optional[Path] = None
    names: List[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.frames) < 2:
            raise CutError(f"a cut needs at least 2 frames, got {len(self.frames)}")
        shapes = {f.shape for f in self.frames}
        if len(shapes) != 1:
            raise CutError(f"frames differ in size: {sorted(shapes)}")

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def size(self) -> Tuple[int, int]:
        """(height, width)"""
        return self.frames[0].shape[1:]


def load_image(path) -> np.ndarray:
    """Decode a PNG into a (3, H, W) float32 array in [0, 1].

    Grayscale is promoted to RGB, alpha is composited over white and 16-bit
    samples are truncated to their high byte.
    """
    with Image.open(path) as im:
        im.load()
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.uint32)
            if im.mode != "I" or arr.max(initial=0) > 255:
                arr = arr >> 8
            rgb = np.repeat(arr.astype(np.float32)[..., None], 3, axis=2) / 255.0
            return np.ascontiguousarray(rgb.transpose(2, 0, 1))
        if im.mode in ("RGBA", "LA", "PA") or (im.mode == "P" and "transparency" in im.info):
            rgba = np.asarray(im.convert("RGBA"), dtype=np.float32) / 255.0
            alpha = rgba[..., 3:4]
            rgb = rgba[..., :3] * alpha + (1.0 - alpha)
        else:
            rgb = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(rgb.transpose(2, 0, 1), dtype=np.float32)


def to_bytes(img: np.ndarray) -> np.ndarray:
    """(3, H, W) floats -> (H, W, 3) uint8 with round-half-up."""
    v = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0)


def save_frame(img: np.ndarray, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(to_bytes(img)), mode="RGB").save(path)
    return path


def save_gray(img: np.ndarray, path) -> Path:
    """Save a (H, W) array in [0, 1] as an 8-bit grayscale PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    v = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(v, mode="L").save(path)
    return path


def list_frames(directory) -> List[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise CutError(f"{directory} is not a directory")
    return sorted((p for p in directory.iterdir() if p.suffix.lower() == ".png" and p.is_file()),
                  key=lambda p: p.name)


def load_cut(directory) -> Cut:
    """Load every PNG in ``directory`` in lexicographic filename order."""
    paths = list_frames(directory)
    if len(paths) < 2:
        raise CutError(f"{directory}: need at least 2 PNG frames, found {len(paths)}")
    frames = [load_image(p) for p in paths]
    sizes = {}
    for p, f in zip(paths, frames):
        sizes.setdefault(f.shape[1:], []).append(p.name)
    if len(sizes) > 1:
        common = max(sizes, key=lambda k: len(sizes[k]))
        offenders = [f"{n} ({s[1]}x{s[0]})" for s, names in sizes.items() if s != common for n in names]
        raise CutError(f"{directory}: frames differ from {common[1]}x{common[0]}: " + ", ".join(offenders))
    return Cut(frames=frames, path=Path(directory), names=[p.name for p in paths])


def save_cut(cut_frames, directory, start: int = 1) -> List[Path]:
    directory = Path(directory)
    return [save_frame(f, directory / f"{start + i:04d}.png") for i, f in enumerate(cut_frames)]


# -- synthetic cuts ------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    """A dark ring on white moving at constant velocity."""

    width: int = 128
    height: int = 128
    n_frames: int = 9
    radius: float = 16.0
    stroke: float = 2.5
    velocity: Tuple[float, float] = (4.0, 0.0)  # pixels per frame (x, y)
    start: Optional[Tuple[float, float]] = None  # centre of frame 1; default keeps the path centred
    jitter: float = 0.0  # uniform random offset of the start position, seeded
    ink: float = 0.0


SYNTH_PRESETS = {
    "circle": SynthSpec(),
    "circle-static": SynthSpec(velocity=(0.0, 0.0)),
    "circle-diagonal": SynthSpec(velocity=(3.0, 2.0)),
    "circle-large": SynthSpec(width=256, height=256, radius=40.0, stroke=4.0, velocity=(6.0, 0.0)),
}


def _centre(spec: SynthSpec, t: float, seed: int):
    if spec.start is not None:
        x0, y0 = spec.start
    else:
        x0 = spec.width / 2 - spec.velocity[0] * (spec.n_frames - 1) / 2
        y0 = spec.height / 2 - spec.velocity[1] * (spec.n_frames - 1) / 2
    if spec.jitter:
        off = np.random.default_rng(seed).uniform(-spec.jitter, spec.jitter, size=2)
        x0, y0 = x0 + off[0], y0 + off[1]
    return x0 + spec.velocity[0] * t, y0 + spec.velocity[1] * t


def render_ring(spec: SynthSpec, t: float, seed: int = 0) -> np.ndarray:
    """Anti-aliased ring at time ``t`` (0-based frame time, fractional allowed)."""
    cx, cy = _centre(spec, t, seed)
    vv, uu = np.mgrid[0 : spec.height, 0 : spec.width].astype(np.float64)
    dist = np.abs(np.hypot(uu - cx, vv - cy) - spec.radius)
    coverage = np.clip(spec.stroke / 2 + 0.5 - dist, 0.0, 1.0)
    value = 1.0 - coverage * (1.0 - spec.ink)
    return np.repeat(value[None].astype(np.float32), 3, axis=0)


def make_synthetic_cut(spec: SynthSpec, out_dir=None, seed: int = 0, midframes: bool = True):
    """Render ``spec`` as a cut; optionally write ``NNNN.png`` frames and
    ground-truth midframes ``mid/NNNN_5.png`` (time i + 1/2)."""
    frames = [render_ring(spec, t, seed) for t in range(spec.n_frames)]
    mids = [render_ring(spec, t + 0.5, seed) for t in range(spec.n_frames - 1)] if midframes else []
    if out_dir is not None:
        out_dir = Path(out_dir)
        save_cut(frames, out_dir)
        for i, m in enumerate(mids):
            save_frame(m, out_dir / "mid" / f"{i + 1:04d}_5.png")
    cut = Cut(frames=frames, path=Path(out_dir) if out_dir else None,
              names=[f"{i + 1:04d}.png" for i in range(spec.n_frames)])
    return cut, mids
