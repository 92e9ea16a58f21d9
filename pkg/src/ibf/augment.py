"""Training triplet sampling with motion-scaled augmentation.

Frame ``i`` of a triplet (0 and 2 are inputs, 1 is the target) is transformed
with a strength proportional to ``i - 1``: translation reads
``f(i, x + (i-1)*delta)`` and rotation reads ``f(i, R((i-1)*theta)(x - c) + c)``.
The target is therefore never moved, and the two inputs move in opposite
directions. A random crop shared by all three frames follows.

Images are (3, H, W) float arrays with x = (column, row); pixels outside the
source read as white.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

WHITE = 1.0


@dataclass(frozen=True)
class AugmentConfig:
    delta: int = 40
    theta_r: float = 20.0
    rotation: bool = False
    crop: Tuple[int, int] = (1024, 512)  # (width, height)
    identity_crop_only: bool = False

    def __post_init__(self):
        if self.delta < 0 or self.theta_r < 0:
            raise ValueError("delta and theta_r must be non-negative")
        cw, ch = self.crop
        if cw <= 0 or ch <= 0 or cw % 16 or ch % 16:
            raise ValueError(f"crop size {self.crop} must be positive multiples of 16")


@dataclass
class Triplet:
    frames: Tuple[np.ndarray, np.ndarray, np.ndarray]
    sources: Tuple[int, int, int]
    mode: str = "none"
    delta: Tuple[int, int] = (0, 0)
    theta: float = 0.0
    center: Tuple[float, float] = (0.0, 0.0)
    crop_offset: Tuple[int, int] = (0, 0)  # (x, y)
    extra: dict = field(default_factory=dict)

    @property
    def identity(self) -> bool:
        return self.sources[0] == self.sources[1] == self.sources[2]


def sample_rng(seed: int, iteration: int, index: int) -> np.random.Generator:
    """Independent PCG64 stream for one sample, keyed by (seed, iteration, index)."""
    return np.random.default_rng([seed, iteration, index])


def shift_image(img: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """``out[:, v, u] = img[:, v + dy, u + dx]``, white where the source is outside."""
    _, h, w = img.shape
    out = np.full_like(img, WHITE)
    src_x0, src_x1 = max(0, dx), min(w, w + dx)
    src_y0, src_y1 = max(0, dy), min(h, h + dy)
    if src_x0 < src_x1 and src_y0 < src_y1:
        out[:, src_y0 - dy : src_y1 - dy, src_x0 - dx : src_x1 - dx] = img[:, src_y0:src_y1, src_x0:src_x1]
    return out


def translate_triplet(frames: Sequence[np.ndarray], delta: Tuple[int, int]):
    dx, dy = int(delta[0]), int(delta[1])
    return tuple(shift_image(f, (i - 1) * dx, (i - 1) * dy) for i, f in enumerate(frames))


def bilinear_sample(img: np.ndarray, su: np.ndarray, sv: np.ndarray) -> np.ndarray:
    """Sample ``img`` at fractional (column, row) positions; white outside."""
    c, h, w = img.shape
    padded = np.pad(img.astype(np.float64), ((0, 0), (1, 1), (1, 1)), constant_values=WHITE)
    # shift into padded coordinates and pin far-away reads onto the white border
    pu = np.clip(su + 1.0, 0.0, w + 1.0)
    pv = np.clip(sv + 1.0, 0.0, h + 1.0)
    u0 = np.minimum(np.floor(pu).astype(np.int64), w)
    v0 = np.minimum(np.floor(pv).astype(np.int64), h)
    fu, fv = pu - u0, pv - v0
    top = padded[:, v0, u0] * (1 - fu) + padded[:, v0, u0 + 1] * fu
    bot = padded[:, v0 + 1, u0] * (1 - fu) + padded[:, v0 + 1, u0 + 1] * fu
    return (top * (1 - fv) + bot * fv).astype(img.dtype)


def rotate_image(img: np.ndarray, angle_deg: float, center: Tuple[float, float]) -> np.ndarray:
    """``out(x) = img(R(angle)(x - c) + c)`` with bilinear interpolation."""
    if angle_deg == 0:
        return img.copy()
    _, h, w = img.shape
    phi = np.deg2rad(angle_deg)
    cos, sin = np.cos(phi), np.sin(phi)
    vv, uu = np.mgrid[0:h, 0:w].astype(np.float64)
    du, dv = uu - center[0], vv - center[1]
    su = cos * du - sin * dv + center[0]
    sv = sin * du + cos * dv + center[1]
    return bilinear_sample(img, su, sv)


def rotate_triplet(frames: Sequence[np.ndarray], theta: float, center: Tuple[float, float]):
    return tuple(rotate_image(f, (i - 1) * theta, center) for i, f in enumerate(frames))


def triplet_pool(n_frames: int):
    """All (n-2) motion triplets followed by all n identity triplets (0-based)."""
    if n_frames < 3:
        raise ValueError(f"training needs at least 3 frames, got {n_frames}")
    motion = [(i, i + 1, i + 2) for i in range(n_frames - 2)]
    identity = [(i, i, i) for i in range(n_frames)]
    return motion + identity


def sample_triplet(frames: Sequence[np.ndarray], cfg: AugmentConfig, rng: np.random.Generator,
                   pool: Optional[list] = None) -> Triplet:
    """Draw one triplet, augment it by translation or rotation, then crop."""
    pool = pool or triplet_pool(len(frames))
    src = pool[rng.integers(len(pool))]
    imgs = tuple(frames[i] for i in src)
    _, h, w = imgs[0].shape
    cw, ch = cfg.crop
    if cw > w or ch > h:
        raise ValueError(f"crop {cfg.crop} larger than frame {w}x{h}")

    rec = Triplet(frames=imgs, sources=src)
    use_rotation = cfg.rotation and rng.random() < 0.5
    if rec.identity and cfg.identity_crop_only:
        pass
    elif use_rotation:
        rec.mode = "rotate"
        rec.theta = float(rng.uniform(-cfg.theta_r, cfg.theta_r))
        rec.center = (float(rng.uniform(0, w - 1)), float(rng.uniform(0, h - 1)))
        imgs = rotate_triplet(imgs, rec.theta, rec.center)
    else:
        rec.mode = "translate"
        rec.delta = (int(rng.integers(-cfg.delta, cfg.delta + 1)),
                     int(rng.integers(-cfg.delta, cfg.delta + 1)))
        imgs = translate_triplet(imgs, rec.delta)

    ox = int(rng.integers(0, w - cw + 1))
    oy = int(rng.integers(0, h - ch + 1))
    rec.crop_offset = (ox, oy)
    rec.frames = tuple(np.ascontiguousarray(f[:, oy : oy + ch, ox : ox + cw]) for f in imgs)
    return rec
