"""Per-pixel loss weights and the averaged two-output training objective.

Both weight maps concentrate the loss near lines: ``scan`` weights come from
the darkness of the target, ``cell`` weights from the magnitude of a
luminance Laplacian (colour edges of painted frames). Values outside the
image are taken as zero for the Laplacian and for the 5x5 window sums.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, down_half, weighted_mse

W_MIN = 1.0 / 20.0
W_MAX = 1.0
LUMA = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class WeightConfig:
    mode: str = "scan"
    w_min: float = W_MIN
    w_max: float = W_MAX

    def __post_init__(self):
        if self.mode not in ("scan", "cell"):
            raise ValueError(f"weight mode must be 'scan' or 'cell', got {self.mode!r}")
        if not 0 < self.w_min <= self.w_max:
            raise ValueError(f"need 0 < w_min <= w_max, got {self.w_min}, {self.w_max}")


def clamp(x, x_min, x_max):
    return np.minimum(np.maximum(x, x_min), x_max)


def _window_sum5(f: np.ndarray) -> np.ndarray:
    # f: (nb, H, W) float64. Sums are accumulated in a fixed (du, dv) order so
    # the result is reproducible element by element.
    h, w = f.shape[1:]
    fp = np.pad(f, ((0, 0), (2, 2), (2, 2)))
    acc = np.zeros_like(f)
    for du in range(-2, 3):
        for dv in range(-2, 3):
            acc = acc + fp[:, 2 + dv : 2 + dv + h, 2 + du : 2 + du + w]
    return acc


def _broadcast(w: np.ndarray, dtype) -> np.ndarray:
    return np.repeat(w[:, None], 3, axis=1).astype(dtype)


def _check_target(t):
    if t.ndim != 4 or t.shape[1] != 3:
        raise ShapeError(f"weight maps need an (nb, 3, H, W) target, got {t.shape}")


def scan_weights(target: np.ndarray, w_min: float = W_MIN, w_max: float = W_MAX) -> np.ndarray:
    """Weights for scanned line drawings: clamp(5x5 sum of (1 - channel min))."""
    _check_target(target)
    t = target.astype(np.float64)
    f = 1.0 - np.minimum(np.minimum(t[:, 0], t[:, 1]), t[:, 2])
    return _broadcast(clamp(_window_sum5(f), w_min, w_max), target.dtype)


def luminance_laplacian(target: np.ndarray) -> np.ndarray:
    """|5-point Laplacian| of 100 * luminance, zero outside the image; (nb, H, W)."""
    t = target.astype(np.float64)
    f0 = 100.0 * (LUMA[0] * t[:, 0] + LUMA[1] * t[:, 1] + LUMA[2] * t[:, 2])
    p = np.pad(f0, ((0, 0), (1, 1), (1, 1)))
    left, right = p[:, 1:-1, :-2], p[:, 1:-1, 2:]
    up, down = p[:, :-2, 1:-1], p[:, 2:, 1:-1]
    return np.abs(left + right + up + down - 4.0 * f0)


def cell_weights(target: np.ndarray, w_min: float = W_MIN, w_max: float = W_MAX) -> np.ndarray:
    """Weights for painted cels: clamp(5x5 sum of the luminance Laplacian magnitude)."""
    _check_target(target)
    f1 = luminance_laplacian(target)
    return _broadcast(clamp(_window_sum5(f1), w_min, w_max), target.dtype)


def weights(target: np.ndarray, cfg: WeightConfig) -> np.ndarray:
    fn = scan_weights if cfg.mode == "scan" else cell_weights
    return fn(target, cfg.w_min, cfg.w_max)


def objective(low: np.ndarray, high: np.ndarray, target: np.ndarray, cfg: WeightConfig):
    """Average of the weighted MSE on both network outputs.

    The high output is compared with ``target``; the low output with the
    2x2-box half of ``target``. Each output uses weights computed from its
    own target. Returns ``(loss, grad_low, grad_high)``.
    """
    if high.shape != target.shape:
        raise ShapeError(f"high output {high.shape} != target {target.shape}")
    target_low = down_half(target)
    l_high, g_high = weighted_mse(high, target, weights(target, cfg).astype(high.dtype))
    l_low, g_low = weighted_mse(low, target_low, weights(target_low, cfg).astype(low.dtype))
    return 0.5 * (l_high + l_low), 0.5 * g_low, 0.5 * g_high
