"""Desk-scale overfit experiment on a synthetic moving-ring cut."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .config import load_config
from .generator import infer_pair
from .io import SYNTH_PRESETS, make_synthetic_cut
from .loss import weights
from .tensor import weighted_mse
from .trainer import train_cut


@dataclass
class OverfitReport:
    initial_loss: float
    final_ema: float
    # per interior triplet i: (network, input A, input B) weighted MSE vs the true middle
    pair_errors: List[tuple] = field(default_factory=list)
    identity_mae: List[float] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def loss_ratio(self) -> float:
        return self.final_ema / self.initial_loss

    @property
    def pairs_ok(self) -> bool:
        return all(net < min(a, b) for net, a, b in self.pair_errors)


def frame_wmse(x: np.ndarray, t: np.ndarray, cfg) -> float:
    w = weights(t[None], cfg)
    return weighted_mse(x[None].astype(np.float64), t[None].astype(np.float64), w.astype(np.float64))[0]


def evaluate(params, frames, cfg) -> tuple:
    pairs, ident = [], []
    for i in range(len(frames) - 2):
        a, mid, b = frames[i], frames[i + 1], frames[i + 2]
        out = infer_pair(params, a, b)
        pairs.append((frame_wmse(out, mid, cfg), frame_wmse(a, mid, cfg), frame_wmse(b, mid, cfg)))
    for f in frames:
        ident.append(float(np.mean(np.abs(infer_pair(params, f, f) - f))))
    return pairs, ident


def run_overfit(config="overfit", synth="circle", out=None, overrides: Optional[dict] = None,
                on_log=None) -> OverfitReport:
    import time

    cfg = load_config(config, overrides).train_config()
    cut, _ = make_synthetic_cut(SYNTH_PRESETS[synth], midframes=False)
    t0 = time.perf_counter()
    params, tlog = train_cut(cut, cfg, out=out, log_every=100, on_log=on_log)
    pairs, ident = evaluate(params, cut.frames, cfg.weights)
    return OverfitReport(
        initial_loss=tlog.losses[0],
        final_ema=tlog.emas[-1],
        pair_errors=pairs,
        identity_mae=ident,
        seconds=time.perf_counter() - t0,
    )
