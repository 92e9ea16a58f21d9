"""Per-cut training loop: sample triplets, evaluate the objective, Adam."""

from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np

from .augment import AugmentConfig, sample_rng, sample_triplet, triplet_pool
from .io import Cut
from .loss import WeightConfig, objective
from .network import (
    NetworkSpec,
    ParamStore,
    backward,
    build_network,
    forward,
    init_he,
    load_checkpoint,
    make_table,
    save_checkpoint,
)

log = logging.getLogger(__name__)

EMA_DECAY = 0.99


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 13
    learning_rate: float = 2e-4
    iterations: int = 100000
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    checkpoint_every: int = 1000
    keep_last: int = 3
    weights: WeightConfig = field(default_factory=WeightConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0
    low_multiplier: int = 1
    channel_cap: Optional[int] = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.iterations < 0 or self.checkpoint_every < 1 or self.keep_last < 1:
            raise ValueError("iterations >= 0, checkpoint_every >= 1 and keep_last >= 1 required")

    def network(self) -> NetworkSpec:
        return build_network(make_table(self.channel_cap, self.low_multiplier))


@dataclass
class TrainLog:
    iterations: List[int] = field(default_factory=list)
    losses: List[float] = field(default_factory=list)
    emas: List[float] = field(default_factory=list)
    millis: List[float] = field(default_factory=list)
    checkpoints: List[tuple] = field(default_factory=list)  # (path, step)

    def record(self, it, loss, ema, ms):
        self.iterations.append(it)
        self.losses.append(loss)
        self.emas.append(ema)
        self.millis.append(ms)

    @staticmethod
    def format(it, loss, ema, ms) -> str:
        return f"iter={it} loss={loss:.6g} ema={ema:.6g} ms={ms:.1f}"


def adam_step(params: ParamStore, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8) -> ParamStore:
    """In-place bias-corrected Adam update; increments ``params.step``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name}")
    params.step += 1
    t = params.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    dt = params.dtype.type
    for name, g in grads.items():
        g = g.astype(params.dtype, copy=False)
        m, v = params.m[name], params.v[name]
        m *= dt(beta1)
        m += dt(1.0 - beta1) * g
        v *= dt(beta2)
        v += dt(1.0 - beta2) * (g * g)
        m_hat = m / dt(bc1)
        v_hat = v / dt(bc2)
        params.params[name] -= dt(lr) * m_hat / (np.sqrt(v_hat) + dt(eps))
    return params


def pad_frames(frames, min_h: int, min_w: int):
    """Pad frames with white (bottom/right) to at least ``min_h x min_w``."""
    out = []
    for f in frames:
        _, h, w = f.shape
        if h >= min_h and w >= min_w:
            out.append(f)
        else:
            out.append(np.pad(f, ((0, 0), (0, max(0, min_h - h)), (0, max(0, min_w - w))),
                              constant_values=1.0))
    return out


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("IBF_THREADS", "1")))
    except ValueError:
        return 1


def make_batch(frames, cfg: TrainConfig, iteration: int, pool=None, executor=None):
    """Stack ``batch_size`` augmented triplets for ``iteration`` as (A, target, B).

    Each sample uses its own RNG stream keyed by (seed, iteration, index), so
    the batch is independent of worker scheduling.
    """
    pool = pool or triplet_pool(len(frames))

    def one(i):
        return sample_triplet(frames, cfg.augment, sample_rng(cfg.seed, iteration, i), pool)

    idx = range(cfg.batch_size)
    trips = list(executor.map(one, idx)) if executor else [one(i) for i in idx]
    a = np.stack([t.frames[0] for t in trips]).astype(np.float32)
    tgt = np.stack([t.frames[1] for t in trips]).astype(np.float32)
    b = np.stack([t.frames[2] for t in trips]).astype(np.float32)
    return a, tgt, b, trips


def train_step(params: ParamStore, a, target, b, cfg: TrainConfig) -> float:
    out = forward(params, a, b)
    loss, g_low, g_high = objective(out.low, out.high, target, cfg.weights)
    if not math.isfinite(loss):
        raise NonFiniteError(f"non-finite loss {loss} at step {params.step}")
    grads = backward(params, out, g_low, g_high)
    adam_step(params, grads, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)
    return loss


class _Checkpointer:
    def __init__(self, out: Optional[Path], keep_last: int):
        self.out = Path(out) if out else None
        self.keep_last = keep_last
        self.recent: List[Path] = []
        self.best = math.inf

    def periodic(self, params, loss, tlog: TrainLog):
        if self.out is None:
            return
        path = self.out.with_name(f"{self.out.stem}.{params.step:08d}{self.out.suffix}")
        save_checkpoint(params, path)
        tlog.checkpoints.append((str(path), params.step))
        self.recent.append(path)
        while len(self.recent) > self.keep_last:
            self.recent.pop(0).unlink(missing_ok=True)
        if loss < self.best:
            self.best = loss
            save_checkpoint(params, self.out.with_name(f"{self.out.stem}.best{self.out.suffix}"))

    def final(self, params, tlog: TrainLog, suffix=""):
        if self.out is None:
            return None
        path = self.out if not suffix else self.out.with_name(f"{self.out.stem}.{suffix}{self.out.suffix}")
        save_checkpoint(params, path)
        tlog.checkpoints.append((str(path), params.step))
        return path


def train_cut(cut: Cut, cfg: TrainConfig, out: Optional[Path] = None,
              resume: Optional[ParamStore] = None, stop_at: Optional[int] = None,
              log_every: int = 1, on_log: Optional[Callable[[str], None]] = None):
    """Overfit a fresh (or resumed) network to one cut.

    Runs until ``params.step`` reaches ``cfg.iterations`` (or ``stop_at``),
    writing rotating checkpoints next to ``out`` and the final one at ``out``.
    Returns ``(params, TrainLog)``.
    """
    spec = cfg.network()
    if resume is not None:
        params = resume
        if params.spec.param_shapes() != spec.param_shapes():
            raise ValueError("resumed checkpoint does not match the configured network")
    else:
        params = init_he(ParamStore(spec), cfg.seed)
    cw, ch = cfg.augment.crop
    frames = pad_frames(cut.frames, ch, cw)
    pool = triplet_pool(len(frames))
    tlog = TrainLog()
    ckpt = _Checkpointer(out, cfg.keep_last)
    end = cfg.iterations if stop_at is None else min(stop_at, cfg.iterations)
    emit = on_log or log.info
    ema = None
    workers = worker_count()
    executor = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        while params.step < end:
            t0 = time.perf_counter()
            a, tgt, b, _ = make_batch(frames, cfg, params.step, pool, executor)
            try:
                loss = train_step(params, a, tgt, b, cfg)
            except NonFiniteError:
                ckpt.final(params, tlog, suffix="postmortem")
                raise
            ema = loss if ema is None else EMA_DECAY * ema + (1 - EMA_DECAY) * loss
            ms = (time.perf_counter() - t0) * 1e3
            tlog.record(params.step, loss, ema, ms)
            if log_every and params.step % log_every == 0:
                emit(TrainLog.format(params.step, loss, ema, ms))
            if params.step % cfg.checkpoint_every == 0 and params.step < end:
                ckpt.periodic(params, ema, tlog)
    finally:
        if executor:
            executor.shutdown()
    ckpt.final(params, tlog)
    return params, tlog


def resume_from(path, cfg: TrainConfig) -> ParamStore:
    return load_checkpoint(path, cfg.network())
