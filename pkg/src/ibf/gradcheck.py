"""Central finite-difference checks of every backward pass, in float64."""

from __future__ import annotations

from typing import Callable, Dict

import numpy as np

from . import tensor as T
from .loss import WeightConfig, objective
from .network import ParamStore, backward, build_network, forward, init_he, make_table

EPS = 1e-6
FLOOR = 1e-6
# Whole-network gradients are ~1e-7 to 1e-11 (the loss is a mean over all pixels).
# With the ReLU pattern fixed the loss is quadratic in any one coefficient, so a
# large step has no truncation error and keeps rounding noise well below 1e-3.
NET_EPS = 1e-3
NET_FLOOR = 1e-10
TOLERANCE = 1e-3


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = FLOOR) -> float:
    a, n = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / den)) if a.size else 0.0


def numeric_grad(f: Callable[[], float], x: np.ndarray, idx=None, eps: float = EPS) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. entries ``idx`` of ``x`` (mutated in place)."""
    flat = x.reshape(-1)
    idx = range(flat.size) if idx is None else idx
    out = []
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        out.append((hi - lo) / (2 * eps))
    return np.array(out)


def _away_from_zero(rng, shape, margin=1e-2):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * (margin + np.abs(x)), x)


def check_conv(stride: int, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 6, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    proj = rng.standard_normal((2, 4, 6 // stride, 8 // stride))

    def f():
        return float(np.sum(T.conv3x3(x, w, b, stride)[0] * proj))

    _, ctx = T.conv3x3(x, w, b, stride)
    dx, dw, db = T.conv3x3_backward(ctx, proj)
    return max(rel_error(dx.ravel(), numeric_grad(f, x)),
               rel_error(dw.ravel(), numeric_grad(f, w)),
               rel_error(db, numeric_grad(f, b)))


def check_relu(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    x = _away_from_zero(rng, (2, 3, 4, 5))
    proj = rng.standard_normal(x.shape)
    f = lambda: float(np.sum(T.relu(x) * proj))
    return rel_error(T.relu_backward(T.relu(x), proj).ravel(), numeric_grad(f, x))


def check_up2(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 2, 3, 5))
    proj = rng.standard_normal((2, 2, 6, 10))
    f = lambda: float(np.sum(T.bilinear_up2(x) * proj))
    return rel_error(T.bilinear_up2_backward(proj).ravel(), numeric_grad(f, x))


def check_down(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 2, 4, 6))
    proj = rng.standard_normal((2, 2, 2, 3))
    f = lambda: float(np.sum(T.down_half(x) * proj))
    return rel_error(T.down_half_backward(proj).ravel(), numeric_grad(f, x))


def check_wmse(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    x = rng.random((2, 3, 4, 4))
    t = rng.random(x.shape)
    w = rng.uniform(0.05, 1.0, x.shape)
    f = lambda: T.weighted_mse(x, t, w)[0]
    return rel_error(T.weighted_mse(x, t, w)[1].ravel(), numeric_grad(f, x))


def check_cross(seed: int = 0) -> float:
    """High step fed by both streams: concat, upsample, conv, ReLU."""
    rng = np.random.default_rng(seed)
    x1 = rng.standard_normal((1, 3, 4, 4))
    x0 = rng.standard_normal((1, 2, 4, 4))
    w1 = rng.standard_normal((4, 3, 3, 3))
    w10 = rng.standard_normal((4, 2, 3, 3))
    b = rng.standard_normal(4)
    proj = rng.standard_normal((1, 4, 8, 8))

    def run():
        inp = T.bilinear_up2(np.concatenate([x1, x0], axis=1))
        y, ctx = T.conv3x3(inp, np.concatenate([w1, w10], axis=1), b, 1)
        return T.relu(y), ctx

    f = lambda: float(np.sum(run()[0] * proj))
    out, ctx = run()
    dinp, dw, _ = T.conv3x3_backward(ctx, T.relu_backward(out, proj))
    dinp = T.bilinear_up2_backward(dinp)
    return max(rel_error(dinp[:, :3].ravel(), numeric_grad(f, x1)),
               rel_error(dinp[:, 3:].ravel(), numeric_grad(f, x0)),
               rel_error(dw[:, :3].ravel(), numeric_grad(f, w1)),
               rel_error(dw[:, 3:].ravel(), numeric_grad(f, w10)))


def truncated_store(cap: int = 8, seed: int = 0) -> ParamStore:
    spec = build_network(make_table(channel_cap=cap))
    params = init_he(ParamStore(spec, np.float64), seed)
    rng = np.random.default_rng(seed + 1)
    for name in params.names():
        if name.startswith("b."):
            # positive biases keep the narrow ReLU stack alive so gradients are not vanishingly small
            params.params[name][...] = rng.uniform(0.02, 0.1, params[name].shape)
    return params


def _relu_pattern(out) -> np.ndarray:
    acts = list(out.x1[1:]) + [out.x0[k] for k in sorted(out.x0) if k > min(out.x0)]
    return np.concatenate([(a > 0).ravel() for a in acts])


def check_network(cap: int = 8, size: int = 64, per_tensor: int = 3, seed: int = 0,
                  weight_mode: str = "scan", eps: float = NET_EPS) -> Dict[str, float]:
    """Whole-network objective gradient on a channel-capped table.

    ``per_tensor`` random entries of every parameter tensor are perturbed.
    Perturbations that flip any ReLU (a kink crossing, where the loss is not
    differentiable) are rejected and another entry is drawn. Within a fixed
    activation pattern the loss is quadratic in any single coefficient, so
    central differences are exact up to rounding there.
    """
    rng = np.random.default_rng(seed)
    params = truncated_store(cap, seed)
    a = rng.random((1, 3, size, size))
    b = rng.random((1, 3, size, size))
    t = rng.random((1, 3, size, size))
    cfg = WeightConfig(weight_mode)

    out = forward(params, a, b)
    base = _relu_pattern(out)
    _, g_low, g_high = objective(out.low, out.high, t, cfg)
    grads = backward(params, out, g_low, g_high)

    def probe():
        o = forward(params, a, b)
        return objective(o.low, o.high, t, cfg)[0], np.array_equal(_relu_pattern(o), base)

    errors = {}
    for name in params.names():
        flat = params.params[name].reshape(-1)
        analytic, numeric = [], []
        for i in rng.permutation(flat.size):
            old = flat[i]
            flat[i] = old + eps
            hi, ok_hi = probe()
            flat[i] = old - eps
            lo, ok_lo = probe()
            flat[i] = old
            if ok_hi and ok_lo:
                analytic.append(grads[name].reshape(-1)[i])
                numeric.append((hi - lo) / (2 * eps))
            if len(analytic) == per_tensor:
                break
        errors[name] = rel_error(np.array(analytic), np.array(numeric), floor=NET_FLOOR)
    return errors


def run_all(full: bool = False) -> Dict[str, float]:
    """Max relative error per check; ``full`` perturbs more entries per tensor."""
    results = {
        "conv3x3/stride1": check_conv(1),
        "conv3x3/stride2": check_conv(2),
        "relu": check_relu(),
        "bilinear_up2": check_up2(),
        "down_half": check_down(),
        "weighted_mse": check_wmse(),
        "cross_connection": check_cross(),
    }
    net = check_network(per_tensor=12 if full else 3)
    results["network"] = max(net.values())
    return results
