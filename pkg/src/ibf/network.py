"""Coupled low/high resolution convolutional network.

The architecture is a 30-row table. Each row ``l`` gives the channel counts of
the low-resolution stream (``nc0``, zero where the stream does not exist) and
of the high-resolution stream (``nc1``), the stride used when going from row
``l`` to row ``l+1`` and the spatial size relative to the full-resolution
input. The low stream runs on the half-scale input pair from row 3 to row 26;
the high stream runs from row 0 to row 29 and additionally receives a
convolution of the low stream activation at every row where both exist.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .tensor import (
    ShapeError,
    bilinear_up2,
    bilinear_up2_backward,
    conv3x3,
    conv3x3_backward,
    down_half,
    down_half_backward,
    relu,
    relu_backward,
)

N_LAYERS = 30
# rows whose step into the next row enlarges by bilinear upsampling
UPSAMPLE_ROWS = (17, 20, 23, 26)
LOW_FIRST, LOW_LAST = 3, 26

CHECKPOINT_MAGIC = b"IBFW"
CHECKPOINT_VERSION = 1


class PadRequired(ShapeError):
    """Input spatial dims are not divisible by 16; the caller must pad."""


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    index: int
    nc0: int
    nc1: int
    stride: Optional[int]
    rel_size: Fraction


def _row(index, nc0, nc1, stride, size):
    return LayerSpec(index, nc0, nc1, stride, Fraction(size))


LAYER_TABLE = (
    _row(0, 0, 6, 2, "1"),
    _row(1, 0, 8, 1, "1/2"),
    _row(2, 0, 8, 1, "1/2"),
    _row(3, 6, 8, 2, "1/2"),
    _row(4, 40, 8, 1, "1/4"),
    _row(5, 80, 16, 1, "1/4"),
    _row(6, 80, 16, 2, "1/4"),
    _row(7, 160, 32, 1, "1/8"),
    _row(8, 160, 32, 1, "1/8"),
    _row(9, 160, 32, 2, "1/8"),
    _row(10, 160, 32, 1, "1/16"),
    _row(11, 320, 64, 1, "1/16"),
    _row(12, 640, 128, 1, "1/16"),
    _row(13, 640, 128, 1, "1/16"),
    _row(14, 640, 128, 1, "1/16"),
    _row(15, 640, 128, 1, "1/16"),
    _row(16, 320, 64, 1, "1/16"),
    _row(17, 160, 32, 1, "1/16"),
    _row(18, 160, 32, 1, "1/8"),
    _row(19, 160, 32, 1, "1/8"),
    _row(20, 80, 16, 1, "1/8"),
    _row(21, 80, 16, 1, "1/4"),
    _row(22, 80, 16, 1, "1/4"),
    _row(23, 40, 8, 1, "1/4"),
    _row(24, 40, 8, 1, "1/2"),
    _row(25, 40, 8, 1, "1/2"),
    _row(26, 3, 24, 1, "1/2"),
    _row(27, 0, 24, 1, "1"),
    _row(28, 0, 24, 1, "1"),
    _row(29, 0, 3, None, "1"),
)


def validate_table(table) -> None:
    if len(table) != N_LAYERS:
        raise ShapeError(f"network table needs {N_LAYERS} rows, got {len(table)}")
    for l, row in enumerate(table):
        if row.index != l:
            raise ShapeError(f"row {l} carries index {row.index}")
        has_low = LOW_FIRST <= l <= LOW_LAST
        if (row.nc0 > 0) != has_low:
            raise ShapeError(f"row {l}: nc0={row.nc0} but low stream spans rows 3..26")
        if row.nc1 <= 0:
            raise ShapeError(f"row {l}: nc1 must be positive")
        if l == N_LAYERS - 1:
            if row.stride is not None:
                raise ShapeError("last row has no stride")
            continue
        if row.stride not in (1, 2):
            raise ShapeError(f"row {l}: stride must be 1 or 2")
        nxt = table[l + 1].rel_size
        if row.stride == 2:
            expected = row.rel_size / 2
        elif l in UPSAMPLE_ROWS:
            expected = row.rel_size * 2
        else:
            expected = row.rel_size
        if nxt != expected:
            raise ShapeError(f"row {l + 1}: size {nxt} inconsistent with row {l}")
    if table[0].nc1 != 6 or table[LOW_FIRST].nc0 != 6:
        raise ShapeError("both streams take a 6-channel image pair")
    if table[-1].nc1 != 3 or table[LOW_LAST].nc0 != 3:
        raise ShapeError("both streams must end in 3 channels")


def make_table(channel_cap: Optional[int] = None, low_multiplier: int = 1):
    """The layer table, optionally with channels capped (for gradient checks) or the
    low-stream hidden channels (rows 4..25) multiplied."""
    rows = []
    for r in LAYER_TABLE:
        nc0, nc1 = r.nc0, r.nc1
        if 4 <= r.index <= 25:
            nc0 *= low_multiplier
        if channel_cap is not None:
            nc0, nc1 = min(nc0, channel_cap), min(nc1, channel_cap)
        rows.append(LayerSpec(r.index, nc0, nc1, r.stride, r.rel_size))
    return tuple(rows)


@dataclass(frozen=True)
class Step:
    """One transition row l -> l+1 of a stream."""

    layer: int
    stream: int  # 0 low, 1 high
    in_ch: int
    cross_ch: int  # low-stream channels fed into a high step (0 if none)
    out_ch: int
    stride: int
    upsample: bool


@dataclass(frozen=True)
class NetworkSpec:
    table: tuple
    high_steps: tuple
    low_steps: tuple

    def param_shapes(self) -> Dict[str, tuple]:
        shapes = {}
        for s in self.high_steps:
            shapes[f"W.1.{s.layer}"] = (s.out_ch, s.in_ch, 3, 3)
            shapes[f"b.1.{s.layer}"] = (s.out_ch,)
            if s.cross_ch:
                shapes[f"W.1.0.{s.layer}"] = (s.out_ch, s.cross_ch, 3, 3)
        for s in self.low_steps:
            shapes[f"W.0.{s.layer}"] = (s.out_ch, s.in_ch, 3, 3)
            shapes[f"b.0.{s.layer}"] = (s.out_ch,)
        return shapes


def build_network(table=LAYER_TABLE) -> NetworkSpec:
    """Validate ``table`` and derive the per-step wiring of both streams."""
    table = tuple(table)
    validate_table(table)
    high, low = [], []
    for l in range(N_LAYERS - 1):
        row, nxt = table[l], table[l + 1]
        up = l in UPSAMPLE_ROWS
        high.append(Step(l, 1, row.nc1, row.nc0, nxt.nc1, row.stride, up))
        if LOW_FIRST <= l < LOW_LAST:
            low.append(Step(l, 0, row.nc0, 0, nxt.nc0, row.stride, up))
    return NetworkSpec(table, tuple(high), tuple(low))


class ParamStore:
    """Named coefficient arrays plus Adam moment state and step counter."""

    def __init__(self, spec: NetworkSpec, dtype=np.float32):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        shapes = spec.param_shapes()
        self.params: Dict[str, np.ndarray] = {k: np.zeros(s, self.dtype) for k, s in shapes.items()}
        self.m: Dict[str, np.ndarray] = {k: np.zeros(s, self.dtype) for k, s in shapes.items()}
        self.v: Dict[str, np.ndarray] = {k: np.zeros(s, self.dtype) for k, s in shapes.items()}
        self.step = 0

    def names(self) -> List[str]:
        return list(self.params)

    def __getitem__(self, name):
        return self.params[name]

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore(self.spec, dtype)
        for k in self.params:
            out.params[k] = self.params[k].astype(dtype)
            out.m[k] = self.m[k].astype(dtype)
            out.v[k] = self.v[k].astype(dtype)
        out.step = self.step
        return out

    def copy(self) -> "ParamStore":
        return self.astype(self.dtype)


def init_he(params: ParamStore, seed: int) -> ParamStore:
    """He-normal kernels, zero biases; resets Adam state. Deterministic in ``seed``.

    For a high-stream step with a cross connection, the fan-in counts both
    input streams.
    """
    rng = np.random.default_rng(seed)
    spec = params.spec
    steps = {("1", s.layer): s for s in spec.high_steps}
    steps.update({("0", s.layer): s for s in spec.low_steps})
    for name in params.names():
        kind, *rest = name.split(".")
        arr = params.params[name]
        if kind == "b":
            arr[...] = 0
        else:
            layer = int(rest[-1])
            s = steps[(rest[0], layer)]
            fan_in = (s.in_ch + s.cross_ch) * 9
            std = np.sqrt(2.0 / fan_in)
            arr[...] = rng.standard_normal(arr.shape) * std
        params.m[name][...] = 0
        params.v[name][...] = 0
    params.step = 0
    return params


@dataclass
class NetworkOutput:
    low: np.ndarray
    high: np.ndarray
    x1: list = field(repr=False, default_factory=list)
    x0: dict = field(repr=False, default_factory=dict)
    ctx: dict = field(repr=False, default_factory=dict)


def _step_input(s: Step, x1, x0):
    inp = x1 if s.stream == 1 else x0
    if s.stream == 1 and s.cross_ch:
        inp = np.concatenate([inp, x0], axis=1)
    if s.upsample:
        inp = bilinear_up2(inp)
    return inp


def _step_weight(params: ParamStore, s: Step, dtype):
    if s.stream == 0:
        w = params[f"W.0.{s.layer}"]
        b = params[f"b.0.{s.layer}"]
    else:
        w = params[f"W.1.{s.layer}"]
        if s.cross_ch:
            w = np.concatenate([w, params[f"W.1.0.{s.layer}"]], axis=1)
        b = params[f"b.1.{s.layer}"]
    return w.astype(dtype, copy=False), b.astype(dtype, copy=False)


def forward(params: ParamStore, frame_a: np.ndarray, frame_b: np.ndarray, keep: bool = True) -> NetworkOutput:
    """Run both streams on the ordered pair (A, B).

    Frames are (nb, 3, H, W) with H and W divisible by 16. Returns the
    half-resolution low-stream output and the full-resolution high-stream
    output; with ``keep`` the activations needed by :func:`backward` are kept.
    """
    if frame_a.shape != frame_b.shape or frame_a.ndim != 4:
        raise ShapeError(f"frame shapes differ or are not rank 4: {frame_a.shape}, {frame_b.shape}")
    h, w = frame_a.shape[2:]
    if h % 16 or w % 16:
        raise PadRequired(f"frame size {h}x{w} is not divisible by 16; pad before calling forward")
    spec = params.spec
    dtype = np.result_type(frame_a.dtype, params.dtype)
    fa, fb = frame_a.astype(dtype, copy=False), frame_b.astype(dtype, copy=False)
    x1 = [np.concatenate([fa, fb], axis=1)]
    x0 = {LOW_FIRST: np.concatenate([down_half(fa), down_half(fb)], axis=1)}
    ctx = {}
    low_by_layer = {s.layer: s for s in spec.low_steps}
    for s in spec.high_steps:
        l = s.layer
        # low step l must run before high step l+1 needs x0[l+1]
        y, c = conv3x3(_step_input(s, x1[l], x0.get(l)), *_step_weight(params, s, dtype), s.stride)
        x1.append(relu(y))
        if keep:
            ctx[(1, l)] = c
        if l in low_by_layer:
            ls = low_by_layer[l]
            y, c = conv3x3(_step_input(ls, None, x0[l]), *_step_weight(params, ls, dtype), ls.stride)
            x0[l + 1] = relu(y)
            if keep:
                ctx[(0, l)] = c
    out = NetworkOutput(low=x0[LOW_LAST], high=x1[-1])
    if keep:
        out.x1, out.x0, out.ctx = x1, x0, ctx
    return out


def backward(params: ParamStore, out: NetworkOutput, grad_low: np.ndarray, grad_high: np.ndarray) -> Dict[str, np.ndarray]:
    """Parameter gradients given upstream gradients on both outputs."""
    if not out.ctx:
        raise RuntimeError("backward needs a forward pass run with keep=True")
    spec = params.spec
    dtype = out.high.dtype
    grads = {k: np.zeros(v.shape, dtype) for k, v in params.params.items()}
    g1 = {N_LAYERS - 1: grad_high.astype(dtype, copy=False)}
    g0 = {LOW_LAST: grad_low.astype(dtype, copy=False)}
    low_by_layer = {s.layer: s for s in spec.low_steps}

    def accumulate(store, key, value):
        if key in store:
            store[key] = store[key] + value
        else:
            store[key] = value

    for s in reversed(spec.high_steps):
        l = s.layer
        # high step l consumes x1[l] (and x0[l]); x1[l+1] is fully accumulated here
        if l + 1 in g1:
            gy = relu_backward(out.x1[l + 1], g1.pop(l + 1))
            need_in = l > 0
            dinp, dw, db = conv3x3_backward(out.ctx[(1, l)], gy, need_input_grad=need_in)
            grads[f"b.1.{l}"] += db
            grads[f"W.1.{l}"] += dw[:, : s.in_ch]
            if s.cross_ch:
                grads[f"W.1.0.{l}"] += dw[:, s.in_ch:]
            if need_in:
                if s.upsample:
                    dinp = bilinear_up2_backward(dinp)
                accumulate(g1, l, dinp[:, : s.in_ch])
                if s.cross_ch:
                    accumulate(g0, l, dinp[:, s.in_ch:])
        if l in low_by_layer and l + 1 in g0:
            ls = low_by_layer[l]
            gy = relu_backward(out.x0[l + 1], g0.pop(l + 1))
            need_in = l > LOW_FIRST
            dinp, dw, db = conv3x3_backward(out.ctx[(0, l)], gy, need_input_grad=need_in)
            grads[f"W.0.{l}"] += dw
            grads[f"b.0.{l}"] += db
            if need_in:
                if ls.upsample:
                    dinp = bilinear_up2_backward(dinp)
                accumulate(g0, l, dinp)
    return grads


def layer_shapes(spec: NetworkSpec, nb: int, h: int, w: int):
    """Expected (stream, layer) -> activation shape for an (h, w) input."""
    shapes = {}
    for row in spec.table:
        hh, ww = int(h * row.rel_size), int(w * row.rel_size)
        shapes[(1, row.index)] = (nb, row.nc1, hh, ww)
        if row.nc0:
            shapes[(0, row.index)] = (nb, row.nc0, hh, ww)
    return shapes


# -- checkpoint file ---------------------------------------------------------

def _write_tensor(fh, name: str, arr: np.ndarray):
    raw = name.encode("utf-8")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<B", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_checkpoint(params: ParamStore, path) -> Path:
    """Write parameters, Adam moments and the step counter in IBFW format."""
    path = Path(path)
    entries = [(k, v) for k, v in params.params.items()]
    entries += [(f"{k}.m", v) for k, v in params.m.items()]
    entries += [(f"{k}.v", v) for k, v in params.v.items()]
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(entries)))
        for name, arr in entries:
            _write_tensor(fh, name, arr)
        fh.write(struct.pack("<Q", params.step))
    tmp.replace(path)
    return path


def read_checkpoint(path):
    """Parse an IBFW file into ``({name: float32 array}, step)``."""
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 12
    tensors = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            n = int(np.prod(dims, dtype=np.int64))
            tensors[name] = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * n
        (step,) = struct.unpack_from("<Q", data, pos)
        pos += 8
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return tensors, step


def infer_spec(tensors) -> NetworkSpec:
    """Layer-table strides and sizes with the channel counts read off the stored
    kernels (covers the low-stream multiplier and channel-capped networks)."""
    try:
        rows = []
        for r in LAYER_TABLE:
            l = r.index
            nc1 = tensors[f"W.1.{l}"].shape[1] if l < 29 else tensors["W.1.28"].shape[0]
            nc0 = tensors[f"W.1.0.{l}"].shape[1] if LOW_FIRST <= l <= LOW_LAST else 0
            rows.append(LayerSpec(l, nc0, nc1, r.stride, r.rel_size))
    except (KeyError, IndexError) as exc:
        raise CheckpointError(f"cannot infer the network from the checkpoint: missing {exc}") from None
    try:
        return build_network(tuple(rows))
    except ShapeError as exc:
        raise CheckpointError(f"checkpoint kernels do not form a valid network: {exc}") from None


def load_checkpoint(path, spec: Optional[NetworkSpec] = None) -> ParamStore:
    """Load a checkpoint into a store for ``spec``.

    Without ``spec`` the layout is inferred from the stored kernels. Any missing tensor or
    shape disagreement is fatal and reported in full.
    """
    tensors, step = read_checkpoint(path)
    spec = spec or infer_spec(tensors)
    store = ParamStore(spec)
    problems = []
    for name, shape in spec.param_shapes().items():
        for key, target in ((name, store.params), (f"{name}.m", store.m), (f"{name}.v", store.v)):
            arr = tensors.pop(key, None)
            if arr is None:
                problems.append(f"missing {key}")
            elif arr.shape != shape:
                problems.append(f"{key}: checkpoint {arr.shape} vs network {shape}")
            else:
                target[name] = arr
    problems += [f"unexpected {k}" for k in tensors]
    if problems:
        raise CheckpointError(f"{path} does not match the network:\n  " + "\n  ".join(problems))
    store.step = step
    return store
