"""Single-layer LSTM frame classifier in plain numpy, float64 throughout.

Gate order inside every stacked (4h, .) array is input, forget, cell
candidate, output. The flat parameter layout used by gradients, updates,
and serialization is the row-major concatenation

    wx (4h x d), wh (4h x h), b (4h), wo (o x h), bo (o)

for a total of 4h(d + h + 1) + o(h + 1) parameters. Loss is mean-per-frame
softmax cross-entropy with max-subtraction; backward is full
backpropagation through time. Model files use the FDPNET01 format: the
8-byte magic, three u32 little-endian dims, then every parameter as
float64 little-endian in flat order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from .errors import CacheError, EmptyDataset, FormatError, InvalidValue, LabelError, ShapeError
from .rng import RandomSource

MODEL_MAGIC = b"FDPNET01"


@dataclass(frozen=True)
class NetworkDims:
    input_dim: int
    hidden_dim: int
    output_dim: int

    def __post_init__(self):
        for name in ("input_dim", "hidden_dim", "output_dim"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise InvalidValue(f"{name} must be a positive integer, got {v!r}")

    @property
    def parameter_count(self) -> int:
        d, h, o = self.input_dim, self.hidden_dim, self.output_dim
        return 4 * h * (d + h + 1) + o * (h + 1)


@dataclass(frozen=True)
class Network:
    """Parameter container. Treat as immutable: updates return a new Network."""

    dims: NetworkDims
    wx: np.ndarray  # (4h, d)
    wh: np.ndarray  # (4h, h)
    b: np.ndarray  # (4h,)
    wo: np.ndarray  # (o, h)
    bo: np.ndarray  # (o,)

    def __post_init__(self):
        d, h, o = self.dims.input_dim, self.dims.hidden_dim, self.dims.output_dim
        expected = {"wx": (4 * h, d), "wh": (4 * h, h), "b": (4 * h,), "wo": (o, h), "bo": (o,)}
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape or arr.dtype != np.float64:
                raise ShapeError(f"{name} must be float64 with shape {shape}, got {arr.dtype} {arr.shape}")

    @property
    def parameter_count(self) -> int:
        return self.dims.parameter_count

    def flatten(self) -> np.ndarray:
        return np.concatenate(
            [self.wx.ravel(), self.wh.ravel(), self.b, self.wo.ravel(), self.bo]
        )

    @classmethod
    def from_flat(cls, dims: NetworkDims, flat: np.ndarray) -> "Network":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (dims.parameter_count,):
            raise ShapeError(f"expected {dims.parameter_count} parameters, got shape {flat.shape}")
        d, h, o = dims.input_dim, dims.hidden_dim, dims.output_dim
        sizes = [4 * h * d, 4 * h * h, 4 * h, o * h, o]
        offsets = np.cumsum([0] + sizes)
        parts = [flat[offsets[i] : offsets[i + 1]].copy() for i in range(5)]
        return cls(
            dims=dims,
            wx=parts[0].reshape(4 * h, d),
            wh=parts[1].reshape(4 * h, h),
            b=parts[2],
            wo=parts[3].reshape(o, h),
            bo=parts[4],
        )

    def to_bytes(self) -> bytes:
        d, h, o = self.dims.input_dim, self.dims.hidden_dim, self.dims.output_dim
        header = MODEL_MAGIC + struct.pack("<III", d, h, o)
        return header + self.flatten().astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Network":
        if len(data) < 20:
            raise FormatError("model file truncated before header")
        if data[:8] != MODEL_MAGIC:
            raise FormatError(f"bad model magic {data[:8]!r}")
        d, h, o = struct.unpack("<III", data[8:20])
        try:
            dims = NetworkDims(d, h, o)
        except InvalidValue as exc:
            raise FormatError(f"bad dims in model header: {exc}") from exc
        n = dims.parameter_count
        if len(data) != 20 + 8 * n:
            raise FormatError(f"expected {20 + 8 * n} bytes for dims {d}x{h}x{o}, got {len(data)}")
        flat = np.frombuffer(data, dtype="<f8", offset=20, count=n).astype(np.float64)
        return cls.from_flat(dims, flat)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "Network":
        return cls.from_bytes(Path(path).read_bytes())


def init_network(dims: NetworkDims, rng: RandomSource) -> Network:
    """Uniform init in +-1/sqrt(fan_in) per weight block, forget-gate bias 1.

    Draw order is fixed (wx, wh, wo) so a seed pins every parameter.
    """
    d, h, o = dims.input_dim, dims.hidden_dim, dims.output_dim

    def block(rows: int, cols: int, fan_in: int) -> np.ndarray:
        bound = 1.0 / np.sqrt(fan_in)
        return (rng.uniforms(rows * cols) * 2.0 - 1.0).reshape(rows, cols) * bound

    wx = block(4 * h, d, d)
    wh = block(4 * h, h, h)
    wo = block(o, h, h)
    b = np.zeros(4 * h)
    b[h : 2 * h] = 1.0
    bo = np.zeros(o)
    return Network(dims=dims, wx=wx, wh=wh, b=b, wo=wo, bo=bo)


@dataclass
class ForwardCache:
    """Everything backward needs, tied to the exact network that produced it."""

    net: Network
    frames: np.ndarray  # (T, d)
    preact: np.ndarray  # (T, 4h) gate pre-activations
    gate_i: np.ndarray  # (T, h)
    gate_f: np.ndarray  # (T, h)
    gate_g: np.ndarray  # (T, h) cell candidate, tanh
    gate_o: np.ndarray  # (T, h)
    cell: np.ndarray  # (T, h)
    hidden: np.ndarray  # (T, h)
    tanh_cell: np.ndarray  # (T, h)
    logits: np.ndarray  # (T, o)
    probs: np.ndarray  # (T, o) softmax rows


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def forward(net: Network, frames: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Run the sequence through the LSTM; returns per-frame logits and a cache."""
    x = np.asarray(frames, dtype=np.float64)
    d, h, o = net.dims.input_dim, net.dims.hidden_dim, net.dims.output_dim
    if x.ndim != 2 or x.shape[1] != d:
        raise ShapeError(f"frames must have shape (T, {d}), got {x.shape}")
    t_len = x.shape[0]
    if t_len == 0:
        raise ShapeError("sequence must contain at least one frame")

    preact = np.empty((t_len, 4 * h))
    gi = np.empty((t_len, h))
    gf = np.empty((t_len, h))
    gg = np.empty((t_len, h))
    go = np.empty((t_len, h))
    cell = np.empty((t_len, h))
    hidden = np.empty((t_len, h))
    tanh_c = np.empty((t_len, h))
    logits = np.empty((t_len, o))

    h_prev = np.zeros(h)
    c_prev = np.zeros(h)
    for t in range(t_len):
        z = net.wx @ x[t] + net.wh @ h_prev + net.b
        preact[t] = z
        gi[t] = expit(z[:h])
        gf[t] = expit(z[h : 2 * h])
        gg[t] = np.tanh(z[2 * h : 3 * h])
        go[t] = expit(z[3 * h :])
        cell[t] = gf[t] * c_prev + gi[t] * gg[t]
        tanh_c[t] = np.tanh(cell[t])
        hidden[t] = go[t] * tanh_c[t]
        logits[t] = net.wo @ hidden[t] + net.bo
        h_prev = hidden[t]
        c_prev = cell[t]

    cache = ForwardCache(
        net=net,
        frames=x,
        preact=preact,
        gate_i=gi,
        gate_f=gf,
        gate_g=gg,
        gate_o=go,
        cell=cell,
        hidden=hidden,
        tanh_cell=tanh_c,
        logits=logits,
        probs=_softmax_rows(logits),
    )
    return logits, cache


def _check_labels(labels: np.ndarray, t_len: int, num_classes: int) -> np.ndarray:
    lab = np.asarray(labels)
    if lab.shape != (t_len,):
        raise ShapeError(f"need one label per frame, got shape {lab.shape} for {t_len} frames")
    if not np.issubdtype(lab.dtype, np.integer):
        raise LabelError(f"labels must be integers, got dtype {lab.dtype}")
    if lab.min() < 0 or lab.max() >= num_classes:
        raise LabelError(f"labels must lie in [0, {num_classes})")
    return lab.astype(np.int64)


def loss(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean over frames of softmax cross-entropy, computed with max-subtraction."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (T, classes), got {logits.shape}")
    t_len, o = logits.shape
    lab = _check_labels(labels, t_len, o)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    return float(np.mean(log_z - shifted[np.arange(t_len), lab]))


def backward(net: Network, cache: ForwardCache, labels: np.ndarray) -> np.ndarray:
    """Flat gradient of the mean-per-frame loss via BPTT."""
    if cache.net is not net:
        raise CacheError("cache was produced by a different network")
    d, h, o = net.dims.input_dim, net.dims.hidden_dim, net.dims.output_dim
    t_len = cache.frames.shape[0]
    lab = _check_labels(labels, t_len, o)

    d_logits = cache.probs.copy()
    d_logits[np.arange(t_len), lab] -= 1.0
    d_logits /= t_len

    dwo = d_logits.T @ cache.hidden
    dbo = d_logits.sum(axis=0)
    dwx = np.zeros_like(net.wx)
    dwh = np.zeros_like(net.wh)
    db = np.zeros(4 * h)

    dh_next = np.zeros(h)
    dc_next = np.zeros(h)
    for t in range(t_len - 1, -1, -1):
        gi, gf, gg, go = cache.gate_i[t], cache.gate_f[t], cache.gate_g[t], cache.gate_o[t]
        tc = cache.tanh_cell[t]
        c_prev = cache.cell[t - 1] if t > 0 else np.zeros(h)
        h_prev = cache.hidden[t - 1] if t > 0 else np.zeros(h)

        dh = net.wo.T @ d_logits[t] + dh_next
        dc = dc_next + dh * go * (1.0 - tc * tc)
        dz = np.concatenate(
            [
                dc * gg * gi * (1.0 - gi),
                dc * c_prev * gf * (1.0 - gf),
                dc * gi * (1.0 - gg * gg),
                dh * tc * go * (1.0 - go),
            ]
        )
        dwx += np.outer(dz, cache.frames[t])
        dwh += np.outer(dz, h_prev)
        db += dz
        dh_next = net.wh.T @ dz
        dc_next = dc * gf

    return np.concatenate([dwx.ravel(), dwh.ravel(), db, dwo.ravel(), dbo])


def sequence_gradient(net: Network, frames: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Forward plus backward for one sequence."""
    _, cache = forward(net, frames)
    return backward(net, cache, labels)


def per_example_gradients(net: Network, batch: Sequence) -> list[np.ndarray]:
    """One flat gradient per sequence, in batch order.

    Accepts anything with ``frames`` and ``labels`` attributes, or
    (frames, labels) pairs.
    """
    if len(batch) == 0:
        raise EmptyDataset("gradient batch must be non-empty")
    grads = []
    for item in batch:
        if hasattr(item, "frames"):
            frames, labels = item.frames, item.labels
        else:
            frames, labels = item
        grads.append(sequence_gradient(net, frames, labels))
    return grads


def apply_update(net: Network, grad: np.ndarray, lr: float) -> Network:
    """Gradient descent step: returns a new network with params - lr * grad."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != (net.parameter_count,):
        raise ShapeError(f"gradient length {grad.shape} does not match {net.parameter_count} parameters")
    if not (np.isfinite(lr) and lr >= 0.0):
        raise InvalidValue(f"learning rate must be finite and >= 0, got {lr}")
    return Network.from_flat(net.dims, net.flatten() - lr * grad)


def finite_difference_gradient(
    net: Network, frames: np.ndarray, labels: np.ndarray, h: float = 1e-6
) -> np.ndarray:
    """Central-difference loss gradient, the oracle for backward()."""
    if not (1e-8 <= h <= 1e-3):
        raise InvalidValue(f"step h must lie in [1e-8, 1e-3], got {h}")
    flat = net.flatten()
    grad = np.empty_like(flat)
    for j in range(flat.size):
        bumped = flat.copy()
        bumped[j] = flat[j] + h
        hi_logits, _ = forward(Network.from_flat(net.dims, bumped), frames)
        bumped[j] = flat[j] - h
        lo_logits, _ = forward(Network.from_flat(net.dims, bumped), frames)
        grad[j] = (loss(hi_logits, labels) - loss(lo_logits, labels)) / (2.0 * h)
    return grad
