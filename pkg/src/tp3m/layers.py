"""Attention blocks shared by the extractor and the matchers, plus weight recording."""
from __future__ import annotations

import contextlib
import struct
import threading
from pathlib import Path

import numpy as np

from .numerics import Linear, Module, Tensor, ops
from .numerics.checkpoint import atomic_write_bytes

_local = threading.local()

ATTN_MAGIC = b"TP3MATTN"


class RecordingDisabled(RuntimeError):
    pass


class AttentionRecorder:
    """Collects (heads, n, m) attention weights keyed by layer name during a forward pass."""

    def __init__(self):
        self.weights: dict[str, np.ndarray] = {}

    def put(self, name: str, w: np.ndarray) -> None:
        self.weights[name] = np.array(w, copy=True)


@contextlib.contextmanager
def record_attention():
    prev = getattr(_local, "recorder", None)
    rec = AttentionRecorder()
    _local.recorder = rec
    try:
        yield rec
    finally:
        _local.recorder = prev


def _current_recorder() -> AttentionRecorder | None:
    return getattr(_local, "recorder", None)


class MultiHeadAttention(Module):
    """x + concat_h softmax(Q_h K_h^T / sqrt(d_h)) V_h with Q from x and K, V from `context`.

    No output projection, so with a single key token the update is exactly the
    value projection of that token.
    """

    def __init__(self, rng: np.random.Generator, dim: int, heads: int = 1, name: str = "attn"):
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        self.q = Linear(rng, dim, dim, bias=False)
        self.k = Linear(rng, dim, dim, bias=False)
        self.v = Linear(rng, dim, dim, bias=False)
        self.heads = heads
        self.dim = dim
        self.name = name

    def __call__(self, x: Tensor, context: Tensor | None = None, logit_bias: np.ndarray | None = None,
                 record_as: str | None = None) -> Tensor:
        context = x if context is None else context
        if x.shape[-1] != self.dim or context.shape[-1] != self.dim:
            raise ValueError(f"{self.name}: expected feature dim {self.dim}, got {x.shape[-1]} and {context.shape[-1]}")
        n, m, h = x.shape[0], context.shape[0], self.heads
        dh = self.dim // h
        q = ops.transpose(ops.reshape(self.q(x), (n, h, dh)), (1, 0, 2))
        k = ops.transpose(ops.reshape(self.k(context), (m, h, dh)), (1, 0, 2))
        v = ops.transpose(ops.reshape(self.v(context), (m, h, dh)), (1, 0, 2))
        if logit_bias is None:
            out, w = ops.attention(q, k, v, return_weights=True)
        else:
            logits = ops.mul(ops.matmul(q, ops.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(dh)) + logit_bias
            w = ops.softmax(logits, axis=-1)
            out = ops.matmul(w, v)
        rec = _current_recorder()
        if rec is not None:
            rec.put(record_as or self.name, w.data)
        return x + ops.reshape(ops.transpose(out, (1, 0, 2)), (n, self.dim))


class FeedForward(Module):
    def __init__(self, rng: np.random.Generator, dim: int, hidden: int):
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, dim)

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.fc2(ops.silu(self.fc1(x)))


def export_attention(recorder: AttentionRecorder | None, layer: str, head: int, path) -> np.ndarray:
    """Write one head's weights as a float32 grid: magic, u32 rows, u32 cols, data (LE)."""
    if recorder is None:
        raise RecordingDisabled("attention recording was not enabled for this forward pass")
    if layer not in recorder.weights:
        raise KeyError(f"no attention recorded for layer {layer!r}; have {sorted(recorder.weights)}")
    w = recorder.weights[layer][head]
    grid = np.asarray(w, dtype="<f4")
    rows, cols = grid.shape
    atomic_write_bytes(path, ATTN_MAGIC + struct.pack("<II", rows, cols) + grid.tobytes(order="C"))
    return grid


def load_attention(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:8] != ATTN_MAGIC:
        raise ValueError("not an attention weight file")
    rows, cols = struct.unpack_from("<II", buf, 8)
    return np.frombuffer(buf, dtype="<f4", count=rows * cols, offset=16).reshape(rows, cols).copy()
