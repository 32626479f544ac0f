"""Pseudo-3D features: cross-view position encodings from A<->C matches, added onto f3 of A."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Linear, Module, Tensor, ops
from .numerics.tensor import as_tensor

N_FREQ = 8
N_SCALARS = 5
D_POS = 2 * N_FREQ * N_SCALARS


@dataclass
class PositionFeatureMap:
    features: np.ndarray  # (h*w, D_POS), zero rows where A has no match
    matched: np.ndarray  # (h*w,) bool
    grid_shape: tuple[int, int]


def encode(values: np.ndarray, n_freq: int = N_FREQ) -> np.ndarray:
    """sin/cos at frequencies 2^k * pi for each scalar; (n, s) -> (n, 2 * s * n_freq)."""
    v = np.asarray(values, dtype=np.float64)
    ang = v[:, :, None] * (np.pi * 2.0 ** np.arange(n_freq))
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=2).reshape(len(v), -1)


def build_position_features(src_tokens, src_xy, dst_xy, conf, grid_shape: tuple[int, int],
                            image_shape: tuple[int, int]) -> PositionFeatureMap:
    """One encoded (x_A, y_A, x_C, y_C, conf) row per matched A token; coordinates scaled to [0, 1]."""
    h, w = grid_shape
    src_tokens = np.asarray(src_tokens, dtype=np.int64).reshape(-1)
    feats = np.zeros((h * w, D_POS))
    matched = np.zeros(h * w, dtype=bool)
    if len(src_tokens) == 0:
        return PositionFeatureMap(feats, matched, grid_shape)
    if src_tokens.min() < 0 or src_tokens.max() >= h * w:
        raise ValueError("match source token outside the grid")
    if len(np.unique(src_tokens)) != len(src_tokens):
        raise ValueError("duplicate source tokens in A<->C matches")
    H, W = image_shape
    scale = np.array([max(W - 1, 1), max(H - 1, 1)], dtype=np.float64)
    a, c = np.asarray(src_xy, dtype=np.float64) / scale, np.asarray(dst_xy, dtype=np.float64) / scale
    if (a < 0).any() or (a > 1).any() or (c < 0).any() or (c > 1).any():
        raise ValueError("match coordinate outside the image")
    raw = np.column_stack([a, c, np.asarray(conf, dtype=np.float64)])
    feats[src_tokens] = encode(raw)
    matched[src_tokens] = True
    return PositionFeatureMap(feats, matched, grid_shape)


class PositionTransform(Module):
    """Two linear+SiLU layers mapping D_POS to the level-3 feature width (no trailing projection)."""

    def __init__(self, rng: np.random.Generator, d_out: int, d_in: int = D_POS):
        self.fc1 = Linear(rng, d_in, d_out, zero_bias=True)
        self.fc2 = Linear(rng, d_out, d_out, zero_bias=True)

    def __call__(self, pos) -> Tensor:
        x = as_tensor(pos.features if isinstance(pos, PositionFeatureMap) else pos)
        return ops.silu(self.fc2(ops.silu(self.fc1(x))))


def position_transform(net: PositionTransform, pos: PositionFeatureMap) -> Tensor:
    return net(pos)


def transform_references(net: PositionTransform, maps: list[PositionFeatureMap]) -> Tensor:
    """Mean of the transformed features over several reference views."""
    if not maps:
        raise ValueError("need at least one reference")
    out = net(maps[0])
    for m in maps[1:]:
        out = out + net(m)
    return out * (1.0 / len(maps)) if len(maps) > 1 else out


def fuse(fa3_tokens: Tensor, transformed: Tensor) -> Tensor:
    """F_3D = f_A3 + T(pos), token-wise."""
    fa3_tokens, transformed = as_tensor(fa3_tokens), as_tensor(transformed)
    if fa3_tokens.shape != transformed.shape:
        raise ValueError(f"fuse shape mismatch: {fa3_tokens.shape} vs {transformed.shape}")
    return fa3_tokens + transformed
