"""Coarse-to-fine pseudo-3D matching: guided 2D-3D confidences, edge-chain window filtering, merge."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import MultiHeadAttention
from .match2d import ConfidenceMatrix, MatchSet, concat_matches, cross_attention_features, dual_softmax, similarity, \
    token_centers
from .numerics import Tensor

# fixed row-major neighbour order for the chain walk
_NEIGHBOURS = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))


@dataclass(frozen=True)
class WindowFilterConfig:
    window: int = 5
    tau: float = 0.3
    k_min: int = 3

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("window must be an odd integer >= 3")
        if not 1 <= self.k_min <= self.window:
            raise ValueError("need 1 <= k_min <= window")
        if not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")


@dataclass(frozen=True)
class GuidanceConfig:
    bonus: float = 1.0  # logit bonus lambda
    radius: int = 1  # Chebyshev radius in level-3 tokens


def guidance_bias(src_tokens, dst_tokens, grid_a: tuple[int, int], grid_b: tuple[int, int],
                  bonus: float, radius: int) -> np.ndarray:
    """Bonus on cells (i', j') with i' near a coarse source and j' near its target; applied once per cell."""
    ha, wa = grid_a
    hb, wb = grid_b
    bias = np.zeros((ha * wa, hb * wb))
    if bonus == 0 or len(src_tokens) == 0:
        return bias
    ay, ax = np.divmod(np.arange(ha * wa), wa)
    by, bx = np.divmod(np.arange(hb * wb), wb)
    guided = np.zeros_like(bias, dtype=bool)
    for i, j in zip(np.asarray(src_tokens), np.asarray(dst_tokens)):
        near_a = (np.abs(ay - ay[i]) <= radius) & (np.abs(ax - ax[i]) <= radius)
        near_b = (np.abs(by - by[j]) <= radius) & (np.abs(bx - bx[j]) <= radius)
        guided |= near_a[:, None] & near_b[None, :]
    bias[guided] = bonus
    return bias


def cross_attention_3d(attn: MultiHeadAttention, f3d_tokens: Tensor, fb_tokens: Tensor, omega: float,
                       bias: np.ndarray | None = None) -> ConfidenceMatrix:
    """Pseudo-3D tokens query image-B tokens (and B queries back with the same weights), then dual softmax.

    The guidance bias is added to the similarity logits before both softmaxes.
    """
    if f3d_tokens.shape[-1] != fb_tokens.shape[-1]:
        raise ValueError(f"feature dims differ: {f3d_tokens.shape[-1]} vs {fb_tokens.shape[-1]}")
    q, kv = cross_attention_features(attn, f3d_tokens, fb_tokens, attn.name)
    return dual_softmax(similarity(q, kv, omega), level="2D-3D", bias=bias)


# edge chains ------------------------------------------------------------------

def edge_candidates(edge_map: np.ndarray, stride: int = 8, threshold: float = 0.5) -> np.ndarray:
    """Level-3 tokens whose cell contains an edge score >= threshold; (h, w) bool."""
    e = np.asarray(edge_map, dtype=np.float64)
    H, W = e.shape
    return e.reshape(H // stride, stride, W // stride, stride).max(axis=(1, 3)) >= threshold


def edge_chain_order(mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Walk 8-connected components of `mask` depth-first.

    Components start at their row-major first pixel and are visited in that
    order. Returns flat token indices in walk order and a chain id per entry.
    """
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    seen = np.zeros_like(mask)
    order, chain = [], []
    cid = -1
    for start in np.flatnonzero(mask):
        sy, sx = divmod(int(start), w)
        if seen[sy, sx]:
            continue
        cid += 1
        stack = [(sy, sx)]
        while stack:
            y, x = stack.pop()
            if seen[y, x]:
                continue
            seen[y, x] = True
            order.append(y * w + x)
            chain.append(cid)
            for dy, dx in reversed(_NEIGHBOURS):
                ny, nx = y + dy, x + dx
                if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                    stack.append((ny, nx))
    return np.array(order, dtype=np.int64), np.array(chain, dtype=np.int64)


def sliding_window_filter(probs, chain_ids=None, cfg: WindowFilterConfig | None = None) -> np.ndarray:
    """Boolean keep-mask over chain-ordered candidates.

    A candidate survives if its own probability reaches tau and some window of
    `window` consecutive positions on its chain that contains it holds at least
    k_min candidates reaching tau.
    """
    cfg = cfg or WindowFilterConfig()
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    chain_ids = np.zeros(len(p), dtype=np.int64) if chain_ids is None else np.asarray(chain_ids)
    keep = np.zeros(len(p), dtype=bool)
    above = p >= cfg.tau
    for cid in np.unique(chain_ids):
        idx = np.flatnonzero(chain_ids == cid)
        a = above[idx]
        n = len(a)
        w = min(cfg.window, n)
        counts = np.convolve(a.astype(np.int64), np.ones(w, dtype=np.int64), mode="valid")
        good = counts >= cfg.k_min
        covered = np.zeros(n, dtype=bool)
        for s in np.flatnonzero(good):
            covered[s:s + w] = True
        keep[idx] = covered & a
    return keep


# fine targets and merge -------------------------------------------------------

def fine_targets(P: np.ndarray, rows: np.ndarray, grid_b: tuple[int, int], stride: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Argmax target token refined by the probability-weighted mean over its 3x3 neighbourhood.

    Returns (target xy in pixels, confidence = row max).
    """
    hb, wb = grid_b
    rows = np.asarray(rows, dtype=np.int64)
    if len(rows) == 0:
        return np.zeros((0, 2)), np.zeros(0)
    sub = P[rows]
    j = sub.argmax(axis=1)
    jy, jx = np.divmod(j, wb)
    acc = np.zeros((len(rows), 2))
    tot = np.zeros(len(rows))
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            ny, nx = jy + dy, jx + dx
            ok = (ny >= 0) & (ny < hb) & (nx >= 0) & (nx < wb)
            wgt = np.where(ok, sub[np.arange(len(rows)), np.clip(ny, 0, hb - 1) * wb + np.clip(nx, 0, wb - 1)], 0.0)
            acc += wgt[:, None] * np.column_stack([nx, ny])
            tot += wgt
    grid_xy = acc / tot[:, None]
    off = (stride - 1) / 2.0
    return grid_xy * stride + off, sub[np.arange(len(rows)), j]


def fine_match(P: ConfidenceMatrix | np.ndarray, edge_map: np.ndarray, grid_a: tuple[int, int],
               grid_b: tuple[int, int], cfg: WindowFilterConfig | None = None,
               edge_threshold: float = 0.5, stride: int = 8) -> MatchSet:
    """Edge-token candidates, chain-window filtered, with sub-token targets."""
    p = P.P if isinstance(P, ConfidenceMatrix) else np.asarray(P)
    order, chains = edge_chain_order(edge_candidates(edge_map, stride, edge_threshold))
    if len(order) == 0:
        return MatchSet.empty()
    keep = sliding_window_filter(p[order].max(axis=1), chains, cfg)
    rows = np.sort(order[keep])
    dst, conf = fine_targets(p, rows, grid_b, stride)
    src = token_centers(rows, grid_a[1], stride)
    return MatchSet(src, dst, conf, np.full(len(rows), "fine"), level=np.zeros(len(rows), dtype=np.int64))


def merge_coarse_fine(coarse: MatchSet, fine: MatchSet) -> MatchSet:
    """Union keyed by source coordinate; fine matches replace coarse ones at a shared source."""
    if len(fine) == 0:
        return coarse.subset(np.arange(len(coarse)))
    fine_keys = {tuple(r) for r in fine.src.tolist()}
    keep = np.array([tuple(r) not in fine_keys for r in coarse.src.tolist()], dtype=bool)
    out = concat_matches([coarse.subset(keep), fine], coarse.status)
    out.meta = dict(coarse.meta)
    return out
