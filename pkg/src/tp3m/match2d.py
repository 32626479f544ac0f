"""Cascade 2D matching: per-level cross-attention, dual-softmax confidences, MNN filtering.

Levels are named by their downsampling exponent: level 3 is 1/8 resolution,
level 2 is 1/4, level 1 is full resolution. Level 1 is only evaluated inside
windows around level-2 matches.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .edgefeat import FeaturePyramid, tokens
from .layers import MultiHeadAttention
from .numerics import Module, Tensor, ops
from .numerics.checkpoint import atomic_write_bytes
from .numerics.tensor import as_tensor

STATUSES = ("ok", "failed_small_overlap", "failed_challenging")
PROVENANCES = ("coarse", "fine")
LEVEL_STRIDE = {3: 8, 2: 4, 1: 1}
MATCH_HEADER = "# tp3m-matches v1"


@dataclass
class SimilarityMatrix:
    S: Tensor  # (..., n, m), already divided by omega
    omega: float

    def __post_init__(self):
        self.S = as_tensor(self.S)
        if not np.isfinite(self.S.data).all():
            raise ValueError("similarity matrix has non-finite entries")


@dataclass
class ConfidenceMatrix:
    """Dual-softmax probabilities, stored in log space so losses stay differentiable."""

    log_p: Tensor
    level: str | int

    @property
    def P(self) -> np.ndarray:
        return np.exp(self.log_p.data)


@dataclass
class TokenMatches:
    i: np.ndarray  # source token index
    j: np.ndarray  # target token index
    conf: np.ndarray

    def __len__(self) -> int:
        return len(self.i)


@dataclass
class CascadeConfig:
    theta3: float = 0.2
    theta2: float = 0.2
    theta1: float = 0.2
    n3: int = 32
    n2: int = 64
    window_radius: int = 2

    def __post_init__(self):
        for name in ("theta3", "theta2", "theta1"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.n3 < 1 or self.n2 < 1:
            raise ValueError("n3 and n2 must be >= 1")
        if self.window_radius < 0:
            raise ValueError("window_radius must be >= 0")


@dataclass
class MatchSet:
    src: np.ndarray  # (N, 2) x, y in image A
    dst: np.ndarray  # (N, 2) x, y in image B
    conf: np.ndarray
    provenance: np.ndarray
    status: str = "ok"
    level: np.ndarray | None = None  # pyramid level of each match, 0 for 2D-3D matches
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=np.float64).reshape(-1, 2)
        self.dst = np.asarray(self.dst, dtype=np.float64).reshape(-1, 2)
        self.conf = np.asarray(self.conf, dtype=np.float64).reshape(-1)
        self.provenance = np.asarray(self.provenance, dtype="<U6").reshape(-1)
        if self.level is None:
            self.level = np.zeros(len(self.src), dtype=np.int64)
        self.level = np.asarray(self.level, dtype=np.int64).reshape(-1)
        n = len(self.src)
        if not (len(self.dst) == len(self.conf) == len(self.provenance) == len(self.level) == n):
            raise ValueError("match arrays disagree in length")
        if self.status not in STATUSES:
            raise ValueError(f"unknown status {self.status!r}")
        if n and not np.isin(self.provenance, PROVENANCES).all():
            raise ValueError("provenance must be 'coarse' or 'fine'")
        if n and not ((self.conf > 0) & (self.conf <= 1)).all():
            raise ValueError("confidences must lie in (0, 1]")

    def __len__(self) -> int:
        return len(self.src)

    @classmethod
    def empty(cls, status: str = "ok") -> "MatchSet":
        return cls(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0), np.zeros(0, dtype="<U6"), status)

    def subset(self, keep) -> "MatchSet":
        keep = np.asarray(keep)
        return MatchSet(self.src[keep], self.dst[keep], self.conf[keep], self.provenance[keep],
                        self.status, self.level[keep], dict(self.meta))

    def check_bounds(self, shape_a, shape_b) -> None:
        for pts, (h, w), name in ((self.src, shape_a, "source"), (self.dst, shape_b, "target")):
            if len(pts) and ((pts < -0.5).any() or (pts[:, 0] > w - 0.5).any() or (pts[:, 1] > h - 0.5).any()):
                raise ValueError(f"{name} coordinate outside the image")

    def check_unique_sources(self) -> None:
        for prov in PROVENANCES:
            sel = self.src[self.provenance == prov]
            if len(np.unique(sel, axis=0)) != len(sel):
                raise ValueError(f"duplicate source coordinates among {prov} matches")


def concat_matches(sets: list[MatchSet], status: str = "ok") -> MatchSet:
    sets = [s for s in sets if len(s)]
    if not sets:
        return MatchSet.empty(status)
    return MatchSet(np.concatenate([s.src for s in sets]), np.concatenate([s.dst for s in sets]),
                    np.concatenate([s.conf for s in sets]), np.concatenate([s.provenance for s in sets]),
                    status, np.concatenate([s.level for s in sets]))


# match files -------------------------------------------------------------------

def format_matches(ms: MatchSet, header: dict | None = None) -> str:
    lines = [f"{MATCH_HEADER} status={ms.status}"]
    for k, v in (header or {}).items():
        lines.append(f"# {k}={v}")
    for (xa, ya), (xb, yb), c, p in zip(ms.src, ms.dst, ms.conf, ms.provenance):
        lines.append(f"{xa:.4f}\t{ya:.4f}\t{xb:.4f}\t{yb:.4f}\t{c:.6f}\t{p}")
    return "\n".join(lines) + "\n"


def write_matches(path, ms: MatchSet, header: dict | None = None) -> None:
    atomic_write_bytes(path, format_matches(ms, header).encode())


def read_matches(path) -> MatchSet:
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or not lines[0].startswith(MATCH_HEADER):
        raise ValueError(f"{path}: not a match file")
    status = lines[0].split("status=", 1)[1].strip()
    meta, rows = {}, []
    for ln in lines[1:]:
        if ln.startswith("#"):
            k, _, v = ln[1:].strip().partition("=")
            meta[k] = v
        elif ln.strip():
            rows.append(ln.split("\t"))
    if not rows:
        ms = MatchSet.empty(status)
    else:
        num = np.array([[float(x) for x in r[:5]] for r in rows])
        ms = MatchSet(num[:, :2], num[:, 2:4], num[:, 4], np.array([r[5] for r in rows]), status)
    ms.meta = meta
    return ms


# per-level math ----------------------------------------------------------------

def cross_attention_features(attn: MultiHeadAttention, fa: Tensor, fb: Tensor, tag: str | None = None):
    """Both sides attend to the other with shared weights; residual, dims preserved."""
    if fa.shape[-1] != fb.shape[-1]:
        raise ValueError(f"feature dims differ: {fa.shape[-1]} vs {fb.shape[-1]}")
    tag = tag or attn.name
    return attn(fa, fb, record_as=f"{tag}_ab"), attn(fb, fa, record_as=f"{tag}_ba")


def similarity(fa: Tensor, fb: Tensor, omega: float) -> SimilarityMatrix:
    """Scaled inner products of L2-normalised token features."""
    if omega <= 0:
        raise ValueError("temperature must be positive")
    na, nb = ops.l2_normalize(fa, axis=-1), ops.l2_normalize(fb, axis=-1)
    axes = tuple(range(nb.ndim - 2)) + (nb.ndim - 1, nb.ndim - 2)
    return SimilarityMatrix(ops.mul(ops.matmul(na, ops.transpose(nb, axes)), 1.0 / omega), omega)


def dual_softmax(S, level: str | int = 3, bias: np.ndarray | None = None) -> ConfidenceMatrix:
    """P(i, j) = softmax_j(S)(i, j) * softmax_i(S)(i, j) over the last two axes."""
    s = S.S if isinstance(S, SimilarityMatrix) else as_tensor(S)
    if s.ndim < 2 or s.shape[-1] < 1 or s.shape[-2] < 1:
        raise ValueError("dual softmax needs a non-empty matrix")
    if bias is not None:
        s = s + bias
    return ConfidenceMatrix(ops.log_softmax(s, axis=-1) + ops.log_softmax(s, axis=-2), level)


def mnn_filter(P, theta: float) -> TokenMatches:
    """Mutual argmax cells with P >= theta. argmax ties resolve to the lowest index."""
    if not 0 < theta < 1:
        raise ValueError("theta must lie in (0, 1)")
    p = P.P if isinstance(P, ConfidenceMatrix) else np.asarray(P, dtype=np.float64)
    if p.size == 0:
        return TokenMatches(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0))
    row_arg = p.argmax(axis=1)
    col_arg = p.argmax(axis=0)
    i = np.arange(p.shape[0])
    keep = (col_arg[row_arg] == i) & (p[i, row_arg] >= theta)
    return TokenMatches(i[keep], row_arg[keep], p[i[keep], row_arg[keep]])


def token_centers(idx: np.ndarray, grid_w: int, stride: int) -> np.ndarray:
    """Pixel-space centre (x, y) of row-major tokens on a grid with the given stride."""
    idx = np.asarray(idx)
    off = (stride - 1) / 2.0
    return np.stack([(idx % grid_w) * stride + off, (idx // grid_w) * stride + off], axis=-1).astype(np.float64)


# level-1 windows ---------------------------------------------------------------

@dataclass
class WindowConfidence:
    conf: ConfidenceMatrix  # log_p (M, 16, T)
    src_idx: np.ndarray  # (M, 16) pixel indices in A
    tgt_idx: np.ndarray  # (M, T) pixel indices in B


def window_indices(src_cells: np.ndarray, dst_cells: np.ndarray, grid2: tuple[int, int],
                   radius: int) -> tuple[np.ndarray, np.ndarray]:
    """Pixel indices for level-1 windows: 4x4 source cells, (2r+1)-cell target squares kept inside the image."""
    h2, w2 = grid2
    W = 4 * w2
    sy, sx = np.divmod(np.asarray(src_cells, dtype=np.int64), w2)
    d = np.arange(4)
    src = ((4 * sy[:, None, None] + d[None, :, None]) * W + 4 * sx[:, None, None] + d[None, None, :]).reshape(len(sy), 16)
    wy, wx = min(2 * radius + 1, h2), min(2 * radius + 1, w2)
    ty, tx = np.divmod(np.asarray(dst_cells, dtype=np.int64), w2)
    y0 = np.clip(ty - radius, 0, h2 - wy)
    x0 = np.clip(tx - radius, 0, w2 - wx)
    py, px = np.arange(4 * wy), np.arange(4 * wx)
    tgt = ((4 * y0[:, None, None] + py[None, :, None]) * W + 4 * x0[:, None, None] + px[None, None, :])
    return src, tgt.reshape(len(ty), -1)


def window_confidence(f1a: Tensor, f1b: Tensor, src_cells, dst_cells, grid2, radius: int,
                      omega: float) -> WindowConfidence:
    """Dual softmax between the 16 pixels of each source cell and its target window."""
    src, tgt = window_indices(src_cells, dst_cells, grid2, radius)
    fa = ops.take_rows(tokens(f1a), src)
    fb = ops.take_rows(tokens(f1b), tgt)
    return WindowConfidence(dual_softmax(similarity(fa, fb, omega), level=1), src, tgt)


def window_mnn(wc: WindowConfidence, theta: float, width: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-window mutual nearest neighbours; returns source pixel xy, target pixel xy, confidence."""
    p = wc.conf.P
    if p.shape[0] == 0:
        return np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0)
    row_arg = p.argmax(axis=2)  # (M, 16)
    col_arg = p.argmax(axis=1)  # (M, T)
    m, k = np.meshgrid(np.arange(p.shape[0]), np.arange(p.shape[1]), indexing="ij")
    conf = p[m, k, row_arg]
    keep = (np.take_along_axis(col_arg, row_arg, axis=1) == k) & (conf >= theta)
    s = wc.src_idx[keep]
    t = wc.tgt_idx[m[keep], row_arg[keep]]
    return token_centers(s, width, 1), token_centers(t, width, 1), conf[keep]


# cascade -----------------------------------------------------------------------

class CascadeMatcher(Module):
    """Cross-attention at levels 3 and 2; level 1 uses the extractor's full-resolution features directly."""

    def __init__(self, rng: np.random.Generator, dims=(16, 32, 64), heads: int = 2, omega: float = 0.1):
        d1, d2, d3 = dims
        self.attn3 = MultiHeadAttention(rng, d3, heads, name="cross3")
        self.attn2 = MultiHeadAttention(rng, d2, heads, name="cross2")
        self.omega = omega

    def attention(self, level: int) -> MultiHeadAttention:
        return {3: self.attn3, 2: self.attn2}[level]

    def level_confidence(self, fa_map: Tensor, fb_map: Tensor, level: int, tag: str | None = None) -> ConfidenceMatrix:
        fa, fb = cross_attention_features(self.attention(level), tokens(fa_map), tokens(fb_map),
                                          tag or f"cross{level}")
        return dual_softmax(similarity(fa, fb, self.omega), level=level)


def _level_matchset(tm: TokenMatches, grid_a_w: int, grid_b_w: int, level: int) -> MatchSet:
    s = LEVEL_STRIDE[level]
    return MatchSet(token_centers(tm.i, grid_a_w, s), token_centers(tm.j, grid_b_w, s), tm.conf,
                    np.full(len(tm), "coarse"), level=np.full(len(tm), level))


def _cells_containing(points: np.ndarray, stride: int, grid_w: int) -> np.ndarray:
    p = np.floor(points / stride).astype(np.int64)
    return p[:, 1] * grid_w + p[:, 0]


def gather(levels: dict[int, MatchSet], grids: dict[int, tuple[int, int]], status: str) -> MatchSet:
    """Finest-first union: a coarser match is dropped when a finer match starts inside its cell."""
    out = []
    finer = None
    for level in (1, 2, 3):
        ms = levels.get(level)
        if ms is None:
            continue
        if finer is not None and len(finer):
            w = grids[level][1]
            covered = np.zeros(grids[level][0] * w, dtype=bool)
            covered[_cells_containing(finer, LEVEL_STRIDE[level], w)] = True
            ms = ms.subset(~covered[_cells_containing(ms.src, LEVEL_STRIDE[level], w)])
        out.append(ms)
        finer = ms.src if finer is None else np.concatenate([finer, ms.src])
    return concat_matches(out, status)


@dataclass
class CascadeResult:
    matches: MatchSet
    confidences: list  # ConfidenceMatrix per evaluated level (WindowConfidence for level 1)
    level_matches: dict  # level -> MatchSet before gathering
    counts: dict


def _failure_status(n3: int, cfg: CascadeConfig) -> str:
    return "failed_small_overlap" if n3 < cfg.n3 / 2 else "failed_challenging"


def cascade_match(matcher: CascadeMatcher, pyr_a: FeaturePyramid, pyr_b: FeaturePyramid,
                  cfg: CascadeConfig | None = None, max_level: int = 1, tag: str = "") -> CascadeResult:
    """Level 3 always runs; each finer level runs only if the previous level passed its count gate."""
    cfg = cfg or CascadeConfig()
    if pyr_a.image_shape != pyr_b.image_shape:
        raise ValueError(f"pyramids come from different image sizes: {pyr_a.image_shape} vs {pyr_b.image_shape}")
    H, W = pyr_a.image_shape
    grids = {3: (H // 8, W // 8), 2: (H // 4, W // 4), 1: (H, W)}
    confs, levels = [], {}

    P3 = matcher.level_confidence(pyr_a.f3, pyr_b.f3, 3, f"{tag}cross3")
    m3 = mnn_filter(P3, cfg.theta3)
    confs.append(P3)
    levels[3] = _level_matchset(m3, grids[3][1], grids[3][1], 3)
    counts = {3: len(m3)}
    if len(m3) < cfg.n3:
        return CascadeResult(gather(levels, grids, _failure_status(len(m3), cfg)), confs, levels, counts)
    if max_level >= 3:
        return CascadeResult(gather(levels, grids, "ok"), confs, levels, counts)

    P2 = matcher.level_confidence(pyr_a.f2, pyr_b.f2, 2, f"{tag}cross2")
    m2 = mnn_filter(P2, cfg.theta2)
    confs.append(P2)
    levels[2] = _level_matchset(m2, grids[2][1], grids[2][1], 2)
    counts[2] = len(m2)
    if len(m2) < cfg.n2:
        return CascadeResult(gather(levels, grids, _failure_status(len(m3), cfg)), confs, levels, counts)
    if max_level >= 2:
        return CascadeResult(gather(levels, grids, "ok"), confs, levels, counts)

    wc = window_confidence(pyr_a.f1, pyr_b.f1, m2.i, m2.j, grids[2], cfg.window_radius, matcher.omega)
    src, dst, conf = window_mnn(wc, cfg.theta1, W)
    confs.append(wc)
    levels[1] = MatchSet(src, dst, conf, np.full(len(conf), "coarse"), level=np.full(len(conf), 1))
    counts[1] = len(conf)
    return CascadeResult(gather(levels, grids, "ok"), confs, levels, counts)


def config_fields(cfg) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}
