"""The full matcher: extractor, cascade, position transform and 2D-3D attention behind one Module."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .edgefeat import EdgeFeatureExtractor, FeaturePyramid, tokens
from .fuse3d import PositionFeatureMap, PositionTransform, build_position_features, fuse
from .layers import MultiHeadAttention
from .match2d import CascadeConfig, CascadeMatcher, CascadeResult, ConfidenceMatrix, MatchSet, TokenMatches, \
    cascade_match, mnn_filter, token_centers
from .match3d import GuidanceConfig, WindowFilterConfig, cross_attention_3d, fine_match, guidance_bias, \
    merge_coarse_fine
from .numerics import Module, Tensor, no_grad

MODES = ("2d-only", "pseudo-3d", "pseudo-3d-fallback")


@dataclass(frozen=True)
class ModelConfig:
    d1: int = 32
    d2: int = 32
    d3: int = 64
    heads: int = 2
    omega: float = 0.1
    init_seed: int = 0


@dataclass
class MatchConfig:
    cascade: CascadeConfig = field(default_factory=CascadeConfig)
    window: WindowFilterConfig = field(default_factory=WindowFilterConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    edge_threshold: float = 0.5


class TP3M(Module):
    def __init__(self, cfg: ModelConfig | None = None):
        cfg = cfg or ModelConfig()
        rng = np.random.default_rng(cfg.init_seed)
        self.extractor = EdgeFeatureExtractor(rng, cfg.d1, cfg.d2, cfg.d3, cfg.heads)
        self.matcher = CascadeMatcher(rng, (cfg.d1, cfg.d2, cfg.d3), cfg.heads, cfg.omega)
        self.position = PositionTransform(rng, cfg.d3)
        self.attn3d = MultiHeadAttention(rng, cfg.d3, cfg.heads, name="cross3d")
        self.cfg = cfg

    def pyramid(self, image) -> FeaturePyramid:
        return self.extractor(image)

    def edge_parameters(self):
        return self.extractor.edge_head.parameters()

    def joint_parameters(self, finetune_backbone: bool = True):
        """Everything optimised by the joint phase; the edge head stays frozen."""
        out = self.matcher.parameters() + self.position.parameters() + self.attn3d.parameters()
        return (self.extractor.backbone_parameters() + out) if finetune_backbone else out

    def reference_matches(self, pyr_a: FeaturePyramid, pyr_c: FeaturePyramid, theta: float) -> TokenMatches:
        """Level-3 A<->C token matches, computed without gradients."""
        with no_grad():
            P = self.matcher.level_confidence(pyr_a.f3, pyr_c.f3, 3, "ref_cross3")
        return mnn_filter(P, theta)

    def position_map(self, tm: TokenMatches, shape: tuple[int, int]) -> PositionFeatureMap:
        H, W = shape
        grid = (H // 8, W // 8)
        return build_position_features(tm.i, token_centers(tm.i, grid[1], 8), token_centers(tm.j, grid[1], 8),
                                       tm.conf, grid, shape)

    def fused_tokens(self, pyr_a: FeaturePyramid, pos_maps: list[PositionFeatureMap]) -> Tensor:
        fa = tokens(pyr_a.f3)
        if not pos_maps:
            return fa
        t = self.position(pos_maps[0])
        for m in pos_maps[1:]:
            t = t + self.position(m)
        if len(pos_maps) > 1:
            t = t * (1.0 / len(pos_maps))
        return fuse(fa, t)

    def confidence_3d(self, f3d: Tensor, pyr_b: FeaturePyramid, coarse: TokenMatches | None,
                      guidance: GuidanceConfig) -> ConfidenceMatrix:
        grid = pyr_b.f3.shape[1:]
        bias = None
        if coarse is not None and len(coarse) and guidance.bonus != 0:
            bias = guidance_bias(coarse.i, coarse.j, grid, grid, guidance.bonus, guidance.radius)
        return cross_attention_3d(self.attn3d, f3d, tokens(pyr_b.f3), self.matcher.omega, bias)


@dataclass
class PipelineResult:
    matches: MatchSet
    mode: str
    cascade: CascadeResult
    confidence_3d: ConfidenceMatrix | None = None
    reference_status: list = field(default_factory=list)


def _coarse_tokens(res: CascadeResult, grid_w: int) -> TokenMatches:
    lvl3 = res.level_matches[3]
    i = np.floor(lvl3.src / 8).astype(np.int64)
    j = np.floor(lvl3.dst / 8).astype(np.int64)
    return TokenMatches(i[:, 1] * grid_w + i[:, 0], j[:, 1] * grid_w + j[:, 0], lvl3.conf)


def match_pair(model: TP3M, image_a, image_b, refs=(), cfg: MatchConfig | None = None) -> PipelineResult:
    """2D cascade A<->B; with reference views also the pseudo-3D pass, merged into the cascade output."""
    cfg = cfg or MatchConfig()
    img_a, img_b = np.asarray(image_a, dtype=np.float64), np.asarray(image_b, dtype=np.float64)
    if img_a.shape != img_b.shape:
        raise ValueError(f"images differ in size: {img_a.shape} vs {img_b.shape}")
    with no_grad():
        pa, pb = model.pyramid(img_a), model.pyramid(img_b)
        res = cascade_match(model.matcher, pa, pb, cfg.cascade)
        if not refs:
            ms = res.matches
            ms.meta["mode"] = "2d-only"
            return PipelineResult(ms, "2d-only", res)
        maps, statuses = [], []
        for ref in refs:
            img_c = np.asarray(ref, dtype=np.float64)
            if img_c.shape != img_a.shape:
                raise ValueError(f"reference differs in size: {img_c.shape} vs {img_a.shape}")
            tm = model.reference_matches(pa, model.pyramid(img_c), cfg.cascade.theta3)
            ok = len(tm) >= cfg.cascade.n3
            statuses.append("ok" if ok else ("failed_small_overlap" if len(tm) < cfg.cascade.n3 / 2
                                             else "failed_challenging"))
            if ok:
                maps.append(model.position_map(tm, img_a.shape))
        mode = "pseudo-3d" if maps else "pseudo-3d-fallback"
        grid = pa.f3.shape[1:]
        P3d = model.confidence_3d(model.fused_tokens(pa, maps), pb, _coarse_tokens(res, grid[1]), cfg.guidance)
        fine = fine_match(P3d, pa.edge_map.data, grid, grid, cfg.window, cfg.edge_threshold)
    ms = merge_coarse_fine(res.matches, fine)
    ms.meta["mode"] = mode
    return PipelineResult(ms, mode, res, P3d, statuses)
