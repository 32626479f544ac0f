"""Edge-aware pyramid features and their supervision helpers.

Layout of the extractor (d3=64, d2=32, d1=16 by default)::

    image -PPE-> 1/2 -PPE-> 1/4 (skip) -PPE-> 1/8 tokens -> self-attention + MLP = f3
    f3 -up2-> +skip -> conv3x3 = f2
    f2 -up4-> +stem(image, two 3x3 convs) = f1_pre -> conv3x3 = f1
    edge head(f1_pre, f2) -> sigmoid edge map at full resolution
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .layers import FeedForward, MultiHeadAttention
from .numerics import Conv2d, Module, Tensor, ops

W_MIN = 0.05
CANNY_SIGMA = 1.0
CANNY_LOW = 0.1
CANNY_HIGH = 0.2


@dataclass
class FeaturePyramid:
    f1: Tensor  # (d1, H, W)
    f2: Tensor  # (d2, H/4, W/4)
    f3: Tensor  # (d3, H/8, W/8)
    edge_map: Tensor  # (H, W), values in [0, 1]
    edge_logits: Tensor
    f1_pre: Tensor

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.edge_map.shape


@dataclass
class SignificanceWeights:
    weights: np.ndarray
    w_min: float = W_MIN


class PositionalPatchEmbed(Module):
    """Overlapping stride-2 3x3 patch embedding plus a depthwise 3x3 branch."""

    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int):
        self.proj = Conv2d(rng, c_in, c_out, 3, stride=2, zero_bias=True)
        self.dw = Conv2d(rng, c_out, c_out, 3, groups=c_out, zero_bias=True)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] < 2 or x.shape[2] < 2 or x.shape[1] % 2 or x.shape[2] % 2:
            raise ValueError(f"positional patch embedding needs even spatial dims >= 2, got {x.shape[1:]}")
        p = self.proj(x)
        return p + self.dw(p)


class BiMLAHead(Module):
    """Two-path edge head over the two finest scales.

    Top-down path carries upsampled f2, bottom-up path carries f1_pre; each is
    two 3x3 convs, and a 1x1 fusion conv gives the edge logit.
    """

    def __init__(self, rng: np.random.Generator, d1: int, d2: int, width: int = 8):
        self.td1 = Conv2d(rng, d2, width, 3)
        self.td2 = Conv2d(rng, width, width, 3)
        self.bu1 = Conv2d(rng, d1, width, 3)
        self.bu2 = Conv2d(rng, width, width, 3)
        self.fuse = Conv2d(rng, 2 * width, 1, 1, zero_bias=True)

    def logits(self, f1_pre: Tensor, f2: Tensor) -> Tensor:
        H, W = f1_pre.shape[1:]
        factor = H // f2.shape[1]
        if f2.shape[1] * factor != H or f2.shape[2] * factor != W:
            raise ValueError(f"edge head scale mismatch: {f2.shape} cannot be upsampled to {f1_pre.shape}")
        td = self.td2(ops.silu(self.td1(ops.upsample_nearest(f2, factor))))
        bu = self.bu2(ops.silu(self.bu1(f1_pre)))
        return ops.reshape(self.fuse(ops.concat([td, bu], axis=0)), (H, W))

    def __call__(self, f1_pre: Tensor, f2: Tensor) -> Tensor:
        return ops.sigmoid(self.logits(f1_pre, f2))


def bimla_edge_head(head: BiMLAHead, f1_pre: Tensor, f2: Tensor) -> Tensor:
    return head(f1_pre, f2)


class EdgeFeatureExtractor(Module):
    def __init__(self, rng: np.random.Generator, d1: int = 16, d2: int = 32, d3: int = 64, heads: int = 2):
        self.embed1 = PositionalPatchEmbed(rng, 1, d1)
        self.embed2 = PositionalPatchEmbed(rng, d1, d2)
        self.embed3 = PositionalPatchEmbed(rng, d2, d3)
        self.self_attn = MultiHeadAttention(rng, d3, heads, name="self3")
        self.ffn = FeedForward(rng, d3, 2 * d3)
        self.top2 = Conv2d(rng, d3, d2, 1)
        self.lat2 = Conv2d(rng, d2, d2, 1)
        self.refine2 = Conv2d(rng, d2, d2, 3)
        self.top1 = Conv2d(rng, d2, d1, 1)
        self.stem1 = Conv2d(rng, 1, d1, 3)
        self.stem2 = Conv2d(rng, d1, d1, 3)
        self.refine1 = Conv2d(rng, d1, d1, 3)
        self.edge_head = BiMLAHead(rng, d1, d2)
        self.dims = (d1, d2, d3)

    def backbone_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("edge_head.")]

    def __call__(self, image) -> FeaturePyramid:
        img = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
        if img.ndim != 2:
            raise ValueError("expected a single-channel (H, W) image")
        H, W = img.shape
        if H % 8 or W % 8:
            raise ValueError(f"image dims {img.shape} must be divisible by 8")
        x = Tensor(img[None])
        s2 = ops.silu(self.embed1(x))
        s4 = ops.silu(self.embed2(s2))
        t8 = self.embed3(s4)
        d3, h8, w8 = t8.shape
        tokens = ops.transpose(ops.reshape(t8, (d3, h8 * w8)))
        tokens = self.ffn(self.self_attn(tokens))
        f3 = ops.reshape(ops.transpose(tokens), (d3, h8, w8))
        f2 = self.refine2(ops.silu(self.top2(ops.upsample_nearest(f3, 2)) + self.lat2(s4)))
        f1_pre = ops.silu(self.top1(ops.upsample_nearest(f2, 4)) + self.stem2(ops.silu(self.stem1(x))))
        f1 = self.refine1(f1_pre)
        logits = self.edge_head.logits(f1_pre, f2)
        return FeaturePyramid(f1=instance_norm(f1), f2=instance_norm(f2), f3=instance_norm(f3),
                              edge_map=ops.sigmoid(logits), edge_logits=logits, f1_pre=f1_pre)


def instance_norm(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Zero-mean, unit-variance per channel over the spatial grid.

    Untrained features share a large per-channel offset that makes every token
    look alike under cosine similarity; removing it keeps matching usable from init.
    """
    centered = x - ops.mean(x, axis=(1, 2), keepdims=True)
    var = ops.mean(ops.square(centered), axis=(1, 2), keepdims=True)
    return centered / ops.sqrt(var + eps)


def extract_pyramid(model: EdgeFeatureExtractor, image) -> FeaturePyramid:
    return model(image)


def positional_patch_embed(embed: PositionalPatchEmbed, x: Tensor) -> Tensor:
    return embed(x)


def tokens(feature_map: Tensor) -> Tensor:
    """(C, h, w) -> (h*w, C), row-major over the grid."""
    c, h, w = feature_map.shape
    return ops.transpose(ops.reshape(feature_map, (c, h * w)))


# supervision helpers ----------------------------------------------------------

def canny_edges(image: np.ndarray, low_thresh: float = CANNY_LOW, high_thresh: float = CANNY_HIGH,
                sigma: float = CANNY_SIGMA) -> np.ndarray:
    """Classical Canny. Thresholds are fractions of the maximum gradient magnitude."""
    if not 0 <= low_thresh <= high_thresh:
        raise ValueError("need 0 <= low <= high")
    img = np.asarray(image, dtype=np.float64)
    smooth = ndimage.gaussian_filter(img, sigma, mode="nearest") if sigma > 0 else img
    gx = ndimage.sobel(smooth, axis=1, mode="nearest")
    gy = ndimage.sobel(smooth, axis=0, mode="nearest")
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak <= 1e-12:
        return np.zeros(img.shape, dtype=bool)
    nms = _non_max_suppression(mag, gx, gy)
    low, high = low_thresh * peak, high_thresh * peak
    weak = nms & (mag >= low)
    strong = nms & (mag >= high)
    labels, n = ndimage.label(weak, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return np.zeros(img.shape, dtype=bool)
    keep = np.zeros(n + 1, dtype=bool)
    keep[np.unique(labels[strong])] = True
    keep[0] = False
    return keep[labels]


def _non_max_suppression(mag: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    H, W = mag.shape
    padded = np.pad(mag, 1)
    angle = (np.rad2deg(np.arctan2(gy, gx)) + 180.0) % 180.0
    # neighbour offsets (dy, dx) along the gradient for the 4 quantised directions
    bins = np.digitize(angle, [22.5, 67.5, 112.5, 157.5]) % 4
    offsets = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}
    keep = np.zeros((H, W), dtype=bool)
    eps = 1e-9 * mag.max()
    yy, xx = np.mgrid[0:H, 0:W]
    for b, (dy, dx) in offsets.items():
        sel = bins == b
        fwd = padded[yy + 1 + dy, xx + 1 + dx]
        bwd = padded[yy + 1 - dy, xx + 1 - dx]
        # ties keep the forward-side pixel so plateaus still produce a 1-px line
        keep |= sel & (mag >= fwd - eps) & (mag > bwd + eps)
    return keep & (mag > 0)


def laplacian_weights(image: np.ndarray, w_min: float = W_MIN) -> SignificanceWeights:
    """Normalised |4-neighbour Laplacian| clipped to [w_min, 1] (replicated borders)."""
    img = np.asarray(image, dtype=np.float64)
    kernel = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])
    lap = np.abs(ndimage.correlate(img, kernel, mode="nearest"))
    peak = lap.max()
    if peak <= 1e-12 * max(1.0, np.abs(img).max()):
        return SignificanceWeights(np.full(img.shape, w_min), w_min)
    return SignificanceWeights(np.clip(lap / peak, w_min, 1.0), w_min)


def edge_significance(image: np.ndarray, w_min: float = W_MIN) -> np.ndarray:
    """Per-pixel loss weight: 1 on Canny edges, Laplacian significance elsewhere."""
    w = laplacian_weights(image, w_min).weights
    return np.where(canny_edges(image), 1.0, w)
