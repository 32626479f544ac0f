"""Synthetic source / reference / destination triplets with exact ground truth.

Scenes are a procedural texture laid on a heightfield z = Z0 + h(x, y) in the
frame of camera A. Planar scenes use h = 0, so every view is a homography of
the texture. Images are rendered by casting one ray per pixel, which also
yields exact depth.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numerics.checkpoint import atomic_write_bytes

Z0 = 4.0
GT_STEP = 4
GT_OFFSET = 2


class DegenerateHomographyError(ValueError):
    pass


class InsufficientCovisibility(RuntimeError):
    """Signals that a candidate scene should be regenerated."""


@dataclass(frozen=True)
class PerturbationSpec:
    """Viewpoint and photometric perturbation magnitudes.

    The reference view C uses `ref_fraction` times the destination viewpoint
    magnitudes, so it always sits closer to A than B does.
    """
    rot_deg: float = 10.0
    trans_frac: float = 0.15
    ref_fraction: float = 0.25
    brightness: float = 0.1
    contrast: float = 0.2
    noise_sigma: float = 0.02
    texture_density: float = 1.0
    relief: float = 0.3
    height: int = 64
    width: int = 64

    def __post_init__(self):
        for name in ("rot_deg", "trans_frac", "ref_fraction", "brightness", "contrast", "noise_sigma",
                     "texture_density", "relief"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.ref_fraction >= 1.0:
            raise ValueError("reference perturbation must be strictly smaller than the destination's")
        if self.height % 8 or self.width % 8:
            raise ValueError("image size must be divisible by 8")
        if self.texture_density == 0:
            raise ValueError("texture_density must be > 0")

    @classmethod
    def zero(cls, **kw) -> "PerturbationSpec":
        base = dict(rot_deg=0.0, trans_frac=0.0, brightness=0.0, contrast=0.0, noise_sigma=0.0)
        base.update(kw)
        return cls(**base)

    @classmethod
    def high_jitter(cls, **kw) -> "PerturbationSpec":
        base = dict(rot_deg=15.0, trans_frac=0.25, brightness=0.25, contrast=0.4, noise_sigma=0.05)
        base.update(kw)
        return cls(**base)


@dataclass
class Pose:
    """World-to-camera transform X_cam = R X_world + t."""
    R: np.ndarray
    t: np.ndarray

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t


@dataclass
class SceneSample:
    image_a: np.ndarray
    image_b: np.ndarray
    image_c: np.ndarray
    K: np.ndarray
    pose_a: Pose
    pose_b: Pose
    pose_c: Pose
    depth_a: np.ndarray
    depth_b: np.ndarray
    depth_c: np.ndarray
    gt_ab: np.ndarray
    gt_ac: np.ndarray
    mode: str = "planar"
    H_ab: np.ndarray | None = None
    H_ac: np.ndarray | None = None
    jitter: dict = field(default_factory=dict)
    degenerate_epipolar: bool = False
    homography_evaluable: bool = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.image_a.shape

    def relative_pose(self, dst: str = "b") -> tuple[np.ndarray, np.ndarray]:
        """(R, t) mapping camera-A coordinates to camera-`dst` coordinates."""
        other = self.pose_b if dst == "b" else self.pose_c
        R = other.R @ self.pose_a.R.T
        t = other.t - R @ self.pose_a.t
        return R, t


# geometry helpers ------------------------------------------------------------

def intrinsics(height: int, width: int) -> np.ndarray:
    f = float(width)
    return np.array([[f, 0.0, (width - 1) / 2], [0.0, f, (height - 1) / 2], [0.0, 0.0, 1.0]])


def rotation(axis, deg: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    a = np.deg2rad(deg)
    x = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(a) * x + (1 - np.cos(a)) * x @ x


def _look_at(center: np.ndarray, target: np.ndarray) -> np.ndarray:
    z = target - center
    z = z / np.linalg.norm(z)
    up = np.array([0.0, -1.0, 0.0])
    x = np.cross(z, up)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z])  # rows are camera axes in world coordinates


def sample_pose(rng: np.random.Generator, rot_deg: float, trans_frac: float) -> Pose:
    """Camera displaced laterally by trans_frac*Z0, aimed at the scene centre, rolled by rot_deg."""
    if rot_deg == 0 and trans_frac == 0:
        return Pose.identity()
    phi = rng.uniform(0, 2 * np.pi)
    lateral = np.array([np.cos(phi), np.sin(phi), rng.uniform(-0.2, 0.2)])
    center = trans_frac * Z0 * lateral / np.linalg.norm(lateral[:2])
    R = _look_at(center, np.array([0.0, 0.0, Z0])) if trans_frac > 0 else np.eye(3)
    roll = rot_deg * rng.choice([-1.0, 1.0])
    R = rotation([0, 0, 1], roll) @ R
    return Pose(R, -R @ center)


def plane_homography(K: np.ndarray, pose: Pose, depth: float = Z0) -> np.ndarray:
    """Homography induced by the plane z = depth (world = camera A) into `pose`."""
    n = np.array([0.0, 0.0, 1.0])
    H = K @ (pose.R + np.outer(pose.t, n) / depth) @ np.linalg.inv(K)
    if abs(np.linalg.det(H)) < 1e-9:
        raise DegenerateHomographyError("homography determinant below 1e-9")
    return H / H[2, 2]


def apply_homography(H: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    h = np.c_[pts, np.ones(len(pts))] @ H.T
    return h[:, :2] / h[:, 2:3]


# texture and surface -----------------------------------------------------------

class ValueNoise:
    """Multi-octave value noise over the plane, lattice drawn from a seeded rng."""

    def __init__(self, rng: np.random.Generator, base_freq: float, octaves: int = 4, lattice: int = 128):
        self.tables = [rng.uniform(-1, 1, (lattice, lattice)) for _ in range(octaves)]
        self.offsets = [rng.uniform(0, lattice, 2) for _ in range(octaves)]
        self.base_freq = base_freq
        self.n = lattice

    def __call__(self, u: np.ndarray, v: np.ndarray, octaves: int | None = None) -> np.ndarray:
        out = np.zeros(np.broadcast(u, v).shape)
        norm = 0.0
        for k, (table, off) in enumerate(zip(self.tables[:octaves], self.offsets[:octaves])):
            f = self.base_freq * 2 ** k
            amp = 0.5 ** k
            out += amp * self._lattice(table, u * f + off[0], v * f + off[1])
            norm += amp
        return out / norm

    def _lattice(self, table, u, v):
        iu, iv = np.floor(u), np.floor(v)
        fu, fv = u - iu, v - iv
        fu, fv = fu * fu * (3 - 2 * fu), fv * fv * (3 - 2 * fv)
        i0, j0 = iu.astype(np.int64) % self.n, iv.astype(np.int64) % self.n
        i1, j1 = (i0 + 1) % self.n, (j0 + 1) % self.n
        a = table[j0, i0] * (1 - fu) + table[j0, i1] * fu
        b = table[j1, i0] * (1 - fu) + table[j1, i1] * fu
        return a * (1 - fv) + b * fv


class Texture:
    """Smooth octave noise blended with sharp-edged piecewise-flat regions."""

    def __init__(self, rng: np.random.Generator, density: float):
        self.fine = ValueNoise(rng, base_freq=density / 8.0)
        self.regions = ValueNoise(rng, base_freq=density / 16.0, octaves=2)

    def __call__(self, u, v) -> np.ndarray:
        smooth = self.fine(u, v)
        sharp = 1.0 / (1.0 + np.exp(-25.0 * self.regions(u, v)))
        return np.clip(0.5 + 0.3 * smooth + 0.35 * (sharp - 0.5), 0.0, 1.0)


class Heightfield:
    """h(x, y) in world units: smooth relief plus two rectangular steps."""

    def __init__(self, rng: np.random.Generator, relief: float):
        self.noise = ValueNoise(rng, base_freq=0.5, octaves=2)
        self.relief = relief * Z0
        self.steps = []
        for _ in range(2 if relief > 0 else 0):
            cx, cy = rng.uniform(-0.8, 0.8, 2)
            hw, hh = rng.uniform(0.25, 0.6, 2)
            self.steps.append((cx - hw, cx + hw, cy - hh, cy + hh, rng.choice([-1.0, 1.0]) * 0.5 * self.relief))

    def __call__(self, x, y) -> np.ndarray:
        h = self.relief * 0.5 * self.noise(x, y)
        for x0, x1, y0, y1, dh in self.steps:
            h = h + dh * ((x >= x0) & (x < x1) & (y >= y0) & (y < y1))
        return h


def _pixel_rays(K: np.ndarray, pose: Pose, pts: np.ndarray):
    d_cam = np.c_[pts, np.ones(len(pts))] @ np.linalg.inv(K).T  # z component == 1
    return pose.center, d_cam @ pose.R  # world directions; ray depth equals the ray parameter


def cast_rays(surface: Heightfield | None, K: np.ndarray, pose: Pose, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """First intersection of pixel rays with z = Z0 + h(x, y).

    Returns (world points (n, 3), depth (n,)). Rays missing the surface get depth inf.
    """
    c, d = _pixel_rays(K, pose, pts)
    if surface is None or surface.relief == 0:
        s = (Z0 - c[2]) / d[:, 2]
        s = np.where(s > 0, s, np.inf)
        return c + s[:, None] * d, s

    def g(s):
        X = c + s[:, None] * d
        return X[:, 2] - Z0 - surface(X[:, 0], X[:, 1])

    lo = np.full(len(pts), 0.3 * Z0)
    n_steps, s_max = 600, 3.0 * Z0
    ds = (s_max - lo[0]) / n_steps
    hit = np.zeros(len(pts), dtype=bool)
    a = lo.copy()
    ga = g(a)
    for _ in range(n_steps):
        b = a + ds
        gb = g(b)
        newly = (~hit) & (ga < 0) & (gb >= 0)
        lo = np.where(newly, a, lo)
        hit |= newly
        if hit.all():
            break
        a = np.where(hit, a, b)
        ga = np.where(hit, ga, gb)
    hi = lo + ds
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        neg = g(mid) < 0
        lo = np.where(neg, mid, lo)
        hi = np.where(neg, hi, mid)
    s = np.where(hit, hi, np.inf)
    X = c + np.where(hit, s, 0.0)[:, None] * d
    return X, s


def project(K: np.ndarray, pose: Pose, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    Xc = X @ pose.R.T + pose.t
    uv = Xc @ K.T
    return uv[:, :2] / uv[:, 2:3], Xc[:, 2]


def pixel_grid(height: int, width: int, step: int = 1, offset: int = 0) -> np.ndarray:
    ys, xs = np.mgrid[offset:height:step, offset:width:step]
    return np.c_[xs.ravel(), ys.ravel()].astype(np.float64)


# image operations ---------------------------------------------------------------

def bilinear_sample(image: np.ndarray, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample `image` at float coords; returns (values, in-bounds mask). Out of bounds -> 0."""
    h, w = image.shape
    valid = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xc, yc = np.clip(x, 0, w - 1), np.clip(y, 0, h - 1)
    x0, y0 = np.minimum(np.floor(xc).astype(np.int64), w - 2), np.minimum(np.floor(yc).astype(np.int64), h - 2)
    fx, fy = xc - x0, yc - y0
    v = (image[y0, x0] * (1 - fx) * (1 - fy) + image[y0, x0 + 1] * fx * (1 - fy)
         + image[y0 + 1, x0] * (1 - fx) * fy + image[y0 + 1, x0 + 1] * fx * fy)
    return np.where(valid, v, 0.0), valid


def warp_image(image: np.ndarray, H: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inverse warp: out(x) = image(H^-1 x) with bilinear sampling.

    Returns (warped image, valid mask); pixels whose preimage falls outside
    the source are 0 and masked out.
    """
    H = np.asarray(H, dtype=np.float64)
    if abs(np.linalg.det(H)) < 1e-12:
        raise np.linalg.LinAlgError("singular homography")
    h, w = image.shape
    pts = pixel_grid(h, w)
    src = apply_homography(np.linalg.inv(H), pts)
    # snap round-off so exact integer preimages sample exactly
    src = np.where(np.abs(src - np.round(src)) < 1e-9, np.round(src), src)
    vals, valid = bilinear_sample(np.asarray(image, dtype=np.float64), src[:, 0], src[:, 1])
    return vals.reshape(h, w), valid.reshape(h, w)


def apply_jitter(image: np.ndarray, rng: np.random.Generator, spec: PerturbationSpec) -> tuple[np.ndarray, dict]:
    gain = 1.0 + rng.uniform(-spec.contrast, spec.contrast)
    offset = rng.uniform(-spec.brightness, spec.brightness)
    noise = rng.standard_normal(image.shape) * spec.noise_sigma
    if spec.contrast == 0 and spec.brightness == 0 and spec.noise_sigma == 0:
        return image.copy(), {"gain": 1.0, "offset": 0.0, "noise_sigma": 0.0}
    out = np.clip(gain * image + offset + noise, 0.0, 1.0)
    return out, {"gain": float(gain), "offset": float(offset), "noise_sigma": float(spec.noise_sigma)}


# ground truth ----------------------------------------------------------------------

def _gt_from_homography(H: np.ndarray, height: int, width: int) -> np.ndarray:
    src = pixel_grid(height, width, GT_STEP, GT_OFFSET)
    dst = apply_homography(H, src)
    keep = (dst[:, 0] >= 0) & (dst[:, 0] <= width - 1) & (dst[:, 1] >= 0) & (dst[:, 1] <= height - 1)
    return np.c_[src[keep], dst[keep]]


def _gt_from_surface(surface, K, pose_a, pose_b, height, width) -> np.ndarray:
    src = pixel_grid(height, width, GT_STEP, GT_OFFSET)
    visible = _visible_in(surface, K, pose_b, src, height, width)
    uv, _ = project(K, pose_b, cast_rays(surface, K, pose_a, src[visible])[0])
    return np.c_[src[visible], uv]


def reprojection_residuals(sample: SceneSample, dst: str = "b") -> np.ndarray:
    """Residual (px) of each gt match re-derived from depth_a, K and the poses."""
    gt = sample.gt_ab if dst == "b" else sample.gt_ac
    if len(gt) == 0:
        return np.zeros(0)
    xa = gt[:, :2]
    ix, iy = np.round(xa[:, 0]).astype(int), np.round(xa[:, 1]).astype(int)
    z = sample.depth_a[iy, ix]
    rays = np.c_[xa, np.ones(len(xa))] @ np.linalg.inv(sample.K).T
    Xa = rays * z[:, None]
    R, t = sample.relative_pose(dst)
    P = sample.K @ np.c_[R, t]
    proj = np.c_[Xa, np.ones(len(Xa))] @ P.T
    uv = proj[:, :2] / proj[:, 2:3]
    return np.linalg.norm(uv - gt[:, 2:4], axis=1)


def validate(sample: SceneSample, tol: float = 0.5) -> None:
    for dst in ("b", "c"):
        res = reprojection_residuals(sample, dst)
        if res.size and res.max() >= tol:
            raise AssertionError(f"gt match reprojection residual {res.max():.3g} px exceeds {tol}")
    for H, gt in ((sample.H_ab, sample.gt_ab), (sample.H_ac, sample.gt_ac)):
        if H is not None and len(gt):
            err = np.linalg.norm(apply_homography(H, gt[:, :2]) - gt[:, 2:4], axis=1)
            if err.max() >= tol:
                raise AssertionError("gt match violates the sample homography")


# generators ------------------------------------------------------------------------

def _streams(seed: int):
    geo, tex, jit = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(geo), np.random.default_rng(tex), np.random.default_rng(jit)


def _render(surface, texture, K, pose, h, w):
    pts = pixel_grid(h, w)
    X, depth = cast_rays(surface, K, pose, pts)
    f = K[0, 0]
    # texture is parameterised in A-pixel units on the reference plane
    u = X[:, 0] * f / Z0 + K[0, 2]
    v = X[:, 1] * f / Z0 + K[1, 2]
    img = np.where(np.isfinite(depth), texture(u, v), 0.0)
    return img.reshape(h, w), depth.reshape(h, w)


def gen_planar(seed: int, spec: PerturbationSpec | None = None) -> SceneSample:
    """Textured plane seen from A (fronto-parallel), B and C (perturbed)."""
    spec = spec or PerturbationSpec()
    geo, tex, jit = _streams(seed)
    h, w = spec.height, spec.width
    K = intrinsics(h, w)
    pose_b = sample_pose(geo, spec.rot_deg, spec.trans_frac)
    pose_c = sample_pose(geo, spec.rot_deg * spec.ref_fraction, spec.trans_frac * spec.ref_fraction)
    H_ab = plane_homography(K, pose_b)
    H_ac = plane_homography(K, pose_c)
    texture = Texture(tex, spec.texture_density)
    imgs, depths = [], []
    for pose in (Pose.identity(), pose_b, pose_c):
        img, d = _render(None, texture, K, pose, h, w)
        imgs.append(img)
        depths.append(d)
    image_b, jitter = apply_jitter(imgs[1], jit, spec)
    sample = SceneSample(
        image_a=imgs[0], image_b=image_b, image_c=imgs[2], K=K,
        pose_a=Pose.identity(), pose_b=pose_b, pose_c=pose_c,
        depth_a=depths[0], depth_b=depths[1], depth_c=depths[2],
        gt_ab=_gt_from_homography(H_ab, h, w), gt_ac=_gt_from_homography(H_ac, h, w),
        mode="planar", H_ab=H_ab, H_ac=H_ac, jitter=jitter,
        degenerate_epipolar=True, homography_evaluable=True,
    )
    validate(sample)
    return sample


def planar_pair_from_homography(seed: int, H: np.ndarray, spec: PerturbationSpec | None = None) -> SceneSample:
    """Planar sample with a caller-chosen H_AB (C equals A); poses are left as identity."""
    spec = spec or PerturbationSpec.zero()
    H = np.asarray(H, dtype=np.float64)
    if abs(np.linalg.det(H)) < 1e-9:
        raise DegenerateHomographyError("homography determinant below 1e-9")
    H = H / H[2, 2]
    _, tex, jit = _streams(seed)
    h, w = spec.height, spec.width
    texture = Texture(tex, spec.texture_density)
    pts = pixel_grid(h, w)
    img_a = texture(pts[:, 0], pts[:, 1]).reshape(h, w)
    src = apply_homography(np.linalg.inv(H), pts)
    img_b, jitter = apply_jitter(texture(src[:, 0], src[:, 1]).reshape(h, w), jit, spec)
    depth = np.full((h, w), Z0)
    sample = SceneSample(
        image_a=img_a, image_b=img_b, image_c=img_a.copy(), K=intrinsics(h, w),
        pose_a=Pose.identity(), pose_b=Pose.identity(), pose_c=Pose.identity(),
        depth_a=depth, depth_b=depth.copy(), depth_c=depth.copy(),
        gt_ab=_gt_from_homography(H, h, w), gt_ac=_gt_from_homography(np.eye(3), h, w),
        mode="planar", H_ab=H, H_ac=np.eye(3), jitter=jitter,
        degenerate_epipolar=True, homography_evaluable=True,
    )
    for Hx, gt in ((sample.H_ab, sample.gt_ab), (sample.H_ac, sample.gt_ac)):
        if len(gt) and np.linalg.norm(apply_homography(Hx, gt[:, :2]) - gt[:, 2:4], axis=1).max() >= 0.5:
            raise AssertionError("gt match violates the sample homography")
    return sample


def gen_3d(seed: int, spec: PerturbationSpec | None = None, pose_b: Pose | None = None,
           pose_c: Pose | None = None, max_attempts: int = 20) -> SceneSample:
    """Heightfield scene rendered from three cameras.

    Candidates with <30% of A visible in B are regenerated from the next
    attempt's random stream, so the result stays a pure function of the seed.
    """
    spec = spec or PerturbationSpec()
    for attempt in range(max_attempts):
        try:
            return _gen_3d_attempt(seed, attempt, spec, pose_b, pose_c)
        except InsufficientCovisibility:
            if pose_b is not None:
                raise
    raise InsufficientCovisibility(f"no covisible scene after {max_attempts} attempts (seed {seed})")


def _gen_3d_attempt(seed, attempt, spec, pose_b, pose_c) -> SceneSample:
    geo, tex, jit = _streams(seed)
    geo = np.random.default_rng([seed, attempt, 1]) if attempt else geo
    h, w = spec.height, spec.width
    K = intrinsics(h, w)
    pb = pose_b or sample_pose(geo, spec.rot_deg, spec.trans_frac)
    pc = pose_c or sample_pose(geo, spec.rot_deg * spec.ref_fraction, spec.trans_frac * spec.ref_fraction)
    surface = Heightfield(geo, spec.relief)
    texture = Texture(tex, spec.texture_density)
    imgs, depths = [], []
    for pose in (Pose.identity(), pb, pc):
        img, d = _render(surface, texture, K, pose, h, w)
        imgs.append(img)
        depths.append(d)
    if not all(np.isfinite(d).all() for d in depths):
        raise InsufficientCovisibility("a view sees past the surface")
    covis = _covisible_fraction(surface, K, pb, h, w)
    if covis < 0.3:
        raise InsufficientCovisibility(f"covisibility {covis:.2f} < 0.30")
    image_b, jitter = apply_jitter(imgs[1], jit, spec)
    pure_rotation = float(np.linalg.norm(pb.center)) == 0.0
    H_ab = K @ pb.R @ np.linalg.inv(K) if pure_rotation else None
    pure_rot_c = float(np.linalg.norm(pc.center)) == 0.0
    H_ac = K @ pc.R @ np.linalg.inv(K) if pure_rot_c else None
    sample = SceneSample(
        image_a=imgs[0], image_b=image_b, image_c=imgs[2], K=K,
        pose_a=Pose.identity(), pose_b=pb, pose_c=pc,
        depth_a=depths[0], depth_b=depths[1], depth_c=depths[2],
        gt_ab=_gt_from_surface(surface, K, Pose.identity(), pb, h, w),
        gt_ac=_gt_from_surface(surface, K, Pose.identity(), pc, h, w),
        mode="3d", H_ab=None if H_ab is None else H_ab / H_ab[2, 2],
        H_ac=None if H_ac is None else H_ac / H_ac[2, 2], jitter=jitter,
        degenerate_epipolar=pure_rotation, homography_evaluable=pure_rotation,
    )
    validate(sample)
    return sample


def _covisible_fraction(surface, K, pose_b, h, w) -> float:
    src = pixel_grid(h, w, 2, 0)
    return _visible_in(surface, K, pose_b, src, h, w).mean()


def _visible_in(surface, K, pose_b, src, h, w) -> np.ndarray:
    """Mask of A pixels whose surface point is in view of `pose_b` and not occluded."""
    X, depth = cast_rays(surface, K, Pose.identity(), src)
    ok = np.isfinite(depth)
    uv, zb = project(K, pose_b, np.where(ok[:, None], X, 0.0))
    inb = ok & (zb > 0) & (uv[:, 0] >= 0) & (uv[:, 0] <= w - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= h - 1)
    # the ray from B through uv must hit the same surface point first
    _, s_b = cast_rays(surface, K, pose_b, np.where(inb[:, None], uv, 0.0))
    return inb & (np.abs(s_b - zb) < 1e-4 * Z0)


# dense flow for token-level supervision -------------------------------------------

def dense_flow(sample: SceneSample, dst: str = "b", reverse: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Map every pixel of the source view to continuous coordinates in the other view.

    Forward maps A -> dst; reverse maps dst -> A. Uses the homography for
    planar samples and depth + poses otherwise. Returns (coords (h, w, 2), valid (h, w)).
    """
    h, w = sample.shape
    pts = pixel_grid(h, w)
    H = sample.H_ab if dst == "b" else sample.H_ac
    if sample.mode == "planar" and H is not None:
        M = np.linalg.inv(H) if reverse else H
        uv = apply_homography(M, pts)
        valid = (uv[:, 0] >= 0) & (uv[:, 0] <= w - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= h - 1)
        return uv.reshape(h, w, 2), valid.reshape(h, w)
    other_pose = sample.pose_b if dst == "b" else sample.pose_c
    other_depth = sample.depth_b if dst == "b" else sample.depth_c
    src_pose, dst_pose = (other_pose, sample.pose_a) if reverse else (sample.pose_a, other_pose)
    src_depth, dst_depth = (other_depth, sample.depth_a) if reverse else (sample.depth_a, other_depth)
    rays = np.c_[pts, np.ones(len(pts))] @ np.linalg.inv(sample.K).T
    Xc = rays * src_depth.reshape(-1)[:, None]
    Xw = (Xc - src_pose.t) @ src_pose.R
    uv, z = project(sample.K, dst_pose, Xw)
    inb = (z > 0) & (uv[:, 0] >= 0) & (uv[:, 0] <= w - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= h - 1)
    ix = np.clip(np.round(uv[:, 0]).astype(int), 0, w - 1)
    iy = np.clip(np.round(uv[:, 1]).astype(int), 0, h - 1)
    visible = inb & (np.abs(dst_depth[iy, ix] - z) < 0.02 * z)
    return uv.reshape(h, w, 2), visible.reshape(h, w)


# disk format ---------------------------------------------------------------------

def write_pgm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    atomic_write_bytes(path, f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pgm(path) -> np.ndarray:
    """8-bit binary PGM -> float image in [0, 1]."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    pos += 1
    if tokens[0] != b"P5" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: only 8-bit binary PGM is supported")
    w, h = int(tokens[1]), int(tokens[2])
    arr = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w)
    return arr.astype(np.float64) / 255.0


def _fmt(x: float) -> str:
    return repr(float(x))


def _write_tsv(path, rows: np.ndarray) -> None:
    lines = ["\t".join(_fmt(v) for v in row) for row in rows]
    atomic_write_bytes(path, ("\n".join(lines) + ("\n" if lines else "")).encode())


def _read_tsv(path) -> np.ndarray:
    rows = [list(map(float, line.split("\t"))) for line in Path(path).read_text().splitlines() if line.strip()]
    return np.array(rows, dtype=np.float64).reshape(-1, 4)


def _pose_json(p: Pose) -> dict:
    return {"R": [float(v) for v in p.R.reshape(-1)], "t": [float(v) for v in p.t]}


def _pose_from_json(d: dict) -> Pose:
    return Pose(np.array(d["R"], dtype=np.float64).reshape(3, 3), np.array(d["t"], dtype=np.float64))


def write_sample(sample: SceneSample, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name, img in (("a", sample.image_a), ("b", sample.image_b), ("c", sample.image_c)):
        write_pgm(d / f"{name}.pgm", img)
    for name, depth in (("a", sample.depth_a), ("b", sample.depth_b), ("c", sample.depth_c)):
        atomic_write_bytes(d / f"depth_{name}.bin", np.asarray(depth, dtype="<f4").tobytes(order="C"))
    _write_tsv(d / "gt_ab.tsv", sample.gt_ab)
    _write_tsv(d / "gt_ac.tsv", sample.gt_ac)
    h, w = sample.shape
    meta = {
        "mode": sample.mode,
        "height": h, "width": w,
        "K": [float(v) for v in sample.K.reshape(-1)],
        "poses": {"a": _pose_json(sample.pose_a), "b": _pose_json(sample.pose_b), "c": _pose_json(sample.pose_c)},
        "homography": None if sample.H_ab is None else [float(v) for v in sample.H_ab.reshape(-1)],
        "homography_ac": None if sample.H_ac is None else [float(v) for v in sample.H_ac.reshape(-1)],
        "jitter": sample.jitter,
        "degenerate_epipolar": sample.degenerate_epipolar,
        "homography_evaluable": sample.homography_evaluable,
    }
    atomic_write_bytes(d / "meta.json", (json.dumps(meta, indent=1, sort_keys=True) + "\n").encode())


def load_sample(directory) -> SceneSample:
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    h, w = meta["height"], meta["width"]

    def depth(name):
        return np.frombuffer((d / f"depth_{name}.bin").read_bytes(), dtype="<f4").reshape(h, w).astype(np.float64)

    def mat(key):
        return None if meta.get(key) is None else np.array(meta[key], dtype=np.float64).reshape(3, 3)

    return SceneSample(
        image_a=read_pgm(d / "a.pgm"), image_b=read_pgm(d / "b.pgm"), image_c=read_pgm(d / "c.pgm"),
        K=np.array(meta["K"], dtype=np.float64).reshape(3, 3),
        pose_a=_pose_from_json(meta["poses"]["a"]), pose_b=_pose_from_json(meta["poses"]["b"]),
        pose_c=_pose_from_json(meta["poses"]["c"]),
        depth_a=depth("a"), depth_b=depth("b"), depth_c=depth("c"),
        gt_ab=_read_tsv(d / "gt_ab.tsv"), gt_ac=_read_tsv(d / "gt_ac.tsv"),
        mode=meta["mode"], H_ab=mat("homography"), H_ac=mat("homography_ac"), jitter=meta["jitter"],
        degenerate_epipolar=meta["degenerate_epipolar"], homography_evaluable=meta["homography_evaluable"],
    )


def spec_dict(spec: PerturbationSpec) -> dict:
    return asdict(spec)
