"""Two-view geometry estimation and the evaluation metrics built on it."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .numerics.checkpoint import atomic_write_bytes


class DegenerateGeometryError(ValueError):
    pass


class CheiralityError(ValueError):
    pass


@dataclass(frozen=True)
class RansacConfig:
    max_iters: int = 2000
    h_threshold: float = 3.0  # px, one-sided transfer error
    f_threshold: float = 1e-3  # squared symmetric epipolar distance, normalised coordinates
    confidence: float = 0.999
    seed: int = 0
    degenerate_fraction: float = 0.95  # share of F inliers explained by one homography that flags degeneracy
    degenerate_h_threshold: float = 1.0  # px

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.h_threshold <= 0 or self.f_threshold <= 0:
            raise ValueError("thresholds must be positive")
        if not 0 < self.confidence < 1:
            raise ValueError("confidence must lie in (0, 1)")


@dataclass
class Pose:
    R: np.ndarray
    t: np.ndarray  # unit direction

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        n = np.linalg.norm(t)
        self.t = t / n if n > 0 else t


# helpers ---------------------------------------------------------------------

def hartley_normalize(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Translate to the centroid and scale to mean distance sqrt(2); returns (homogeneous pts, T)."""
    pts = np.asarray(pts, dtype=np.float64)
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = math.sqrt(2) / d if d > 0 else 1.0
    T = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])
    return np.c_[pts, np.ones(len(pts))] @ T.T, T


def to_homogeneous(pts: np.ndarray) -> np.ndarray:
    return np.c_[pts, np.ones(len(pts))]


def apply_h(H: np.ndarray, pts: np.ndarray) -> np.ndarray:
    q = to_homogeneous(np.asarray(pts, dtype=np.float64)) @ H.T
    with np.errstate(divide="ignore", invalid="ignore"):
        return q[:, :2] / q[:, 2:3]


def _canonical_order(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    return np.lexsort((dst[:, 1], dst[:, 0], src[:, 1], src[:, 0]))


def _adaptive_iters(inlier_ratio: float, sample_size: int, confidence: float, cap: int) -> int:
    if inlier_ratio <= 0:
        return cap
    denom = 1.0 - inlier_ratio ** sample_size
    if denom <= 1e-15:
        return 1
    return min(cap, int(math.ceil(math.log(1 - confidence) / math.log(denom))))


def _check_pairs(src, dst, n_min: int, what: str):
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if len(src) != len(dst):
        raise ValueError("source and target counts differ")
    if len(src) < n_min:
        raise ValueError(f"{what} needs at least {n_min} matches, got {len(src)}")
    return src, dst


# homography --------------------------------------------------------------------

def dlt_homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Normalised DLT, least squares for more than 4 points; H[2, 2] = 1."""
    a, Ta = hartley_normalize(src)
    b, Tb = hartley_normalize(dst)
    n = len(a)
    A = np.zeros((2 * n, 9))
    A[0::2, 0:3] = a
    A[0::2, 6:9] = -b[:, 0:1] * a
    A[1::2, 3:6] = a
    A[1::2, 6:9] = -b[:, 1:2] * a
    _, _, vt = np.linalg.svd(A)
    Hn = vt[-1].reshape(3, 3)
    H = np.linalg.inv(Tb) @ Hn @ Ta
    if abs(H[2, 2]) < 1e-15:
        raise DegenerateGeometryError("homography has H[2,2] = 0")
    return H / H[2, 2]


def _collinear(p: np.ndarray, tol: float = 1e-9) -> bool:
    for i in range(len(p)):
        q = np.delete(p, i, axis=0)
        a = (q[1, 0] - q[0, 0]) * (q[2, 1] - q[0, 1]) - (q[1, 1] - q[0, 1]) * (q[2, 0] - q[0, 0])
        scale = max(np.abs(q - q[0]).max() ** 2, 1e-300)
        if abs(a) <= tol * scale:
            return True
    return False


def transfer_error(H: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    return np.linalg.norm(apply_h(H, src) - dst, axis=1)


def estimate_homography(src, dst, cfg: RansacConfig | None = None) -> tuple[np.ndarray, np.ndarray]:
    """4-point RANSAC, then least-squares refits on the inlier set until it stops changing."""
    cfg = cfg or RansacConfig()
    src, dst = _check_pairs(src, dst, 4, "homography")
    order = _canonical_order(src, dst)
    s, d = src[order], dst[order]
    rng = np.random.default_rng(cfg.seed)
    n = len(s)
    best, best_count = None, -1
    iters, it = cfg.max_iters, 0
    while it < iters:
        it += 1
        idx = np.sort(rng.choice(n, 4, replace=False))
        if _collinear(s[idx]) or _collinear(d[idx]):
            continue
        try:
            H = dlt_homography(s[idx], d[idx])
            err = transfer_error(H, s, d)
        except (DegenerateGeometryError, np.linalg.LinAlgError, FloatingPointError):
            continue
        inl = np.isfinite(err) & (err <= cfg.h_threshold)
        c = int(inl.sum())
        if c > best_count:
            best, best_count = inl, c
            iters = _adaptive_iters(c / n, 4, cfg.confidence, cfg.max_iters)
    if best is None or best_count < 4:
        raise DegenerateGeometryError("every minimal sample was degenerate")
    inl = best
    H = dlt_homography(s[inl], d[inl])
    for _ in range(5):
        new = transfer_error(H, s, d) <= cfg.h_threshold
        if new.sum() < 4 or (new == inl).all():
            break
        inl = new
        H = dlt_homography(s[inl], d[inl])
    mask = np.zeros(n, dtype=bool)
    mask[order] = inl
    return H, mask


def corner_error(H_est: np.ndarray, H_gt: np.ndarray, shape: tuple[int, int]) -> float:
    """Mean distance between the image corners mapped by the two homographies."""
    h, w = shape
    c = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)
    return float(np.linalg.norm(apply_h(H_est, c) - apply_h(H_gt, c), axis=1).mean())


# fundamental -------------------------------------------------------------------

def eight_point(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Normalised 8-point with rank-2 truncation; unit Frobenius norm, sign fixed."""
    a, Ta = hartley_normalize(src)
    b, Tb = hartley_normalize(dst)
    A = (b[:, :, None] * a[:, None, :]).reshape(len(a), 9)
    _, _, vt = np.linalg.svd(A)
    Fn = vt[-1].reshape(3, 3)
    u, sv, vt2 = np.linalg.svd(Fn)
    Fn = u @ np.diag([sv[0], sv[1], 0.0]) @ vt2
    F = Tb.T @ Fn @ Ta
    return _unit(F)


def _unit(F: np.ndarray) -> np.ndarray:
    u, sv, vt = np.linalg.svd(F)
    F = u @ np.diag([sv[0], sv[1], 0.0]) @ vt
    F = F / np.linalg.norm(F)
    k = np.flatnonzero(np.abs(F.ravel()) > 1e-12)
    return -F if len(k) and F.ravel()[k[0]] < 0 else F


def symmetric_epipolar_distance(F: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """(x_b^T F x_a)^2 * (1 / |(F x_a)_12|^2 + 1 / |(F^T x_b)_12|^2), the squared symmetric form."""
    xa, xb = to_homogeneous(src), to_homogeneous(dst)
    Fa = xa @ F.T
    Fb = xb @ F
    num = (xb * Fa).sum(axis=1) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        d = num * (1.0 / (Fa[:, 0] ** 2 + Fa[:, 1] ** 2) + 1.0 / (Fb[:, 0] ** 2 + Fb[:, 1] ** 2))
    return np.where(np.isfinite(d), d, np.inf)


def normalize_points(pts: np.ndarray, K: np.ndarray) -> np.ndarray:
    return apply_h(np.linalg.inv(K), pts)


def estimate_fundamental(src, dst, cfg: RansacConfig | None = None, K: np.ndarray | None = None,
                         check_degenerate: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """8-point RANSAC in pixel coordinates; inliers scored in normalised coordinates when K is given.

    Raises DegenerateGeometryError when one homography explains nearly all
    F-inliers (pure rotation or a planar scene).
    """
    cfg = cfg or RansacConfig()
    src, dst = _check_pairs(src, dst, 8, "fundamental matrix")
    order = _canonical_order(src, dst)
    s, d = src[order], dst[order]
    sn, dn = (normalize_points(s, K), normalize_points(d, K)) if K is not None else (s, d)

    def score(F):
        return symmetric_epipolar_distance(K.T @ F @ K if K is not None else F, sn, dn)

    rng = np.random.default_rng(cfg.seed)
    n = len(s)
    best, best_count = None, -1
    iters, it = cfg.max_iters, 0
    while it < iters:
        it += 1
        idx = np.sort(rng.choice(n, 8, replace=False))
        try:
            F = eight_point(s[idx], d[idx])
        except np.linalg.LinAlgError:
            continue
        inl = score(F) <= cfg.f_threshold
        c = int(inl.sum())
        if c > best_count:
            best, best_count = inl, c
            iters = _adaptive_iters(c / n, 8, cfg.confidence, cfg.max_iters)
    if best is None or best_count < 8:
        raise DegenerateGeometryError("not enough epipolar inliers")
    inl = best
    F = eight_point(s[inl], d[inl])
    for _ in range(5):
        new = score(F) <= cfg.f_threshold
        if new.sum() < 8 or (new == inl).all():
            break
        inl = new
        F = eight_point(s[inl], d[inl])
    if check_degenerate and inl.sum() >= 4:
        _check_homography_degeneracy(s[inl], d[inl], cfg)
    mask = np.zeros(n, dtype=bool)
    mask[order] = inl
    return F, mask


def _check_homography_degeneracy(s: np.ndarray, d: np.ndarray, cfg: RansacConfig) -> None:
    try:
        H, hm = estimate_homography(s, d, RansacConfig(max_iters=200, h_threshold=cfg.degenerate_h_threshold,
                                                       seed=cfg.seed))
    except DegenerateGeometryError:
        return
    if hm.mean() >= cfg.degenerate_fraction:
        raise DegenerateGeometryError(
            f"{hm.mean():.0%} of epipolar inliers fit one homography; epipolar geometry is undefined")


# pose --------------------------------------------------------------------------

def triangulate(P1: np.ndarray, P2: np.ndarray, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """Linear triangulation of normalised points; returns (n, 3)."""
    A = np.stack([x1[:, 0:1] * P1[2] - P1[0], x1[:, 1:2] * P1[2] - P1[1],
                  x2[:, 0:1] * P2[2] - P2[0], x2[:, 1:2] * P2[2] - P2[1]], axis=1)
    _, _, vt = np.linalg.svd(A)
    X = vt[:, -1]
    with np.errstate(divide="ignore", invalid="ignore"):
        return X[:, :3] / X[:, 3:4]


def essential_candidates(E: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    u, _, vt = np.linalg.svd(E)
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    W = np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 1]])
    R1, R2 = u @ W @ vt, u @ W.T @ vt
    t = u[:, 2]
    return [(R1, t), (R1, -t), (R2, t), (R2, -t)]


def pose_from_essential(E: np.ndarray, xa: np.ndarray, xb: np.ndarray) -> Pose:
    """Pick the decomposition with the most triangulated points in front of both cameras."""
    P1 = np.hstack([np.eye(3), np.zeros((3, 1))])
    counts = []
    cands = essential_candidates(E)
    for R, t in cands:
        X = triangulate(P1, np.hstack([R, t[:, None]]), xa, xb)
        z1 = X[:, 2]
        z2 = (X @ R.T + t)[:, 2]
        counts.append(int((np.isfinite(z1) & (z1 > 0) & (z2 > 0)).sum()))
    counts = np.array(counts)
    best = int(counts.argmax())
    if counts[best] * 2 <= len(xa) or (counts == counts[best]).sum() > 1:
        raise CheiralityError(f"no decomposition has a clear majority in front of both cameras: {counts.tolist()}")
    R, t = cands[best]
    return Pose(R, t)


def pose_from_fundamental(F: np.ndarray, K: np.ndarray, src: np.ndarray, dst: np.ndarray,
                          K_b: np.ndarray | None = None) -> Pose:
    """E = K_b^T F K_a, decomposed with a cheirality vote over the given (inlier) matches."""
    K = np.asarray(K, dtype=np.float64)
    K_b = K if K_b is None else np.asarray(K_b, dtype=np.float64)
    if K.shape != (3, 3) or abs(np.linalg.det(K)) < 1e-12 or abs(np.linalg.det(K_b)) < 1e-12:
        raise ValueError("invalid intrinsics")
    E = K_b.T @ F @ K
    return pose_from_essential(E, normalize_points(np.asarray(src, float), K),
                               normalize_points(np.asarray(dst, float), K_b))


def rotation_angle(R: np.ndarray) -> float:
    c = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.degrees(np.arccos(c)))


def translation_angle(t_est: np.ndarray, t_gt: np.ndarray) -> float:
    a, b = np.asarray(t_est, float), np.asarray(t_gt, float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0 if na == nb else 90.0
    c = np.clip(abs(a @ b) / (na * nb), 0.0, 1.0)
    return float(np.degrees(np.arccos(c)))


def pose_error(est: Pose, gt: Pose) -> float:
    """max(rotation angle of R_est R_gt^T, unsigned angle between translation directions), degrees."""
    return max(rotation_angle(est.R @ gt.R.T), translation_angle(est.t, gt.t))


# metrics -----------------------------------------------------------------------

def auc(errors, thresholds) -> list[float]:
    """Exact area under the recall-vs-error step curve, normalised by each threshold."""
    e = np.asarray(errors, dtype=np.float64).reshape(-1)
    if len(e) == 0:
        raise ValueError("no errors to integrate")
    if (e < 0).any() or np.isnan(e).any():
        raise ValueError("errors must be >= 0 (use +inf for failures)")
    out = []
    for t in thresholds:
        if t <= 0:
            raise ValueError("thresholds must be positive")
        out.append(float(np.mean(np.maximum(0.0, t - np.minimum(e, t)) / t)))
    return out


def epipolar_precision(src, dst, F_gt: np.ndarray, tau: float, K: np.ndarray | None = None) -> float | None:
    """Share of matches whose squared symmetric epipolar distance (normalised coords) is below tau."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if len(src) == 0:
        return None
    if K is not None:
        d = symmetric_epipolar_distance(K.T @ F_gt @ K, normalize_points(src, K), normalize_points(dst, K))
    else:
        d = symmetric_epipolar_distance(F_gt, src, dst)
    return float((d < tau).mean())


def skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0.0]])


def fundamental_from_pose(R: np.ndarray, t: np.ndarray, K: np.ndarray, K_b: np.ndarray | None = None) -> np.ndarray:
    K_b = K if K_b is None else K_b
    return np.linalg.inv(K_b).T @ skew(t) @ R @ np.linalg.inv(K)


def grid_recall(src_pred: np.ndarray, dst_pred: np.ndarray, gt_src: np.ndarray, warp, src_tol: float = 2.0,
                tgt_tol: float = 3.0) -> float:
    """Share of gt grid points with a predicted match starting within src_tol (Chebyshev) whose target
    lies within tgt_tol of the true image of that predicted source."""
    gt_src = np.asarray(gt_src, dtype=np.float64).reshape(-1, 2)
    if len(gt_src) == 0:
        raise ValueError("no ground-truth points")
    src_pred = np.asarray(src_pred, dtype=np.float64).reshape(-1, 2)
    if len(src_pred) == 0:
        return 0.0
    good = np.linalg.norm(np.asarray(dst_pred, dtype=np.float64) - warp(src_pred), axis=1) <= tgt_tol
    near = np.abs(gt_src[:, None, :] - src_pred[None, :, :]).max(axis=2) <= src_tol
    return float((near & good[None, :]).any(axis=1).mean())


# reports -----------------------------------------------------------------------

HOMOGRAPHY_THRESHOLDS = (1.0, 3.0, 5.0)
POSE_THRESHOLDS = (5.0, 10.0, 20.0)


def _fmt(v) -> str:
    if v is None:
        return "n/a"
    if isinstance(v, float):
        return "inf" if math.isinf(v) else f"{v:.6f}"
    return str(v)


def write_report(directory, task: str, per_pair: list[tuple[str, dict]], summary: dict, header: dict | None = None):
    """report.txt: `pair_id<TAB>metric<TAB>value` lines then a summary block; summary.json alongside."""
    lines = [f"# tp3m-eval v1 task={task}"]
    for k, v in (header or {}).items():
        lines.append(f"# {k}={v}")
    for pid, metrics in per_pair:
        for name, val in metrics.items():
            lines.append(f"{pid}\t{name}\t{_fmt(val)}")
    lines.append("# summary")
    for name, val in summary.items():
        lines.append(f"summary\t{name}\t{_fmt(val)}")
    from pathlib import Path
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(d / "report.txt", ("\n".join(lines) + "\n").encode())
    js = {"task": task, "summary": {k: (None if v is None else (str(v) if isinstance(v, float) and math.isinf(v) else v))
                                   for k, v in summary.items()},
          "pairs": {pid: {k: (None if v is None else (str(v) if isinstance(v, float) and math.isinf(v) else v))
                          for k, v in m.items()} for pid, m in per_pair}}
    atomic_write_bytes(d / "summary.json", (json.dumps(js, indent=2, sort_keys=True) + "\n").encode())


# per-pair evaluation -----------------------------------------------------------

def evaluate_homography_pair(src, dst, H_gt: np.ndarray, shape: tuple[int, int], cfg: RansacConfig | None = None,
                             precision_px: float = 3.0) -> dict:
    """Corner error of the RANSAC homography (+inf on failure) and the share of matches within precision_px."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    out = {"n_matches": len(src), "corner_error": math.inf, "inliers": 0,
           "precision": None if len(src) == 0 else
           float((np.linalg.norm(apply_h(H_gt, src) - dst, axis=1) <= precision_px).mean())}
    if len(src) < 4:
        return out
    try:
        H, mask = estimate_homography(src, dst, cfg)
        out["corner_error"] = corner_error(H, H_gt, shape)
        out["inliers"] = int(mask.sum())
    except (DegenerateGeometryError, np.linalg.LinAlgError, ValueError):
        pass
    return out


def evaluate_pose_pair(src, dst, K: np.ndarray, R_gt: np.ndarray, t_gt: np.ndarray,
                       cfg: RansacConfig | None = None, precision_tau: float = 5e-4) -> dict:
    """Pose error of the RANSAC fundamental matrix route (+inf on failure) and epipolar precision."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    F_gt = fundamental_from_pose(R_gt, t_gt, K)
    out = {"n_matches": len(src), "pose_error": math.inf, "inliers": 0,
           "precision": epipolar_precision(src, dst, F_gt, precision_tau, K)}
    if len(src) < 8:
        return out
    try:
        F, mask = estimate_fundamental(src, dst, cfg, K=K)
        pose = pose_from_fundamental(F, K, src[mask], dst[mask])
        out["pose_error"] = pose_error(pose, Pose(R_gt, t_gt))
        out["inliers"] = int(mask.sum())
    except (DegenerateGeometryError, CheiralityError, np.linalg.LinAlgError, ValueError):
        pass
    return out


def summarize(task: str, rows: list[dict]) -> dict:
    key, thresholds, unit = (("corner_error", HOMOGRAPHY_THRESHOLDS, "px") if task == "homography"
                             else ("pose_error", POSE_THRESHOLDS, "deg"))
    errs = [r[key] for r in rows]
    out = {"pairs": len(rows)}
    if errs:
        for t, a in zip(thresholds, auc(errs, thresholds)):
            out[f"auc@{t:g}{unit}"] = a
    prec = [r["precision"] for r in rows if r["precision"] is not None]
    out["precision"] = float(np.mean(prec)) if prec else None
    out["failures"] = int(sum(math.isinf(e) for e in errs))
    return out
