"""Supervision and the toy training loop.

Losses (all per image pair):
    L_2d2d = sum over levels 3, 2, 1 of  -mean_gt alpha * log P
    L_2d3d = -mean_gt beta * log P_2d3d
    L_3d   = (1 / |gt|) * sum over confident gt rows of gamma * |pos - pos_gt| / delta
    L_total = L_2d2d + L_2d3d + L_3d
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import synthgen as sg
from .edgefeat import canny_edges, edge_significance
from .match2d import ConfidenceMatrix, TokenMatches, mnn_filter, window_confidence, window_indices
from .numerics import AdamState, NonFiniteError, Tensor, adam_step, grad, no_grad, ops
from .numerics import checkpoint as ckpt
from .numerics.checkpoint import atomic_write_bytes
from .pipeline import MatchConfig, ModelConfig, TP3M

log = logging.getLogger(__name__)


# ground truth ------------------------------------------------------------------

@dataclass
class TokenGT:
    i: np.ndarray
    j: np.ndarray
    weight: np.ndarray
    target: np.ndarray  # gt target token position in B grid units, (k, 2) as (x, y)

    def __len__(self) -> int:
        return len(self.i)


@dataclass
class WindowGT:
    src_cells: np.ndarray  # level-2 source cell per window
    dst_cells: np.ndarray  # level-2 target cell per window
    m: np.ndarray  # window index
    k: np.ndarray  # source pixel slot within the window (0..15)
    t: np.ndarray  # target pixel slot within the window
    weight: np.ndarray

    def __len__(self) -> int:
        return len(self.m)


@dataclass
class GroundTruth:
    level3: TokenGT
    level2: TokenGT
    level1: WindowGT
    m3d: TokenGT


def _cell_mean_flow(flow: np.ndarray, valid: np.ndarray, s: int) -> tuple[np.ndarray, np.ndarray]:
    H, W = valid.shape
    h, w = H // s, W // s
    v = valid.reshape(h, s, w, s)
    cnt = v.sum(axis=(1, 3))
    f = (flow * valid[..., None]).reshape(h, s, w, s, 2).sum(axis=(1, 3)) / np.maximum(cnt, 1)[..., None]
    return f.reshape(-1, 2), (cnt * 2 >= s * s).reshape(-1)


def _to_token(pts: np.ndarray, s: int, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    g = np.floor(pts / s).astype(np.int64)
    ok = (g[:, 0] >= 0) & (g[:, 0] < w) & (g[:, 1] >= 0) & (g[:, 1] < h)
    return np.clip(g[:, 1], 0, h - 1) * w + np.clip(g[:, 0], 0, w - 1), ok


def token_ground_truth(flow, valid, rflow, rvalid, sig_a, sig_b, stride: int, radius: int = 1) -> TokenGT:
    """Token pairs whose reprojection maps A->B and back to within `radius` tokens."""
    H, W = valid.shape
    h, w = H // stride, W // stride
    fa, oka = _cell_mean_flow(flow, valid, stride)
    fb, okb = _cell_mean_flow(rflow, rvalid, stride)
    j, inb = _to_token(fa, stride, h, w)
    back, inb_r = _to_token(fb, stride, h, w)
    i = np.arange(h * w)
    by, bx = np.divmod(back[j], w)
    iy, ix = np.divmod(i, w)
    mutual = (np.abs(by - iy) <= radius) & (np.abs(bx - ix) <= radius)
    keep = oka & inb & okb[j] & inb_r[j] & mutual
    pa = sig_a.reshape(h, stride, w, stride).max(axis=(1, 3)).reshape(-1)
    pb = sig_b.reshape(h, stride, w, stride).max(axis=(1, 3)).reshape(-1)
    i, j = i[keep], j[keep]
    jy, jx = np.divmod(j, w)
    target = np.column_stack([jx, jy]).astype(np.float64)
    return TokenGT(i, j, 0.5 * (pa[i] + pb[j]), target)


def window_ground_truth(level2: TokenGT, flow, valid, rflow, rvalid, sig_a, sig_b, radius: int,
                        max_windows: int) -> WindowGT:
    H, W = valid.shape
    n = len(level2)
    if max_windows and n > max_windows:
        pick = np.unique(np.linspace(0, n - 1, max_windows).round().astype(np.int64))
    else:
        pick = np.arange(n)
    src_cells, dst_cells = level2.i[pick], level2.j[pick]
    src, tgt = window_indices(src_cells, dst_cells, (H // 4, W // 4), radius)
    wy = min(2 * radius + 1, H // 4) * 4
    wx = min(2 * radius + 1, W // 4) * 4
    y0, x0 = np.divmod(tgt[:, 0], W)
    sy, sx = np.divmod(src, W)
    f = flow[sy, sx]
    ok = valid[sy, sx]
    ty = np.round(f[..., 1]).astype(np.int64)
    tx = np.round(f[..., 0]).astype(np.int64)
    ly, lx = ty - y0[:, None], tx - x0[:, None]
    ok &= (ly >= 0) & (ly < wy) & (lx >= 0) & (lx < wx)
    tyc, txc = np.clip(ty, 0, H - 1), np.clip(tx, 0, W - 1)
    back = rflow[tyc, txc]
    ok &= rvalid[tyc, txc] & (np.abs(back[..., 0] - sx) <= 1) & (np.abs(back[..., 1] - sy) <= 1)
    m, k = np.nonzero(ok)
    t = ly[m, k] * wx + lx[m, k]
    weight = 0.5 * (sig_a[sy[m, k], sx[m, k]] + sig_b[tyc[m, k], txc[m, k]])
    return WindowGT(src_cells, dst_cells, m, k, t, weight)


def build_ground_truth(sample: sg.SceneSample, radius: int = 1, window_radius: int = 2, max_windows: int = 64,
                       w_min: float = 0.05) -> GroundTruth:
    flow, valid = sg.dense_flow(sample, "b")
    rflow, rvalid = sg.dense_flow(sample, "b", reverse=True)
    sig_a = edge_significance(sample.image_a, w_min)
    sig_b = edge_significance(sample.image_b, w_min)
    l3 = token_ground_truth(flow, valid, rflow, rvalid, sig_a, sig_b, 8, radius)
    l2 = token_ground_truth(flow, valid, rflow, rvalid, sig_a, sig_b, 4, radius)
    l1 = window_ground_truth(l2, flow, valid, rflow, rvalid, sig_a, sig_b, window_radius, max_windows)
    # every source token of a synthetic scene has a known 3D point, so the 3D set is the covisible level-3 set
    depth_ok = np.isfinite(sample.depth_a).reshape(sample.shape[0] // 8, 8, -1, 8).all(axis=(1, 3)).reshape(-1)
    keep = depth_ok[l3.i]
    m3d = TokenGT(l3.i[keep], l3.j[keep], l3.weight[keep], l3.target[keep])
    return GroundTruth(l3, l2, l1, m3d)


# losses ------------------------------------------------------------------------

def _log_p(P) -> Tensor:
    if isinstance(P, ConfidenceMatrix):
        return P.log_p
    if isinstance(P, Tensor):
        return ops.log(P)
    return Tensor(np.log(np.asarray(P, dtype=np.float64)))


def weighted_nll(P, index: tuple, weight) -> Tensor:
    """-(1/N) sum w * log P[index]; P may be a ConfidenceMatrix, a probability Tensor or array."""
    w = np.asarray(weight, dtype=np.float64).reshape(-1)
    if len(w) == 0:
        raise ValueError("ground-truth set is empty")
    if (w < 0).any():
        raise ValueError("loss weights must be nonnegative")
    sel = ops.getitem(_log_p(P), tuple(np.asarray(a, dtype=np.int64) for a in index))
    return ops.mul(ops.sum(ops.mul(sel, w)), -1.0 / len(w))


def loss_2d2d(P, pairs: tuple, alpha) -> Tensor:
    return weighted_nll(P, pairs, alpha)


def loss_2d3d(P, pairs: tuple, beta) -> Tensor:
    return weighted_nll(P, pairs, beta)


def soft_positions(P: ConfidenceMatrix, rows: np.ndarray, grid_b: tuple[int, int],
                   argmax: np.ndarray | None = None) -> Tensor:
    """Probability-weighted mean grid position over the 3x3 neighbourhood of each row's argmax."""
    hb, wb = grid_b
    rows = np.asarray(rows, dtype=np.int64)
    j = P.log_p.data[rows].argmax(axis=1) if argmax is None else np.asarray(argmax)
    jy, jx = np.divmod(j, wb)
    d = np.array([(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)])
    ny, nx = jy[:, None] + d[:, 0], jx[:, None] + d[:, 1]
    inside = ((ny >= 0) & (ny < hb) & (nx >= 0) & (nx < wb)).astype(np.float64)
    idx = np.clip(ny, 0, hb - 1) * wb + np.clip(nx, 0, wb - 1)
    p = ops.mul(ops.exp(ops.getitem(P.log_p, (rows[:, None], idx))), inside)
    coords = np.stack([nx, ny], axis=-1).astype(np.float64)
    num = ops.sum(ops.mul(ops.reshape(p, p.shape + (1,)), coords), axis=1)
    den = ops.sum(p, axis=1, keepdims=True)
    return num / den


def distance_loss(pred: Tensor, target: np.ndarray, gamma, delta, n_gt: int) -> Tensor:
    """(1/n_gt) sum gamma * |pred - target| / delta, the -log of exp(-dist/delta)."""
    delta = np.asarray(delta, dtype=np.float64).reshape(-1)
    if (delta <= 0).any():
        raise ValueError("delta must be positive")
    if n_gt < 1:
        raise ValueError("ground-truth set is empty")
    diff = ops.sub(pred, np.asarray(target, dtype=np.float64))
    sq = ops.sum(ops.square(diff), axis=1)
    eps = 1e-18
    # shifted so an exact hit costs exactly zero while keeping the gradient finite
    dist = ops.sub(ops.sqrt(sq + eps), np.sqrt(eps))
    w = np.asarray(gamma, dtype=np.float64).reshape(-1) / delta
    return ops.mul(ops.sum(ops.mul(dist, w)), 1.0 / n_gt)


@dataclass
class L3DStats:
    selected: int = 0
    empty_selections: int = 0


def loss_3d(P: ConfidenceMatrix, gt: TokenGT, grid_b: tuple[int, int], delta0: float = 1.0,
            theta: float = 0.2, stats: L3DStats | None = None, frozen: dict | None = None) -> Tensor:
    """Distance term on gt rows whose best 2D-3D probability exceeds theta; delta(i) = delta0 / max_j P(i, j).

    The selection and delta are weights, not gradient paths. Passing the same
    `frozen` dict to repeated calls pins them to the first call's values.
    """
    if len(gt) == 0:
        raise ValueError("ground-truth set is empty")
    if frozen is not None and "l3d_row_max" in frozen:
        row_max = frozen["l3d_row_max"]
    else:
        row_max = np.exp(P.log_p.data[gt.i].max(axis=1))
        if frozen is not None:
            frozen["l3d_row_max"] = row_max
    sel = row_max > theta
    if stats is not None:
        stats.selected += int(sel.sum())
    if not sel.any():
        if stats is not None:
            stats.empty_selections += 1
        return Tensor(np.asarray(0.0))
    argmax = None if frozen is None else frozen.setdefault("l3d_argmax", P.log_p.data[gt.i[sel]].argmax(axis=1))
    pred = soft_positions(P, gt.i[sel], grid_b, argmax)
    return distance_loss(pred, gt.target[sel], gt.weight[sel], delta0 / row_max[sel], len(gt))


@dataclass
class LossReport:
    L_2d2d: float
    L_2d3d: float
    L_3d: float
    L_total: float = field(init=False)

    def __post_init__(self):
        # same association as the tensor sum, so the identity holds bit for bit
        self.L_total = (self.L_2d2d + self.L_2d3d) + self.L_3d
        for name in ("L_2d2d", "L_2d3d", "L_3d"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} is negative")

    def line(self, step: int) -> str:
        return f"{step}\t{self.L_total!r}\t{self.L_2d2d!r}\t{self.L_2d3d!r}\t{self.L_3d!r}"


# forward pass for training -----------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 75
    batch_size: int = 2
    lr: float = 3e-3
    edge_steps: int = 200
    edge_lr: float = 1e-3
    seed: int = 0
    theta_loss: float = 0.2
    delta0: float = 1.0
    gt_radius: int = 1
    max_windows: int = 64
    w_min: float = 0.05
    finetune_backbone: bool = True
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.edge_steps < 0:
            raise ValueError("epochs and edge_steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr < 0 or self.edge_lr < 0:
            raise ValueError("learning rates must be >= 0")
        if self.delta0 <= 0:
            raise ValueError("delta0 must be positive")


def pair_losses(model: TP3M, sample: sg.SceneSample, gt: GroundTruth, match_cfg: MatchConfig,
                cfg: TrainConfig, stats: L3DStats | None = None,
                frozen: dict | None = None) -> tuple[Tensor, Tensor, Tensor]:
    """(L_2d2d, L_2d3d, L_3d) for one pair.

    Reference matches, coarse guidance and the 3D-loss weights are inputs held
    outside the gradient; a shared `frozen` dict reuses them across calls.
    """
    frozen = {} if frozen is None else frozen
    pa, pb = model.pyramid(sample.image_a), model.pyramid(sample.image_b)
    m = model.matcher
    P3 = m.level_confidence(pa.f3, pb.f3, 3)
    l2d = loss_2d2d(P3, (gt.level3.i, gt.level3.j), gt.level3.weight)
    if len(gt.level2):
        P2 = m.level_confidence(pa.f2, pb.f2, 2)
        l2d = l2d + loss_2d2d(P2, (gt.level2.i, gt.level2.j), gt.level2.weight)
    if len(gt.level1):
        H, W = sample.shape
        wc = window_confidence(pa.f1, pb.f1, gt.level1.src_cells, gt.level1.dst_cells, (H // 4, W // 4),
                               match_cfg.cascade.window_radius, m.omega)
        l2d = l2d + loss_2d2d(wc.conf, (gt.level1.m, gt.level1.k, gt.level1.t), gt.level1.weight)

    # reference matches and coarse guidance are treated as fixed inputs
    if "ref" not in frozen:
        with no_grad():
            pc = model.pyramid(sample.image_c)
        frozen["ref"] = model.reference_matches(pa, pc, match_cfg.cascade.theta3)
        frozen["coarse"] = mnn_filter(ConfidenceMatrix(Tensor(P3.log_p.data), 3), match_cfg.cascade.theta3)
    tm_ac = frozen["ref"]
    maps = [model.position_map(tm_ac, sample.shape)] if len(tm_ac) else []
    P3d = model.confidence_3d(model.fused_tokens(pa, maps), pb, frozen["coarse"], match_cfg.guidance)
    l23 = loss_2d3d(P3d, (gt.m3d.i, gt.m3d.j), gt.m3d.weight)
    l3 = loss_3d(P3d, gt.m3d, pb.f3.shape[1:], cfg.delta0, cfg.theta_loss, stats, frozen)
    return l2d, l23, l3


def edge_loss(model: TP3M, image: np.ndarray) -> Tensor:
    """Class-balanced pixelwise BCE of the edge head against Canny edges."""
    target = canny_edges(image).astype(np.float64)
    pos = target.mean()
    weight = np.where(target > 0, 1.0 - pos, pos) * 2.0 if 0 < pos < 1 else None
    return ops.bce_with_logits(model.pyramid(image).edge_logits, target, weight)


# training loop -----------------------------------------------------------------

def load_dataset(directory) -> list[sg.SceneSample]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"dataset directory {d} does not exist")
    manifest = d / "manifest.json"
    if manifest.exists():
        ids = [e["id"] for e in json.loads(manifest.read_text())["samples"]]
    else:
        ids = sorted(p.name for p in d.iterdir() if (p / "meta.json").exists())
    if not ids:
        raise ValueError(f"dataset {d} is empty")
    return [sg.load_sample(d / i) for i in ids]


@dataclass
class TrainState:
    step: int = 0  # global: edge steps first, then joint steps
    edge_opt: AdamState = field(default_factory=AdamState)
    joint_opt: AdamState = field(default_factory=AdamState)


def batch_schedule(n: int, batch: int, seed: int, step: int) -> np.ndarray:
    """Sample indices for a joint step; a fresh seeded permutation each epoch."""
    per_epoch = -(-n // batch)
    epoch, k = divmod(step, per_epoch)
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return order[k * batch:(k + 1) * batch]


def save_checkpoint(path, model: TP3M, state: TrainState, train_cfg: TrainConfig, model_cfg: ModelConfig) -> None:
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    for tag, opt in (("edge", state.edge_opt), ("joint", state.joint_opt)):
        arrays[f"opt/{tag}/step"] = np.array([float(opt.step)])
        for i, (m, v) in enumerate(zip(opt.m, opt.v)):
            arrays[f"opt/{tag}/m/{i:04d}"] = m
            arrays[f"opt/{tag}/v/{i:04d}"] = v
    arrays["meta/step"] = np.array([float(state.step)])
    cfg_blob = json.dumps({"model": asdict(model_cfg), "train": asdict(train_cfg)}, sort_keys=True).encode()
    arrays["meta/config"] = np.frombuffer(cfg_blob, dtype=np.uint8).astype(np.float64)
    ckpt.save(path, arrays)


def read_config_blob(arrays: dict) -> dict:
    return json.loads(bytes(arrays["meta/config"].astype(np.uint8)).decode())


def load_model(path) -> tuple[TP3M, dict]:
    arrays = ckpt.load(path)
    blob = read_config_blob(arrays)
    model = TP3M(ModelConfig(**blob["model"]))
    try:
        model.load_state_dict({k[6:]: v for k, v in arrays.items() if k.startswith("param/")})
    except (KeyError, ValueError) as e:
        raise ckpt.CheckpointError(f"checkpoint incompatible with model: {e}") from e
    return model, arrays


def _restore_opt(arrays: dict, tag: str, lr: float) -> AdamState:
    st = AdamState(lr=lr, step=int(arrays[f"opt/{tag}/step"][0]))
    n = sum(1 for k in arrays if k.startswith(f"opt/{tag}/m/"))
    st.m = [arrays[f"opt/{tag}/m/{i:04d}"].copy() for i in range(n)]
    st.v = [arrays[f"opt/{tag}/v/{i:04d}"].copy() for i in range(n)]
    return st


@dataclass
class TrainResult:
    model: TP3M
    curve: list[str]
    edge_curve: list[str]
    l3d_stats: L3DStats
    state: TrainState


def _apply(params, grads, opt: AdamState) -> None:
    new, _ = adam_step([p.data for p in params], grads, opt)
    for p, arr in zip(params, new):
        p.data = arr


def train(samples: list[sg.SceneSample], cfg: TrainConfig | None = None, model_cfg: ModelConfig | None = None,
          match_cfg: MatchConfig | None = None, resume: str | Path | None = None, out_dir=None,
          stop_after: int | None = None, ckpt_name: str = "model.ckpt") -> TrainResult:
    """Edge pretraining then the joint phase. `stop_after` ends early at that global step (for split runs)."""
    cfg = cfg or TrainConfig()
    model_cfg = model_cfg or ModelConfig(init_seed=cfg.seed)
    match_cfg = match_cfg or MatchConfig()
    if not samples:
        raise ValueError("dataset is empty")
    model = TP3M(model_cfg)
    state = TrainState(edge_opt=AdamState(lr=cfg.edge_lr), joint_opt=AdamState(lr=cfg.lr))
    curve: list[str] = []
    edge_curve: list[str] = []
    if resume is not None:
        model, arrays = load_model(resume)
        model_cfg = model.cfg
        state = TrainState(int(arrays["meta/step"][0]), _restore_opt(arrays, "edge", cfg.edge_lr),
                           _restore_opt(arrays, "joint", cfg.lr))
        if out_dir is not None:
            curve = _read_lines(Path(out_dir) / "loss_curve.tsv")
            edge_curve = _read_lines(Path(out_dir) / "edge_curve.tsv")
    gts = [build_ground_truth(s, cfg.gt_radius, match_cfg.cascade.window_radius, cfg.max_windows, cfg.w_min)
           for s in samples]
    stats = L3DStats()
    n = len(samples)
    per_epoch = -(-n // cfg.batch_size)
    joint_steps = cfg.epochs * per_epoch
    total = cfg.edge_steps + joint_steps
    end = total if stop_after is None else min(total, stop_after)
    edge_params = model.extractor.parameters()
    joint_params = model.joint_parameters(cfg.finetune_backbone)
    images = [img for s in samples for img in (s.image_a, s.image_b)]
    while state.step < end:
        step = state.step
        if step < cfg.edge_steps:
            idx = batch_schedule(len(images), cfg.batch_size, cfg.seed + 1, step)
            loss = None
            for k in idx:
                li = edge_loss(model, images[k])
                loss = li if loss is None else loss + li
            loss = loss * (1.0 / len(idx))
            _check(loss, step)
            _apply(edge_params, grad(loss, edge_params), state.edge_opt)
            edge_curve.append(f"{step}\t{float(loss.data)!r}")
        else:
            js = step - cfg.edge_steps
            idx = batch_schedule(n, cfg.batch_size, cfg.seed, js)
            parts = [pair_losses(model, samples[k], gts[k], match_cfg, cfg, stats) for k in idx]
            scale = 1.0 / len(parts)
            l2d = _mean([p[0] for p in parts], scale)
            l23 = _mean([p[1] for p in parts], scale)
            l3 = _mean([p[2] for p in parts], scale)
            total_loss = (l2d + l23) + l3
            _check(total_loss, step)
            rep = LossReport(float(l2d.data), float(l23.data), float(l3.data))
            assert rep.L_total == float(total_loss.data)
            curve.append(rep.line(js))
            _apply(joint_params, grad(total_loss, joint_params), state.joint_opt)
        state.step += 1
        if out_dir is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            _write_outputs(out_dir, model, state, cfg, model_cfg, curve, edge_curve, ckpt_name)
    if out_dir is not None:
        _write_outputs(out_dir, model, state, cfg, model_cfg, curve, edge_curve, ckpt_name)
    if stats.empty_selections:
        log.info("3D loss had an empty confident set on %d pairs", stats.empty_selections)
    return TrainResult(model, curve, edge_curve, stats, state)


def _mean(ts: list[Tensor], scale: float) -> Tensor:
    out = ts[0]
    for t in ts[1:]:
        out = out + t
    return out * scale


def _check(loss: Tensor, step: int) -> None:
    if not np.isfinite(loss.data).all():
        raise NonFiniteError(f"non-finite loss at step {step}")


def _read_lines(path: Path) -> list[str]:
    return path.read_text().splitlines() if path.exists() else []


def _write_outputs(out_dir, model, state, cfg, model_cfg, curve, edge_curve, ckpt_name="model.ckpt") -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / ckpt_name, model, state, cfg, model_cfg)
    atomic_write_bytes(out / "loss_curve.tsv", ("\n".join(curve) + "\n" if curve else "").encode())
    atomic_write_bytes(out / "edge_curve.tsv", ("\n".join(edge_curve) + "\n" if edge_curve else "").encode())


def train_toy(data_dir, cfg: TrainConfig | None = None, out_dir=None, resume=None, **kw) -> TrainResult:
    return train(load_dataset(data_dir), cfg, resume=resume, out_dir=out_dir, **kw)
