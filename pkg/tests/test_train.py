import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tp3m import match2d as m2
from tp3m import synthgen as sg
from tp3m import train as T
from tp3m.numerics import Tensor, grad, no_grad
from tp3m.pipeline import MatchConfig, ModelConfig, TP3M

SMALL = sg.PerturbationSpec(height=32, width=32)
TINY = ModelConfig(d1=4, d2=8, d3=8, heads=2)


def conf(P):
    # exp(-1000) underflows to exactly zero, standing in for log 0
    with np.errstate(divide="ignore"):
        return m2.ConfidenceMatrix(Tensor(np.maximum(np.log(np.asarray(P, dtype=np.float64)), -1000.0)), 3)


def tgt(i, j, w, grid_w):
    j = np.asarray(j)
    jy, jx = np.divmod(j, grid_w)
    return T.TokenGT(np.asarray(i), j, np.asarray(w, float), np.column_stack([jx, jy]).astype(float))


# losses ------------------------------------------------------------------------

def test_2d2d_ln2():
    P = np.full((2, 2), 0.5)
    assert math.isclose(float(T.loss_2d2d(P, ([0], [1]), [1.0]).data), math.log(2), rel_tol=1e-12)


def test_2d3d_half():
    P = np.full((2, 2), math.exp(-1))
    assert math.isclose(float(T.loss_2d3d(P, ([1], [0]), [0.5]).data), 0.5, rel_tol=1e-12)


def test_3d_distance_contribution():
    out = T.distance_loss(Tensor(np.array([[4.0, 0.0]])), np.array([[0.0, 0.0]]), [1.0], [2.0], 1)
    assert math.isclose(float(out.data), 2.0, rel_tol=1e-9)
    with pytest.raises(ValueError):
        T.distance_loss(Tensor(np.zeros((1, 2))), np.zeros((1, 2)), [1.0], [0.0], 1)


def test_halving_alpha_halves_loss():
    rng = np.random.default_rng(0)
    P = rng.dirichlet(np.ones(6), size=6)
    idx = ([0, 2, 4], [1, 3, 5])
    a = rng.uniform(0.1, 1, 3)
    full = float(T.loss_2d2d(P, idx, a).data)
    assert math.isclose(float(T.loss_2d2d(P, idx, a / 2).data), full / 2, rel_tol=1e-12)


def test_monotone_in_gt_probability():
    P = np.full((3, 3), 0.2)
    base = float(T.loss_2d3d(P, ([0, 1], [0, 1]), [1.0, 1.0]).data)
    P[1, 1] = 0.3
    assert float(T.loss_2d3d(P, ([0, 1], [0, 1]), [1.0, 1.0]).data) < base


def test_empty_gt_rejected():
    with pytest.raises(ValueError):
        T.loss_2d2d(np.full((2, 2), 0.5), ([], []), [])


def test_oracle_predictions_give_zero():
    n = 16
    P = np.eye(n)
    gt = tgt(np.arange(n), np.arange(n), np.ones(n), 4)
    assert float(T.loss_2d2d(conf(P), (gt.i, gt.j), gt.weight).data) == 0.0
    assert float(T.loss_2d3d(conf(P), (gt.i, gt.j), gt.weight).data) == 0.0
    assert float(T.loss_3d(conf(P), gt, (4, 4)).data) == 0.0


def test_3d_empty_selection_counts():
    P = np.full((16, 16), 1 / 16)
    stats = T.L3DStats()
    out = T.loss_3d(conf(P), tgt([0], [0], [1.0], 4), (4, 4), theta=0.2, stats=stats)
    assert float(out.data) == 0.0 and stats.empty_selections == 1


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_losses_nonnegative_random_instances(seed):
    rng = np.random.default_rng(seed)
    S = m2.SimilarityMatrix(Tensor(rng.standard_normal((16, 16)) * rng.uniform(0.1, 5)), 0.1)
    with no_grad():
        P = m2.dual_softmax(S, 3)
    k = int(rng.integers(1, 10))
    i = rng.choice(16, k, replace=False)
    j = rng.integers(0, 16, k)
    w = rng.uniform(1e-3, 1.0, k)
    gt = tgt(i, j, w, 4)
    l1 = float(T.loss_2d2d(P, (i, j), w).data)
    l2 = float(T.loss_2d3d(P, (i, j), w).data)
    l3 = float(T.loss_3d(P, gt, (4, 4), theta=float(rng.uniform(0, 0.3))).data)
    assert l1 >= 0 and l2 >= 0 and l3 >= 0
    rep = T.LossReport(l1, l2, l3)
    assert rep.L_total == (l1 + l2) + l3


def test_loss_report_rejects_negative():
    with pytest.raises(ValueError):
        T.LossReport(-1.0, 0.0, 0.0)


# ground truth ------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_samples():
    return [sg.gen_planar(s, SMALL) for s in range(2)]


def test_ground_truth_reprojects(small_samples):
    s = small_samples[0]
    gt = T.build_ground_truth(s)
    assert len(gt.level3) > 0 and len(gt.level2) > 0 and len(gt.level1) > 0
    assert set(gt.m3d.i.tolist()) <= set(gt.level3.i.tolist())
    assert ((gt.level3.weight > 0) & (gt.level3.weight <= 1)).all()
    # targets are within one token of the true warp of the source cell centre
    c = m2.token_centers(gt.level3.i, 4, 8)
    true = sg.apply_homography(s.H_ab, c) / 8
    assert np.abs(gt.level3.target + 0.5 - true).max() <= 1.5


# end to end gradient -------------------------------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_total_loss_directional_gradcheck(small_samples, seed):
    model = TP3M(ModelConfig(d1=4, d2=8, d3=8, heads=2, init_seed=seed))
    s = small_samples[seed % 2]
    gt = T.build_ground_truth(s)
    cfg = T.TrainConfig()
    params = model.joint_parameters()
    frozen = {}

    def total():
        a, b, c = T.pair_losses(model, s, gt, MatchConfig(), cfg, frozen=frozen)
        return (a + b) + c

    gs = grad(total(), params)
    rng = np.random.default_rng(seed)
    h = 1e-5
    for trial in range(3):
        vs = [rng.standard_normal(p.data.shape) for p in params]
        analytic = sum(float((g * v).sum()) for g, v in zip(gs, vs))
        orig = [p.data.copy() for p in params]
        vals = []
        for sign in (1, -1):
            for p, o, v in zip(params, orig, vs):
                p.data = o + sign * h * v
            with no_grad():
                vals.append(float(total().data))
        for p, o in zip(params, orig):
            p.data = o
        numeric = (vals[0] - vals[1]) / (2 * h)
        assert abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8) < 1e-3


# training loop -----------------------------------------------------------------

def quick_cfg(**kw):
    base = dict(epochs=2, batch_size=2, edge_steps=2, seed=3)
    base.update(kw)
    return T.TrainConfig(**base)


def test_zero_lr_keeps_parameters(small_samples):
    res = T.train(small_samples, quick_cfg(lr=0.0, edge_lr=0.0), model_cfg=TINY)
    ref = TP3M(TINY).state_dict()
    got = res.model.state_dict()
    assert all(np.array_equal(ref[k], got[k]) for k in ref)


def test_training_is_deterministic(small_samples):
    a = T.train(small_samples, quick_cfg(), model_cfg=TINY)
    b = T.train(small_samples, quick_cfg(), model_cfg=TINY)
    assert a.curve == b.curve and a.edge_curve == b.edge_curve
    assert len(a.curve) == 2 and len(a.edge_curve) == 2


def test_resume_matches_uninterrupted(small_samples, tmp_path):
    full = T.train(small_samples, quick_cfg(), model_cfg=TINY, out_dir=tmp_path / "full")
    T.train(small_samples, quick_cfg(), model_cfg=TINY, out_dir=tmp_path / "split", stop_after=3)
    resumed = T.train(small_samples, quick_cfg(), resume=tmp_path / "split" / "model.ckpt",
                      out_dir=tmp_path / "split")
    assert resumed.curve == full.curve
    assert (tmp_path / "full" / "loss_curve.tsv").read_bytes() == (tmp_path / "split" / "loss_curve.tsv").read_bytes()
    fa, fb = full.model.state_dict(), resumed.model.state_dict()
    assert all(np.array_equal(fa[k], fb[k]) for k in fa)


def test_zero_epochs_checkpoint_is_init(small_samples, tmp_path):
    T.train(small_samples, quick_cfg(epochs=0, edge_steps=0), model_cfg=TINY, out_dir=tmp_path)
    model, _ = T.load_model(tmp_path / "model.ckpt")
    ref = TP3M(TINY).state_dict()
    got = model.state_dict()
    assert all(np.array_equal(ref[k], got[k]) for k in ref)


def test_loss_curve_format(small_samples, tmp_path):
    T.train(small_samples, quick_cfg(epochs=1, edge_steps=0), model_cfg=TINY, out_dir=tmp_path)
    lines = (tmp_path / "loss_curve.tsv").read_text().splitlines()
    assert len(lines) == 1
    step, tot, a, b, c = lines[0].split("\t")
    assert step == "0" and float(tot) == (float(a) + float(b)) + float(c)


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        T.train([], quick_cfg())


def test_batch_schedule_covers_epoch():
    seen = np.concatenate([T.batch_schedule(5, 2, 1, k) for k in range(3)])
    assert sorted(seen.tolist()) == list(range(5))
    assert np.array_equal(T.batch_schedule(5, 2, 1, 4), T.batch_schedule(5, 2, 1, 4))
