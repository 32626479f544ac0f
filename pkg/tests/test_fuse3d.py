import numpy as np
import pytest

from tp3m import fuse3d as f3
from tp3m import match2d as m2
from tp3m.layers import MultiHeadAttention
from tp3m.match3d import cross_attention_3d
from tp3m.numerics import Tensor, grad, no_grad
from tp3m.numerics.gradcheck import check_gradients

GRID = (4, 5)
IMAGE = (32, 40)


def one_match(token=(2, 3), dst=(10.0, 12.0), conf=0.7):
    y, x = token
    i = y * GRID[1] + x
    src_xy = m2.token_centers(np.array([i]), GRID[1], 8)
    return f3.build_position_features([i], src_xy, np.array([dst]), [conf], GRID, IMAGE), i


def test_empty_matches_give_zero_map():
    pm = f3.build_position_features([], np.zeros((0, 2)), np.zeros((0, 2)), [], GRID, IMAGE)
    assert pm.features.shape == (20, f3.D_POS)
    assert not pm.features.any() and not pm.matched.any()


def test_single_match_single_row():
    pm, i = one_match()
    nonzero = np.flatnonzero(np.abs(pm.features).sum(axis=1) > 0)
    assert nonzero.tolist() == [i]
    assert pm.matched.sum() == 1 and pm.matched[i]


def test_encoding_layout():
    v = np.array([[0.25, 0.0, 1.0, 0.5, 0.5]])
    e = f3.encode(v).reshape(5, 2, f3.N_FREQ)
    assert np.allclose(e[0, 0, 0], np.sin(np.pi * 0.25))
    assert np.allclose(e[0, 1, 3], np.cos(8 * np.pi * 0.25))


def test_duplicate_source_rejected():
    xy = np.array([[3.5, 3.5], [3.5, 3.5]])
    with pytest.raises(ValueError, match="duplicate"):
        f3.build_position_features([0, 0], xy, xy, [0.5, 0.5], GRID, IMAGE)


def test_out_of_grid_rejected():
    with pytest.raises(ValueError):
        f3.build_position_features([20], np.array([[1.0, 1.0]]), np.array([[1.0, 1.0]]), [0.5], GRID, IMAGE)
    with pytest.raises(ValueError):
        f3.build_position_features([0], np.array([[1.0, 1.0]]), np.array([[80.0, 1.0]]), [0.5], GRID, IMAGE)


def test_zero_input_zero_output_and_dims():
    net = f3.PositionTransform(np.random.default_rng(0), 24)
    out = net(np.zeros((7, f3.D_POS)))
    assert out.shape == (7, 24)
    assert not out.data.any()
    pm, _ = one_match()
    assert net(pm).shape == (20, 24)


@pytest.mark.parametrize("seed", range(5))
def test_position_transform_gradcheck(seed):
    rng = np.random.default_rng(seed)
    net = f3.PositionTransform(rng, 6, d_in=10)
    for p in net.parameters():
        p.data = p.data + 0.1 * rng.standard_normal(p.data.shape)
    x = Tensor(rng.standard_normal((4, 10)), requires_grad=True)
    assert check_gradients(lambda: net(x), [x] + net.parameters(), seed=seed) < 1e-4


def test_fuse_additive_identity_and_doubling():
    rng = np.random.default_rng(1)
    fa = Tensor(rng.standard_normal((20, 8)))
    t = Tensor(rng.standard_normal((20, 8)))
    assert np.array_equal(f3.fuse(fa, Tensor(np.zeros((20, 8)))).data, fa.data)
    d1 = f3.fuse(fa, t).data - fa.data
    d2 = f3.fuse(fa, t * 2.0).data - fa.data
    assert np.allclose(d2, 2 * d1, atol=1e-12)


def test_fuse_shape_mismatch():
    with pytest.raises(ValueError):
        f3.fuse(Tensor(np.zeros((4, 3))), Tensor(np.zeros((4, 2))))


def test_unmatched_tokens_unchanged_after_fusion():
    net = f3.PositionTransform(np.random.default_rng(2), 8)
    pm, i = one_match()
    fa = Tensor(np.random.default_rng(3).standard_normal((20, 8)))
    out = f3.fuse(fa, net(pm)).data
    rest = np.arange(20) != i
    assert np.array_equal(out[rest], fa.data[rest])
    assert not np.array_equal(out[i], fa.data[i])


def test_fuse_commutes_with_token_permutation():
    rng = np.random.default_rng(4)
    fa, t = rng.standard_normal((20, 8)), rng.standard_normal((20, 8))
    perm = rng.permutation(20)
    a = f3.fuse(Tensor(fa), Tensor(t)).data[perm]
    b = f3.fuse(Tensor(fa[perm]), Tensor(t[perm])).data
    assert np.array_equal(a, b)


def test_mean_over_references():
    net = f3.PositionTransform(np.random.default_rng(5), 8)
    pa, _ = one_match((1, 1), (5.0, 5.0))
    pb, _ = one_match((2, 2), (20.0, 9.0))
    out = f3.transform_references(net, [pa, pb]).data
    assert np.allclose(out, 0.5 * (net(pa).data + net(pb).data), atol=1e-12)
    with pytest.raises(ValueError):
        f3.transform_references(net, [])


def test_nonzero_position_changes_3d_confidence():
    rng = np.random.default_rng(6)
    attn = MultiHeadAttention(rng, 8, 2, name="c3")
    fa = Tensor(rng.standard_normal((20, 8)))
    fb = Tensor(rng.standard_normal((20, 8)))
    t = np.zeros((20, 8))
    t[3, 1] = 0.5
    with no_grad():
        p0 = cross_attention_3d(attn, fa, fb, 0.1).P
        p1 = cross_attention_3d(attn, f3.fuse(fa, Tensor(t)), fb, 0.1).P
    assert not np.allclose(p0, p1)


def test_gradient_reaches_position_transform():
    rng = np.random.default_rng(7)
    net = f3.PositionTransform(rng, 8)
    attn = MultiHeadAttention(rng, 8, 2, name="c3")
    pm, i = one_match()
    fa = Tensor(rng.standard_normal((20, 8)))
    fb = Tensor(rng.standard_normal((20, 8)))
    P = cross_attention_3d(attn, f3.fuse(fa, net(pm)), fb, 0.1)
    loss = -(P.log_p[i, i])
    gs = grad(loss, net.parameters())
    assert any(np.abs(g).max() > 0 for g in gs)
