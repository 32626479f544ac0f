import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tp3m import match2d as m2
from tp3m import match3d as m3
from tp3m.layers import MultiHeadAttention
from tp3m.numerics import Tensor, no_grad


def rand_tokens(seed, n=16, d=8):
    return Tensor(np.random.default_rng(seed).standard_normal((n, d)))


def test_self_match_argmax_is_diagonal():
    attn = MultiHeadAttention(np.random.default_rng(0), 8, 2, name="c3")
    f = rand_tokens(1)
    with no_grad():
        P = m3.cross_attention_3d(attn, f, f, 0.1).P
    assert (P.argmax(axis=1) == np.arange(16)).all()


def test_zero_guidance_is_unguided():
    attn = MultiHeadAttention(np.random.default_rng(0), 8, 2, name="c3")
    fa, fb = rand_tokens(2), rand_tokens(3)
    bias = m3.guidance_bias([0, 5], [1, 6], (4, 4), (4, 4), 0.0, 1)
    with no_grad():
        a = m3.cross_attention_3d(attn, fa, fb, 0.1).P
        b = m3.cross_attention_3d(attn, fa, fb, 0.1, bias).P
    assert np.array_equal(a, b)


def test_single_cell_bonus_increases_probability():
    rng = np.random.default_rng(4)
    S = m2.SimilarityMatrix(Tensor(rng.standard_normal((16, 16))), 0.1)
    bias = np.zeros((16, 16))
    bias[5, 9] = 2.0
    p0 = m2.dual_softmax(S, level="2D-3D").P
    p1 = m2.dual_softmax(S, level="2D-3D", bias=bias).P
    assert p1[5, 9] > p0[5, 9]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 3.0), st.floats(0.0, 3.0))
def test_guidance_monotone_in_lambda(seed, l1, l2):
    lo, hi = sorted((l1, l2))
    rng = np.random.default_rng(seed)
    S = m2.SimilarityMatrix(Tensor(rng.standard_normal((16, 16))), 0.1)
    guided = m3.guidance_bias([5], [6], (4, 4), (4, 4), 1.0, 1) > 0
    ratio = []
    for lam in (lo, hi):
        P = m2.dual_softmax(S, level="2D-3D", bias=lam * guided).P
        ratio.append(P[guided].mean() / P[~guided].mean())
    assert ratio[1] >= ratio[0] * (1 - 1e-12)


def test_guidance_bias_region_applied_once():
    b = m3.guidance_bias([5, 5], [6, 6], (4, 4), (4, 4), 1.0, 1)
    assert b.max() == 1.0
    # token 5 = (1, 1) has a 3x3 neighbourhood on both sides
    assert (b > 0).sum() == 9 * 9


def test_3d_dim_mismatch():
    attn = MultiHeadAttention(np.random.default_rng(0), 8, 2, name="c3")
    with pytest.raises(ValueError):
        m3.cross_attention_3d(attn, rand_tokens(0, d=8), Tensor(np.zeros((16, 4))), 0.1)


def test_3d_confidence_invariants():
    attn = MultiHeadAttention(np.random.default_rng(0), 8, 2, name="c3")
    with no_grad():
        P = m3.cross_attention_3d(attn, rand_tokens(5), rand_tokens(6), 0.1).P
    assert (P > 0).all() and (P < 1).all()


# sliding window ----------------------------------------------------------------

def test_window_examples():
    cfg = m3.WindowFilterConfig(window=3, tau=0.5, k_min=3)
    assert m3.sliding_window_filter([0.9, 0.9, 0.9], cfg=cfg).tolist() == [True] * 3
    assert m3.sliding_window_filter([0.9, 0.1, 0.9], cfg=cfg).tolist() == [False] * 3
    assert m3.sliding_window_filter([], cfg=cfg).tolist() == []


def test_window_respects_chain_boundaries():
    cfg = m3.WindowFilterConfig(window=3, tau=0.5, k_min=3)
    keep = m3.sliding_window_filter([0.9, 0.9, 0.9, 0.9], [0, 0, 1, 1], cfg)
    assert not keep.any()


def test_window_config_validation():
    with pytest.raises(ValueError):
        m3.WindowFilterConfig(window=4)
    with pytest.raises(ValueError):
        m3.WindowFilterConfig(window=3, k_min=4)


probs_st = st.lists(st.floats(0.0, 1.0), max_size=40)


@settings(max_examples=200, deadline=None)
@given(probs_st, st.integers(0, 3), st.sampled_from([(3, 2), (5, 3), (5, 5), (7, 4)]))
def test_window_filter_subset_and_idempotent(probs, n_chains, wk):
    w, k = wk
    cfg = m3.WindowFilterConfig(window=w, tau=0.3, k_min=k)
    p = np.array(probs)
    chains = np.sort(np.random.default_rng(len(p)).integers(0, n_chains + 1, len(p)))
    keep = m3.sliding_window_filter(p, chains, cfg)
    assert (p[keep] >= 0.3).all()
    again = m3.sliding_window_filter(p[keep], chains[keep], cfg)
    assert again.all()


def test_edge_chain_order_walk():
    mask = np.zeros((4, 5), dtype=bool)
    mask[0, 0] = mask[1, 1] = mask[2, 1] = True  # diagonal then down
    mask[0, 4] = mask[1, 4] = True  # a second component
    order, chains = m3.edge_chain_order(mask)
    assert order.tolist() == [0, 6, 11, 4, 9]
    assert chains.tolist() == [0, 0, 0, 1, 1]


def test_edge_candidates_cell_max():
    e = np.zeros((16, 16))
    e[3, 12] = 0.6
    c = m3.edge_candidates(e, 8, 0.5)
    assert c.tolist() == [[False, True], [False, False]]


def test_fine_targets_subtoken_expectation():
    P = np.zeros((1, 9))
    P[0, 4] = 0.6  # centre token (1, 1) of a 3x3 grid
    P[0, 5] = 0.2  # right neighbour
    xy, conf = m3.fine_targets(P, np.array([0]), (3, 3), 8)
    assert conf[0] == 0.6
    gx = (1 * 0.6 + 2 * 0.2) / 0.8
    assert np.allclose(xy[0], [gx * 8 + 3.5, 1 * 8 + 3.5])


# merge -------------------------------------------------------------------------

def ms(src, dst, prov):
    src, dst = np.array(src, float).reshape(-1, 2), np.array(dst, float).reshape(-1, 2)
    return m2.MatchSet(src, dst, np.full(len(src), 0.5), np.full(len(src), prov))


def test_merge_empty_fine_returns_coarse():
    c = ms([[1, 1], [5, 5]], [[2, 2], [6, 6]], "coarse")
    out = m3.merge_coarse_fine(c, m2.MatchSet.empty())
    assert np.array_equal(out.src, c.src) and np.array_equal(out.dst, c.dst)


def test_merge_fine_wins_shared_source():
    c = ms([[1, 1], [5, 5]], [[2, 2], [6, 6]], "coarse")
    f = ms([[5, 5]], [[9, 9]], "fine")
    out = m3.merge_coarse_fine(c, f)
    k = np.flatnonzero((out.src == [5, 5]).all(axis=1))
    assert len(k) == 1 and out.dst[k[0]].tolist() == [9, 9] and out.provenance[k[0]] == "fine"
    assert len(out) == 2


def test_merge_disjoint_union_unique_sources():
    c = ms([[1, 1], [5, 5]], [[2, 2], [6, 6]], "coarse")
    f = ms([[3, 3], [7, 7], [9, 9]], [[1, 1], [1, 2], [1, 3]], "fine")
    out = m3.merge_coarse_fine(c, f)
    assert len(out) == 5
    assert len({tuple(r) for r in out.src.tolist()}) == 5


def test_fine_match_end_to_end_shapes():
    rng = np.random.default_rng(8)
    P = rng.dirichlet(np.ones(16), size=16)
    edge = np.zeros((32, 32))
    edge[:, 4] = 1.0  # a vertical edge through the left token column
    out = m3.fine_match(P, edge, (4, 4), (4, 4), m3.WindowFilterConfig(window=3, tau=0.01, k_min=2))
    assert set(out.provenance.tolist()) <= {"fine"}
    assert np.allclose(out.src[:, 0], 3.5)
    assert len(out) == 4
