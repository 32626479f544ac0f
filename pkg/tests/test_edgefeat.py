import numpy as np
import pytest
from scipy import ndimage
from skimage.feature import canny as sk_canny

from tp3m import edgefeat as ef
from tp3m.numerics import Tensor, grad, ops
from tp3m.numerics.gradcheck import check_gradients


@pytest.fixture(scope="module")
def extractor():
    return ef.EdgeFeatureExtractor(np.random.default_rng(0))


def test_pyramid_shapes(extractor):
    img = np.random.default_rng(1).random((64, 64))
    pyr = extractor(img)
    assert pyr.f3.shape == (64, 8, 8)
    assert pyr.f2.shape == (32, 16, 16)
    assert pyr.f1.shape == (16, 64, 64)
    assert pyr.edge_map.shape == (64, 64)


@pytest.mark.parametrize("h,w", [(8, 8), (16, 40), (64, 64), (128, 96), (256, 256)])
def test_shape_contract_sizes(extractor, h, w):
    pyr = extractor(np.zeros((h, w)))
    assert pyr.f3.shape[1:] == (h // 8, w // 8)
    assert pyr.f2.shape[1:] == (h // 4, w // 4)
    assert pyr.f1.shape[1:] == (h, w)
    e = pyr.edge_map.data
    assert (e >= 0).all() and (e <= 1).all()


def test_constant_image_shapes(extractor):
    pyr = extractor(np.full((32, 32), 0.5))
    assert pyr.edge_map.shape == (32, 32)


def test_rejects_bad_dims(extractor):
    with pytest.raises(ValueError):
        extractor(np.zeros((60, 64)))


def test_extractor_deterministic(extractor):
    img = np.random.default_rng(2).random((32, 32))
    a, b = extractor(img), extractor(img.copy())
    for name in ("f1", "f2", "f3", "edge_map"):
        assert getattr(a, name).data.tobytes() == getattr(b, name).data.tobytes()
    other = ef.EdgeFeatureExtractor(np.random.default_rng(0))
    assert other(img).f3.data.tobytes() == a.f3.data.tobytes()


def test_ppe_shape_and_zero():
    rng = np.random.default_rng(0)
    ppe = ef.PositionalPatchEmbed(rng, 1, 8)
    out = ppe(Tensor(np.random.default_rng(1).random((1, 16, 16))))
    assert out.shape == (8, 8, 8)
    np.testing.assert_array_equal(ppe(Tensor(np.zeros((1, 16, 16)))).data, 0.0)
    with pytest.raises(ValueError):
        ppe(Tensor(np.zeros((1, 5, 4))))


@pytest.mark.parametrize("seed", range(5))
def test_ppe_gradcheck(seed):
    rng = np.random.default_rng(seed)
    ppe = ef.PositionalPatchEmbed(rng, 2, 3)
    x = Tensor(rng.standard_normal((2, 6, 6)), requires_grad=True)
    params = ppe.parameters()
    assert check_gradients(lambda: ppe(x), [x] + params, seed=seed) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_edge_head_gradcheck(seed):
    rng = np.random.default_rng(seed)
    head = ef.BiMLAHead(rng, 2, 3, width=2)
    f1 = Tensor(rng.standard_normal((2, 8, 8)), requires_grad=True)
    f2 = Tensor(rng.standard_normal((3, 2, 2)), requires_grad=True)
    assert check_gradients(lambda: head(f1, f2), [f1, f2] + head.parameters(), seed=seed) < 1e-4


def test_edge_head_range_and_mismatch():
    rng = np.random.default_rng(0)
    head = ef.BiMLAHead(rng, 4, 6)
    out = head(Tensor(rng.standard_normal((4, 16, 16)) * 10), Tensor(rng.standard_normal((6, 4, 4)) * 10))
    assert out.shape == (16, 16) and (out.data >= 0).all() and (out.data <= 1).all()
    with pytest.raises(ValueError):
        head(Tensor(np.zeros((4, 16, 16))), Tensor(np.zeros((6, 5, 4))))


def test_edge_head_channel_permutation_symmetry():
    rng = np.random.default_rng(3)
    head = ef.BiMLAHead(rng, 4, 6)
    f1 = rng.standard_normal((4, 8, 8))
    f2 = rng.standard_normal((6, 2, 2))
    base = head(Tensor(f1), Tensor(f2)).data
    p1, p2 = rng.permutation(4), rng.permutation(6)
    head.bu1.weight.data = head.bu1.weight.data[:, p1]
    head.td1.weight.data = head.td1.weight.data[:, p2]
    perm = head(Tensor(f1[p1]), Tensor(f2[p2])).data
    np.testing.assert_allclose(perm, base, atol=1e-12)


def test_every_parameter_receives_gradient():
    seen: dict[str, bool] = {}
    for seed in range(5):
        rng = np.random.default_rng(seed)
        model = ef.EdgeFeatureExtractor(np.random.default_rng(100 + seed), heads=2)
        pyr = model(rng.random((16, 16)))
        loss = ((pyr.f1 * rng.standard_normal(pyr.f1.shape)).sum() + (pyr.f2 * rng.standard_normal(pyr.f2.shape)).sum()
                + (pyr.f3 * rng.standard_normal(pyr.f3.shape)).sum() + (pyr.edge_map * rng.standard_normal((16, 16))).sum())
        names, params = zip(*model.named_parameters())
        grads = grad(loss, params)
        for n, g in zip(names, grads):
            seen[n] = seen.get(n, False) or bool(np.abs(g).max() > 0)
    assert all(seen.values()), [n for n, v in seen.items() if not v]


# Canny -----------------------------------------------------------------------

def test_canny_constant_image_empty():
    assert not ef.canny_edges(np.full((16, 16), 0.3)).any()


def test_canny_vertical_step_matches_reference():
    c = 16
    img = np.zeros((32, 32))
    img[:, c:] = 1.0
    ours = ef.canny_edges(img)
    ref = sk_canny(img, sigma=1.0)
    cols = np.nonzero(ours)[1]
    assert ours.any() and set(cols) <= {c - 1, c, c + 1}
    assert set(np.nonzero(ref)[1]) <= {c - 1, c, c + 1}
    # one edge pixel per row
    assert (ours.sum(axis=1) == 1).all()


def test_canny_square_closed_contour():
    img = np.zeros((32, 32))
    img[8:24, 8:24] = 1.0
    ours = ef.canny_edges(img)
    ref = sk_canny(img, sigma=1.0)
    labels, n = ndimage.label(ours, structure=np.ones((3, 3)))
    assert n == 1
    # the contour encloses the square interior
    filled = ndimage.binary_fill_holes(ours)
    assert filled[12:20, 12:20].all() and not filled[0:5, 0:5].any()
    # every pixel is within one pixel of the reference detector's output
    dist_to_ref = ndimage.distance_transform_edt(~ref)
    dist_to_ours = ndimage.distance_transform_edt(~ours)
    assert dist_to_ref[ours].max() <= 1.0 + 1e-9
    assert dist_to_ours[ref].max() <= 1.5


def test_canny_threshold_precondition():
    with pytest.raises(ValueError):
        ef.canny_edges(np.zeros((4, 4)), 0.5, 0.2)


def test_canny_agrees_with_reference_on_texture():
    from tp3m import synthgen as sg
    img = sg.gen_planar(4).image_a
    ours = ef.canny_edges(img)
    mag_peak = np.hypot(ndimage.sobel(ndimage.gaussian_filter(img, 1.0, mode="nearest"), 1, mode="nearest"),
                        ndimage.sobel(ndimage.gaussian_filter(img, 1.0, mode="nearest"), 0, mode="nearest")).max()
    # skimage's sobel is scaled by 1/4 relative to scipy's
    ref = sk_canny(img, sigma=1.0, low_threshold=0.1 * mag_peak / 4, high_threshold=0.2 * mag_peak / 4, mode="nearest")
    interior = np.zeros_like(ours)
    interior[3:-3, 3:-3] = True
    d = ndimage.distance_transform_edt(~ref)
    assert (d[ours & interior] <= 1.5).mean() > 0.95


# Laplacian weights --------------------------------------------------------------

def test_laplacian_constant_is_wmin():
    w = ef.laplacian_weights(np.full((8, 8), 0.7))
    np.testing.assert_array_equal(w.weights, ef.W_MIN)


def test_laplacian_single_pixel():
    img = np.zeros((7, 7))
    img[3, 3] = 1.0
    w = ef.laplacian_weights(img).weights
    assert w[3, 3] == 1.0
    for y, x in ((2, 3), (4, 3), (3, 2), (3, 4)):
        assert w[y, x] == pytest.approx(0.25)
    assert w[0, 0] == ef.W_MIN


def test_laplacian_scale_invariant():
    img = np.random.default_rng(0).random((16, 16))
    np.testing.assert_allclose(ef.laplacian_weights(2 * img).weights, ef.laplacian_weights(img).weights, atol=1e-15)


def test_laplacian_range():
    w = ef.laplacian_weights(np.random.default_rng(1).random((16, 16))).weights
    assert w.min() >= ef.W_MIN and w.max() == 1.0


def test_edge_significance_marks_edges():
    img = np.zeros((16, 16))
    img[:, 8:] = 1
    w = ef.edge_significance(img)
    assert (w[:, 7] == 1.0).all()
    assert w.min() >= ef.W_MIN
