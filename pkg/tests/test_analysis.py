import numpy as np
import pytest

from yolos import analysis as A
from yolos import autodiff as ad
from yolos.analysis import TokenOutputs, pearson
from yolos.data import gen_shapes
from yolos.imageio import read_ppm
from yolos.matching import GroundTruthObject
from yolos.model import Detector, ModelConfig

TINY = ModelConfig(depth=2, width=16, heads=2, patch_size=8, det_tokens=6, num_classes=3, pe_grid=(4, 4))


def test_pearson_examples():
    x = np.arange(10.0)
    assert pearson(x, 2 * x + 1) == pytest.approx(1.0)
    assert pearson(x, -x) == pytest.approx(-1.0)
    assert pearson([1, 2, 3], [1, 3, 2]) == pytest.approx(0.5)


def test_pearson_zero_variance_absent():
    assert pearson([1, 1, 1], [1, 2, 3]) is None


def test_pearson_rejects_bad_shapes():
    with pytest.raises(ValueError):
        pearson([1, 2], [1, 2, 3])
    with pytest.raises(ValueError):
        pearson([1], [1])


def test_pearson_affine():
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=50), rng.normal(size=50)
    r = pearson(x, y)
    assert pearson(3 * x + 7, y) == pytest.approx(r, abs=1e-12)
    assert pearson(-2 * x + 1, y) == pytest.approx(-r, abs=1e-12)


def _fg_logits(n, k=3):
    z = np.zeros((n, k + 1))
    z[:, 0] = 5.0
    return z


def test_geometry_monotone_fixture():
    rng = np.random.default_rng(1)
    outs = []
    for _ in range(20):
        centers = rng.uniform(0.0, 1.0, (12, 2))
        # embedding = a point on a quarter circle indexed by the x-center
        theta = centers[:, 0] * np.pi / 2
        emb = np.stack([np.cos(theta), np.sin(theta)], axis=1)
        centers[:, 1] = 0.5
        boxes = np.hstack([centers, np.full((12, 2), 0.1)])
        outs.append(TokenOutputs(_fg_logits(12), boxes, emb))
    assert A.geometry_rho(outs) <= -0.9


def test_geometry_independent_fixture():
    rng = np.random.default_rng(2)
    boxes = np.hstack([rng.uniform(0, 1, (50, 2)), np.full((50, 2), 0.1)])
    out = TokenOutputs(_fg_logits(50), boxes, rng.normal(size=(50, 8)))
    # 1225 pairs
    assert abs(A.geometry_rho([out])) <= 0.1


def test_identical_tokens_excluded():
    out = TokenOutputs(_fg_logits(4), np.full((4, 4), 0.5), np.ones((4, 3)))
    assert A.geometry_rho([out]) is None


def test_single_prediction_image_contributes_nothing():
    logits = _fg_logits(3)
    logits[1:, -1] = 10.0
    out = TokenOutputs(logits, np.random.default_rng(0).random((3, 4)), np.eye(3))
    assert A.pair_samples(out) == []


def test_identity_classifier_gives_rho_one():
    rng = np.random.default_rng(3)
    emb = rng.normal(size=(10, 5))
    logits = np.hstack([np.abs(emb) + 1.0, np.zeros((10, 1))])  # all foreground
    out = TokenOutputs(logits, rng.random((10, 4)), emb)
    assert A.class_feature_rho([out], [emb]) == pytest.approx(1.0)


def test_random_class_features_null():
    rng = np.random.default_rng(4)
    out = TokenOutputs(_fg_logits(60), rng.random((60, 4)), rng.normal(size=(60, 8)))
    assert abs(A.class_feature_rho([out], [rng.normal(size=(60, 8))])) <= 0.1


def test_pair_sample_ranges():
    rng = np.random.default_rng(5)
    out = TokenOutputs(_fg_logits(8), rng.random((8, 4)), rng.normal(size=(8, 4)))
    for s in A.pair_samples(out):
        assert -1 <= s.cos_sim <= 1 and -1 <= s.cls_feat_sim <= 1 and 0 <= s.center_dist <= np.sqrt(2)


def test_scatter_symmetric_with_zero_pe_and_shared_tokens():
    det = Detector.create(TINY, seed=0)
    det.params["det_tokens"] = ad.Tensor(np.tile(det.params["det_tokens"].data[:1], (TINY.det_tokens, 1)))
    images = gen_shapes(0, 4, canvas=(32, 32), k_classes=3)
    recs = A.box_scatter(det, images, zero_pe=True)
    for r in recs[1:]:
        np.testing.assert_allclose(r.centers, recs[0].centers, atol=1e-12)


def test_scatter_single_image_counts(tmp_path):
    det = Detector.create(TINY, seed=0)
    recs = A.box_scatter(det, gen_shapes(1, 1, canvas=(32, 32), k_classes=3))
    assert sum(len(r.centers) for r in recs) <= TINY.det_tokens
    paths = A.write_scatter(recs, tmp_path)
    assert [p.name for p in paths] == [f"scatter_token{i}.ppm" for i in range(TINY.det_tokens)]
    assert read_ppm(paths[0]).shape == (96, 96, 3)


def test_category_single_class_std_zero():
    outs = [TokenOutputs(_fg_logits(5), np.full((5, 4), 0.5), np.eye(5)) for _ in range(3)]
    gts = [[GroundTruthObject(0, (0.5, 0.5, 0.2, 0.2))]] * 3
    st = A.category_stats_from_outputs(outs, gts, 3)
    assert np.all(st.cross_token_std == 0)
    assert st.token_histograms.sum() == 15
    assert st.gt_histogram.tolist() == [3, 0, 0]


def test_category_histograms_conserve_counts():
    det = Detector.create(TINY, seed=1)
    images = gen_shapes(2, 5, canvas=(32, 32), k_classes=3)
    st = A.category_stats(det, images)
    outs = A.collect_outputs(det, images)
    assert st.token_histograms.sum() == sum(len(o.foreground()) for o in outs)
    assert st.gt_histogram.sum() == sum(len(im.objects) for im in images)
    null = A.category_null_std(st, np.random.default_rng(0), rounds=20)
    assert null.shape == (20,)


def test_uniform_attention_maps():
    det = Detector.create(TINY, seed=0)
    for layer in range(TINY.depth):
        for suffix in ("weight", "bias"):
            key = f"blocks.{layer}.attn.qkv.{suffix}"
            det.params[key] = ad.Tensor(np.zeros_like(det.params[key].data))
    maps = A.extract_attention(det, np.random.default_rng(0).random((32, 32, 3)))
    s = 16 + TINY.det_tokens
    np.testing.assert_allclose(maps.raw, 1.0 / s, atol=1e-15)
    np.testing.assert_allclose(maps.row_sums, 1.0, atol=1e-12)
    assert np.all(maps.normalized == 0.0)


def test_attention_rows_sum_to_one_and_render(tmp_path):
    det = Detector.create(TINY, seed=2)
    maps = A.extract_attention(det, np.random.default_rng(1).random((32, 32, 3)), layer_index=0)
    np.testing.assert_allclose(maps.row_sums, 1.0, atol=1e-12)
    assert maps.raw.shape == (TINY.det_tokens, TINY.heads, 4, 4)
    assert maps.normalized.min() >= 0 and maps.normalized.max() <= 1
    paths = A.write_attention(maps, tmp_path, tokens=[0, 1, 2], scale=2)
    assert len(paths) == 3 * TINY.heads + 1
    assert paths[0].name == "attn_l0_h0_t0.ppm"
    grid = read_ppm(paths[-1])
    # heads x 8 px + separators by tokens x 8 px + separators
    assert grid.shape == (TINY.heads * 8 + TINY.heads + 1, 3 * 8 + 4, 3)


def test_attention_layer_out_of_range():
    det = Detector.create(TINY)
    with pytest.raises(IndexError):
        A.extract_attention(det, np.zeros((32, 32, 3)), layer_index=TINY.depth)
