import math

import numpy as np
import pytest

from pointcsp.evaluation import (
    consistency_metric,
    export_embeddings,
    iou_per_class,
    knn_probe,
    linear_probe,
    mean_iou,
    read_embeddings,
)


def test_knn_duplicate_point_gets_own_label(rng):
    x = rng.normal(size=(20, 4))
    y = rng.integers(0, 3, 20)
    assert knn_probe(x, y, x[[5]], y[[5]], k=1) == 1.0
    assert knn_probe(x, y, x, y, k=1) == 1.0


def test_knn_separated_clusters(rng):
    x = np.vstack([rng.normal(0, 1, size=(200, 2)), rng.normal(10, 1, size=(200, 2))])
    y = np.repeat([0, 1], 200)
    tx = np.vstack([rng.normal(0, 1, size=(100, 2)), rng.normal(10, 1, size=(100, 2))])
    assert knn_probe(x, y, tx, np.repeat([0, 1], 100), k=5, normalize=False) >= 0.99


def test_knn_null_model_near_chance(rng):
    k = 4
    x, tx = rng.normal(size=(800, 8)), rng.normal(size=(800, 8))
    y, ty = rng.integers(0, k, 800), rng.integers(0, k, 800)
    acc = knn_probe(x, y, tx, ty, k=5)
    sd = math.sqrt(0.25 * 0.75 / 800)
    assert abs(acc - 1 / k) < 4 * sd


def test_knn_errors(rng):
    with pytest.raises(ValueError):
        knn_probe(np.zeros((0, 2)), np.zeros(0), np.zeros((1, 2)), np.zeros(1))
    with pytest.raises(ValueError):
        knn_probe(np.zeros((3, 2)), np.zeros(3), np.zeros((1, 2)), np.zeros(1), k=4)


def test_linear_probe_one_hot_features():
    y = np.array([0, 1, 2, 1, 0, 2, 2])
    x = np.eye(3)[y]
    acc, miou, _ = linear_probe(x, y, x, y, 3, steps=200)
    assert acc == 1.0 and miou == 1.0


def test_linear_probe_zero_features_predict_majority():
    y = np.array([0, 1, 1, 1, 2, 1])
    x = np.zeros((6, 3))
    acc, _, _ = linear_probe(x, y, x, y, 3, steps=200)
    assert acc == pytest.approx(4 / 6)


def test_linear_probe_separable(rng):
    w = rng.normal(size=5)
    x = rng.normal(size=(400, 5))
    margin = x @ w
    keep = np.abs(margin) > 0.3
    x, y = x[keep], (margin[keep] > 0).astype(int)
    acc, _, _ = linear_probe(x[:200], y[:200], x[200:], y[200:], 2, steps=300, normalize=False)
    assert acc >= 0.98


def test_linear_probe_requires_all_classes():
    with pytest.raises(ValueError, match="absent"):
        linear_probe(np.zeros((2, 2)), [0, 0], np.zeros((1, 2)), [1], 2)


def test_iou_and_single_class_miou(rng):
    pred, true = np.array([0, 0, 1, 1]), np.array([0, 1, 1, 1])
    np.testing.assert_allclose(iou_per_class(pred, true, 3), [0.5, 2 / 3, np.nan])
    assert mean_iou(pred, true, 3) == pytest.approx((0.5 + 2 / 3) / 2)
    y = np.zeros(10, int)
    assert mean_iou(y, y, 1) == float(np.mean(y == y))


# ---------------------------------------------------------------- consistency


def _two_scene_labels(n):
    labels = np.tile([0, 1], n // 2)
    scenes = np.repeat(["a", "b"], n // 2)
    return labels, scenes


def test_identical_features_are_undefined():
    labels, scenes = _two_scene_labels(8)
    rep = consistency_metric(np.ones((8, 3)), labels, scenes)
    assert rep.intra == 0.0 and rep.ratio is None and not rep.defined


def test_pure_clusters(rng):
    labels, scenes = _two_scene_labels(10)
    centers = np.array([[0.0, 0.0], [3.0, 4.0]])
    rep = consistency_metric(centers[labels], labels, scenes, normalize=False)
    assert rep.intra == 0.0 and rep.inter == pytest.approx(5.0) and rep.ratio == 0.0


def test_random_features_ratio_near_one(rng):
    labels = rng.integers(0, 4, 1000)
    scenes = rng.integers(0, 5, 1000)
    rep = consistency_metric(rng.normal(size=(1000, 8)), labels, scenes)
    assert abs(rep.ratio - 1.0) < 0.1


def test_rotation_invariance(rng):
    labels = rng.integers(0, 3, 120)
    scenes = rng.integers(0, 3, 120)
    x = rng.normal(size=(120, 5))
    q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
    a = consistency_metric(x, labels, scenes).ratio
    b = consistency_metric(x @ q, labels, scenes).ratio
    assert a == pytest.approx(b, rel=1e-10)


def test_subsampling_is_seeded(rng):
    labels = rng.integers(0, 3, 300)
    scenes = rng.integers(0, 3, 300)
    x = rng.normal(size=(300, 4))
    a = consistency_metric(x, labels, scenes, max_per_group=10, seed=1).ratio
    b = consistency_metric(x, labels, scenes, max_per_group=10, seed=1).ratio
    assert a == b


def test_no_shared_class_is_an_error():
    with pytest.raises(ValueError):
        consistency_metric(np.eye(2), [0, 1], ["a", "b"])


# ---------------------------------------------------------------- export


def test_export_shape_and_round_trip(tmp_path, rng):
    f = rng.normal(size=(2, 4))
    path = export_embeddings(f, [1, 2], ["s0", "s0"], tmp_path / "e.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "scene_id,point_id,label,f_0,f_1,f_2,f_3"
    assert len(lines) == 3 and all(len(l.split(",")) == 3 + 4 for l in lines)
    feats, labels, sids, pids = read_embeddings(path)
    np.testing.assert_array_equal(feats, f)
    assert labels.tolist() == [1, 2] and sids == ["s0", "s0"] and pids.tolist() == [0, 1]


def test_export_empty_is_header_only(tmp_path):
    path = export_embeddings(np.zeros((0, 3)), [], [], tmp_path / "e.csv")
    assert path.read_text().splitlines() == ["scene_id,point_id,label,f_0,f_1,f_2"]
