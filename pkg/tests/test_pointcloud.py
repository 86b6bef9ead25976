import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import fps_bruteforce, occupied_voxels, voxel_bruteforce
from pointcsp.pointcloud import (
    DESCRIPTORS_PER_SCALE,
    GLOBAL_RATIO,
    LOCAL_RATIO,
    PointCloud,
    SceneSpec,
    augment,
    ball_crop,
    fps_indices,
    generate_corpus,
    generate_scene,
    local_descriptors,
    normalize_coords,
    prepare_sample,
    read_pointcloud,
    voxel_fps_reduce,
    voxel_indices,
    write_pointcloud,
)


def test_corpus_is_deterministic(tmp_path):
    spec = SceneSpec(num_classes=4, seed=7, points_per_object=50)
    a, b = generate_corpus(spec, 2), generate_corpus(spec, 2)
    for x, y in zip(a, b):
        write_pointcloud(x, tmp_path / "x.pcsp")
        write_pointcloud(y, tmp_path / "y.pcsp")
        assert (tmp_path / "x.pcsp").read_bytes() == (tmp_path / "y.pcsp").read_bytes()


def test_scenes_mix_classes_and_cover_every_class_twice():
    scenes = generate_corpus(SceneSpec(num_classes=6, points_per_object=20), 16)
    for pc in scenes:
        assert len(np.unique(pc.labels)) >= 2
    for c in range(6):
        assert sum(c in pc.labels for pc in scenes) >= 2


def test_corpus_too_small_for_class_coverage():
    with pytest.raises(ValueError, match="two scenes"):
        generate_corpus(SceneSpec(num_classes=12, objects_per_scene=4), 2)


def test_noise_free_sphere_points_lie_on_surface():
    spec = SceneSpec(noise_sigma=0.0, points_per_object=500)
    pc, objects = generate_scene(spec, [2, 0], np.random.default_rng(3))
    sphere = objects[0]
    pts = pc.coords[pc.labels == 2]
    radius = np.linalg.norm(pts - sphere.center, axis=1)
    np.testing.assert_allclose(radius, sphere.size[0], atol=1e-9)


def test_pointcloud_validation():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((3, 2)))
    with pytest.raises(ValueError):
        PointCloud(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        PointCloud(np.array([[np.nan, 0, 0]]))
    with pytest.raises(ValueError):
        PointCloud(np.zeros((3, 3)), labels=[1, 2])


# ---------------------------------------------------------------- FPS


def test_fps_single_point_is_seed(rng):
    pts = rng.normal(size=(20, 3))
    assert fps_indices(pts, 1, seed_index=7).tolist() == [7]


def test_fps_square_picks_the_diagonal():
    sq = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float)
    assert fps_indices(sq, 2).tolist() == [0, 3]


def test_fps_matches_bruteforce(rng):
    pts = rng.normal(size=(64, 3))
    assert fps_indices(pts, 8).tolist() == fps_bruteforce(pts.tolist(), 8)


def test_fps_continues_from_initial(rng):
    pts = rng.normal(size=(30, 3))
    full = fps_indices(pts, 10, seed_index=4)
    resumed = fps_indices(pts, 10, initial=full[:3])
    np.testing.assert_array_equal(full, resumed)


def test_fps_rejects_bad_k(rng):
    with pytest.raises(ValueError):
        fps_indices(rng.normal(size=(5, 3)), 6)


# ---------------------------------------------------------------- voxels


def test_voxel_two_cells():
    pts = np.array([[0.1, 0, 0], [0.2, 0, 0], [1.5, 0, 0]])
    assert len(voxel_indices(pts, 1.0)) == 2


def test_voxel_huge_cell_keeps_one(rng):
    pts = rng.uniform(0, 1, size=(50, 3))
    assert len(voxel_indices(pts, 10.0)) == 1


def test_voxel_count_matches_hash_grid(rng):
    pts = rng.uniform(-1, 1, size=(500, 3))
    assert len(voxel_indices(pts, 0.25)) == occupied_voxels(pts, 0.25)


def test_voxel_representatives_match_bruteforce(rng):
    pts = rng.uniform(-1, 1, size=(120, 3))
    assert voxel_indices(pts, 0.4).tolist() == voxel_bruteforce(pts.tolist(), 0.4)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 128), seed=st.integers(0, 2**31), k_frac=st.floats(0, 1),
       cell=st.floats(0.05, 3.0))
def test_sampling_oracles_random_clouds(n, seed, k_frac, cell):
    pts = np.random.default_rng(seed).normal(size=(n, 3))
    k = 1 + int(k_frac * (n - 1))
    assert fps_indices(pts, k).tolist() == fps_bruteforce(pts.tolist(), k)
    assert voxel_indices(pts, cell).tolist() == voxel_bruteforce(pts.tolist(), cell)


# ---------------------------------------------------------------- crops and augmentation


def test_ball_crop_is_k_nearest(rng):
    pts = rng.normal(size=(100, 3))
    idx = ball_crop(pts, 5, 17)
    d = np.linalg.norm(pts - pts[5], axis=1)
    assert len(idx) == 17 and 5 in idx
    assert d[idx].max() <= np.sort(d)[16]


def test_voxel_fps_reduce_hits_target_exactly(rng):
    pts = rng.normal(size=(400, 3))
    for target in (1, 37, 200, 400):
        idx = voxel_fps_reduce(pts, target)
        assert len(idx) == target == len(np.unique(idx))


def test_normalize_unit_radius(rng):
    out = normalize_coords(rng.normal(size=(50, 3)) * 4 + 9)
    np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-12)
    assert np.linalg.norm(out, axis=1).max() == pytest.approx(1.0)


@pytest.fixture(scope="module")
def big_scene():
    return generate_corpus(SceneSpec(points_per_object=4500), 3)[0]


def test_augment_ten_views_of_1024(big_scene):
    views = augment(big_scene, 2, 8, 1024, np.random.default_rng(0))
    assert len(views.globals) == 2 and len(views.locals) == 8
    assert [len(v) for v in views.views] == [1024] * 10


def test_augment_view_properties():
    pc = generate_corpus(SceneSpec(points_per_object=600), 3)[0]
    views = augment(pc, 2, 4, 64, np.random.default_rng(1))
    cand = set(views.provenance["candidate"].tolist())
    assert views.crop_ratios["candidate"] == pytest.approx(0.6, abs=0.01)
    for name, idx in views.provenance.items():
        if name == "candidate":
            continue
        assert set(idx.tolist()) <= cand and len(np.unique(idx)) == 64
        lo, hi = GLOBAL_RATIO if name.startswith("global") else LOCAL_RATIO
        assert lo - 0.01 <= views.crop_ratios[name] <= hi + 0.01
    for v, name in zip(views.views, ["global_0", "global_1"] + [f"local_{j}" for j in range(4)]):
        assert np.linalg.norm(v.coords, axis=1).max() == pytest.approx(1.0)
        np.testing.assert_allclose(v.coords.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_array_equal(v.labels, pc.labels[views.provenance[name]])


def test_augment_without_locals():
    pc = generate_corpus(SceneSpec(points_per_object=300), 3)[0]
    views = augment(pc, 2, 0, 64, np.random.default_rng(0))
    assert len(views.views) == 2 and views.locals == []


def test_augment_is_deterministic():
    pc = generate_corpus(SceneSpec(points_per_object=300), 3)[0]
    a = augment(pc, 2, 2, 32, np.random.default_rng([5, 1]))
    b = augment(pc, 2, 2, 32, np.random.default_rng([5, 1]))
    for x, y in zip(a.views, b.views):
        np.testing.assert_array_equal(x.coords, y.coords)


def test_augment_rejects_tiny_cloud():
    pc = generate_corpus(SceneSpec(points_per_object=50), 3)[0]
    with pytest.raises(ValueError, match="too small"):
        augment(pc, 2, 8, 64, np.random.default_rng(0))


def test_prepare_sample(rng):
    pc = PointCloud(rng.normal(size=(100, 3)), rng.integers(0, 3, 100))
    out, idx = prepare_sample(pc, 40, 3)
    assert len(out) == 40 and idx[0] == 3
    np.testing.assert_array_equal(out.labels, pc.labels[idx])


# ---------------------------------------------------------------- files


@pytest.mark.parametrize("labels", [True, False])
def test_text_round_trip_is_exact(tmp_path, rng, labels):
    pc = PointCloud(rng.normal(size=(25, 3)), rng.integers(0, 5, 25) if labels else None, "s")
    write_pointcloud(pc, tmp_path / "a.pcsp")
    back = read_pointcloud(tmp_path / "a.pcsp")
    np.testing.assert_array_equal(back.coords, pc.coords)
    if labels:
        np.testing.assert_array_equal(back.labels, pc.labels)
    else:
        assert back.labels is None


def test_binary_round_trip_is_float32_exact(tmp_path, rng):
    pc = PointCloud(rng.normal(size=(25, 3)), rng.integers(0, 5, 25))
    write_pointcloud(pc, tmp_path / "a.pcspb")
    back = read_pointcloud(tmp_path / "a.pcspb")
    np.testing.assert_array_equal(back.coords, pc.coords.astype(np.float32).astype(np.float64))
    np.testing.assert_array_equal(back.labels, pc.labels)


def test_corrupt_file_rejected(tmp_path):
    p = tmp_path / "bad.pcsp"
    p.write_text("PCSP1 3 0\n0 0 0\n")
    with pytest.raises(ValueError):
        read_pointcloud(p)
    p.write_text("nonsense\n")
    with pytest.raises(ValueError):
        read_pointcloud(p)


# ---------------------------------------------------------------- local descriptors


def test_descriptors_on_plane_and_line(rng):
    plane = np.column_stack([rng.uniform(-1, 1, size=(60, 2)), np.zeros(60)])
    d = local_descriptors(plane, [12])
    lin, pla, sca, extent, nz, kth = d.T
    np.testing.assert_allclose(sca, 0.0, atol=1e-12)
    np.testing.assert_allclose(nz, 1.0, atol=1e-12)
    assert np.all(pla > lin - 1.0) and np.all(extent > 0) and np.all(kth > 0)
    line = np.outer(np.linspace(0, 1, 30), [1.0, 0.0, 0.0])
    lin, pla, sca = local_descriptors(line, [5])[:, :3].T
    np.testing.assert_allclose(lin, 1.0, atol=1e-9)
    np.testing.assert_allclose(pla + sca, 0.0, atol=1e-9)


def test_descriptors_tilted_plane_normal(rng):
    uv = rng.uniform(-1, 1, size=(50, 2))
    tilted = np.column_stack([uv[:, 0], uv[:, 1] * np.cos(0.5), uv[:, 1] * np.sin(0.5)])
    nz = local_descriptors(tilted, [10])[:, 4]
    np.testing.assert_allclose(nz, np.cos(0.5), atol=1e-9)


def test_descriptors_shape_and_small_clouds(rng):
    pts = rng.normal(size=(7, 3))
    assert local_descriptors(pts, [4, 24]).shape == (7, 2 * DESCRIPTORS_PER_SCALE)
    # k above the cloud size uses the whole cloud
    np.testing.assert_array_equal(local_descriptors(pts, [24]), local_descriptors(pts, [7]))
    assert local_descriptors(pts[:1], [8]).shape == (1, DESCRIPTORS_PER_SCALE)
    assert local_descriptors(pts, []).shape == (7, 0)
