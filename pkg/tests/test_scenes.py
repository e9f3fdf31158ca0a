import numpy as np
import pytest

from rangeudf.errors import ValidationError
from rangeudf.geomcore import SpatialIndex
from rangeudf.pointnet import KNNIndex
from rangeudf.scenes import Primitive, SceneSpec, build_scene, make_ambiguity_pair, random_room, tessellate, write_scene


def test_single_sphere():
    mesh = build_scene(SceneSpec([Primitive("sphere", class_id=0)], density=6))
    assert np.all(mesh.face_labels == 0)
    # closed: every edge is shared by exactly two faces once seam vertices are merged
    V = np.round(mesh.vertices, 9)
    _, inv = np.unique(V, axis=0, return_inverse=True)
    F = inv.reshape(-1)[mesh.faces]
    edges = np.sort(np.concatenate([F[:, [0, 1]], F[:, [1, 2]], F[:, [2, 0]]]), axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    assert np.all(counts == 2)


def test_box_and_sphere_labels():
    spec = SceneSpec([Primitive("box", (-0.5, 0, 0), (0.3, 0.3, 0.3), 0.0, 0),
                      Primitive("sphere", (0.5, 0, 0), (0.3, 0.3, 0.3), 0.0, 1)], density=4)
    mesh = build_scene(spec)
    n_box = len(tessellate("box", 4)[1])
    assert np.all(mesh.face_labels[:n_box] == 0) and np.all(mesh.face_labels[n_box:] == 1)
    # box faces lie left of the sphere's faces after normalization
    cx = mesh.triangles().mean(axis=1)[:, 0]
    assert cx[:n_box].max() < cx[n_box:].min()


def test_density_doubling_quadruples_sphere_faces():
    assert len(tessellate("sphere", 8)[1]) == 4 * len(tessellate("sphere", 4)[1])


def test_normalized_to_unit_cube():
    mesh = build_scene(random_room(3))
    assert np.abs(mesh.vertices).max() <= 0.5 + 1e-12
    assert np.isclose(np.ptp(mesh.vertices, axis=0).max(), 1.0)


def test_spec_validation():
    with pytest.raises(ValidationError):
        build_scene(SceneSpec([]))
    with pytest.raises(ValidationError):
        build_scene(SceneSpec([Primitive("box", class_id=1)]))
    with pytest.raises(ValidationError):
        Primitive("torus")
    with pytest.raises(ValidationError):
        SceneSpec.from_json('{"primitives": [], "lights": 2}')


def test_spec_json_roundtrip():
    spec = random_room(7)
    back = SceneSpec.from_json(spec.to_json())
    assert back == spec


@pytest.mark.parametrize("seed", range(5))
def test_random_room_shape(seed):
    spec = random_room(seed)
    assert 3 <= len(spec.primitives) <= 6
    assert spec.n_classes == 3
    mesh = build_scene(spec)
    assert set(np.unique(mesh.face_labels)) == {0, 1, 2}


def test_write_scene(tmp_path):
    from rangeudf.geomcore import labels_path, load_mesh

    mesh = build_scene(random_room(1, density=3))
    write_scene(mesh, tmp_path / "room.ply")
    assert labels_path(tmp_path / "room.ply").exists()
    back = load_mesh(tmp_path / "room.ply")
    np.testing.assert_array_equal(back.face_labels, mesh.face_labels)
    np.testing.assert_allclose(back.vertices, mesh.vertices, atol=1e-6)


# ---------------------------------------------------------------------------
# ambiguity pair


@pytest.fixture(scope="module")
def pair():
    return make_ambiguity_pair(0.05)


def test_pair_offset(pair):
    d1 = pair.first.queries.off_surface.udf.astype(np.float64)
    d2 = pair.second.queries.off_surface.udf.astype(np.float64)
    np.testing.assert_allclose(np.abs(d2 - d1), 0.05, atol=1e-6)


def test_pair_targets_are_true_distances(pair):
    idx = SpatialIndex.build(pair.first.mesh)
    for rec in (pair.first, pair.second):
        blk = rec.queries.off_surface
        _, d, _ = idx.nearest_many(blk.positions[:50].astype(np.float64))
        np.testing.assert_allclose(d, blk.udf[:50], atol=1e-6)


def test_pair_bundles_bit_identical(pair):
    K = pair.neighbors.shape[1]
    a = KNNIndex(pair.first.cloud).query(pair.first.queries.off_surface.positions, K)
    b = KNNIndex(pair.second.cloud).query(pair.second.queries.off_surface.positions, K)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a, pair.neighbors)
    assert pair.first.cloud.tobytes() == pair.second.cloud.tobytes()


def test_pair_zero_offset_coincides():
    p = make_ambiguity_pair(0.0, n_queries=64)
    assert p.first.queries.off_surface == p.second.queries.off_surface


def test_pair_validation():
    with pytest.raises(ValidationError):
        make_ambiguity_pair(0.3)
