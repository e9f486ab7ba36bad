import numpy as np
import pytest

from fragpose.errors import DuplicateCentersError, TooFewVerticesError
from fragpose.fragments import (
    MeshModel,
    assign_fragments,
    farthest_point_sample,
    fragment_model,
    mesh_diameter,
)

from conftest import cube_mesh_arrays


def fps_oracle(vertices, count):
    """Independent brute-force farthest point sampling: per step, scan every
    vertex and recompute its min distance to the selected set (seeded with
    the centroid) from scratch."""
    vertices = np.asarray(vertices, dtype=np.float64)
    picked = []
    seeds = [vertices.mean(axis=0)]
    for _ in range(count):
        best_idx, best_d = -1, -1.0
        for i, v in enumerate(vertices):
            d = min(float(np.linalg.norm(v - s)) for s in seeds)
            if d > best_d:  # strict: keeps the lowest index on ties
                best_idx, best_d = i, d
        picked.append(best_idx)
        seeds.append(vertices[best_idx])
    return np.array(picked, dtype=np.int64)


def nearest_center_oracle(vertices, centers):
    labels = np.empty(len(vertices), dtype=np.int64)
    for i, v in enumerate(vertices):
        d = [float(np.linalg.norm(v - c)) for c in centers]
        labels[i] = int(np.argmin(d))
    return labels


@pytest.fixture
def cube_model():
    verts, tris = cube_mesh_arrays(side=1.0)
    return MeshModel(object_id=1, vertices=verts, triangles=tris)


def sphere_vertices(n=200, radius=40.0, seed=3):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True) * radius


class TestMeshModel:
    def test_cube_diameter_is_space_diagonal(self, cube_model):
        assert abs(cube_model.diameter - np.sqrt(3.0)) < 1e-12

    def test_diameter_matches_direct_scan(self):
        rng = np.random.default_rng(4)
        pts = rng.normal(size=(120, 3)) * 30
        direct = max(
            float(np.linalg.norm(pts[i] - pts[j]))
            for i in range(len(pts)) for j in range(i + 1, len(pts))
        )
        assert abs(mesh_diameter(pts) - direct) < 1e-9

    def test_too_few_vertices(self):
        with pytest.raises(TooFewVerticesError):
            MeshModel(object_id=1, vertices=np.zeros((3, 3)), triangles=np.zeros((0, 3), dtype=int))


class TestFarthestPointSample:
    def test_unit_cube_single_center_lowest_corner(self, cube_model):
        # all 8 corners are equidistant from the centroid; the tie breaks to
        # vertex index 0
        idx = farthest_point_sample(cube_model.vertices, 1)
        assert idx.tolist() == [0]

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(5)
        for trial in range(10):
            pts = rng.normal(size=(60, 3)) * 25
            count = int(rng.integers(1, 20))
            got = farthest_point_sample(pts, count)
            expected = fps_oracle(pts, count)
            assert got.tolist() == expected.tolist()

    def test_all_vertices_selected_when_count_equals_vertex_count(self):
        rng = np.random.default_rng(6)
        pts = rng.normal(size=(15, 3))
        idx = farthest_point_sample(pts, 15)
        assert sorted(idx.tolist()) == list(range(15))

    def test_count_above_vertex_count_rejected(self, cube_model):
        with pytest.raises(TooFewVerticesError):
            farthest_point_sample(cube_model.vertices, 9)

    def test_selected_indices_distinct(self):
        pts = sphere_vertices(100)
        idx = farthest_point_sample(pts, 50)
        assert len(set(idx.tolist())) == 50


class TestAssignFragments:
    def test_matches_nearest_center_oracle(self):
        rng = np.random.default_rng(7)
        pts = rng.normal(size=(300, 3)) * 40
        centers = pts[farthest_point_sample(pts, 12)]
        got = assign_fragments(pts, centers)
        assert got.tolist() == nearest_center_oracle(pts, centers).tolist()

    def test_duplicate_centers_rejected(self):
        pts = np.eye(3, 3, dtype=float).repeat(2, axis=0)
        centers = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
        with pytest.raises(DuplicateCentersError):
            assign_fragments(pts, centers)

    def test_tie_goes_to_lowest_index(self):
        pts = np.array([[0.0, 0.0, 0.0]])
        centers = np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])
        assert assign_fragments(pts, centers).tolist() == [0]


class TestFragmentedModel:
    def test_cube_two_fragments_partition(self, cube_model):
        fm = fragment_model(cube_model, 2)
        labels = fm.vertex_fragment
        assert set(labels.tolist()) == {0, 1}
        # every vertex goes to its nearest center
        assert labels.tolist() == nearest_center_oracle(cube_model.vertices, fm.centers).tolist()

    def test_every_fragment_nonempty_on_sphere(self):
        pts = sphere_vertices(400, radius=30.0)
        tris = np.array([[0, 1, 2]])
        model = MeshModel(object_id=2, vertices=pts, triangles=tris)
        fm = fragment_model(model, 64)
        counts = np.bincount(fm.vertex_fragment, minlength=64)
        assert counts.min() >= 1

    def test_scales_positive_and_bounded(self):
        pts = sphere_vertices(400, radius=30.0)
        model = MeshModel(object_id=2, vertices=pts, triangles=np.array([[0, 1, 2]]))
        fm = fragment_model(model, 32)
        assert np.all(fm.scales > 0.0)
        assert np.all(fm.scales <= model.diameter + 1e-9)

    def test_single_vertex_fragment_gets_fallback_scale(self):
        # 4 far-apart vertices plus one isolated: with n equal to the vertex
        # count each fragment is a single vertex, so every scale falls back
        # to 1% of the diameter
        pts = np.array([
            [0.0, 0.0, 0.0], [100.0, 0.0, 0.0], [0.0, 100.0, 0.0], [0.0, 0.0, 100.0],
        ])
        model = MeshModel(object_id=3, vertices=pts, triangles=np.array([[0, 1, 2]]))
        fm = fragment_model(model, 4)
        assert np.allclose(fm.scales, 0.01 * model.diameter)

    def test_encode_decode_round_trip(self):
        pts = sphere_vertices(300, radius=45.0)
        model = MeshModel(object_id=4, vertices=pts, triangles=np.array([[0, 1, 2]]))
        fm = fragment_model(model, 16)
        rng = np.random.default_rng(8)
        for _ in range(200):
            j = int(rng.integers(0, 16))
            x = rng.normal(size=3) * 50
            r = fm.encode(j, x)
            back = fm.decode(j, r)
            assert np.allclose(back, x, atol=1e-9 * max(1.0, np.abs(x).max()))

    def test_center_encodes_to_origin(self):
        pts = sphere_vertices(300, radius=45.0)
        model = MeshModel(object_id=4, vertices=pts, triangles=np.array([[0, 1, 2]]))
        fm = fragment_model(model, 8)
        for j in range(8):
            assert np.allclose(fm.encode(j, fm.centers[j]), np.zeros(3))

    def test_decode_batch_matches_scalar(self):
        pts = sphere_vertices(200, radius=45.0)
        model = MeshModel(object_id=4, vertices=pts, triangles=np.array([[0, 1, 2]]))
        fm = fragment_model(model, 8)
        rng = np.random.default_rng(9)
        frags = rng.integers(0, 8, size=50)
        coords = rng.normal(size=(50, 3))
        batch = fm.decode_batch(frags, coords)
        for i in range(50):
            assert np.allclose(batch[i], fm.decode(int(frags[i]), coords[i]))

    def test_assigned_vertices_within_fragment_bbox_scale(self):
        # h_j is the longest bbox side of the fragment's vertices, so every
        # assigned vertex encodes to coordinates bounded by 1 in inf norm
        pts = sphere_vertices(500, radius=30.0)
        model = MeshModel(object_id=5, vertices=pts, triangles=np.array([[0, 1, 2]]))
        fm = fragment_model(model, 20)
        for j in range(20):
            verts = pts[fm.vertex_fragment == j]
            if len(verts) < 2:
                continue
            r = fm.encode(j, verts)
            assert np.abs(r).max() <= 1.0 + 1e-12
