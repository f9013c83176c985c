import numpy as np
import pytest

from airobject.feature_store import FrameObservation, Keypoint
from airobject.graph_encoder import ModelConfig
from airobject.topo_graph import (
    DegenerateBboxError,
    DegenerateGeometryError,
    Triangulation,
    adjacency_from_triangles,
    build_frame_graph,
    delaunay,
    normalize_positions,
)

from oracles import circumcircle_violations, has_cocircular_quadruple


class TestNormalizePositions:
    def test_center_maps_to_origin(self):
        out = normalize_positions([[2.0, 1.0]], [0.0, 0.0, 4.0, 2.0])
        assert np.allclose(out, [[0.0, 0.0]])

    def test_corner_maps_to_one_one(self):
        out = normalize_positions([[4.0, 2.0]], [0.0, 0.0, 4.0, 2.0])
        assert np.allclose(out, [[1.0, 1.0]])

    def test_hand_computed_point(self):
        # bbox [0,0,4,2]: center (2,1), half extents (2,1)
        # (3,0.5) -> ((3-2)/2, (0.5-1)/1) = (0.5, -0.5)
        out = normalize_positions([[3.0, 0.5]], [0.0, 0.0, 4.0, 2.0])
        assert np.allclose(out, [[0.5, -0.5]])

    def test_degenerate_bbox(self):
        with pytest.raises(DegenerateBboxError):
            normalize_positions([[0.0, 0.0]], [1.0, 0.0, 1.0, 2.0])


class TestDelaunay:
    def test_single_triangle(self):
        tri = delaunay([(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)])
        assert tri.triangles == [(0, 1, 2)]

    def test_four_points_two_triangles(self):
        tri = delaunay([(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (2.0, 2.0)])
        assert sorted(tri.triangles) == [(0, 1, 2), (1, 2, 3)]
        assert tri.edges() == {(0, 1), (0, 2), (1, 2), (1, 3), (2, 3)}

    def test_collinear_raises(self):
        with pytest.raises(DegenerateGeometryError):
            delaunay([(0.0, 0.0), (1.0, 1.0), (2.0, 2.0)])

    def test_too_few_points(self):
        with pytest.raises(DegenerateGeometryError):
            delaunay([(0.0, 0.0), (1.0, 0.0)])

    def test_empty_circumcircle_on_random_sets(self):
        rng = np.random.default_rng(0)
        for _ in range(40):
            n = int(rng.integers(3, 41))
            pts = rng.uniform(-1, 1, size=(n, 2))
            while not _generic(pts) or has_cocircular_quadruple(pts):
                pts = rng.uniform(-1, 1, size=(n, 2))
            tri = delaunay(pts)
            assert circumcircle_violations(pts, tri.triangles, margin=1e-9) == []

    def test_matches_scipy_on_generic_points(self):
        scipy_spatial = pytest.importorskip("scipy.spatial")
        rng = np.random.default_rng(3)
        for _ in range(20):
            n = int(rng.integers(4, 30))
            pts = rng.uniform(0, 10, size=(n, 2))
            while not _generic(pts) or has_cocircular_quadruple(pts, tol=1e-6):
                pts = rng.uniform(0, 10, size=(n, 2))
            ours = delaunay(pts).edges()
            ref = scipy_spatial.Delaunay(pts)
            theirs = set()
            for simplex in ref.simplices:
                a, b, c = sorted(int(v) for v in simplex)
                theirs.update({(a, b), (a, c), (b, c)})
            assert ours == theirs

    def test_translation_and_scale_invariance_exact_transform(self):
        rng = np.random.default_rng(5)
        pts = rng.uniform(-1, 1, size=(15, 2))
        base = delaunay(pts).triangles
        # power-of-two scale and dyadic shift keep the floats exact
        assert delaunay(pts * 2.0 + np.array([1.5, -3.25])).triangles == base

    def test_translation_and_scale_invariance_generic_transform(self):
        rng = np.random.default_rng(6)
        pts = rng.uniform(-1, 1, size=(12, 2))
        base = delaunay(pts).triangles
        assert delaunay(pts * 1.7 + np.array([0.3, 0.9])).triangles == base

    def test_deterministic_for_fixed_ordering(self):
        rng = np.random.default_rng(9)
        pts = rng.uniform(0, 1, size=(20, 2))
        assert delaunay(pts).triangles == delaunay(pts.copy()).triangles

    def test_hull_coverage_triangle_count(self):
        # for n points with h on the hull and no interior degeneracies:
        # triangles = 2n - h - 2
        scipy_spatial = pytest.importorskip("scipy.spatial")
        rng = np.random.default_rng(11)
        for _ in range(10):
            pts = rng.uniform(0, 1, size=(25, 2))
            while has_cocircular_quadruple(pts, tol=1e-6):
                pts = rng.uniform(0, 1, size=(25, 2))
            h = len(scipy_spatial.ConvexHull(pts).vertices)
            assert len(delaunay(pts).triangles) == 2 * 25 - h - 2

    def test_exact_duplicate_point_is_skipped(self):
        tri = delaunay([(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (0.0, 0.0)])
        assert tri.triangles == [(0, 1, 2)]  # index 3 appears nowhere


def _generic(pts) -> bool:
    return len(pts) >= 3 and not _all_collinear(pts)


def _all_collinear(pts) -> bool:
    p0 = pts[0]
    d = pts - p0
    cross = d[:, 0, None] * d[None, :, 1] - d[:, 1, None] * d[None, :, 0]
    return np.all(np.abs(cross) < 1e-12)


class TestAdjacency:
    def test_single_triangle_all_ones(self):
        adj = adjacency_from_triangles(3, Triangulation([(0, 1, 2)]))
        assert np.array_equal(adj, np.ones((3, 3)))

    def test_two_triangles_fourteen_ones(self):
        adj = adjacency_from_triangles(4, Triangulation([(0, 1, 2), (1, 2, 3)]))
        assert adj.sum() == 14  # 5 undirected edges x2 + 4 self-loops
        assert np.array_equal(adj, adj.T)

    def test_empty_triangles_identity(self):
        assert np.array_equal(adjacency_from_triangles(3, Triangulation([])), np.eye(3))

    def test_out_of_range_index(self):
        with pytest.raises(IndexError):
            adjacency_from_triangles(3, Triangulation([(0, 1, 3)]))


def make_obs(positions, frame=0, dim=4):
    rng = np.random.default_rng(0)
    positions = np.asarray(positions, dtype=float)
    desc = rng.normal(size=(len(positions), dim))
    desc /= np.linalg.norm(desc, axis=1, keepdims=True)
    bbox = np.array(
        [
            positions[:, 0].min() - 1.0,
            positions[:, 1].min() - 1.0,
            positions[:, 0].max() + 1.0,
            positions[:, 1].max() + 1.0,
        ]
    )
    kps = [Keypoint(p, d) for p, d in zip(positions, desc)]
    return FrameObservation(frame, kps, bbox)


class TestBuildFrameGraph:
    CFG = ModelConfig(descriptor_dim=4, position_embed_dim=2, object_dim=8)

    def test_two_keypoints_fall_back_to_full(self):
        g = build_frame_graph(make_obs([[0.0, 0.0], [1.0, 1.0]]), self.CFG)
        assert np.array_equal(g.adjacency, np.ones((2, 2)))

    def test_collinear_falls_back_to_full(self):
        g = build_frame_graph(make_obs([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]), self.CFG)
        assert np.array_equal(g.adjacency, np.ones((3, 3)))

    def test_matches_compositional_oracle(self):
        pts = [[0.0, 0.0], [4.0, 0.0], [0.0, 4.0], [8.0, 8.0]]
        obs = make_obs(pts)
        g = build_frame_graph(obs, self.CFG)
        from airobject.topo_graph import normalize_positions as norm

        tri = delaunay(norm(np.asarray(pts), obs.bbox))
        assert np.array_equal(g.adjacency, adjacency_from_triangles(4, tri))

    def test_fully_connected_flag(self):
        cfg = ModelConfig(descriptor_dim=4, position_embed_dim=2, object_dim=8,
                          fully_connected=True)
        pts = np.random.default_rng(1).uniform(0, 10, size=(4, 2))
        g = build_frame_graph(make_obs(pts), cfg)
        assert np.array_equal(g.adjacency, np.ones((4, 4)))

    def test_duplicate_positions_keep_all_nodes(self):
        pts = [[1.0, 1.0], [1.0, 1.0], [4.0, 1.0], [2.0, 5.0]]
        g = build_frame_graph(make_obs(pts), self.CFG)
        assert g.n_nodes == 4
        assert np.array_equal(g.adjacency, g.adjacency.T)
        assert np.all(np.diag(g.adjacency) == 1)
        # every node is connected somewhere (dup was perturbed, not dropped)
        assert np.all(g.adjacency.sum(axis=1) >= 2)

    def test_adjacency_symmetric_with_self_loops_randomized(self):
        rng = np.random.default_rng(4)
        for _ in range(25):
            n = int(rng.integers(1, 25))
            pts = rng.uniform(0, 50, size=(n, 2))
            g = build_frame_graph(make_obs(pts), self.CFG)
            assert np.array_equal(g.adjacency, g.adjacency.T)
            assert np.all(np.diag(g.adjacency) == 1)
            assert np.abs(g.positions_norm).max() <= 1.0 + 1e-9
