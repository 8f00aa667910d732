import numpy as np
import pytest

from helpers import quad_mesh, tetrahedron
from meshmutual.errors import StructuralError
from meshmutual.losses import cluster_regressor
from meshmutual.mesh import MeshGraph, make_icosphere
from meshmutual.metrics import (
    MetricConfig,
    MetricReport,
    SimilarityTransform,
    evaluate_pair,
    mpjpe,
    mvpe,
    normal_map_metrics,
    pa_mpjpe,
    point_to_surface,
    procrustes_align,
    sample_surface,
    surface_distances,
)
from meshmutual.raster import CameraWP, fit_camera


def random_rotation(rng):
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 2] *= -1.0
    return q


def oracle_point_triangle(p, a, b, c):
    # project onto the plane, test barycentrics, else clamp to the edges
    e1, e2 = b - a, c - a
    n = np.cross(e1, e2)
    n = n / np.linalg.norm(n)
    q = p - ((p - a) @ n) * n
    gram = np.array([[e1 @ e1, e1 @ e2], [e1 @ e2, e2 @ e2]])
    u, v = np.linalg.solve(gram, np.array([(q - a) @ e1, (q - a) @ e2]))
    if u >= 0 and v >= 0 and u + v <= 1:
        return float(np.linalg.norm(p - (a + u * e1 + v * e2)))

    def seg(s, t):
        d = t - s
        tau = np.clip(((p - s) @ d) / (d @ d), 0.0, 1.0)
        return float(np.linalg.norm(p - (s + tau * d)))

    return min(seg(a, b), seg(b, c), seg(c, a))


class TestPointMetrics:
    def test_identical(self):
        pts = np.random.default_rng(0).random((14, 3))
        assert mpjpe(pts, pts) == 0.0
        assert mvpe(pts, pts) == 0.0

    def test_uniform_offset_three_four_five(self):
        pts = np.random.default_rng(1).random((9, 3))
        assert abs(mpjpe(pts + [3.0, 4.0, 0.0], pts) - 5.0) < 1e-12

    def test_matches_direct_loop(self):
        rng = np.random.default_rng(2)
        a, b = rng.random((11, 3)), rng.random((11, 3))
        direct = sum(float(np.linalg.norm(x - y)) for x, y in zip(a, b)) / 11
        assert abs(mpjpe(a, b) - direct) < 1e-12

    def test_count_mismatch(self):
        with pytest.raises(StructuralError, match="mismatch"):
            mpjpe(np.zeros((3, 3)), np.zeros((4, 3)))


class TestProcrustes:
    def test_identity(self):
        x = np.random.default_rng(3).random((8, 3))
        t = procrustes_align(x, x)
        assert np.allclose(t.rotation, np.eye(3), atol=1e-9)
        assert abs(t.scale - 1.0) < 1e-9
        assert np.allclose(t.translation, 0.0, atol=1e-9)

    def test_recovers_known_similarity(self):
        rng = np.random.default_rng(4)
        x = rng.random((12, 3))
        rot = random_rotation(rng)
        shift = rng.random(3)
        y = 2.0 * x @ rot.T + shift
        t = procrustes_align(x, y)
        assert np.allclose(t.rotation, rot, atol=1e-9)
        assert abs(t.scale - 2.0) < 1e-9
        assert np.allclose(t.translation, shift, atol=1e-9)
        assert np.allclose(t.apply(x), y, atol=1e-9)

    def test_beats_random_search(self):
        rng = np.random.default_rng(5)
        x, y = rng.random((10, 3)), rng.random((10, 3))
        t = procrustes_align(x, y)
        best = float(((t.apply(x) - y) ** 2).sum())
        rots = np.linalg.qr(rng.standard_normal((10_000, 3, 3)))[0]
        flip = np.linalg.det(rots) < 0
        rots[flip, :, 2] *= -1.0
        scales = rng.uniform(0.3, 3.0, 10_000)
        shifts = rng.standard_normal((10_000, 3))
        cand = scales[:, None, None] * np.einsum("nij,kj->nki", rots, x) + shifts[:, None, :]
        sse = ((cand - y[None]) ** 2).sum(axis=(1, 2))
        assert best <= float(sse.min()) + 1e-9

    def test_proper_rotation_even_for_reflected_target(self):
        rng = np.random.default_rng(6)
        x = rng.random((10, 3))
        y = x * [1.0, 1.0, -1.0]
        t = procrustes_align(x, y)
        assert abs(np.linalg.det(t.rotation) - 1.0) < 1e-9

    def test_collinear_rejected(self):
        line = np.outer(np.arange(5, dtype=np.float64), [1.0, 2.0, 3.0])
        with pytest.raises(StructuralError, match="rank-deficient"):
            procrustes_align(line, line + 1.0)

    def test_too_few_points(self):
        with pytest.raises(StructuralError, match="at least 3"):
            procrustes_align(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_transform_validation(self):
        with pytest.raises(StructuralError, match="orthonormal"):
            SimilarityTransform(np.eye(3) * 2.0, 1.0, np.zeros(3))
        with pytest.raises(StructuralError, match="determinant"):
            SimilarityTransform(np.diag([1.0, 1.0, -1.0]), 1.0, np.zeros(3))
        with pytest.raises(StructuralError, match="positive"):
            SimilarityTransform(np.eye(3), -1.0, np.zeros(3))


class TestPaMpjpe:
    def test_similarity_invariance(self):
        rng = np.random.default_rng(7)
        gt = rng.random((13, 3))
        pred = 0.7 * gt @ random_rotation(rng).T + rng.random(3)
        assert pa_mpjpe(pred, gt) < 1e-9

    def test_matches_align_then_measure(self):
        rng = np.random.default_rng(8)
        pred, gt = rng.random((9, 3)), rng.random((9, 3))
        t = procrustes_align(pred, gt)
        assert pa_mpjpe(pred, gt) == mpjpe(t.apply(pred), gt)

    def test_alignment_never_hurts(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            pred, gt = rng.random((10, 3)), rng.random((10, 3))
            assert pa_mpjpe(pred, gt) <= mpjpe(pred, gt) + 1e-9


class TestSampling:
    def test_deterministic_and_on_surface(self):
        mesh = make_icosphere(1)
        pts = sample_surface(mesh, 500, seed=3)
        again = sample_surface(mesh, 500, seed=3)
        assert np.array_equal(pts, again)
        assert np.max(point_to_surface(pts, mesh)) < 1e-9
        other = sample_surface(mesh, 500, seed=4)
        assert not np.array_equal(pts, other)

    def test_face_order_does_not_matter(self):
        mesh = tetrahedron()
        perm = np.random.default_rng(9).permutation(mesh.faces.shape[0])
        shuffled = MeshGraph.from_faces(mesh.vertices, mesh.faces[perm])
        assert np.array_equal(sample_surface(mesh, 200, 0), sample_surface(shuffled, 200, 0))

    def test_area_uniform_on_equal_faces(self):
        # regular tetrahedron: every face should catch about a quarter
        mesh = tetrahedron()
        pts = sample_surface(mesh, 4000, seed=5)
        tri = mesh.vertices[mesh.faces]
        counts = np.zeros(4)
        for p in pts:
            d = [oracle_point_triangle(p, *tri[f]) for f in range(4)]
            counts[int(np.argmin(d))] += 1
        assert np.all(counts > 0.2 * 4000) and np.all(counts < 0.3 * 4000)


class TestPointToSurface:
    def test_analytic_single_triangle(self):
        verts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        mesh = MeshGraph.from_faces(verts, np.array([[0, 1, 2]]))
        queries = np.array(
            [
                [0.25, 0.25, 1.0],  # over the interior
                [-1.0, -1.0, 0.0],  # nearest the right-angle corner
                [0.5, -1.0, 0.0],  # nearest the bottom edge
                [1.0, 1.0, 0.0],  # nearest the hypotenuse
            ]
        )
        expected = [1.0, np.sqrt(2.0), 1.0, np.sqrt(0.5)]
        assert np.allclose(point_to_surface(queries, mesh), expected, atol=1e-12)

    def test_matches_oracle_on_random_queries(self):
        mesh = tetrahedron()
        rng = np.random.default_rng(10)
        queries = rng.uniform(-2.0, 2.0, (60, 3))
        got = point_to_surface(queries, mesh)
        tri = mesh.vertices[mesh.faces]
        expected = [
            min(oracle_point_triangle(p, *tri[f]) for f in range(tri.shape[0])) for p in queries
        ]
        assert np.allclose(got, expected, atol=1e-12)

    def test_interior_point_positive_distance(self):
        mesh = tetrahedron()
        assert point_to_surface(np.zeros((1, 3)), mesh)[0] > 0.1


class TestSurfaceDistances:
    def test_identical(self):
        mesh = make_icosphere(2)
        eps_cd, eps_p2s, eps_s2p = surface_distances(mesh, mesh, 1000, seed=0)
        assert eps_cd < 1e-9 and eps_p2s < 1e-9 and eps_s2p < 1e-9

    def test_concentric_spheres(self):
        inner = make_icosphere(3)
        outer = inner.with_vertices(inner.vertices * 1.1)
        eps_cd, eps_p2s, eps_s2p = surface_distances(outer, inner, 10_000, seed=0)
        for value in (eps_cd, eps_p2s, eps_s2p):
            assert abs(value - 0.1) < 0.002

    def test_swap_exchanges_directed_terms(self):
        a = make_icosphere(1)
        b = a.with_vertices(a.vertices * 1.2)
        cd_ab, p2s_ab, s2p_ab = surface_distances(a, b, 800, seed=1)
        cd_ba, p2s_ba, s2p_ba = surface_distances(b, a, 800, seed=1)
        assert p2s_ab == s2p_ba and s2p_ab == p2s_ba and cd_ab == cd_ba

    def test_sample_count_stability(self):
        inner = make_icosphere(2)
        outer = inner.with_vertices(inner.vertices * 1.1)
        cd1 = surface_distances(outer, inner, 2500, seed=0)[0]
        cd2 = surface_distances(outer, inner, 5000, seed=0)[0]
        assert abs(cd1 - cd2) / cd1 < 0.01

    def test_face_reorder_invariance(self):
        a = make_icosphere(1)
        b = a.with_vertices(a.vertices * 1.15)
        perm = np.random.default_rng(11).permutation(b.faces.shape[0])
        b_shuffled = MeshGraph.from_faces(b.vertices, b.faces[perm])
        assert surface_distances(a, b, 600, 2) == surface_distances(a, b_shuffled, 600, 2)


class TestNormalMapMetrics:
    def camera(self, res=64):
        return CameraWP(scale=0.8, tx=0.0, ty=0.0, width=res, height=res)

    def test_identical(self):
        mesh = make_icosphere(1)
        eps_cos, eps_l2 = normal_map_metrics(mesh, mesh, self.camera(), resolution=64)
        # self-dot of a unit fp vector sits an ulp under 1, so allow that
        assert eps_cos < 1e-12 and eps_l2 == 0.0

    def test_flipped_normals_without_facing_fixup(self):
        mesh = make_icosphere(1)
        flipped = MeshGraph.from_faces(mesh.vertices, mesh.faces[:, ::-1])
        eps_cos, eps_l2 = normal_map_metrics(
            mesh, flipped, self.camera(), resolution=64, face_camera=False
        )
        assert abs(eps_cos - 2.0) < 1e-12
        assert abs(eps_l2 - 2.0) < 1e-12

    def test_tilted_plane_sixty_degrees(self):
        flat = quad_mesh(half=0.5)
        tilted = quad_mesh(half=0.5, shear_z=np.sqrt(3.0))
        eps_cos, eps_l2 = normal_map_metrics(flat, tilted, self.camera(), resolution=64)
        assert abs(eps_cos - 0.5) < 1e-9
        assert abs(eps_l2 - 1.0) < 1e-9

    def test_all_views_empty(self):
        verts = np.array([[0.0, 0.0, 0.0], [0.5, 0.0, 0.0], [1.0, 0.0, 0.0]])
        degenerate = MeshGraph.from_faces(verts, np.array([[0, 1, 2]]))
        with pytest.raises(StructuralError, match="empty"):
            normal_map_metrics(degenerate, degenerate, self.camera(), resolution=32)


class TestEvaluatePair:
    def small_cfg(self):
        return MetricConfig(n_samples=400, seed=0, normal_resolution=64)

    def test_identical_pair_all_zero(self):
        mesh = make_icosphere(1)
        reg = cluster_regressor(mesh.vertices, 4)
        report = evaluate_pair(mesh, mesh, reg, self.small_cfg())
        assert report.mvpe == 0.0
        assert report.mpjpe == 0.0 and report.pa_mpjpe < 1e-9
        assert report.eps_cd < 1e-9 and report.eps_cos < 1e-12
        assert report.has_joints

    def test_missing_regressor_flags_joints_off(self):
        mesh = make_icosphere(1)
        report = evaluate_pair(mesh, mesh, None, self.small_cfg())
        assert not report.has_joints
        assert report.mpjpe is None and report.pa_mpjpe is None
        blob = report.to_json()
        assert blob["mpjpe"] is None and blob["has_joints"] is False

    def test_matches_individually_computed_metrics(self):
        gt = make_icosphere(1)
        recon = gt.with_vertices(gt.vertices * 1.1)
        reg = cluster_regressor(gt.vertices, 4)
        cfg = self.small_cfg()
        report = evaluate_pair(recon, gt, reg, cfg)
        assert report.mvpe == mvpe(recon.vertices, gt.vertices)
        assert report.mpjpe == mpjpe(reg.joints(recon.vertices), reg.joints(gt.vertices))
        assert report.eps_cd == surface_distances(recon, gt, cfg.n_samples, cfg.seed)[0]
        both = np.vstack([recon.vertices, gt.vertices])
        cam = fit_camera(both, cfg.normal_resolution, cfg.normal_resolution)
        assert (report.eps_cos, report.eps_l2) == normal_map_metrics(
            recon, gt, cam, cfg.normal_resolution
        )

    def test_sections_can_be_disabled(self):
        mesh = make_icosphere(0)
        cfg = MetricConfig(n_samples=50, normal_resolution=32, with_surface=False, with_normals=False)
        report = evaluate_pair(mesh, mesh, None, cfg)
        assert report.eps_cd is None and report.eps_cos is None
        assert report.mvpe == 0.0

    def test_config_validation(self):
        with pytest.raises(StructuralError, match="n_samples"):
            MetricConfig(n_samples=0)
        with pytest.raises(StructuralError, match="normal_resolution"):
            MetricConfig(normal_resolution=4)

    def test_report_rejects_negative(self):
        with pytest.raises(StructuralError, match="finite"):
            MetricReport(
                mvpe=-1.0, mpjpe=None, pa_mpjpe=None, eps_cd=None, eps_p2s=None,
                eps_s2p=None, eps_cos=None, eps_l2=None, has_joints=False,
                n_samples=10, normal_resolution=64, seed=0,
            )
