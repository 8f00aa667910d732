import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import cube_mesh, fd_gradient, signed_volume, single_triangle, tetrahedron
from meshmutual.errors import DegenerateGeometryError, ParseError, StructuralError
from meshmutual.mesh import (
    MeshGraph,
    build_edge_adjacency,
    build_vertex_adjacency,
    canonical_edges,
    edge_indexer,
    load_obj,
    make_icosphere,
    validate_manifold,
    vertex_degree,
    vertex_normals,
    vertex_normals_backward,
    vertex_normals_forward,
    write_obj,
)


class TestCanonicalEdges:
    def test_tetrahedron_edge_list(self):
        mesh = tetrahedron()
        expected = np.array([(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)])
        assert np.array_equal(mesh.edges, expected)

    def test_face_order_does_not_matter(self):
        mesh = tetrahedron()
        shuffled = MeshGraph.from_faces(mesh.vertices, mesh.faces[::-1])
        assert np.array_equal(mesh.edges, shuffled.edges)

    def test_rows_sorted_and_unique(self):
        mesh = make_icosphere(1)
        e = mesh.edges
        assert np.all(e[:, 0] < e[:, 1])
        keys = e[:, 0] * mesh.n_vertices + e[:, 1]
        assert np.all(np.diff(keys) > 0)

    @settings(max_examples=25, deadline=None)
    @given(st.randoms(use_true_random=False))
    def test_invariant_under_face_permutation_and_rotation(self, rnd):
        mesh = make_icosphere(0)
        faces = mesh.faces.copy()
        perm = list(range(len(faces)))
        rnd.shuffle(perm)
        faces = faces[perm]
        rolls = [rnd.randrange(3) for _ in range(len(faces))]
        faces = np.stack([np.roll(f, r) for f, r in zip(faces, rolls)])
        assert np.array_equal(canonical_edges(faces), mesh.edges)


class TestMeshGraphConstruction:
    def test_rejects_out_of_range_faces(self):
        with pytest.raises(StructuralError, match="out of range"):
            MeshGraph.from_faces(np.zeros((3, 3)), np.array([(0, 1, 3)]))

    def test_rejects_repeated_vertex_in_face(self):
        with pytest.raises(StructuralError, match="repeats"):
            MeshGraph.from_faces(np.zeros((3, 3)), np.array([(0, 1, 1)]))

    def test_rejects_non_finite_vertices(self):
        v = np.zeros((3, 3))
        v[1, 2] = np.nan
        with pytest.raises(StructuralError, match="non-finite"):
            MeshGraph.from_faces(v, np.array([(0, 1, 2)]))

    def test_rejects_bad_shapes(self):
        with pytest.raises(StructuralError):
            MeshGraph.from_faces(np.zeros((3, 2)), np.array([(0, 1, 2)]))
        with pytest.raises(StructuralError):
            MeshGraph.from_faces(np.zeros((4, 3)), np.array([(0, 1, 2, 3)]))

    def test_arrays_are_read_only(self):
        mesh = tetrahedron()
        with pytest.raises(ValueError):
            mesh.vertices[0, 0] = 5.0
        with pytest.raises(ValueError):
            mesh.faces[0, 0] = 2

    def test_with_vertices_shares_topology(self):
        mesh = tetrahedron()
        moved = mesh.with_vertices(mesh.vertices * 2.0, role="body")
        assert moved.faces is mesh.faces
        assert moved.edges is mesh.edges
        assert moved.role == "body"
        with pytest.raises(StructuralError):
            mesh.with_vertices(np.zeros((5, 3)))


class TestValidateManifold:
    def test_closed_meshes_pass(self):
        for mesh in (tetrahedron(), cube_mesh(), make_icosphere(0), make_icosphere(2)):
            report = validate_manifold(mesh)
            assert report.passed
            assert report.violations == ()

    def test_single_triangle_has_boundary_edges(self):
        report = validate_manifold(single_triangle())
        kinds = [v["kind"] for v in report.violations]
        assert not report.passed
        assert kinds.count("boundary_edge") == 3

    def test_fin_is_nonmanifold(self):
        base = tetrahedron()
        vertices = np.vstack([base.vertices, [(0.0, 0.0, 2.0)]])
        faces = np.vstack([base.faces, [(0, 1, 4)]])
        report = validate_manifold(MeshGraph.from_faces(vertices, faces))
        assert not report.passed
        assert {"kind": "nonmanifold_edge", "indices": [0, 1]} in [dict(v) for v in report.violations]

    def test_duplicate_face_detected(self):
        base = tetrahedron()
        faces = np.vstack([base.faces, base.faces[:1]])
        report = validate_manifold(MeshGraph.from_faces(base.vertices, faces))
        kinds = {v["kind"] for v in report.violations}
        assert "duplicate_face" in kinds

    def test_flipped_face_breaks_winding(self):
        base = tetrahedron()
        faces = base.faces.copy()
        faces[0] = faces[0][::-1]
        report = validate_manifold(MeshGraph.from_faces(base.vertices, faces))
        kinds = [v["kind"] for v in report.violations]
        assert kinds.count("inconsistent_winding") == 3

    def test_isolated_vertex_detected(self):
        base = tetrahedron()
        vertices = np.vstack([base.vertices, [(9.0, 9.0, 9.0)]])
        report = validate_manifold(MeshGraph.from_faces(vertices, base.faces))
        assert {"kind": "isolated_vertex", "indices": [4]} in [dict(v) for v in report.violations]

    def test_report_json_schema(self):
        report = validate_manifold(single_triangle())
        payload = json.loads(report.to_json())
        assert set(payload) == {"pass", "violations"}
        assert payload["pass"] is False
        for v in payload["violations"]:
            assert set(v) == {"kind", "indices"}
            assert all(isinstance(i, int) for i in v["indices"])
        ok = json.loads(validate_manifold(tetrahedron()).to_json())
        assert ok == {"pass": True, "violations": []}


class TestVertexAdjacency:
    def test_k3_rows(self):
        dense = build_vertex_adjacency(single_triangle()).toarray()
        assert np.allclose(dense, np.full((3, 3), 1.0 / 3.0), atol=1e-15)

    def test_tetrahedron_moves_to_centroids(self):
        mesh = tetrahedron()
        dense = build_vertex_adjacency(mesh).toarray()
        # Oracle: explicit centroid of each vertex and its neighbours.
        expected = np.zeros((4, 3))
        for i in range(4):
            neigh = [j for j in range(4) if j != i]  # K4 graph
            expected[i] = (mesh.vertices[i] + mesh.vertices[neigh].sum(axis=0)) / 4.0
        assert np.allclose(dense @ mesh.vertices, expected, atol=1e-15)

    def test_rows_sum_to_one(self):
        for sub in (0, 1, 2):
            adj = build_vertex_adjacency(make_icosphere(sub))
            sums = np.asarray(adj.sum(axis=1)).reshape(-1)
            assert np.max(np.abs(sums - 1.0)) < 1e-12

    def test_icosahedron_row_values(self):
        adj = build_vertex_adjacency(make_icosphere(0)).toarray()
        # every icosahedron vertex has degree 5
        for row in adj:
            nz = row[row != 0]
            assert len(nz) == 6
            assert np.allclose(nz, 1.0 / 6.0)


def brute_force_edge_adjacency(mesh):
    """Independent oracle: per edge, walk its two incident faces (ascending
    face index) from the shared edge in winding order."""
    lookup = {}
    for idx, (a, b) in enumerate(mesh.edges):
        lookup[(int(a), int(b))] = idx

    def eid(a, b):
        return lookup[(min(a, b), max(a, b))]

    incident = {}
    for fi, (v0, v1, v2) in enumerate(mesh.faces):
        for a, b in ((v0, v1), (v1, v2), (v2, v0)):
            incident.setdefault(eid(int(a), int(b)), []).append(fi)

    neighbors = np.zeros((mesh.n_edges, 4), dtype=np.int64)
    for e in range(mesh.n_edges):
        cols = []
        for fi in sorted(incident[e]):
            cyc = [tuple(mesh.faces[fi][[k, (k + 1) % 3]]) for k in range(3)]
            start = next(k for k, (a, b) in enumerate(cyc) if eid(int(a), int(b)) == e)
            for step in (1, 2):
                a, b = cyc[(start + step) % 3]
                cols.append(eid(int(a), int(b)))
        neighbors[e] = cols
    return neighbors


class TestEdgeAdjacency:
    def test_tetrahedron_neighbor_sets(self):
        mesh = tetrahedron()
        adj = build_edge_adjacency(mesh)
        for e, (a, b) in enumerate(mesh.edges):
            neigh = adj.neighbors[e]
            assert len(set(neigh.tolist())) == 4
            assert e not in neigh
            # each neighbour shares exactly one endpoint with (a, b)
            for ne in neigh:
                shared = {int(a), int(b)} & set(mesh.edges[ne].tolist())
                assert len(shared) == 1
        # for edge (0, 1): every edge touching 0 or 1 except (0, 1) itself
        e01 = edge_indexer(mesh)(np.array([[0, 1]]))[0]
        expected = {
            i for i, (a, b) in enumerate(mesh.edges)
            if i != e01 and ({int(a), int(b)} & {0, 1})
        }
        assert set(adj.neighbors[e01].tolist()) == expected

    @pytest.mark.parametrize("sub", [0, 1])
    def test_matches_brute_force(self, sub):
        mesh = make_icosphere(sub)
        adj = build_edge_adjacency(mesh)
        assert np.array_equal(adj.neighbors, brute_force_edge_adjacency(mesh))

    def test_every_edge_has_four_neighbors(self):
        mesh = make_icosphere(2)
        adj = build_edge_adjacency(mesh)
        assert adj.neighbors.shape == (mesh.n_edges, 4)
        assert np.all(adj.neighbors >= 0)
        assert np.all(adj.neighbors < mesh.n_edges)
        for e in range(0, mesh.n_edges, 37):
            assert len(set(adj.neighbors[e].tolist()) | {e}) == 5

    def test_open_mesh_rejected(self):
        with pytest.raises(StructuralError, match="borders"):
            build_edge_adjacency(single_triangle())

    def test_neighbors_read_only(self):
        adj = build_edge_adjacency(tetrahedron())
        with pytest.raises(ValueError):
            adj.neighbors[0, 0] = 1


class TestVertexNormals:
    def test_icosphere_normals_radial(self):
        mesh = make_icosphere(2)
        normals = vertex_normals(mesh)
        assert np.allclose(np.linalg.norm(normals, axis=1), 1.0, atol=1e-12)
        radial = mesh.vertices / np.linalg.norm(mesh.vertices, axis=1, keepdims=True)
        assert np.min(np.einsum("ij,ij->i", normals, radial)) > 0.999

    def test_cube_corner_normals(self):
        mesh = cube_mesh()
        normals = vertex_normals(mesh)
        # corners 6 and 0 sit on the split diagonals of all three incident
        # quads, so their area-weighted normals are exactly diagonal
        expected = np.array([1.0, 1.0, 1.0]) / np.sqrt(3.0)
        assert np.allclose(normals[6], expected, atol=1e-12)
        assert np.allclose(normals[0], -expected, atol=1e-12)

    def test_degenerate_geometry_raises(self):
        line = np.array([(0.0, 0.0, 0.0), (1.0, 0.0, 0.0), (2.0, 0.0, 0.0), (3.0, 0.0, 0.0)])
        mesh = MeshGraph.from_faces(line, np.array([(0, 1, 2), (0, 2, 3), (0, 3, 1), (1, 3, 2)]))
        with pytest.raises(DegenerateGeometryError):
            vertex_normals(mesh)

    def test_backward_matches_finite_differences(self):
        mesh = tetrahedron()
        rng = np.random.default_rng(3)
        verts = mesh.vertices + 0.1 * rng.standard_normal(mesh.vertices.shape)
        weights = rng.standard_normal((4, 3))

        def scalar(v):
            n, _ = vertex_normals_forward(v, mesh.faces)
            return float(np.sum(weights * n))

        _, cache = vertex_normals_forward(verts, mesh.faces)
        analytic = vertex_normals_backward(cache, weights)
        numeric = fd_gradient(scalar, verts.copy(), h=1e-6)
        denom = np.maximum(np.abs(analytic), np.maximum(np.abs(numeric), 1e-6))
        assert np.max(np.abs(analytic - numeric) / denom) < 1e-5


class TestIcosphere:
    def test_counts_follow_subdivision_recurrence(self):
        v, e, f = 12, 30, 20
        for sub in range(4):
            mesh = make_icosphere(sub)
            assert (mesh.n_vertices, mesh.n_edges, mesh.n_faces) == (v, e, f)
            v, e, f = v + e, 2 * e + 3 * f, 4 * f
        assert (make_icosphere(1).n_vertices, make_icosphere(2).n_vertices) == (42, 162)

    def test_unit_radius_and_outward_winding(self):
        for sub in (0, 1, 3):
            mesh = make_icosphere(sub)
            assert np.allclose(np.linalg.norm(mesh.vertices, axis=1), 1.0, atol=1e-12)
            assert signed_volume(mesh) > 0
            assert validate_manifold(mesh).passed

    def test_deterministic(self):
        a, b = make_icosphere(2), make_icosphere(2)
        assert np.array_equal(a.vertices, b.vertices)
        assert np.array_equal(a.faces, b.faces)

    @pytest.mark.parametrize("bad", [-1, 6, 2.5, "2"])
    def test_rejects_bad_subdivisions(self, bad):
        with pytest.raises(StructuralError):
            make_icosphere(bad)

    def test_vertex_degrees(self):
        deg = vertex_degree(make_icosphere(1))
        assert np.sum(deg == 5) == 12
        assert np.sum(deg == 6) == 30


class TestObjIO:
    def test_round_trip_exact(self, tmp_path):
        mesh = make_icosphere(1)
        path = tmp_path / "sphere.obj"
        write_obj(mesh, path)
        back = load_obj(path)
        assert np.array_equal(back.vertices, mesh.vertices)
        assert np.array_equal(back.faces, mesh.faces)
        assert np.array_equal(back.edges, mesh.edges)

    def test_round_trip_awkward_floats(self, tmp_path):
        rng = np.random.default_rng(0)
        verts = rng.standard_normal((4, 3)) * np.array([1e-8, 1.0, 1e8])
        mesh = tetrahedron().with_vertices(verts)
        path = tmp_path / "awkward.obj"
        write_obj(mesh, path)
        assert np.array_equal(load_obj(path).vertices, verts)

    @pytest.mark.parametrize(
        "line,fragment",
        [
            ("f 1 2 3 4", "quad"),
            ("f 1/1 2/2 3/3", "not supported"),
            ("v 0 0", "3 coordinates"),
            ("v 0 0 x", "bad vertex"),
            ("f 0 1 2", "1-based"),
            ("vn 0 0 1", "unsupported record"),
        ],
    )
    def test_parse_errors_carry_line_numbers(self, tmp_path, line, fragment):
        path = tmp_path / "bad.obj"
        path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\n" + line + "\n")
        with pytest.raises(ParseError, match="line 4") as err:
            load_obj(path)
        assert fragment in str(err.value)

    def test_out_of_range_face_is_structural(self, tmp_path):
        path = tmp_path / "range.obj"
        path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 9\n")
        with pytest.raises(StructuralError, match="out of range"):
            load_obj(path)

    def test_empty_mesh_write_rejected(self, tmp_path):
        mesh = MeshGraph.from_faces(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
        with pytest.raises(StructuralError, match="empty"):
            write_obj(mesh, tmp_path / "empty.obj")

    def test_missing_file_raises_oserror(self, tmp_path):
        with pytest.raises(OSError):
            load_obj(tmp_path / "nope.obj")

    def test_comments_and_blank_lines_ignored(self, tmp_path):
        path = tmp_path / "ok.obj"
        path.write_text("# header\n\nv 0 0 0\nv 1 0 0\nv 0 1 0\n# mid\nf 1 2 3\n")
        mesh = load_obj(path)
        assert mesh.n_vertices == 3
        assert mesh.n_faces == 1
