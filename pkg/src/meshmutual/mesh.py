"""Triangular 2-manifold mesh graphs and their adjacency machinery.

Every mesh in the deform-then-refine pipeline uses the same representation:
float64 vertex positions, integer triangle faces with counter-clockwise
(outward) winding, and a canonical edge set derived purely from the face
list. Deformation moves vertices and never touches topology, so a template
and every mesh produced from it share one edge indexing and one adjacency
structure.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .errors import DegenerateGeometryError, ParseError, StructuralError

# Roles a mesh can play in the pipeline. Purely informational; no operation
# branches on the role.
ROLES = ("template", "body", "surface", "ground_truth", "generic")


def canonical_edges(faces: np.ndarray) -> np.ndarray:
    """Return the canonical (E, 2) edge array for a triangle list.

    Each undirected edge appears once as (min, max) and rows are sorted
    lexicographically, so the result is a pure function of the set of
    faces. Meshes that share a face list (up to vertex motion) therefore
    share edge indices.
    """
    faces = np.asarray(faces, dtype=np.int64)
    if faces.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    pairs = faces[:, [[0, 1], [1, 2], [2, 0]]].reshape(-1, 2)
    pairs = np.sort(pairs, axis=1)
    return np.unique(pairs, axis=0)


def _freeze(a: np.ndarray) -> np.ndarray:
    # copy before locking so caller-owned buffers stay writable
    if a.flags.writeable or not a.flags.c_contiguous:
        a = np.ascontiguousarray(a).copy()
        a.setflags(write=False)
    return a


@dataclass(frozen=True)
class MeshGraph:
    """A triangle mesh with its canonical edge set.

    Instances are immutable: the arrays are marked read-only so a template,
    its deformations and any ground-truth copies can share faces and edges
    without defensive copying.
    """

    vertices: np.ndarray
    faces: np.ndarray
    edges: np.ndarray
    role: str = "generic"

    def __post_init__(self):
        object.__setattr__(self, "vertices", _freeze(np.asarray(self.vertices, dtype=np.float64)))
        object.__setattr__(self, "faces", _freeze(np.asarray(self.faces, dtype=np.int64)))
        object.__setattr__(self, "edges", _freeze(np.asarray(self.edges, dtype=np.int64)))

    @classmethod
    def from_faces(cls, vertices, faces, role: str = "generic") -> "MeshGraph":
        """Build a mesh from vertices and faces, deriving the edge set."""
        vertices = np.asarray(vertices, dtype=np.float64)
        faces = np.asarray(faces, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise StructuralError(f"vertices must be (V, 3), got {vertices.shape}")
        if not np.all(np.isfinite(vertices)):
            raise StructuralError("vertices contain non-finite values")
        if faces.size and (faces.ndim != 2 or faces.shape[1] != 3):
            raise StructuralError(f"faces must be (F, 3), got {faces.shape}")
        if faces.size == 0:
            faces = faces.reshape(0, 3)
        if faces.size:
            if faces.min() < 0 or faces.max() >= len(vertices):
                raise StructuralError("face indices out of range")
            # A face with a repeated vertex has no well-defined edge set.
            same = (faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2]) | (faces[:, 0] == faces[:, 2])
            if same.any():
                bad = int(np.nonzero(same)[0][0])
                raise StructuralError(f"face {bad} repeats a vertex index")
        if role not in ROLES:
            raise StructuralError(f"unknown role {role!r}")
        return cls(vertices, faces, canonical_edges(faces), role)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]

    def with_vertices(self, vertices, role: str | None = None) -> "MeshGraph":
        """Same topology (shared face/edge arrays), new vertex positions."""
        vertices = np.asarray(vertices, dtype=np.float64)
        if vertices.shape != self.vertices.shape:
            raise StructuralError(
                f"vertex array shape {vertices.shape} does not match {self.vertices.shape}"
            )
        if not np.all(np.isfinite(vertices)):
            raise StructuralError("vertices contain non-finite values")
        return MeshGraph(vertices, self.faces, self.edges, role or self.role)


@dataclass(frozen=True)
class ValidationReport:
    """Outcome of a manifold check: a verdict plus the violations found."""

    passed: bool
    violations: tuple = field(default_factory=tuple)

    def to_json(self) -> str:
        return json.dumps(
            {"pass": self.passed, "violations": [dict(v) for v in self.violations]},
            sort_keys=True,
        )


def validate_manifold(mesh: MeshGraph) -> ValidationReport:
    """Check that a mesh is a closed, consistently wound 2-manifold.

    Violation kinds reported:

    - ``duplicate_face``: two faces over the same vertex set
    - ``boundary_edge``: an edge bordered by exactly one face
    - ``nonmanifold_edge``: an edge bordered by three or more faces
    - ``inconsistent_winding``: a directed edge used twice in the same
      direction (neighbouring faces disagree on orientation)
    - ``isolated_vertex``: a vertex used by no face

    ``indices`` holds vertex indices for edge/vertex kinds and face
    indices for face kinds.
    """
    violations = []
    faces = mesh.faces

    if faces.size:
        sorted_faces = np.sort(faces, axis=1)
        _, first, counts = np.unique(sorted_faces, axis=0, return_index=True, return_counts=True)
        for idx in first[counts > 1]:
            violations.append({"kind": "duplicate_face", "indices": [int(idx)]})

        directed = faces[:, [[0, 1], [1, 2], [2, 0]]].reshape(-1, 2)
        und = np.sort(directed, axis=1)
        uniq, inv, counts = np.unique(und, axis=0, return_inverse=True, return_counts=True)
        for a, b in uniq[counts == 1]:
            violations.append({"kind": "boundary_edge", "indices": [int(a), int(b)]})
        for a, b in uniq[counts > 2]:
            violations.append({"kind": "nonmanifold_edge", "indices": [int(a), int(b)]})

        # Consistent winding means the two faces sharing an edge traverse it
        # in opposite directions, so each *directed* edge appears once.
        duniq, dcounts = np.unique(directed, axis=0, return_counts=True)
        seen = set()
        for a, b in duniq[dcounts > 1]:
            key = (min(a, b), max(a, b))
            if key not in seen:
                seen.add(key)
                violations.append({"kind": "inconsistent_winding", "indices": [int(key[0]), int(key[1])]})

    used = np.zeros(mesh.n_vertices, dtype=bool)
    if faces.size:
        used[faces.reshape(-1)] = True
    for v in np.nonzero(~used)[0]:
        violations.append({"kind": "isolated_vertex", "indices": [int(v)]})

    return ValidationReport(passed=not violations, violations=tuple(violations))


def vertex_degree(mesh: MeshGraph) -> np.ndarray:
    """Number of edges incident to each vertex."""
    deg = np.zeros(mesh.n_vertices, dtype=np.int64)
    if mesh.edges.size:
        deg += np.bincount(mesh.edges[:, 0], minlength=mesh.n_vertices)
        deg += np.bincount(mesh.edges[:, 1], minlength=mesh.n_vertices)
    return deg


def build_vertex_adjacency(mesh: MeshGraph) -> sparse.csr_array:
    """Row-stochastic vertex averaging operator with self-loops.

    Row i holds 1 / (deg(i) + 1) on the diagonal and on every neighbour
    column, so applying it to vertex positions moves each vertex to the
    centroid of itself and its neighbours.
    """
    n = mesh.n_vertices
    deg = vertex_degree(mesh)
    rows = np.concatenate([mesh.edges[:, 0], mesh.edges[:, 1], np.arange(n)])
    cols = np.concatenate([mesh.edges[:, 1], mesh.edges[:, 0], np.arange(n)])
    vals = 1.0 / (deg + 1.0)[rows]
    return sparse.csr_array((vals, (rows, cols)), shape=(n, n))


def edge_indexer(mesh: MeshGraph):
    """Return a function mapping vertex pairs (a, b) to canonical edge ids.

    Works on arrays of pairs; order of a and b does not matter.
    """
    n = mesh.n_vertices
    keys = mesh.edges[:, 0] * n + mesh.edges[:, 1]  # ascending by construction

    def lookup(pairs: np.ndarray) -> np.ndarray:
        pairs = np.asarray(pairs, dtype=np.int64)
        lo = np.minimum(pairs[..., 0], pairs[..., 1])
        hi = np.maximum(pairs[..., 0], pairs[..., 1])
        q = lo * n + hi
        pos = np.searchsorted(keys, q)
        if np.any(pos >= len(keys)) or np.any(keys[np.minimum(pos, len(keys) - 1)] != q):
            raise StructuralError("vertex pair is not an edge of the mesh")
        return pos

    return lookup


@dataclass(frozen=True)
class EdgeAdjacency:
    """For every edge, its four neighbouring edges in winding order.

    Columns 0 and 1 are the other two edges of the first incident face
    (lower face index), columns 2 and 3 the other two edges of the second,
    each pair listed in the face's winding order starting from the shared
    edge.
    """

    neighbors: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "neighbors", _freeze(np.asarray(self.neighbors, dtype=np.int64)))

    @property
    def n_edges(self) -> int:
        return self.neighbors.shape[0]


def build_edge_adjacency(mesh: MeshGraph) -> EdgeAdjacency:
    """Compute the 4-neighbourhood of every edge of a closed manifold mesh.

    Raises StructuralError when some edge is not bordered by exactly two
    faces, since the 4-neighbourhood is undefined there.
    """
    faces = mesh.faces
    E = mesh.n_edges
    if E == 0:
        return EdgeAdjacency(np.zeros((0, 4), dtype=np.int64))
    lookup = edge_indexer(mesh)
    # eid[f, s] is the edge of face f whose directed form starts at slot s.
    directed = faces[:, [[0, 1], [1, 2], [2, 0]]]
    eid = lookup(directed.reshape(-1, 2)).reshape(-1, 3)

    flat = eid.reshape(-1)
    order = np.argsort(flat, kind="stable")  # face-major within each edge
    counts = np.bincount(flat, minlength=E)
    if not np.all(counts == 2):
        bad = int(np.nonzero(counts != 2)[0][0])
        a, b = mesh.edges[bad]
        raise StructuralError(
            f"edge ({a}, {b}) borders {counts[bad]} faces; edge adjacency needs a closed manifold"
        )
    occ = order.reshape(E, 2)  # two (face*3 + slot) entries per edge, face index ascending
    f = occ // 3
    s = occ % 3
    neighbors = np.empty((E, 4), dtype=np.int64)
    # Walk each incident face from the shared edge in winding order.
    neighbors[:, 0] = eid[f[:, 0], (s[:, 0] + 1) % 3]
    neighbors[:, 1] = eid[f[:, 0], (s[:, 0] + 2) % 3]
    neighbors[:, 2] = eid[f[:, 1], (s[:, 1] + 1) % 3]
    neighbors[:, 3] = eid[f[:, 1], (s[:, 1] + 2) % 3]
    return EdgeAdjacency(neighbors)


def vertex_normals_forward(vertices: np.ndarray, faces: np.ndarray):
    """Area-weighted vertex normals plus a cache for the backward pass.

    Each face contributes its raw edge cross product (twice the face area
    times the face normal) to its three corners; the accumulated vector is
    then normalized. Raises DegenerateGeometryError when a vertex's
    contributions cancel to (numerically) zero.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    n = vertices.shape[0]
    vi = vertices[faces[:, 0]]
    e1 = vertices[faces[:, 1]] - vi
    e2 = vertices[faces[:, 2]] - vi
    cross = np.cross(e1, e2)

    acc = np.zeros((n, 3))
    for c in range(3):
        np.add.at(acc, faces[:, c], cross)
    norm = np.linalg.norm(acc, axis=1)

    mags = np.zeros(n)
    cmag = np.linalg.norm(cross, axis=1)
    for c in range(3):
        np.add.at(mags, faces[:, c], cmag)
    bad = norm <= 1e-9 * np.maximum(mags, 1e-300)
    if bad.any():
        raise DegenerateGeometryError(
            f"vertex {int(np.nonzero(bad)[0][0])} has a vanishing accumulated normal"
        )

    normals = acc / norm[:, None]
    cache = (vertices, faces, e1, e2, acc, norm, normals)
    return normals, cache


def vertex_normals_backward(cache, d_normals: np.ndarray) -> np.ndarray:
    """Gradient of a scalar wrt vertices, given its gradient wrt the normals."""
    vertices, faces, e1, e2, acc, norm, normals = cache
    # d|n|: dL/dacc = (dL/dN - N (N . dL/dN)) / |acc|
    proj = np.einsum("ij,ij->i", normals, d_normals)
    dacc = (d_normals - normals * proj[:, None]) / norm[:, None]

    g = dacc[faces[:, 0]] + dacc[faces[:, 1]] + dacc[faces[:, 2]]
    # d(e1 x e2) . g  =  de1 . (e2 x g) + de2 . (g x e1)
    de1 = np.cross(e2, g)
    de2 = np.cross(g, e1)

    dv = np.zeros_like(vertices)
    np.add.at(dv, faces[:, 0], -(de1 + de2))
    np.add.at(dv, faces[:, 1], de1)
    np.add.at(dv, faces[:, 2], de2)
    return dv


def vertex_normals(mesh: MeshGraph) -> np.ndarray:
    """Unit area-weighted vertex normals of a mesh, shape (V, 3)."""
    normals, _ = vertex_normals_forward(mesh.vertices, mesh.faces)
    return normals


# Icosahedron over the golden ratio, unit-normalized. The face list is the
# standard outward counter-clockwise tiling.
_ICO_FACES = np.array(
    [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ],
    dtype=np.int64,
)


def _ico_vertices() -> np.ndarray:
    t = (1.0 + np.sqrt(5.0)) / 2.0
    v = np.array(
        [
            (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
            (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
            (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
        ],
        dtype=np.float64,
    )
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def make_icosphere(subdivisions: int, role: str = "template") -> MeshGraph:
    """Unit icosphere via midpoint subdivision of an icosahedron.

    subdivisions=0 gives the icosahedron (12 vertices, 30 edges, 20
    faces); each level splits every face in four and reprojects the new
    midpoints onto the unit sphere. Levels above 5 are refused: the vertex
    count grows fourfold per level and everything here is desk-scale.
    """
    if not isinstance(subdivisions, (int, np.integer)) or isinstance(subdivisions, bool):
        raise StructuralError("subdivisions must be an integer")
    if subdivisions < 0 or subdivisions > 5:
        raise StructuralError(f"subdivisions must be in [0, 5], got {subdivisions}")

    verts = list(_ico_vertices())
    faces = _ICO_FACES
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            idx = cache.get(key)
            if idx is None:
                m = verts[a] + verts[b]
                m = m / np.linalg.norm(m)
                idx = len(verts)
                verts.append(m)
                cache[key] = idx
            return idx

        new_faces = np.empty((len(faces) * 4, 3), dtype=np.int64)
        for i, (a, b, c) in enumerate(faces):
            ab = midpoint(a, b)
            bc = midpoint(b, c)
            ca = midpoint(c, a)
            new_faces[4 * i + 0] = (a, ab, ca)
            new_faces[4 * i + 1] = (b, bc, ab)
            new_faces[4 * i + 2] = (c, ca, bc)
            new_faces[4 * i + 3] = (ab, bc, ca)
        faces = new_faces

    return MeshGraph.from_faces(np.array(verts), faces, role=role)


def load_obj(path, role: str = "generic") -> MeshGraph:
    """Read a mesh from a strict Wavefront OBJ subset.

    Only ``v x y z`` and ``f i j k`` records (1-based indices), comments
    and blank lines are accepted. Slash-annotated face entries and
    non-triangle faces are rejected with the offending line number.
    """
    vertices = []
    faces = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError:
        raise
    for ln, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] == "v":
            if len(parts) != 4:
                raise ParseError(f"vertex needs 3 coordinates, got {len(parts) - 1}", line=ln)
            try:
                vertices.append([float(x) for x in parts[1:]])
            except ValueError:
                raise ParseError(f"bad vertex coordinate in {line!r}", line=ln)
        elif parts[0] == "f":
            if len(parts) == 5:
                raise ParseError("quad faces are not supported, triangulate first", line=ln)
            if len(parts) != 4:
                raise ParseError(f"face needs 3 vertex indices, got {len(parts) - 1}", line=ln)
            idx = []
            for p in parts[1:]:
                if "/" in p:
                    raise ParseError("texture/normal face indices are not supported", line=ln)
                try:
                    i = int(p)
                except ValueError:
                    raise ParseError(f"bad face index {p!r}", line=ln)
                if i <= 0:
                    raise ParseError(f"face indices are 1-based and positive, got {i}", line=ln)
                idx.append(i - 1)
            faces.append(idx)
        else:
            raise ParseError(f"unsupported record {parts[0]!r}", line=ln)
    if not vertices:
        raise StructuralError(f"{path}: no vertices")
    return MeshGraph.from_faces(np.array(vertices), np.array(faces, dtype=np.int64).reshape(-1, 3), role=role)


def write_obj(mesh: MeshGraph, path) -> None:
    """Write a mesh as OBJ. Coordinates keep full float64 round-trip precision."""
    if mesh.n_vertices == 0:
        raise StructuralError("refusing to write an empty mesh")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# {mesh.n_vertices} vertices, {mesh.n_faces} faces\n")
        for x, y, z in mesh.vertices:
            fh.write(f"v {x:.17g} {y:.17g} {z:.17g}\n")
        for a, b, c in mesh.faces:
            fh.write(f"f {a + 1} {b + 1} {c + 1}\n")
