"""Shared fixtures-as-functions for the test suite.

Small canonical meshes with hand-verified winding, plus a central
finite-difference helper used by the gradient tests.
"""

from __future__ import annotations

import numpy as np

from meshmutual.mesh import MeshGraph


def tetrahedron() -> MeshGraph:
    """Regular tetrahedron on alternating cube corners, outward CCW faces."""
    vertices = np.array(
        [
            (1.0, 1.0, 1.0),
            (1.0, -1.0, -1.0),
            (-1.0, 1.0, -1.0),
            (-1.0, -1.0, 1.0),
        ]
    )
    faces = np.array([(0, 1, 2), (0, 2, 3), (0, 3, 1), (1, 3, 2)])
    return MeshGraph.from_faces(vertices, faces)


def cube_mesh() -> MeshGraph:
    """Axis-aligned cube [-1, 1]^3, triangulated so the quads touching
    corners 0 and 6 are split along diagonals through those corners."""
    vertices = np.array(
        [
            (-1.0, -1.0, -1.0),
            (1.0, -1.0, -1.0),
            (1.0, 1.0, -1.0),
            (-1.0, 1.0, -1.0),
            (-1.0, -1.0, 1.0),
            (1.0, -1.0, 1.0),
            (1.0, 1.0, 1.0),
            (-1.0, 1.0, 1.0),
        ]
    )
    faces = np.array(
        [
            (4, 5, 6), (4, 6, 7),  # z = +1
            (0, 3, 2), (0, 2, 1),  # z = -1
            (1, 2, 6), (1, 6, 5),  # x = +1
            (0, 4, 7), (0, 7, 3),  # x = -1
            (2, 3, 6), (3, 7, 6),  # y = +1
            (0, 1, 5), (0, 5, 4),  # y = -1
        ]
    )
    return MeshGraph.from_faces(vertices, faces)


def single_triangle() -> MeshGraph:
    vertices = np.array([(0.0, 0.0, 0.0), (1.0, 0.0, 0.0), (0.0, 1.0, 0.0)])
    return MeshGraph.from_faces(vertices, np.array([(0, 1, 2)]))


def quad_mesh(half: float = 0.5, shear_z: float = 0.0, z: float = 0.0) -> MeshGraph:
    """Two triangles forming the square [-half, half]^2 in the z=z plane.

    shear_z adds shear_z * y to each vertex's z coordinate, tilting the
    plane about the x axis while leaving its projected footprint alone.
    Winding faces +z so the rasterizer sees the front side at view 0.
    """
    vertices = np.array(
        [
            (-half, -half, z - shear_z * half),
            (half, -half, z - shear_z * half),
            (half, half, z + shear_z * half),
            (-half, half, z + shear_z * half),
        ]
    )
    faces = np.array([(0, 1, 2), (0, 2, 3)])
    return MeshGraph.from_faces(vertices, faces)


def signed_volume(mesh: MeshGraph) -> float:
    v = mesh.vertices
    f = mesh.faces
    return float(np.sum(np.einsum("ij,ij->i", v[f[:, 0]], np.cross(v[f[:, 1]], v[f[:, 2]]))) / 6.0)


def fd_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar f at x, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g
