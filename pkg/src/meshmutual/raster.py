"""Weak-perspective projection and a small deterministic software rasterizer.

Conventions, fixed across the package:

- The camera is orthographic-with-scale, looking along -z. A vertex
  (x, y, z) lands at pixel coordinates

      u = (s * x + t_x + 1) / 2 * W
      v = (1 - (s * y + t_y)) / 2 * H

  so +y in the world points up in the image and v grows downward.
- Pixel (ix, iy) covers the unit square with center (ix + 0.5, iy + 0.5);
  a pixel belongs to a triangle when its center does, with a top-left fill
  rule breaking ties so triangles sharing an edge never double-cover.
- Depth is -z of the (rotated) world point: smaller depth is nearer.
- View rotation is a yaw about the vertical (+y) axis through the mesh
  centroid; a +90 degree yaw maps +x onto -z.

Rasterization itself is treated as piecewise constant: no gradients flow
through pixel coverage. The projection has an exact hand-derived backward
pass used by the feature localization chain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometryError, StructuralError
from .imageio import read_pfm, read_pgm, write_pfm, write_pgm
from .mesh import MeshGraph


@dataclass(frozen=True)
class CameraWP:
    """Weak-perspective camera: scale, in-plane translation, resolution."""

    scale: float
    tx: float
    ty: float
    width: int
    height: int

    def __post_init__(self):
        if not np.isfinite([self.scale, self.tx, self.ty]).all():
            raise StructuralError("camera parameters must be finite")
        if self.scale <= 0:
            raise StructuralError(f"camera scale must be positive, got {self.scale}")
        if int(self.width) != self.width or int(self.height) != self.height:
            raise StructuralError("camera resolution must be integral")
        if self.width < 8 or self.height < 8:
            raise StructuralError(f"camera resolution must be at least 8x8, got {self.width}x{self.height}")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))


@dataclass(frozen=True)
class BinaryMask:
    """A strictly binary (H, W) coverage mask tagged with its view angle."""

    values: np.ndarray
    angle_deg: float = 0.0

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise StructuralError(f"mask must be 2D, got shape {v.shape}")
        if v.dtype != np.uint8:
            v = v.astype(np.uint8)
        if not np.isin(v, (0, 1)).all():
            raise StructuralError("mask values must be exactly 0 or 1")
        v = np.ascontiguousarray(v)
        if v.flags.writeable:
            v = v.copy()
            v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def shape(self):
        return self.values.shape

    def area(self) -> int:
        """Foreground pixel count."""
        return int(self.values.sum())


@dataclass(frozen=True)
class NormalMap:
    """Flat-shaded per-pixel unit normals with a foreground mask.

    Background pixels hold the zero vector; foreground normals are unit
    length to within 1e-6. Normals live in the rotated view frame, and by
    default faces are flipped toward the camera (n_z >= 0).
    """

    values: np.ndarray
    mask: BinaryMask
    angle_deg: float = 0.0

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.values, dtype=np.float64))
        if v.ndim != 3 or v.shape[2] != 3:
            raise StructuralError(f"normal map must be (H, W, 3), got {v.shape}")
        if v.shape[:2] != self.mask.shape:
            raise StructuralError("normal map and mask resolutions differ")
        fg = self.mask.values.astype(bool)
        norms = np.linalg.norm(v[fg], axis=-1)
        if norms.size and np.max(np.abs(norms - 1.0)) > 1e-6:
            raise StructuralError("foreground normals must be unit length")
        if np.any(v[~fg] != 0.0):
            raise StructuralError("background of a normal map must be zero")
        if v.flags.writeable:
            v = v.copy()
            v.setflags(write=False)
        object.__setattr__(self, "values", v)


def project_forward(vertices: np.ndarray, cam: CameraWP):
    """Project (N, 3) points to continuous pixel coordinates (N, 2).

    Returns (uv, cache); the cache feeds project_backward.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    u = (cam.scale * vertices[:, 0] + cam.tx + 1.0) / 2.0 * cam.width
    v = (1.0 - (cam.scale * vertices[:, 1] + cam.ty)) / 2.0 * cam.height
    uv = np.stack([u, v], axis=1)
    return uv, (vertices, cam)


def project_backward(cache, d_uv: np.ndarray):
    """Backward pass of project_forward.

    Returns (d_vertices, d_cam) where d_cam stacks (d_scale, d_tx, d_ty).
    The z column of d_vertices is zero: depth does not move pixels.
    """
    vertices, cam = cache
    d_uv = np.asarray(d_uv, dtype=np.float64)
    du, dv = d_uv[:, 0], d_uv[:, 1]
    d_vertices = np.zeros_like(vertices)
    d_vertices[:, 0] = du * (cam.scale * cam.width / 2.0)
    d_vertices[:, 1] = dv * (-cam.scale * cam.height / 2.0)
    d_scale = float(np.sum(du * vertices[:, 0] * cam.width / 2.0)
                    - np.sum(dv * vertices[:, 1] * cam.height / 2.0))
    d_tx = float(np.sum(du) * cam.width / 2.0)
    d_ty = float(-np.sum(dv) * cam.height / 2.0)
    return d_vertices, np.array([d_scale, d_tx, d_ty])


def project_vertices(vertices: np.ndarray, cam: CameraWP) -> np.ndarray:
    uv, _ = project_forward(vertices, cam)
    return uv


def _yaw_matrix(angle_deg: float) -> np.ndarray:
    # exact entries at the canonical quarter turns so edge-on views
    # rasterize as truly degenerate
    a = float(angle_deg) % 360.0
    quarter = {0.0: (1.0, 0.0), 90.0: (0.0, 1.0), 180.0: (-1.0, 0.0), 270.0: (0.0, -1.0)}
    if a in quarter:
        c, s = quarter[a]
    else:
        rad = np.deg2rad(a)
        c, s = np.cos(rad), np.sin(rad)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotate_view(mesh: MeshGraph, angle_deg: float) -> MeshGraph:
    """Yaw the mesh about the vertical axis through its vertex centroid."""
    c = mesh.vertices.mean(axis=0)
    R = _yaw_matrix(angle_deg)
    return mesh.with_vertices((mesh.vertices - c) @ R.T + c)


def _edge_accepts_zero(dx: float, dy: float) -> bool:
    # top-left rule for interior-positive edge functions in y-down coords
    return (dy == 0.0 and dx > 0.0) or dy < 0.0


def _rasterize(mesh: MeshGraph, cam: CameraWP, angle_deg: float = 0.0):
    """Shared z-buffered coverage pass.

    Returns (mask_bool, face_id, depth, rotated_mesh); face_id is -1 on
    background. Projected triangles with exactly zero signed area are
    skipped. Ties in depth keep the lower face index.
    """
    if mesh.n_faces == 0:
        raise StructuralError("cannot rasterize a mesh with no faces")
    rotated = rotate_view(mesh, angle_deg) if angle_deg != 0.0 else mesh
    uv = project_vertices(rotated.vertices, cam)
    depth_v = -rotated.vertices[:, 2]

    H, W = cam.height, cam.width
    face_id = np.full((H, W), -1, dtype=np.int64)
    zbuf = np.full((H, W), np.inf)

    for f, tri in enumerate(rotated.faces):
        pa, pb, pc = uv[tri[0]], uv[tri[1]], uv[tri[2]]
        za, zb, zc = depth_v[tri[0]], depth_v[tri[1]], depth_v[tri[2]]
        area2 = (pb[0] - pa[0]) * (pc[1] - pa[1]) - (pb[1] - pa[1]) * (pc[0] - pa[0])
        if area2 == 0.0:
            continue
        if area2 < 0.0:
            pb, pc = pc, pb
            zb, zc = zc, zb
            area2 = -area2

        lo_x = max(0, int(np.floor(min(pa[0], pb[0], pc[0]) - 0.5)))
        hi_x = min(W - 1, int(np.ceil(max(pa[0], pb[0], pc[0]) - 0.5)))
        lo_y = max(0, int(np.floor(min(pa[1], pb[1], pc[1]) - 0.5)))
        hi_y = min(H - 1, int(np.ceil(max(pa[1], pb[1], pc[1]) - 0.5)))
        if lo_x > hi_x or lo_y > hi_y:
            continue

        px = np.arange(lo_x, hi_x + 1) + 0.5
        py = (np.arange(lo_y, hi_y + 1) + 0.5)[:, None]

        inside = np.ones((hi_y - lo_y + 1, hi_x - lo_x + 1), dtype=bool)
        w = np.empty((3, hi_y - lo_y + 1, hi_x - lo_x + 1))
        for k, (p0, p1) in enumerate(((pb, pc), (pc, pa), (pa, pb))):
            dx = p1[0] - p0[0]
            dy = p1[1] - p0[1]
            e = dx * (py - p0[1]) - dy * (px - p0[0])
            inside &= (e > 0.0) | ((e == 0.0) & _edge_accepts_zero(dx, dy))
            w[k] = e / area2
        if not inside.any():
            continue

        # w[k] is the weight of the vertex opposite edge k: a, b, c in turn
        z = w[0] * za + w[1] * zb + w[2] * zc

        tile_face = face_id[lo_y:hi_y + 1, lo_x:hi_x + 1]
        tile_z = zbuf[lo_y:hi_y + 1, lo_x:hi_x + 1]
        win = inside & (z < tile_z)
        tile_z[win] = z[win]
        tile_face[win] = f

    return face_id >= 0, face_id, np.where(face_id >= 0, zbuf, 0.0), rotated


def rasterize_silhouette(mesh: MeshGraph, cam: CameraWP, angle_deg: float = 0.0) -> BinaryMask:
    """Binary coverage of the mesh, facing ignored."""
    covered, _, _, _ = _rasterize(mesh, cam, angle_deg)
    return BinaryMask(covered.astype(np.uint8), angle_deg=angle_deg)


def rasterize_normal_map(mesh: MeshGraph, angle_deg: float, cam: CameraWP,
                         face_camera: bool = True) -> NormalMap:
    """Flat-shaded normal map of the mesh seen from a yawed viewpoint.

    face_camera flips each face normal so its z component is nonnegative;
    disable it only to inspect raw winding.
    """
    covered, face_id, _, rotated = _rasterize(mesh, cam, angle_deg)
    v = rotated.vertices
    f = rotated.faces
    fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    norms = np.linalg.norm(fn, axis=1)
    ok = norms > 0
    fn[ok] /= norms[ok, None]
    if face_camera:
        flip = fn[:, 2] < 0
        fn[flip] *= -1.0

    values = np.zeros((cam.height, cam.width, 3))
    values[covered] = fn[face_id[covered]]
    return NormalMap(values, BinaryMask(covered.astype(np.uint8), angle_deg=angle_deg), angle_deg=angle_deg)


def rasterize_depth_map(mesh: MeshGraph, cam: CameraWP, angle_deg: float = 0.0) -> np.ndarray:
    """Depth normalized to [0, 1] on the foreground (1 = nearest), 0 elsewhere."""
    covered, _, depth, _ = _rasterize(mesh, cam, angle_deg)
    out = np.zeros((cam.height, cam.width))
    if covered.any():
        d = depth[covered]
        lo, hi = d.min(), d.max()
        out[covered] = 1.0 if hi == lo else (hi - d) / (hi - lo)
    return out


def mask_symmetric_difference(a: BinaryMask, b: BinaryMask) -> float:
    """Area of the symmetric difference, normalized by total pixel count."""
    if a.shape != b.shape:
        raise StructuralError(f"mask resolutions differ: {a.shape} vs {b.shape}")
    return float(np.sum(a.values != b.values)) / float(a.values.size)


def fit_camera(vertices: np.ndarray, width: int, height: int, margin: float = 0.1) -> CameraWP:
    """Center the points and scale them to fill the frame up to a margin."""
    vertices = np.asarray(vertices, dtype=np.float64)
    lo = vertices[:, :2].min(axis=0)
    hi = vertices[:, :2].max(axis=0)
    half = float(np.max(hi - lo) / 2.0)
    if half == 0.0:
        raise DegenerateGeometryError("points project to a single pixel; cannot fit a camera")
    if not 0.0 <= margin < 1.0:
        raise StructuralError(f"margin must be in [0, 1), got {margin}")
    s = (1.0 - margin) / half
    c = (lo + hi) / 2.0
    return CameraWP(scale=s, tx=float(-s * c[0]), ty=float(-s * c[1]), width=width, height=height)


def save_mask(mask: BinaryMask, path) -> None:
    write_pgm(path, mask.values * np.uint8(255))


def load_mask(path, angle_deg: float = 0.0) -> BinaryMask:
    raw = read_pgm(path)
    if not np.isin(raw, (0, 255)).all():
        raise StructuralError(f"{path}: mask pixels must be 0 or 255")
    return BinaryMask((raw // 255).astype(np.uint8), angle_deg=angle_deg)


def save_normal_map(nm: NormalMap, pfm_path, mask_path) -> None:
    write_pfm(pfm_path, nm.values)
    save_mask(nm.mask, mask_path)


def load_normal_map(pfm_path, mask_path, angle_deg: float = 0.0) -> NormalMap:
    values = read_pfm(pfm_path)
    mask = load_mask(mask_path, angle_deg=angle_deg)
    if values.ndim != 3:
        raise StructuralError(f"{pfm_path}: expected a 3-channel PFM")
    fg = mask.values.astype(bool)
    norms = np.linalg.norm(values[fg], axis=-1)
    if norms.size:
        if norms.min() <= 0:
            raise StructuralError(f"{pfm_path}: zero-length foreground normal")
        values[fg] /= norms[:, None]  # undo float32 storage rounding
    values[~fg] = 0.0
    return NormalMap(values, mask, angle_deg=angle_deg)
