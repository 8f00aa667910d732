"""Image encoders, feature puncturing, and per-vertex/per-edge feature assembly.

A global encoder squeezes RGB+depth into one vector f_g that seeds every
template vertex; a local encoder turns RGB plus front/back normal maps
into a spatial feature map F at 1/4 resolution. Each mesh vertex then
"punctures" F: it is projected into the image, a small offset pattern
around the projection is sampled bilinearly, and the mean becomes the
vertex's local feature f_v. Vertex features concatenate (f_v, position,
unit normal); edge features concatenate the two endpoint vertex features
in canonical edge order.

All stages have hand-derived backward passes; gradients flow into the
feature map, the vertex positions (through projection and normals) and
the camera parameters. Samples clamped at the map border get zero
gradient in the clamped direction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import StructuralError
from .imageio import read_pfm, read_pgm
from .layers import ParamStore, conv2d_backward, conv2d_forward
from .mesh import MeshGraph, vertex_normals_backward, vertex_normals_forward
from .raster import CameraWP, project_backward, project_forward

# channel widths by semantic name
CHANNEL_WIDTHS = {"rgb": 3, "depth": 1, "normal_front": 3, "normal_back": 3}

GLOBAL_PLAN = ("rgb", "depth")
LOCAL_PLAN = ("rgb", "normal_front", "normal_back")


@dataclass(frozen=True)
class ImageStack:
    """A (H, W, C) stack of image channels with a declared channel plan."""

    values: np.ndarray
    plan: tuple

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.values, dtype=np.float64))
        plan = tuple(self.plan)
        for name in plan:
            if name not in CHANNEL_WIDTHS:
                raise StructuralError(f"unknown channel {name!r}")
        expected = sum(CHANNEL_WIDTHS[n] for n in plan)
        if v.ndim != 3 or v.shape[2] != expected:
            raise StructuralError(
                f"stack shape {v.shape} does not provide {expected} channels for plan {plan}"
            )
        if not np.all(np.isfinite(v)):
            raise StructuralError("image stack contains non-finite values")
        if v.flags.writeable:
            v = v.copy()
            v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "plan", plan)

    @classmethod
    def from_channels(cls, channels: dict, plan: tuple) -> "ImageStack":
        parts = []
        shape = None
        for name in plan:
            if name not in channels:
                raise StructuralError(f"channel {name!r} missing from inputs")
            arr = np.asarray(channels[name], dtype=np.float64)
            if arr.ndim == 2:
                arr = arr[:, :, None]
            if arr.shape[2] != CHANNEL_WIDTHS[name]:
                raise StructuralError(
                    f"channel {name!r} must have {CHANNEL_WIDTHS[name]} planes, got {arr.shape[2]}"
                )
            if shape is None:
                shape = arr.shape[:2]
            elif arr.shape[:2] != shape:
                raise StructuralError("channels disagree on resolution")
            parts.append(arr)
        return cls(np.concatenate(parts, axis=2), plan)

    def select(self, names) -> np.ndarray:
        """Concatenated channel planes for the requested names, in request order."""
        out = []
        for want in names:
            offset = 0
            for name in self.plan:
                width = CHANNEL_WIDTHS[name]
                if name == want:
                    out.append(self.values[:, :, offset:offset + width])
                    break
                offset += width
            else:
                raise StructuralError(f"channel {want!r} not in stack plan {self.plan}")
        return np.concatenate(out, axis=2)


def load_image_stack(paths: dict, plan: tuple) -> ImageStack:
    """Read an ImageStack from per-channel PFM/PGM files.

    PGM bytes are scaled to [0, 1]; PFM floats pass through. A 1-plane
    PFM/PGM feeds 1-wide channels; 3-plane PFMs feed 3-wide channels.
    """
    channels = {}
    for name in plan:
        if name not in paths:
            raise StructuralError(f"no path given for channel {name!r}")
        path = str(paths[name])
        if path.endswith(".pgm"):
            arr = read_pgm(path).astype(np.float64) / 255.0
        else:
            arr = read_pfm(path)
        channels[name] = arr
    return ImageStack.from_channels(channels, plan)


@dataclass(frozen=True)
class FeatureMap:
    """A (H', W', D) feature grid with its spatial downsample factor."""

    values: np.ndarray
    downsample: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise StructuralError(f"feature map must be (H', W', D), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise StructuralError("feature map contains non-finite values")
        if self.downsample < 1:
            raise StructuralError("downsample factor must be >= 1")
        object.__setattr__(self, "values", v)


# ---------------------------------------------------------------------------
# encoders: 3 convolution blocks each, leaky activations

def encoder_param_specs(prefix: str, in_channels: int, widths=(16, 32, 32)) -> dict:
    """init_params specs for one encoder stack."""
    specs = {}
    c_in = in_channels
    for i, c_out in enumerate(widths):
        specs[f"{prefix}.conv{i}.W"] = ((3, 3, c_in, c_out), 9 * c_in)
        specs[f"{prefix}.conv{i}.b"] = ((c_out,), None)
        c_in = c_out
    return specs


def _encoder_stack_forward(x: np.ndarray, params: ParamStore, prefix: str, strides):
    caches = []
    h = x
    for i, stride in enumerate(strides):
        W = params.arrays[f"{prefix}.conv{i}.W"]
        b = params.arrays[f"{prefix}.conv{i}.b"]
        h, cache = conv2d_forward(h, W, b, stride=stride, activation="leaky")
        caches.append(cache)
    return h, caches


def _encoder_stack_backward(caches, prefix: str, d_out: np.ndarray):
    grads = {}
    d = d_out
    for i in reversed(range(len(caches))):
        d, dW, db = conv2d_backward(caches[i], d)
        grads[f"{prefix}.conv{i}.W"] = dW
        grads[f"{prefix}.conv{i}.b"] = db
    return d, grads


def encode_global_forward(stack: ImageStack, params: ParamStore, prefix: str = "enc_g"):
    """RGB+depth -> length-D global feature f_g (strides 2,2,2, spatial mean)."""
    x = stack.select(GLOBAL_PLAN)
    h, caches = _encoder_stack_forward(x, params, prefix, strides=(2, 2, 2))
    f_g = h.mean(axis=(0, 1))
    return f_g, (caches, prefix, h.shape)


def encode_global_backward(cache, d_fg: np.ndarray):
    """Returns (d_input, grads dict)."""
    caches, prefix, h_shape = cache
    n = h_shape[0] * h_shape[1]
    d_h = np.tile(np.asarray(d_fg, dtype=np.float64) / n, (h_shape[0], h_shape[1], 1))
    return _encoder_stack_backward(caches, prefix, d_h)


def encode_local_forward(stack: ImageStack, params: ParamStore, prefix: str = "enc_l"):
    """RGB+front/back normals -> FeatureMap at 1/4 resolution (strides 2,2,1)."""
    x = stack.select(LOCAL_PLAN)
    h, caches = _encoder_stack_forward(x, params, prefix, strides=(2, 2, 1))
    return FeatureMap(h, downsample=4), (caches, prefix)


def encode_local_backward(cache, d_map: np.ndarray):
    caches, prefix = cache
    return _encoder_stack_backward(caches, prefix, d_map)


# ---------------------------------------------------------------------------
# bilinear sampling and puncturing

def _bilinear_forward(F: np.ndarray, pts: np.ndarray):
    """Sample (N, 2) points (x, y) in cell-center coordinates from (H', W', D).

    Points are clamped to the map rectangle first; the cache remembers
    which coordinates were clamped so their positional gradient vanishes.
    """
    H, W = F.shape[:2]
    if not np.all(np.isfinite(pts)):
        raise StructuralError("sample positions must be finite")
    x = np.clip(pts[:, 0], 0.0, W - 1.0)
    y = np.clip(pts[:, 1], 0.0, H - 1.0)
    free_x = (pts[:, 0] > 0.0) & (pts[:, 0] < W - 1.0)
    free_y = (pts[:, 1] > 0.0) & (pts[:, 1] < H - 1.0)
    x0 = np.clip(np.floor(x).astype(np.int64), 0, W - 2)
    y0 = np.clip(np.floor(y).astype(np.int64), 0, H - 2)
    fx = x - x0
    fy = y - y0
    f00 = F[y0, x0]
    f01 = F[y0, x0 + 1]
    f10 = F[y0 + 1, x0]
    f11 = F[y0 + 1, x0 + 1]
    wx = fx[:, None]
    wy = fy[:, None]
    out = ((1 - wy) * ((1 - wx) * f00 + wx * f01)
           + wy * ((1 - wx) * f10 + wx * f11))
    cache = (F.shape, x0, y0, fx, fy, f00, f01, f10, f11, free_x, free_y)
    return out, cache


def _bilinear_backward(cache, d_out: np.ndarray):
    """Returns (d_F, d_pts)."""
    F_shape, x0, y0, fx, fy, f00, f01, f10, f11, free_x, free_y = cache
    d_out = np.asarray(d_out, dtype=np.float64)
    wx = fx[:, None]
    wy = fy[:, None]

    d_F = np.zeros(F_shape)
    np.add.at(d_F, (y0, x0), (1 - wy) * (1 - wx) * d_out)
    np.add.at(d_F, (y0, x0 + 1), (1 - wy) * wx * d_out)
    np.add.at(d_F, (y0 + 1, x0), wy * (1 - wx) * d_out)
    np.add.at(d_F, (y0 + 1, x0 + 1), wy * wx * d_out)

    d_dx = ((1 - wy) * (f01 - f00) + wy * (f11 - f10)) * d_out
    d_dy = ((1 - wx) * (f10 - f00) + wx * (f11 - f01)) * d_out
    d_pts = np.stack([d_dx.sum(axis=1) * free_x, d_dy.sum(axis=1) * free_y], axis=1)
    return d_F, d_pts


def sample_bilinear(F: FeatureMap, p) -> np.ndarray:
    """Bilinearly interpolate one point (x, y) in cell-center coordinates."""
    out, _ = _bilinear_forward(F.values, np.asarray(p, dtype=np.float64).reshape(1, 2))
    return out[0]


def make_pattern(size: int = 3) -> np.ndarray:
    """Square offset pattern (size x size) spaced one feature cell apart."""
    if size not in (1, 3, 5):
        raise StructuralError(f"pattern size must be 1, 3 or 5, got {size}")
    k = (size - 1) // 2
    offs = np.arange(-k, k + 1, dtype=np.float64)
    gx, gy = np.meshgrid(offs, offs)
    return np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)


def puncture_vertices_forward(F: FeatureMap, vertices: np.ndarray, cam: CameraWP,
                              pattern: np.ndarray):
    """Mean pattern sample of F around each projected vertex.

    Image coordinates map to feature-cell coordinates via
    p_feat = p_img / downsample - 1/2 (pixel centers sit at half-integers,
    cell centers at integers). Returns ((V, D) features, cache).
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    uv, proj_cache = project_forward(vertices, cam)
    ds = float(F.downsample)
    base = uv / ds - 0.5
    V = vertices.shape[0]
    P = pattern.shape[0]
    pts = (base[:, None, :] + pattern[None, :, :]).reshape(V * P, 2)
    samples, bil_cache = _bilinear_forward(F.values, pts)
    out = samples.reshape(V, P, -1).mean(axis=1)
    return out, (proj_cache, bil_cache, V, P, ds)


def puncture_vertices_backward(cache, d_out: np.ndarray):
    """Returns (d_F, d_vertices, d_cam)."""
    proj_cache, bil_cache, V, P, ds = cache
    d_samples = np.repeat(np.asarray(d_out, dtype=np.float64) / P, P, axis=0)
    d_F, d_pts = _bilinear_backward(bil_cache, d_samples)
    d_base = d_pts.reshape(V, P, 2).sum(axis=1)
    d_uv = d_base / ds
    d_vertices, d_cam = project_backward(proj_cache, d_uv)
    return d_F, d_vertices, d_cam


def puncture_vertex(F: FeatureMap, v, cam: CameraWP, pattern: np.ndarray | None = None) -> np.ndarray:
    """Single-vertex convenience wrapper around puncture_vertices_forward."""
    if pattern is None:
        pattern = make_pattern(3)
    out, _ = puncture_vertices_forward(F, np.asarray(v, dtype=np.float64).reshape(1, 3), cam, pattern)
    return out[0]


# ---------------------------------------------------------------------------
# feature assembly

def assemble_vertex_features(mesh: MeshGraph, F: FeatureMap, cam: CameraWP,
                             pattern: np.ndarray):
    """Per-vertex feature psi_v = (f_v, position, unit normal), width D+6."""
    fv, punc_cache = puncture_vertices_forward(F, mesh.vertices, cam, pattern)
    normals, norm_cache = vertex_normals_forward(mesh.vertices, mesh.faces)
    psi = np.concatenate([fv, mesh.vertices, normals], axis=1)
    return psi, (punc_cache, norm_cache, fv.shape[1])


def assemble_vertex_features_backward(cache, d_psi: np.ndarray):
    """Returns (d_F, d_vertices, d_cam)."""
    punc_cache, norm_cache, D = cache
    d_psi = np.asarray(d_psi, dtype=np.float64)
    d_F, d_verts, d_cam = puncture_vertices_backward(punc_cache, d_psi[:, :D])
    d_verts = d_verts + d_psi[:, D:D + 3]
    d_verts = d_verts + vertex_normals_backward(norm_cache, d_psi[:, D + 3:])
    return d_F, d_verts, d_cam


def assemble_edge_features(vfeats: np.ndarray, edges: np.ndarray):
    """Per-edge feature psi_e: endpoint features concatenated in (i, j) order."""
    vfeats = np.asarray(vfeats, dtype=np.float64)
    edges = np.asarray(edges, dtype=np.int64)
    if edges.size and edges.max() >= vfeats.shape[0]:
        raise StructuralError("edge endpoint index exceeds vertex feature count")
    psi_e = np.concatenate([vfeats[edges[:, 0]], vfeats[edges[:, 1]]], axis=1)
    return psi_e, (edges, vfeats.shape)


def assemble_edge_features_backward(cache, d_psi_e: np.ndarray) -> np.ndarray:
    edges, vshape = cache
    d_psi_e = np.asarray(d_psi_e, dtype=np.float64)
    D = vshape[1]
    d_v = np.zeros(vshape)
    np.add.at(d_v, edges[:, 0], d_psi_e[:, :D])
    np.add.at(d_v, edges[:, 1], d_psi_e[:, D:])
    return d_v
