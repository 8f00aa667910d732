"""Training losses for the deform-then-refine pipeline.

Two composite terms supervise the two branches: the body branch pays for
vertex, joint, and chamfer error against the ground-truth body; the surface
branch pays for chamfer and normal disagreement against the ground-truth
surface. Two feedback terms couple the branches. The trace term is the signed
gap between refining from the predicted body and refining from the true one;
the cloth term compares silhouette bookkeeping (surface minus body) across
four yaw views and is piecewise constant in the geometry, so it carries no
gradient and acts through the reported totals only.

Each differentiated loss ships a *_forward/*_backward pair with hand-derived
gradients. Plain same-named functions drop the cache for callers that only
want the value.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

from .errors import StructuralError
from .mesh import MeshGraph, vertex_normals, vertex_normals_backward, vertex_normals_forward
from .raster import CameraWP, mask_symmetric_difference, rasterize_silhouette

VIEW_ANGLES = (0.0, 90.0, 180.0, 270.0)


@dataclass(frozen=True)
class JointRegressor:
    """Row-stochastic (K, N) matrix regressing K joint positions from N vertices."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] < 1:
            raise StructuralError(f"regressor must be (K, N) with K >= 1, got shape {m.shape}")
        if not np.all(np.isfinite(m)):
            raise StructuralError("regressor contains non-finite weights")
        if np.any(m < 0.0):
            raise StructuralError("regressor weights must be non-negative")
        row_sums = m.sum(axis=1)
        if np.max(np.abs(row_sums - 1.0)) > 1e-9:
            raise StructuralError("regressor rows must each sum to 1")
        if m.flags.writeable:
            m = m.copy()
            m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def n_joints(self) -> int:
        return self.matrix.shape[0]

    def joints(self, vertices: np.ndarray) -> np.ndarray:
        vertices = np.asarray(vertices, dtype=np.float64)
        if vertices.shape[0] != self.matrix.shape[1]:
            raise StructuralError(
                f"regressor expects {self.matrix.shape[1]} vertices, got {vertices.shape[0]}"
            )
        return self.matrix @ vertices


def cluster_regressor(vertices: np.ndarray, n_joints: int) -> JointRegressor:
    """Build a regressor that averages farthest-point vertex clusters.

    Deterministic: seeds start at the vertex farthest from the centroid and
    grow by farthest-point sampling; every vertex joins its nearest seed with
    uniform weight inside the cluster.
    """
    verts = np.asarray(vertices, dtype=np.float64)
    n = verts.shape[0]
    if not 1 <= n_joints <= n:
        raise StructuralError(f"need 1 <= n_joints <= {n}, got {n_joints}")
    centroid = verts.mean(axis=0)
    seeds = [int(np.argmax(np.linalg.norm(verts - centroid, axis=1)))]
    nearest = np.linalg.norm(verts - verts[seeds[0]], axis=1)
    for _ in range(n_joints - 1):
        seeds.append(int(np.argmax(nearest)))
        nearest = np.minimum(nearest, np.linalg.norm(verts - verts[seeds[-1]], axis=1))
    seed_pts = verts[np.asarray(seeds)]
    assign = np.argmin(np.linalg.norm(verts[:, None] - seed_pts[None], axis=2), axis=1)
    mat = np.zeros((n_joints, n))
    for k in range(n_joints):
        members = np.nonzero(assign == k)[0]
        if members.size == 0:
            raise StructuralError("empty joint cluster; reduce n_joints or deduplicate vertices")
        mat[k, members] = 1.0 / members.size
    return JointRegressor(mat)


@dataclass(frozen=True)
class LossConfig:
    """Weights and rendering options for the loss battery.

    lambda_trace and lambda_cloth scale the feedback terms; the w_* weights
    scale the terms inside the two composites. clamp_trace lower-bounds the
    trace term at zero instead of letting it reward degrading the
    ground-truth-guided branch.
    """

    lambda_trace: float = 1.0
    lambda_cloth: float = 1.0
    clamp_trace: bool = False
    silhouette_res: int = 128
    w_vertex: float = 1.0
    w_joint: float = 1.0
    w_chamfer_mesh: float = 1.0
    w_chamfer_surface: float = 1.0
    w_normal: float = 1.0

    def __post_init__(self):
        for name in (
            "lambda_trace",
            "lambda_cloth",
            "w_vertex",
            "w_joint",
            "w_chamfer_mesh",
            "w_chamfer_surface",
            "w_normal",
        ):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0.0:
                raise StructuralError(f"{name} must be finite and >= 0, got {value}")
        if self.silhouette_res < 8:
            raise StructuralError("silhouette_res must be >= 8")


@dataclass(frozen=True)
class LossReport:
    """Named loss terms plus their weighted totals.

    Terms a given composite does not compute stay at zero, so the totals are
    always the exact weighted sums of the fields.
    """

    l_v: float = 0.0
    l_j: float = 0.0
    l_cd1: float = 0.0
    l_cd2: float = 0.0
    l_n: float = 0.0
    l_trace: float = 0.0
    l_cloth: float = 0.0
    total_mesh: float = 0.0
    total_surface: float = 0.0
    total: float = 0.0

    def __post_init__(self):
        for name, value in self.to_json().items():
            if not np.isfinite(value):
                raise StructuralError(f"loss term {name} is not finite: {value}")

    def to_json(self) -> dict:
        return {
            "l_v": float(self.l_v),
            "l_j": float(self.l_j),
            "l_cd1": float(self.l_cd1),
            "l_cd2": float(self.l_cd2),
            "l_n": float(self.l_n),
            "l_trace": float(self.l_trace),
            "l_cloth": float(self.l_cloth),
            "total_mesh": float(self.total_mesh),
            "total_surface": float(self.total_surface),
            "total": float(self.total),
        }


def _as_points(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] == 0:
        raise StructuralError(f"{name} must be a nonempty (n, d) point set, got shape {a.shape}")
    return a


def chamfer_forward(a, b):
    """Symmetric chamfer distance between two point sets.

    Mean unsquared nearest-neighbor distance from a to b, plus the reverse,
    halved. Gradients flow through the matched pairs; ties break however the
    k-d tree breaks them.
    """
    a = _as_points(a, "a")
    b = _as_points(b, "b")
    if a.shape[1] != b.shape[1]:
        raise StructuralError(f"point dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    d_ab, idx_ab = cKDTree(b).query(a)
    d_ba, idx_ba = cKDTree(a).query(b)
    value = 0.5 * (float(np.mean(d_ab)) + float(np.mean(d_ba)))
    return value, (a, b, idx_ab, idx_ba, d_ab, d_ba)


def _unit_residuals(diff: np.ndarray, dist: np.ndarray) -> np.ndarray:
    # subgradient 0 for coincident pairs
    unit = np.zeros_like(diff)
    nz = dist > 0.0
    unit[nz] = diff[nz] / dist[nz, None]
    return unit


def chamfer_backward(cache, d_value: float = 1.0):
    a, b, idx_ab, idx_ba, d_ab, d_ba = cache
    pull_ab = _unit_residuals(a - b[idx_ab], d_ab) * (d_value * 0.5 / a.shape[0])
    pull_ba = _unit_residuals(b - a[idx_ba], d_ba) * (d_value * 0.5 / b.shape[0])
    d_a = pull_ab.copy()
    np.add.at(d_a, idx_ba, -pull_ba)
    d_b = pull_ba.copy()
    np.add.at(d_b, idx_ab, -pull_ab)
    return d_a, d_b


def chamfer(a, b) -> float:
    return chamfer_forward(a, b)[0]


def vertex_loss_forward(pred, gt):
    """Mean per-vertex 1-norm of the residual (shared topology assumed)."""
    pred = _as_points(pred, "pred")
    gt = _as_points(gt, "gt")
    if pred.shape != gt.shape:
        raise StructuralError(f"vertex count mismatch: {pred.shape} vs {gt.shape}")
    diff = pred - gt
    value = float(np.abs(diff).sum() / pred.shape[0])
    return value, (np.sign(diff), pred.shape[0])


def vertex_loss_backward(cache, d_value: float = 1.0) -> np.ndarray:
    sign, n = cache
    return (d_value / n) * sign


def vertex_loss(pred, gt) -> float:
    return vertex_loss_forward(pred, gt)[0]


def joint_loss_forward(pred_vertices, regressor: JointRegressor, joints_gt):
    """Mean per-joint Euclidean distance of the regressed joints."""
    pred_vertices = _as_points(pred_vertices, "pred_vertices")
    joints_gt = _as_points(joints_gt, "joints_gt")
    joints = regressor.joints(pred_vertices)
    if joints.shape != joints_gt.shape:
        raise StructuralError(f"joint count mismatch: {joints.shape} vs {joints_gt.shape}")
    diff = joints - joints_gt
    dist = np.linalg.norm(diff, axis=1)
    value = float(np.mean(dist))
    return value, (regressor.matrix, diff, dist)


def joint_loss_backward(cache, d_value: float = 1.0) -> np.ndarray:
    matrix, diff, dist = cache
    d_joints = _unit_residuals(diff, dist) * (d_value / diff.shape[0])
    return matrix.T @ d_joints


def joint_loss(pred_vertices, regressor: JointRegressor, joints_gt) -> float:
    return joint_loss_forward(pred_vertices, regressor, joints_gt)[0]


def normal_loss_forward(pred: MeshGraph, gt: MeshGraph):
    """Mean (1 - cos) between predicted vertex normals and their nearest
    ground-truth vertex normals.

    The correspondence and the ground-truth normals are held fixed; only the
    predicted normals carry gradient.
    """
    n_pred, cache_n = vertex_normals_forward(pred.vertices, pred.faces)
    n_gt = vertex_normals(gt)
    idx = cKDTree(gt.vertices).query(pred.vertices)[1]
    target = n_gt[idx]
    value = float(np.mean(1.0 - np.einsum("ij,ij->i", n_pred, target)))
    return value, (cache_n, target)


def normal_loss_backward(cache, d_value: float = 1.0) -> np.ndarray:
    cache_n, target = cache
    d_normals = (-d_value / target.shape[0]) * target
    return vertex_normals_backward(cache_n, d_normals)


def normal_loss(pred: MeshGraph, gt: MeshGraph) -> float:
    return normal_loss_forward(pred, gt)[0]


def loss_mesh_forward(pred: MeshGraph, gt: MeshGraph, regressor: JointRegressor, joints_gt, cfg: LossConfig):
    """Body-branch composite: vertex + joint + chamfer terms against the
    ground-truth body, weighted per cfg."""
    l_v, c_v = vertex_loss_forward(pred.vertices, gt.vertices)
    l_j, c_j = joint_loss_forward(pred.vertices, regressor, joints_gt)
    l_cd1, c_cd = chamfer_forward(pred.vertices, gt.vertices)
    total = cfg.w_vertex * l_v + cfg.w_joint * l_j + cfg.w_chamfer_mesh * l_cd1
    report = LossReport(l_v=l_v, l_j=l_j, l_cd1=l_cd1, total_mesh=total, total=total)
    return report, (c_v, c_j, c_cd, cfg)


def loss_mesh_backward(cache, d_total: float = 1.0) -> np.ndarray:
    c_v, c_j, c_cd, cfg = cache
    d_verts = vertex_loss_backward(c_v, d_total * cfg.w_vertex)
    d_verts = d_verts + joint_loss_backward(c_j, d_total * cfg.w_joint)
    d_verts = d_verts + chamfer_backward(c_cd, d_total * cfg.w_chamfer_mesh)[0]
    return d_verts


def loss_mesh(pred: MeshGraph, gt: MeshGraph, regressor: JointRegressor, joints_gt, cfg: LossConfig) -> LossReport:
    return loss_mesh_forward(pred, gt, regressor, joints_gt, cfg)[0]


def loss_surface_forward(pred: MeshGraph, gt: MeshGraph, cfg: LossConfig):
    """Surface-branch composite: chamfer + normal agreement, weighted per cfg."""
    l_cd2, c_cd = chamfer_forward(pred.vertices, gt.vertices)
    l_n, c_n = normal_loss_forward(pred, gt)
    total = cfg.w_chamfer_surface * l_cd2 + cfg.w_normal * l_n
    report = LossReport(l_cd2=l_cd2, l_n=l_n, total_surface=total, total=total)
    return report, (c_cd, c_n, cfg)


def loss_surface_backward(cache, d_total: float = 1.0) -> np.ndarray:
    c_cd, c_n, cfg = cache
    d_verts = chamfer_backward(c_cd, d_total * cfg.w_chamfer_surface)[0]
    d_verts = d_verts + normal_loss_backward(c_n, d_total * cfg.w_normal)
    return d_verts


def loss_surface(pred: MeshGraph, gt: MeshGraph, cfg: LossConfig) -> LossReport:
    return loss_surface_forward(pred, gt, cfg)[0]


def loss_trace_forward(pred: MeshGraph, pred_from_gt: MeshGraph, gt: MeshGraph, cfg: LossConfig):
    """Signed surface-loss gap between refining from the predicted body and
    refining from the true one. Positive means the predicted body made the
    refinement worse. Clamped at zero when cfg.clamp_trace is set."""
    r_pred, c_pred = loss_surface_forward(pred, gt, cfg)
    r_ref, c_ref = loss_surface_forward(pred_from_gt, gt, cfg)
    raw = r_pred.total_surface - r_ref.total_surface
    clamped = bool(cfg.clamp_trace and raw < 0.0)
    value = 0.0 if clamped else raw
    return value, (c_pred, c_ref, clamped)


def loss_trace_backward(cache, d_value: float = 1.0):
    c_pred, c_ref, clamped = cache
    if clamped:
        d_value = 0.0
    d_pred = loss_surface_backward(c_pred, d_value)
    d_ref = loss_surface_backward(c_ref, -d_value)
    return d_pred, d_ref


def loss_trace(pred: MeshGraph, pred_from_gt: MeshGraph, gt: MeshGraph, cfg: LossConfig) -> float:
    return loss_trace_forward(pred, pred_from_gt, gt, cfg)[0]


def loss_cloth(
    surf_pred: MeshGraph,
    body_pred: MeshGraph,
    surf_gt: MeshGraph,
    body_gt: MeshGraph,
    cam: CameraWP,
    cfg: LossConfig,
    cam_gt: CameraWP | None = None,
) -> float:
    """Absolute gap between predicted and ground-truth clothing silhouettes.

    Each side sums the normalized symmetric-difference area between its
    surface and body silhouettes over the four yaw views. Ground-truth meshes
    render under cam_gt when given (the predicted camera should not distort
    the reference). Piecewise constant in all inputs: no gradient.
    """
    if cam_gt is None:
        cam_gt = cam
    res = cfg.silhouette_res
    cam_p = replace(cam, width=res, height=res)
    cam_g = replace(cam_gt, width=res, height=res)
    pred_sum = 0.0
    gt_sum = 0.0
    for angle in VIEW_ANGLES:
        pred_sum += mask_symmetric_difference(
            rasterize_silhouette(surf_pred, cam_p, angle),
            rasterize_silhouette(body_pred, cam_p, angle),
        )
        gt_sum += mask_symmetric_difference(
            rasterize_silhouette(surf_gt, cam_g, angle),
            rasterize_silhouette(body_gt, cam_g, angle),
        )
    return abs(pred_sum - gt_sum)


def loss_collab(trace: float, cloth: float, cfg: LossConfig) -> float:
    """Weighted sum of the two feedback terms."""
    return cfg.lambda_trace * trace + cfg.lambda_cloth * cloth
