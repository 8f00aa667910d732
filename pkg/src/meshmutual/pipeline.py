"""End-to-end deform-then-refine pipeline on synthetic data.

Two sub-networks share one template topology. The body network embeds the
global image feature into every template vertex, deforms the template through
a dense layer and a stack of graph convolutions, and regresses a
weak-perspective camera from pooled vertex features. The surface network
punctures the local feature map at its input mesh's projected vertices,
concatenates edge features, runs a stack of mesh convolutions, and emits
per-vertex displacements on top of the input mesh. Training couples the two:
surface losses reach the body weights through the puncture coordinates, the
camera head, and a trace term that compares refining from the predicted body
against refining from the true one.

All gradients are chained by hand through the layer backward passes; nothing
here relies on autodiff.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .encode import (
    FeatureMap,
    ImageStack,
    assemble_edge_features,
    assemble_edge_features_backward,
    assemble_vertex_features,
    assemble_vertex_features_backward,
    encode_global_backward,
    encode_global_forward,
    encode_local_backward,
    encode_local_forward,
    encoder_param_specs,
    make_pattern,
)
from .errors import StructuralError
from .layers import (
    ParamStore,
    dense_backward,
    dense_forward,
    deserialize_params,
    edge_to_vertex_backward,
    edge_to_vertex_forward,
    graph_conv_backward,
    graph_conv_forward,
    init_params,
    mesh_conv_backward,
    mesh_conv_forward,
    serialize_params,
)
from .losses import (
    LossConfig,
    LossReport,
    cluster_regressor,
    loss_cloth,
    loss_collab,
    loss_mesh_backward,
    loss_mesh_forward,
    loss_surface_backward,
    loss_surface_forward,
    loss_trace_backward,
    loss_trace_forward,
)
from .mesh import MeshGraph, build_edge_adjacency, build_vertex_adjacency, make_icosphere, vertex_normals
from .metrics import mpjpe, mvpe, surface_distances
from .raster import CameraWP, fit_camera, rasterize_depth_map, rasterize_normal_map

STACK_PLAN = ("rgb", "depth", "normal_front", "normal_back")

_CHECKPOINT_KIND = "deform-refine-toy"


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture, loss, and training knobs with desk-scale defaults."""

    subdivisions: int = 1
    encoder_dim: int = 32
    vertex_width: int = 64
    edge_width: int = 32
    image_size: int = 64
    pattern_size: int = 3
    n_joints: int = 6
    learning_rate: float = 0.05
    lr_final: float | None = 0.002
    warmup_learning_rate: float | None = None
    momentum: float = 0.9
    grad_clip: float | None = 1.0
    steps: int = 1000
    warmup_steps: int = 200
    n_train: int = 4
    eval_every: int = 50
    metric_samples: int = 2000
    seed: int = 0
    # training default clamps the trace term: the signed form rewards
    # degrading the reference branch and destabilizes the camera head
    loss: LossConfig = field(default_factory=lambda: LossConfig(clamp_trace=True))

    def __post_init__(self):
        positive = (
            "encoder_dim",
            "vertex_width",
            "edge_width",
            "image_size",
            "pattern_size",
            "n_joints",
            "n_train",
            "eval_every",
            "metric_samples",
        )
        for name in positive:
            if getattr(self, name) < 1:
                raise StructuralError(f"{name} must be >= 1")
        if not 0 <= self.subdivisions <= 5:
            raise StructuralError("subdivisions must be in 0..5")
        if self.image_size < 16 or self.image_size % 4 != 0:
            raise StructuralError("image_size must be >= 16 and divisible by 4")
        if self.pattern_size not in (1, 3, 5):
            raise StructuralError("pattern_size must be 1, 3, or 5")
        if not np.isfinite(self.learning_rate) or self.learning_rate < 0.0:
            raise StructuralError("learning_rate must be finite and >= 0")
        if self.lr_final is not None and (
            not np.isfinite(self.lr_final) or self.lr_final <= 0.0
        ):
            raise StructuralError("lr_final must be finite and > 0, or null")
        if self.warmup_learning_rate is not None and (
            not np.isfinite(self.warmup_learning_rate) or self.warmup_learning_rate < 0.0
        ):
            raise StructuralError("warmup_learning_rate must be finite and >= 0, or null")
        if self.grad_clip is not None and (
            not np.isfinite(self.grad_clip) or self.grad_clip <= 0.0
        ):
            raise StructuralError("grad_clip must be finite and > 0, or null")
        if not 0.0 <= self.momentum < 1.0:
            raise StructuralError("momentum must be in [0, 1)")
        if self.steps < 0 or self.warmup_steps < 0:
            raise StructuralError("step counts must be >= 0")

    def to_json(self) -> dict:
        return {
            "network": {
                "subdivisions": self.subdivisions,
                "encoder_dim": self.encoder_dim,
                "vertex_width": self.vertex_width,
                "edge_width": self.edge_width,
                "image_size": self.image_size,
                "pattern_size": self.pattern_size,
            },
            "losses": {
                "lambda_trace": self.loss.lambda_trace,
                "lambda_cloth": self.loss.lambda_cloth,
                "clamp_trace": self.loss.clamp_trace,
                "silhouette_res": self.loss.silhouette_res,
                "w_vertex": self.loss.w_vertex,
                "w_joint": self.loss.w_joint,
                "w_chamfer_mesh": self.loss.w_chamfer_mesh,
                "w_chamfer_surface": self.loss.w_chamfer_surface,
                "w_normal": self.loss.w_normal,
            },
            "training": {
                "learning_rate": self.learning_rate,
                "lr_final": self.lr_final,
                "warmup_learning_rate": self.warmup_learning_rate,
                "momentum": self.momentum,
                "grad_clip": self.grad_clip,
                "steps": self.steps,
                "warmup_steps": self.warmup_steps,
                "eval_every": self.eval_every,
                "metric_samples": self.metric_samples,
                "seed": self.seed,
            },
            "data": {
                "n_train": self.n_train,
                "n_joints": self.n_joints,
            },
        }

    @classmethod
    def from_json(cls, doc: dict) -> "NetworkConfig":
        if not isinstance(doc, dict):
            raise StructuralError("config document must be a JSON object")
        known = {"network", "losses", "training", "data"}
        unknown = set(doc) - known
        if unknown:
            raise StructuralError(f"unknown config sections: {sorted(unknown)}")
        merged = {}
        for section in known:
            part = doc.get(section, {})
            if not isinstance(part, dict):
                raise StructuralError(f"config section {section!r} must be an object")
            merged.update(part)
        loss_fields = {
            "lambda_trace", "lambda_cloth", "clamp_trace", "silhouette_res",
            "w_vertex", "w_joint", "w_chamfer_mesh", "w_chamfer_surface", "w_normal",
        }
        cfg_fields = {
            "subdivisions", "encoder_dim", "vertex_width", "edge_width", "image_size",
            "pattern_size", "n_joints", "learning_rate", "lr_final",
            "warmup_learning_rate", "momentum", "grad_clip", "steps", "warmup_steps",
            "n_train", "eval_every", "metric_samples", "seed",
        }
        bad = set(merged) - loss_fields - cfg_fields
        if bad:
            raise StructuralError(f"unknown config keys: {sorted(bad)}")
        loss_kwargs = {k: merged[k] for k in loss_fields if k in merged}
        cfg_kwargs = {k: merged[k] for k in cfg_fields if k in merged}
        return cls(loss=LossConfig(**loss_kwargs), **cfg_kwargs)


@dataclass(frozen=True)
class Sample:
    """One synthetic training unit: rendered channels plus the mesh pair."""

    stack: ImageStack
    body: MeshGraph
    surface: MeshGraph
    joints: np.ndarray
    cam: CameraWP

    def __post_init__(self):
        joints = np.asarray(self.joints, dtype=np.float64)
        if joints.ndim != 2 or joints.shape[1] != 3 or not np.all(np.isfinite(joints)):
            raise StructuralError("joints must be a finite (K, 3) array")
        if self.body.vertices.shape != self.surface.vertices.shape:
            raise StructuralError("body and surface must share the template topology")
        if self.stack.values.shape[:2] != (self.cam.height, self.cam.width):
            raise StructuralError("image stack resolution does not match the camera")
        object.__setattr__(self, "joints", joints)


def param_specs(cfg: NetworkConfig) -> dict:
    """Shapes and fan-ins for every learnable block, keyed by name."""
    d = cfg.encoder_dim
    vw = cfg.vertex_width
    ew = cfg.edge_width
    psi_width = 2 * (d + 6)
    specs = {}
    specs.update(encoder_param_specs("enc_g", 4, (16, 32, d)))
    specs.update(encoder_param_specs("enc_l", 9, (16, 32, d)))
    specs["l1_w"] = ((3 + d, vw), 3 + d)
    specs["l1_b"] = ((vw,), None)
    for k in range(2, 10):
        specs[f"gc{k}_w"] = ((vw, vw), vw)
    specs["coord_w"] = ((vw, 3), vw)
    specs["coord_b"] = ((3,), None)
    specs["cam_w"] = ((vw, 3), vw)
    specs["cam_b"] = ((3,), None)
    specs["mc11_mu"] = ((5, psi_width, ew), 5 * psi_width)
    for k in range(12, 21):
        specs[f"mc{k}_mu"] = ((5, ew, ew), 5 * ew)
    specs["mc21_mu"] = ((5, ew, 3), 5 * ew)
    return specs


class Network:
    """Parameters plus the fixed template structures they act on."""

    def __init__(self, cfg: NetworkConfig, params: ParamStore, step: int = 0):
        expected = {name: spec[0] for name, spec in param_specs(cfg).items()}
        got = {name: arr.shape for name, arr in params.arrays.items()}
        if got != expected:
            raise StructuralError("parameter blocks do not match the configuration")
        self.cfg = cfg
        self.params = params
        self.template = make_icosphere(cfg.subdivisions)
        self.vert_adj = build_vertex_adjacency(self.template)
        self.edge_adj = build_edge_adjacency(self.template)
        self.pattern = make_pattern(cfg.pattern_size)
        self.regressor = cluster_regressor(self.template.vertices, cfg.n_joints)
        self.velocity = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.step = step

    def parameter_count(self) -> int:
        return sum(a.size for a in self.params.arrays.values())


def build_network(cfg: NetworkConfig) -> Network:
    # he gain: the body branch stacks 9 rectified layers between the pooled
    # image feature and the coordinate head; unit-variance init decays that
    # signal (and its gradient) below usefulness before training starts
    params = init_params(param_specs(cfg), seed=cfg.seed, scheme="he_uniform")
    # output heads shrink so predictions start near the template (small
    # displacements, camera scale near exp(0)) while activations stay O(1)
    for name in ("coord_w", "cam_w", "mc21_mu"):
        params.arrays[name] *= 0.1
    return Network(cfg, params)


def _forward_body(net: Network, sample: Sample):
    p = net.params.arrays
    f_g, cache_g = encode_global_forward(sample.stack, net.params)
    n_verts = net.template.vertices.shape[0]
    h0 = np.concatenate([net.template.vertices, np.tile(f_g, (n_verts, 1))], axis=1)
    h, c_l1 = dense_forward(h0, p["l1_w"], p["l1_b"], activation="leaky")
    gc_caches = []
    for k in range(2, 10):
        h, c = graph_conv_forward(h, net.vert_adj, p[f"gc{k}_w"], activation="leaky")
        gc_caches.append(c)
    delta, c_coord = dense_forward(h, p["coord_w"], p["coord_b"], activation="linear")
    body_verts = net.template.vertices + delta
    pooled = h.mean(axis=0, keepdims=True)
    cam_raw, c_cam = dense_forward(pooled, p["cam_w"], p["cam_b"], activation="linear")
    scale = float(np.exp(cam_raw[0, 0]))
    cam = CameraWP(
        scale=scale,
        tx=float(cam_raw[0, 1]),
        ty=float(cam_raw[0, 2]),
        width=net.cfg.image_size,
        height=net.cfg.image_size,
    )
    cache = (cache_g, c_l1, gc_caches, c_coord, c_cam, scale, n_verts)
    return body_verts, cam, cache


def _backward_body(net: Network, cache, d_body_verts: np.ndarray, d_cam: np.ndarray) -> dict:
    cache_g, c_l1, gc_caches, c_coord, c_cam, scale, n_verts = cache
    grads = {}
    d_h, grads["coord_w"], grads["coord_b"] = dense_backward(c_coord, d_body_verts)
    # scale comes through an exp, so its raw slot picks up the chain factor
    d_raw = np.array([[d_cam[0] * scale, d_cam[1], d_cam[2]]])
    d_pooled, grads["cam_w"], grads["cam_b"] = dense_backward(c_cam, d_raw)
    d_h = d_h + d_pooled / n_verts
    for k, c in zip(range(9, 1, -1), reversed(gc_caches)):
        d_h, grads[f"gc{k}_w"] = graph_conv_backward(c, d_h)
    d_h0, grads["l1_w"], grads["l1_b"] = dense_backward(c_l1, d_h)
    d_fg = d_h0[:, 3:].sum(axis=0)
    _, enc_grads = encode_global_backward(cache_g, d_fg)
    grads.update(enc_grads)
    return grads


def _forward_surface(net: Network, mesh_in: MeshGraph, cam: CameraWP, fmap: FeatureMap):
    p = net.params.arrays
    psi_v, c_av = assemble_vertex_features(mesh_in, fmap, cam, net.pattern)
    psi_e, c_ae = assemble_edge_features(psi_v, net.template.edges)
    e = psi_e
    mc_caches = []
    for k in range(11, 21):
        e, c = mesh_conv_forward(e, net.edge_adj.neighbors, p[f"mc{k}_mu"], activation="leaky")
        mc_caches.append(c)
    e, c_mc21 = mesh_conv_forward(e, net.edge_adj.neighbors, p["mc21_mu"], activation="linear")
    disp, c_ev = edge_to_vertex_forward(e, net.template.edges, net.template.vertices.shape[0])
    out_verts = mesh_in.vertices + disp
    return out_verts, (c_av, c_ae, mc_caches, c_mc21, c_ev)


def _backward_surface(net: Network, cache, d_out_verts: np.ndarray):
    """Returns (param grads, d feature map, d input-mesh vertices, d camera)."""
    c_av, c_ae, mc_caches, c_mc21, c_ev = cache
    grads = {}
    d_e = edge_to_vertex_backward(c_ev, d_out_verts)
    d_e, grads["mc21_mu"] = mesh_conv_backward(c_mc21, d_e)
    for k, c in zip(range(20, 10, -1), reversed(mc_caches)):
        d_e, grads[f"mc{k}_mu"] = mesh_conv_backward(c, d_e)
    d_psi_v = assemble_edge_features_backward(c_ae, d_e)
    d_fmap, d_verts_feat, d_cam = assemble_vertex_features_backward(c_av, d_psi_v)
    # the displacement rides on the input vertices, so they also get the
    # upstream gradient directly
    d_mesh_in = d_out_verts + d_verts_feat
    return grads, d_fmap, d_mesh_in, d_cam


def forward(net: Network, sample: Sample):
    """Run the full prediction path: body mesh, camera, refined surface."""
    body_verts, cam, _ = _forward_body(net, sample)
    fmap, _ = encode_local_forward(sample.stack, net.params)
    body = net.template.with_vertices(body_verts)
    surf_verts, _ = _forward_surface(net, body, cam, fmap)
    return body, cam, net.template.with_vertices(surf_verts)


def refine_surface(net: Network, mesh_in: MeshGraph, cam: CameraWP, stack: ImageStack) -> MeshGraph:
    """Run only the surface branch on an arbitrary input mesh and camera."""
    fmap, _ = encode_local_forward(stack, net.params)
    verts, _ = _forward_surface(net, mesh_in, cam, fmap)
    return net.template.with_vertices(verts)


def forward_clothed_from_gt(net: Network, sample: Sample) -> MeshGraph:
    """Refine starting from the ground-truth body under its own camera."""
    return refine_surface(net, sample.body, sample.cam, sample.stack)


def _compute_losses(net: Network, sample: Sample):
    """Forward everything once and price it. Returns the report plus every
    intermediate needed for the backward pass."""
    lcfg = net.cfg.loss
    body_verts, cam, body_cache = _forward_body(net, sample)
    fmap, cache_l = encode_local_forward(sample.stack, net.params)
    body = net.template.with_vertices(body_verts)
    surf_verts, surf_cache = _forward_surface(net, body, cam, fmap)
    surf = net.template.with_vertices(surf_verts)
    ref_verts, ref_cache = _forward_surface(net, sample.body, sample.cam, fmap)
    ref = net.template.with_vertices(ref_verts)

    r_mesh, c_mesh = loss_mesh_forward(body, sample.body, net.regressor, sample.joints, lcfg)
    r_surf, c_surf = loss_surface_forward(surf, sample.surface, lcfg)
    trace, c_trace = loss_trace_forward(surf, ref, sample.surface, lcfg)
    cloth = loss_cloth(surf, body, sample.surface, sample.body, cam, lcfg, cam_gt=sample.cam)
    total = r_mesh.total_mesh + r_surf.total_surface + loss_collab(trace, cloth, lcfg)
    report = LossReport(
        l_v=r_mesh.l_v,
        l_j=r_mesh.l_j,
        l_cd1=r_mesh.l_cd1,
        l_cd2=r_surf.l_cd2,
        l_n=r_surf.l_n,
        l_trace=trace,
        l_cloth=cloth,
        total_mesh=r_mesh.total_mesh,
        total_surface=r_surf.total_surface,
        total=total,
    )
    caches = {
        "body_cache": body_cache,
        "cache_l": cache_l,
        "fmap": fmap,
        "surf_cache": surf_cache,
        "ref_cache": ref_cache,
        "c_mesh": c_mesh,
        "c_surf": c_surf,
        "c_trace": c_trace,
    }
    return report, caches


def evaluate_losses(net: Network, sample: Sample) -> LossReport:
    """Price a sample without touching any parameter."""
    return _compute_losses(net, sample)[0]


def training_step(net: Network, sample: Sample, cfg: NetworkConfig | None = None):
    """One forward/backward/update. Returns (net, LossReport).

    During the warm-up phase only the body composite is descended, at
    warmup_learning_rate when one is set; the surface branches still run so
    the report stays complete. After warm-up the step size decays
    geometrically from learning_rate to lr_final across the remaining step
    budget: the early rate is what lets the encoder pathway learn to tell
    samples apart, the late rate is what lets the L1 terms settle instead
    of rattling at an amplitude proportional to the step size.
    """
    cfg = net.cfg if cfg is None else cfg
    lcfg = cfg.loss
    warmup = net.step < cfg.warmup_steps
    if net.step == cfg.warmup_steps and cfg.warmup_steps > 0:
        # drop momentum accumulated against the body-only objective
        for v in net.velocity.values():
            v[:] = 0.0
    report, caches = _compute_losses(net, sample)

    grads = {k: np.zeros_like(v) for k, v in net.params.arrays.items()}

    def add(extra: dict):
        for k, v in extra.items():
            grads[k] += v

    d_body = loss_mesh_backward(caches["c_mesh"], 1.0)
    d_cam = np.zeros(3)
    if not warmup:
        d_surf = loss_surface_backward(caches["c_surf"], 1.0)
        d_trace_pred, d_trace_ref = loss_trace_backward(caches["c_trace"], lcfg.lambda_trace)
        g_surf, d_fmap, d_mesh_in, d_cam_surf = _backward_surface(
            net, caches["surf_cache"], d_surf + d_trace_pred
        )
        add(g_surf)
        d_body = d_body + d_mesh_in
        d_cam = d_cam + d_cam_surf
        # the reference branch starts from constants; only its parameter and
        # feature-map gradients survive
        g_ref, d_fmap_ref, _, _ = _backward_surface(net, caches["ref_cache"], d_trace_ref)
        add(g_ref)
        _, g_local = encode_local_backward(caches["cache_l"], d_fmap + d_fmap_ref)
        add(g_local)
    add(_backward_body(net, caches["body_cache"], d_body, d_cam))

    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise StructuralError(f"gradient for block {name!r} is not finite")
    if cfg.grad_clip is not None:
        norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
        if norm > cfg.grad_clip:
            factor = cfg.grad_clip / norm
            for g in grads.values():
                g *= factor

    lr = cfg.learning_rate
    if warmup:
        if cfg.warmup_learning_rate is not None:
            lr = cfg.warmup_learning_rate
    elif cfg.lr_final is not None and cfg.learning_rate > 0:
        span = cfg.steps - cfg.warmup_steps - 1
        if span > 0:
            u = min(1.0, max(0.0, (net.step - cfg.warmup_steps) / span))
            lr = cfg.learning_rate * (cfg.lr_final / cfg.learning_rate) ** u
    for name, g in grads.items():
        net.velocity[name] = cfg.momentum * net.velocity[name] + g
        net.params.arrays[name] -= lr * net.velocity[name]
    net.params.check_finite()
    net.step += 1
    return net, report


def make_synthetic_dataset(seed: int, n: int, cfg: NetworkConfig | None = None):
    """Generate n deformed-sphere samples with rendered input channels.

    Bodies are axis-scaled, bump-modulated icospheres; surfaces sit strictly
    outside their body along the vertex normals by a spatially varying
    clothing offset in [0.02, 0.15]. Channels are rendered from the surface:
    rgb shades the front normals, depth is the normalized z-buffer, and the
    two normal maps view the surface from 0 and 180 degrees.

    Every sample is rendered under one shared canonical camera sized to the
    largest possible surface, so body size and aspect stay visible in image
    space instead of being normalized away by per-sample framing.
    """
    if cfg is None:
        cfg = NetworkConfig()
    if n < 1:
        raise StructuralError("n must be >= 1")
    template = make_icosphere(cfg.subdivisions)
    regressor = cluster_regressor(template.vertices, cfg.n_joints)
    # max radius: axis scale 1.25 x bump (1 + 2*0.1) x clothing (+0.15) = 1.65
    reach = 1.65
    corners = np.array([(sx, sy, sz) for sx in (-reach, reach)
                        for sy in (-reach, reach) for sz in (-reach, reach)], dtype=np.float64)
    cam = fit_camera(corners, cfg.image_size, cfg.image_size)
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(n):
        axis = rng.uniform(0.8, 1.25, 3)
        verts = template.vertices * axis
        waves = rng.uniform(1.0, 2.5, (2, 3))
        phases = rng.uniform(0.0, 2.0 * np.pi, 2)
        amps = rng.uniform(0.03, 0.1, 2)
        bump = 1.0 + sum(amps[j] * np.sin(verts @ waves[j] + phases[j]) for j in range(2))
        verts = verts * bump[:, None]
        body = template.with_vertices(verts)
        normals = vertex_normals(body)
        wave = rng.uniform(1.0, 2.0, 3)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        offset = 0.02 + 0.13 * (0.5 + 0.5 * np.sin(verts @ wave + phase))
        surface = template.with_vertices(verts + offset[:, None] * normals)
        nm_front = rasterize_normal_map(surface, 0.0, cam)
        nm_back = rasterize_normal_map(surface, 180.0, cam)
        depth = rasterize_depth_map(surface, cam)
        rgb = (nm_front.values + 1.0) / 2.0
        stack = ImageStack.from_channels(
            {
                "rgb": rgb,
                "depth": depth,
                "normal_front": nm_front.values,
                "normal_back": nm_back.values,
            },
            STACK_PLAN,
        )
        samples.append(
            Sample(stack=stack, body=body, surface=surface, joints=regressor.joints(verts), cam=cam)
        )
    return samples


@dataclass
class TrainHistory:
    """Loss rows per step plus periodic held-out metric rows."""

    steps: list = field(default_factory=list)
    reports: list = field(default_factory=list)
    metric_rows: dict = field(default_factory=dict)

    LOSS_COLUMNS = ("lv", "lj", "lcd1", "lcd2", "ln", "ltrace", "lcloth", "total")
    METRIC_COLUMNS = ("mvpe", "mpjpe", "eps_cd")

    def add(self, step: int, report: LossReport) -> None:
        if self.steps and step <= self.steps[-1]:
            raise StructuralError("history steps must be strictly increasing")
        self.steps.append(step)
        self.reports.append(report)

    def add_metrics(self, step: int, row: dict) -> None:
        if step not in self.steps:
            raise StructuralError("metrics must attach to a recorded step")
        self.metric_rows[step] = {k: float(row[k]) for k in self.METRIC_COLUMNS}

    def to_csv(self) -> str:
        lines = ["step," + ",".join(self.LOSS_COLUMNS + self.METRIC_COLUMNS)]
        for step, report in zip(self.steps, self.reports):
            values = [
                report.l_v, report.l_j, report.l_cd1, report.l_cd2, report.l_n,
                report.l_trace, report.l_cloth, report.total,
            ]
            cells = [str(step)] + [repr(float(v)) for v in values]
            metric = self.metric_rows.get(step)
            if metric is None:
                cells += ["", "", ""]
            else:
                cells += [repr(metric[k]) for k in self.METRIC_COLUMNS]
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"


def save_checkpoint(net: Network) -> bytes:
    """Serialize parameters with the config and step in the manifest.

    Optimizer velocity is deliberately not stored: a loaded network resumes
    with fresh momentum.
    """
    extra = {"kind": _CHECKPOINT_KIND, "config": net.cfg.to_json(), "step": net.step}
    return serialize_params(net.params, extra_manifest=extra)


def load_checkpoint(data: bytes) -> Network:
    params, manifest = deserialize_params(data)
    if manifest.get("kind") != _CHECKPOINT_KIND:
        raise StructuralError(f"checkpoint kind {manifest.get('kind')!r} is not {_CHECKPOINT_KIND!r}")
    cfg = NetworkConfig.from_json(manifest["config"])
    return Network(cfg, params, step=int(manifest.get("step", 0)))


def _held_out_metrics(net: Network, sample: Sample) -> dict:
    body, _, surf = forward(net, sample)
    return {
        "mvpe": mvpe(body.vertices, sample.body.vertices),
        "mpjpe": mpjpe(net.regressor.joints(body.vertices), sample.joints),
        "eps_cd": surface_distances(surf, sample.surface, net.cfg.metric_samples, seed=0)[0],
    }


def train_toy(cfg: NetworkConfig, out_dir=None):
    """Train on a small synthetic dataset; returns (checkpoint bytes, history).

    Row 0 of the history prices the untrained network on the first training
    sample; metric rows are computed on a held-out sample every
    cfg.eval_every steps and at the end. With out_dir set, checkpoint.bin and
    history.csv are written there.
    """
    net = build_network(cfg)
    samples = make_synthetic_dataset(cfg.seed, cfg.n_train + 1, cfg)
    train, held = samples[: cfg.n_train], samples[cfg.n_train]
    history = TrainHistory()
    history.add(0, evaluate_losses(net, train[0]))
    history.add_metrics(0, _held_out_metrics(net, held))
    for step in range(1, cfg.steps + 1):
        sample = train[(step - 1) % len(train)]
        net, report = training_step(net, sample)
        history.add(step, report)
        if step % cfg.eval_every == 0 or step == cfg.steps:
            history.add_metrics(step, _held_out_metrics(net, held))
    blob = save_checkpoint(net)
    if out_dir is not None:
        from pathlib import Path

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "checkpoint.bin").write_bytes(blob)
        (out / "history.csv").write_text(history.to_csv())
    return blob, history
