"""Mesh graphs, mesh-aware convolutions, and a mutualistic deform-then-refine pipeline."""

from .checks import CASE_NAMES, SuiteReport, run_gradient_suite
from .encode import (
    FeatureMap,
    ImageStack,
    assemble_edge_features,
    assemble_vertex_features,
    encode_global_forward,
    encode_local_forward,
    load_image_stack,
    make_pattern,
    puncture_vertex,
    puncture_vertices_forward,
    sample_bilinear,
)
from .errors import (
    DegenerateGeometryError,
    GradientCheckError,
    ParseError,
    StructuralError,
)
from .estimator import MeshRefiner
from .imageio import read_pfm, read_pgm, write_pfm, write_pgm
from .layers import (
    GradCheckReport,
    ParamStore,
    conv2d_forward,
    dense_forward,
    edge_to_vertex_forward,
    grad_check,
    graph_conv_forward,
    init_params,
    mesh_conv_forward,
    serialize_params,
    deserialize_params,
)
from .losses import (
    JointRegressor,
    LossConfig,
    LossReport,
    chamfer,
    cluster_regressor,
    joint_loss,
    loss_cloth,
    loss_collab,
    loss_mesh,
    loss_surface,
    loss_trace,
    normal_loss,
    vertex_loss,
)
from .mesh import (
    EdgeAdjacency,
    MeshGraph,
    ValidationReport,
    build_edge_adjacency,
    build_vertex_adjacency,
    canonical_edges,
    load_obj,
    make_icosphere,
    validate_manifold,
    vertex_normals,
    write_obj,
)
from .metrics import (
    MetricConfig,
    MetricReport,
    evaluate_pair,
    mpjpe,
    mvpe,
    normal_map_metrics,
    pa_mpjpe,
    procrustes_align,
    sample_surface,
    surface_distances,
)
from .pipeline import (
    Network,
    NetworkConfig,
    Sample,
    TrainHistory,
    build_network,
    evaluate_losses,
    forward,
    load_checkpoint,
    make_synthetic_dataset,
    refine_surface,
    save_checkpoint,
    train_toy,
    training_step,
)
from .raster import (
    BinaryMask,
    CameraWP,
    NormalMap,
    fit_camera,
    mask_symmetric_difference,
    project_vertices,
    rasterize_depth_map,
    rasterize_normal_map,
    rasterize_silhouette,
    rotate_view,
)

__all__ = [
    "BinaryMask",
    "CASE_NAMES",
    "CameraWP",
    "DegenerateGeometryError",
    "EdgeAdjacency",
    "FeatureMap",
    "GradCheckReport",
    "GradientCheckError",
    "ImageStack",
    "JointRegressor",
    "LossConfig",
    "LossReport",
    "MeshGraph",
    "MeshRefiner",
    "MetricConfig",
    "MetricReport",
    "Network",
    "NetworkConfig",
    "NormalMap",
    "ParamStore",
    "ParseError",
    "Sample",
    "StructuralError",
    "SuiteReport",
    "TrainHistory",
    "ValidationReport",
    "assemble_edge_features",
    "assemble_vertex_features",
    "build_edge_adjacency",
    "build_network",
    "build_vertex_adjacency",
    "canonical_edges",
    "chamfer",
    "cluster_regressor",
    "conv2d_forward",
    "dense_forward",
    "deserialize_params",
    "edge_to_vertex_forward",
    "encode_global_forward",
    "encode_local_forward",
    "evaluate_losses",
    "evaluate_pair",
    "fit_camera",
    "forward",
    "grad_check",
    "graph_conv_forward",
    "init_params",
    "joint_loss",
    "load_checkpoint",
    "load_image_stack",
    "load_obj",
    "loss_cloth",
    "loss_collab",
    "loss_mesh",
    "loss_surface",
    "loss_trace",
    "make_icosphere",
    "make_pattern",
    "make_synthetic_dataset",
    "mask_symmetric_difference",
    "mesh_conv_forward",
    "mpjpe",
    "mvpe",
    "normal_loss",
    "normal_map_metrics",
    "pa_mpjpe",
    "procrustes_align",
    "project_vertices",
    "puncture_vertex",
    "puncture_vertices_forward",
    "rasterize_depth_map",
    "rasterize_normal_map",
    "rasterize_silhouette",
    "read_pfm",
    "read_pgm",
    "refine_surface",
    "rotate_view",
    "run_gradient_suite",
    "sample_bilinear",
    "sample_surface",
    "save_checkpoint",
    "serialize_params",
    "surface_distances",
    "train_toy",
    "training_step",
    "validate_manifold",
    "vertex_loss",
    "vertex_normals",
    "write_obj",
    "write_pfm",
    "write_pgm",
]

__version__ = "0.1.0"
