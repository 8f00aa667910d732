"""Command-line surface: validate, metrics, render, gradcheck, train-toy.

Exit codes are stable API: 0 success, 1 validation failure, 2 usage error,
3 I/O error, 4 numerical failure. Commands are non-interactive, read only
the paths named in their arguments, and write only under --out/--out-dir.
JSON payloads carry a schema_version field.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .checks import CASE_NAMES, run_gradient_suite
from .errors import DegenerateGeometryError, GradientCheckError, ParseError, StructuralError
from .imageio import write_pfm, write_pgm
from .losses import JointRegressor, cluster_regressor
from .mesh import load_obj, validate_manifold, write_obj
from .metrics import MetricConfig, evaluate_pair
from .pipeline import (
    NetworkConfig,
    forward,
    load_checkpoint,
    make_synthetic_dataset,
    train_toy,
)
from .raster import fit_camera, rasterize_normal_map, rasterize_silhouette

SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4


def _write_json(path, command: str, payload: dict) -> None:
    doc = {"schema_version": SCHEMA_VERSION, "command": command}
    doc.update(payload)
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def _load_mesh(path, role: str = "generic"):
    try:
        return load_obj(path, role=role)
    except FileNotFoundError:
        raise _ExitWith(EXIT_IO, f"cannot open {path}: no such file")
    except (OSError, ParseError) as e:
        raise _ExitWith(EXIT_IO, f"cannot read mesh {path}: {e}")


class _ExitWith(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def cmd_validate(args) -> int:
    mesh = _load_mesh(args.mesh)
    report = validate_manifold(mesh)
    if report.passed:
        print(f"{args.mesh}: manifold ok "
              f"({mesh.n_vertices} vertices, {mesh.n_faces} faces, {mesh.n_edges} edges)")
    else:
        print(f"{args.mesh}: {len(report.violations)} violation(s)")
        for v in report.violations:
            print(f"  {v['kind']}: indices {v['indices']}")
    if args.json:
        _write_json(args.json, "validate", json.loads(report.to_json()))
    return EXIT_OK if report.passed else EXIT_VALIDATION


def _regressor_from_args(args, gt) -> JointRegressor | None:
    if args.joints and args.regressor:
        raise _ExitWith(EXIT_USAGE, "--joints and --regressor are mutually exclusive")
    if args.regressor:
        return cluster_regressor(gt.vertices, args.regressor)
    if args.joints:
        try:
            matrix = np.loadtxt(args.joints, ndmin=2)
        except FileNotFoundError:
            raise _ExitWith(EXIT_IO, f"cannot open {args.joints}: no such file")
        except (OSError, ValueError) as e:
            raise _ExitWith(EXIT_IO, f"cannot read regressor matrix {args.joints}: {e}")
        return JointRegressor(matrix)
    return None


def cmd_metrics(args) -> int:
    recon = _load_mesh(args.recon)
    gt = _load_mesh(args.gt, role="ground_truth")
    regressor = _regressor_from_args(args, gt)
    cfg = MetricConfig(n_samples=args.samples, normal_resolution=args.res)
    report = evaluate_pair(recon, gt, regressor=regressor, cfg=cfg)
    for name, value in report.to_json().items():
        if isinstance(value, float):
            print(f"{name:>10s}: {value:.6g}")
        else:
            print(f"{name:>10s}: {value}")
    if args.json:
        _write_json(args.json, "metrics", report.to_json())
    return EXIT_OK


def _parse_angles(text: str) -> list:
    try:
        return [float(part) for part in text.split(",") if part.strip() != ""]
    except ValueError:
        raise _ExitWith(EXIT_USAGE, f"bad --angle value {text!r}: expected comma-separated degrees")


def cmd_render(args) -> int:
    mesh = _load_mesh(args.mesh)
    angles = _parse_angles(args.angle)
    if not angles:
        raise _ExitWith(EXIT_USAGE, "--angle must name at least one view")
    cam = fit_camera(mesh.vertices, args.res, args.res)
    out = Path(args.out)
    multi = len(angles) > 1
    written = []
    for angle in angles:
        path = out if not multi else out.with_name(f"{out.stem}_{int(round(angle)) % 360:03d}{out.suffix}")
        if args.mode == "silhouette":
            mask = rasterize_silhouette(mesh, cam, angle_deg=angle)
            write_pgm(path, np.where(mask.values, 255, 0).astype(np.uint8))
        else:
            nm = rasterize_normal_map(mesh, angle, cam)
            write_pfm(path, nm.values)
        written.append(str(path))
    print("\n".join(written))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    try:
        suite = run_gradient_suite(
            seeds=tuple(args.seed), tolerance=args.tolerance, fault=args.inject_fault
        )
    except ValueError as e:
        raise _ExitWith(EXIT_USAGE, str(e))
    for result in suite.results:
        print(result)
    print(f"suite {'ok' if suite.passed else 'FAIL'}: {len(suite.results)} cases, "
          f"max rel err {suite.max_error:.3e}, tol {args.tolerance:g}")
    if args.json:
        _write_json(args.json, "gradcheck", suite.to_json())
    return EXIT_OK if suite.passed else EXIT_NUMERICAL


def cmd_train_toy(args) -> int:
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise _ExitWith(EXIT_IO, f"cannot open {args.config}: no such file")
        except OSError as e:
            raise _ExitWith(EXIT_IO, f"cannot read config {args.config}: {e}")
        except json.JSONDecodeError as e:
            raise _ExitWith(EXIT_USAGE, f"config {args.config} is not valid JSON: {e}")
        try:
            cfg = NetworkConfig.from_json(doc)
        except (StructuralError, TypeError) as e:
            raise _ExitWith(EXIT_USAGE, f"bad config: {e}")
    else:
        cfg = NetworkConfig()
    out_dir = Path(args.out_dir)
    blob, history = train_toy(cfg, out_dir=out_dir)
    net = load_checkpoint(blob)
    held = make_synthetic_dataset(cfg.seed, cfg.n_train + 1, cfg)[cfg.n_train]
    body, _, surf = forward(net, held)
    write_obj(body, out_dir / "held_out_body.obj")
    write_obj(surf, out_dir / "held_out_surface.obj")
    first, last = history.reports[0], history.reports[-1]
    print(f"trained {cfg.steps} steps: total {first.total:.6g} -> {last.total:.6g}")
    print(f"wrote checkpoint.bin, history.csv, held_out_body.obj, held_out_surface.obj "
          f"under {out_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="meshmutual",
        description="Mesh recovery and refinement toolkit: validation, metrics, "
                    "rendering, gradient audit, toy training.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a mesh is a closed, consistently wound 2-manifold")
    p.add_argument("mesh", help="OBJ path")
    p.add_argument("--json", metavar="OUT", help="write the report as JSON")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("metrics", help="metric battery for a reconstruction/ground-truth pair")
    p.add_argument("recon", help="reconstructed mesh OBJ")
    p.add_argument("gt", help="ground-truth mesh OBJ")
    p.add_argument("--joints", metavar="PATH",
                   help="joint regressor matrix (text, K rows by V columns)")
    p.add_argument("--regressor", type=int, metavar="K",
                   help="build a K-joint cluster regressor from the ground-truth mesh")
    p.add_argument("--samples", type=int, default=10_000, help="surface sample count")
    p.add_argument("--res", type=int, default=512, help="normal map resolution")
    p.add_argument("--json", metavar="OUT", help="write the report as JSON")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("render", help="render a silhouette (PGM) or normal map (PFM)")
    p.add_argument("mesh", help="OBJ path")
    p.add_argument("--mode", choices=("silhouette", "normals"), default="silhouette")
    p.add_argument("--angle", default="0",
                   help="yaw in degrees; comma-separated list renders one file per view")
    p.add_argument("--res", type=int, default=256, help="output resolution")
    p.add_argument("--out", required=True, help="output path (suffixed per angle for lists)")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("gradcheck", help="audit analytic gradients against central differences")
    p.add_argument("--seed", type=int, action="append",
                   help="repeatable; defaults to seeds 0, 1, 2")
    p.add_argument("--tolerance", type=float, default=1e-4, help="max relative error")
    p.add_argument("--inject-fault", metavar="CASE", choices=CASE_NAMES,
                   help="corrupt one case's gradients to confirm the audit detects it")
    p.add_argument("--json", metavar="OUT", help="write the suite report as JSON")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train-toy", help="train the toy pipeline on synthetic data")
    p.add_argument("--config", metavar="PATH",
                   help="JSON config with sections network/losses/training/data")
    p.add_argument("--out-dir", required=True,
                   help="directory for checkpoint.bin, history.csv, and held-out OBJs")
    p.set_defaults(func=cmd_train_toy)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on usage errors and 0 on --help; keep those codes
        return int(e.code or 0)
    if getattr(args, "seed", None) is not None and not args.seed:
        args.seed = None
    if args.command == "gradcheck" and args.seed is None:
        args.seed = [0, 1, 2]
    try:
        return args.func(args)
    except _ExitWith as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (ParseError,) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (GradientCheckError, DegenerateGeometryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except StructuralError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
