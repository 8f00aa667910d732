"""CLI contract tests: subcommand behavior and stable exit codes."""

import json

import numpy as np
import pytest

from meshmutual.cli import main
from meshmutual.mesh import make_icosphere, write_obj

TRIANGLE_OBJ = "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n"


@pytest.fixture
def sphere_path(tmp_path):
    path = tmp_path / "sphere.obj"
    write_obj(make_icosphere(1), path)
    return path


@pytest.fixture
def triangle_path(tmp_path):
    path = tmp_path / "triangle.obj"
    path.write_text(TRIANGLE_OBJ)
    return path


class TestValidate:
    def test_manifold_ok(self, sphere_path, capsys):
        assert main(["validate", str(sphere_path)]) == 0
        assert "manifold ok" in capsys.readouterr().out

    def test_violations_exit_1(self, triangle_path, tmp_path, capsys):
        report = tmp_path / "report.json"
        assert main(["validate", str(triangle_path), "--json", str(report)]) == 1
        assert "violation" in capsys.readouterr().out
        doc = json.loads(report.read_text())
        assert doc["schema_version"] == 1
        assert doc["command"] == "validate"
        assert doc["pass"] is False
        assert doc["violations"]

    def test_missing_file_exit_3(self, tmp_path, capsys):
        assert main(["validate", str(tmp_path / "absent.obj")]) == 3
        assert "cannot open" in capsys.readouterr().err


class TestMetrics:
    def test_identical_pair_near_zero(self, sphere_path, tmp_path, capsys):
        out = tmp_path / "metrics.json"
        code = main([
            "metrics", str(sphere_path), str(sphere_path),
            "--regressor", "3", "--samples", "200", "--res", "64",
            "--json", str(out),
        ])
        assert code == 0
        doc = json.loads(out.read_text())
        assert doc["schema_version"] == 1
        assert doc["mvpe"] == 0.0
        assert doc["mpjpe"] == 0.0
        assert doc["eps_cd"] < 1e-9

    def test_without_regressor_joint_metrics_absent(self, sphere_path, tmp_path):
        out = tmp_path / "metrics.json"
        code = main([
            "metrics", str(sphere_path), str(sphere_path),
            "--samples", "200", "--res", "64", "--json", str(out),
        ])
        assert code == 0
        doc = json.loads(out.read_text())
        assert doc["mpjpe"] is None
        assert doc["pa_mpjpe"] is None

    def test_joints_matrix_file(self, sphere_path, tmp_path):
        n_vertices = make_icosphere(1).n_vertices
        matrix = np.zeros((3, n_vertices))
        for k in range(3):
            matrix[k, k::3] = 1.0
        matrix /= matrix.sum(axis=1, keepdims=True)
        joints = tmp_path / "joints.txt"
        np.savetxt(joints, matrix)
        code = main([
            "metrics", str(sphere_path), str(sphere_path),
            "--joints", str(joints), "--samples", "200", "--res", "64",
        ])
        assert code == 0

    def test_joints_and_regressor_conflict(self, sphere_path, tmp_path, capsys):
        joints = tmp_path / "joints.txt"
        joints.write_text("1.0\n")
        code = main([
            "metrics", str(sphere_path), str(sphere_path),
            "--joints", str(joints), "--regressor", "2",
        ])
        assert code == 2
        assert "mutually exclusive" in capsys.readouterr().err

    def test_missing_gt_exit_3(self, sphere_path, tmp_path):
        code = main(["metrics", str(sphere_path), str(tmp_path / "absent.obj")])
        assert code == 3


class TestRender:
    def test_silhouette_pgm(self, sphere_path, tmp_path):
        out = tmp_path / "mask.pgm"
        assert main(["render", str(sphere_path), "--res", "64", "--out", str(out)]) == 0
        assert out.read_bytes().startswith(b"P5")

    def test_normals_multi_angle(self, sphere_path, tmp_path):
        out = tmp_path / "nm.pfm"
        code = main([
            "render", str(sphere_path), "--mode", "normals",
            "--angle", "0,90", "--res", "32", "--out", str(out),
        ])
        assert code == 0
        for name in ("nm_000.pfm", "nm_090.pfm"):
            assert (tmp_path / name).read_bytes().startswith(b"PF")

    def test_bad_angle_exit_2(self, sphere_path, tmp_path, capsys):
        code = main([
            "render", str(sphere_path), "--angle", "north",
            "--out", str(tmp_path / "m.pgm"),
        ])
        assert code == 2
        assert "expected comma-separated degrees" in capsys.readouterr().err

    def test_bad_mode_exit_2(self, sphere_path, tmp_path, capsys):
        code = main([
            "render", str(sphere_path), "--mode", "wireframe",
            "--out", str(tmp_path / "m.pgm"),
        ])
        assert code == 2


class TestGradcheck:
    def test_suite_passes(self, tmp_path, capsys):
        out = tmp_path / "suite.json"
        assert main(["gradcheck", "--seed", "0", "--json", str(out)]) == 0
        assert "suite ok" in capsys.readouterr().out
        doc = json.loads(out.read_text())
        assert doc["passed"] is True
        assert len(doc["cases"]) == 17

    def test_injected_fault_detected(self, capsys):
        code = main(["gradcheck", "--seed", "0", "--inject-fault", "chamfer"])
        assert code == 4
        assert "suite FAIL" in capsys.readouterr().out

    def test_unknown_fault_exit_2(self):
        assert main(["gradcheck", "--inject-fault", "nonsense"]) == 2


class TestTrainToy:
    CONFIG = {
        "network": {"subdivisions": 0, "encoder_dim": 4, "vertex_width": 8,
                    "edge_width": 6, "image_size": 16, "pattern_size": 1},
        "losses": {"silhouette_res": 32},
        "training": {"steps": 3, "warmup_steps": 1, "eval_every": 2,
                     "metric_samples": 64},
        "data": {"n_train": 1, "n_joints": 2},
    }

    def test_trains_and_writes_artifacts(self, tmp_path, capsys):
        config = tmp_path / "config.json"
        config.write_text(json.dumps(self.CONFIG))
        out_dir = tmp_path / "run"
        assert main(["train-toy", "--config", str(config), "--out-dir", str(out_dir)]) == 0
        assert "trained 3 steps" in capsys.readouterr().out
        for name in ("checkpoint.bin", "history.csv", "held_out_body.obj",
                     "held_out_surface.obj"):
            assert (out_dir / name).exists()
        header = (out_dir / "history.csv").read_text().splitlines()[0]
        assert header == "step,lv,lj,lcd1,lcd2,ln,ltrace,lcloth,total,mvpe,mpjpe,eps_cd"

    def test_reruns_identical(self, tmp_path):
        config = tmp_path / "config.json"
        config.write_text(json.dumps(self.CONFIG))
        blobs = []
        for run in ("a", "b"):
            out_dir = tmp_path / run
            assert main(["train-toy", "--config", str(config), "--out-dir", str(out_dir)]) == 0
            blobs.append((
                (out_dir / "history.csv").read_bytes(),
                (out_dir / "checkpoint.bin").read_bytes(),
            ))
        assert blobs[0] == blobs[1]

    def test_unknown_key_exit_2(self, tmp_path, capsys):
        config = tmp_path / "config.json"
        config.write_text(json.dumps({"training": {"steps": 3, "optimizer": "adam"}}))
        code = main(["train-toy", "--config", str(config), "--out-dir", str(tmp_path / "x")])
        assert code == 2
        assert "optimizer" in capsys.readouterr().err

    def test_malformed_json_exit_2(self, tmp_path, capsys):
        config = tmp_path / "config.json"
        config.write_text("{steps: 3")
        code = main(["train-toy", "--config", str(config), "--out-dir", str(tmp_path / "x")])
        assert code == 2
        assert "not valid JSON" in capsys.readouterr().err

    def test_missing_config_exit_3(self, tmp_path):
        code = main(["train-toy", "--config", str(tmp_path / "absent.json"),
                     "--out-dir", str(tmp_path / "x")])
        assert code == 3


class TestTopLevel:
    def test_no_subcommand_exit_2(self):
        assert main([]) == 2

    def test_help_exit_0(self):
        assert main(["--help"]) == 0
