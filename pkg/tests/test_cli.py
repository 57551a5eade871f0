"""Command-line front end: exit codes, config handling, determinism."""
from __future__ import annotations

import json

import numpy as np
import pytest

from conftest import box_mesh, icosphere
from udfcodec.cli import main, parse_config
from udfcodec.mesh import save_mesh
from udfcodec.udf import load_udfv


@pytest.fixture(scope="module")
def sphere_obj(tmp_path_factory):
    path = tmp_path_factory.mktemp("meshes") / "sphere.obj"
    save_mesh(icosphere(2), path)
    return str(path)


@pytest.fixture(scope="module")
def box_obj(tmp_path_factory):
    path = tmp_path_factory.mktemp("meshes") / "box.obj"
    save_mesh(box_mesh(), path)
    return str(path)


class TestExitCodes:
    def test_unknown_command_is_usage_error(self, capsys):
        assert main(["frobnicate"]) == 1

    def test_missing_required_flag(self, sphere_obj, tmp_path, capsys):
        out = str(tmp_path / "x.udfv")
        assert main(["voxelize", sphere_obj, out]) == 1  # no --n

    def test_missing_input_file_is_pipeline_error(self, tmp_path, capsys):
        out = str(tmp_path / "x.udfv")
        assert main(["voxelize", str(tmp_path / "nope.obj"), out, "--n", "32"]) == 2

    def test_bad_resolution_is_pipeline_error(self, sphere_obj, tmp_path, capsys):
        out = str(tmp_path / "x.udfv")
        assert main(["voxelize", sphere_obj, out, "--n", "33"]) == 2

    def test_bad_threads_is_usage_error(self, sphere_obj, tmp_path, capsys):
        out = str(tmp_path / "x.udfv")
        assert main(["voxelize", sphere_obj, out, "--n", "32",
                     "--threads", "0"]) == 1

    def test_success_is_zero(self, sphere_obj, tmp_path, capsys):
        out = str(tmp_path / "x.udfv")
        assert main(["voxelize", sphere_obj, out, "--n", "32"]) == 0


class TestConfig:
    def test_parse_flat_key_value(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("# comment\nn = 32\ns = 4\nlr = 1e-4\n\ncorpus = a.obj, b.obj\n")
        conf = parse_config(str(p))
        assert conf == {"n": "32", "s": "4", "lr": "1e-4", "corpus": "a.obj, b.obj"}

    def test_unknown_key_rejected(self, tmp_path, capsys, sphere_obj):
        p = tmp_path / "run.cfg"
        p.write_text("banana = 7\n")
        out = str(tmp_path / "x.udfv")
        assert main(["voxelize", sphere_obj, out, "--config", str(p)]) == 1
        assert "banana" in capsys.readouterr().err

    def test_config_supplies_missing_flags(self, tmp_path, sphere_obj, capsys):
        p = tmp_path / "run.cfg"
        p.write_text("n = 32\n")
        out = str(tmp_path / "x.udfv")
        assert main(["voxelize", sphere_obj, out, "--config", str(p)]) == 0
        assert load_udfv(out).N == 32

    def test_explicit_flag_wins_over_config(self, tmp_path, sphere_obj, capsys):
        p = tmp_path / "run.cfg"
        p.write_text("n = 16\n")
        out = str(tmp_path / "x.udfv")
        assert main(["voxelize", sphere_obj, out, "--n", "32",
                     "--config", str(p)]) == 0
        assert load_udfv(out).N == 32

    def test_malformed_line_rejected(self, tmp_path, sphere_obj, capsys):
        p = tmp_path / "run.cfg"
        p.write_text("just some words\n")
        out = str(tmp_path / "x.udfv")
        assert main(["voxelize", sphere_obj, out, "--config", str(p)]) == 1


class TestPipelineCommands:
    def test_voxelize_partition_reassemble_chain(self, box_obj, tmp_path, capsys):
        vox = str(tmp_path / "box.udfv")
        blk = str(tmp_path / "box.ublk")
        back = str(tmp_path / "back.udfv")
        assert main(["voxelize", box_obj, vox, "--n", "32"]) == 0
        assert main(["partition", vox, blk, "--s", "4", "--alpha", "0"]) == 0
        assert main(["reassemble", blk, back]) == 0
        a, b = load_udfv(vox), load_udfv(back)
        np.testing.assert_array_equal(a.coords, b.coords)
        np.testing.assert_array_equal(a.values, b.values)

    def test_eval_reports_json(self, sphere_obj, box_obj, tmp_path, capsys):
        report_path = tmp_path / "report.json"
        # K large enough that sample spacing is well under the 0.01 threshold
        assert main(["eval", sphere_obj, sphere_obj, "--k-samples", "100000",
                     "--out", str(report_path)]) == 0
        report = json.loads(report_path.read_text())
        assert set(report) == {"cd", "f1_001", "f1_01", "K", "seed"}
        # same surface, different sample seeds: near-zero, not exactly zero
        assert report["cd"] < 0.01 and report["f1_01"] > 99.0

    def test_train_then_reconstruct(self, box_obj, tmp_path, capsys):
        ckpt = str(tmp_path / "m.logv")
        assert main(["train", box_obj, "--n", "32", "--s", "4", "--steps", "2",
                     "--checkpoint", ckpt, "--checkpoint-every", "0",
                     "--seed", "0"]) == 0
        out = str(tmp_path / "rec.obj")
        code = main(["reconstruct", box_obj, out, "--checkpoint", ckpt,
                     "--n", "32", "--s", "4", "--deterministic"])
        assert code == 0


class TestDeterminism:
    def test_voxelize_repeat_byte_identical(self, sphere_obj, tmp_path, capsys):
        a, b = str(tmp_path / "a.udfv"), str(tmp_path / "b.udfv")
        for out in (a, b):
            assert main(["voxelize", sphere_obj, out, "--n", "32",
                         "--threads", "1"]) == 0
        assert open(a, "rb").read() == open(b, "rb").read()

    def test_threads_do_not_change_bytes(self, sphere_obj, tmp_path, capsys):
        one, two = str(tmp_path / "t1.udfv"), str(tmp_path / "t2.udfv")
        assert main(["voxelize", sphere_obj, one, "--n", "32", "--threads", "1"]) == 0
        assert main(["voxelize", sphere_obj, two, "--n", "32", "--threads", "2"]) == 0
        assert open(one, "rb").read() == open(two, "rb").read()
