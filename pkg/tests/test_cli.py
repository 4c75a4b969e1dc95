import filecmp
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from umbra import cli
from umbra.dataio import read_pgm, read_results_csv, split_of
from umbra.errors import UmbraError


def run(*argv):
    return cli.main([str(a) for a in argv])


def same_tree(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(same_tree(s.left, s.right) for s in cmp.subdirs.values())


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("gen-data", "--out", root / "d", "--n", 10, "--seed", 7) == 0
    return root / "d"


class TestParsing:
    def test_unknown_flag(self, capsys):
        assert run("gen-data", "--out", "x", "--n", 1, "--bogus") == 1
        assert "--bogus" in capsys.readouterr().err

    def test_missing_subcommand(self):
        assert run() == 1

    def test_help(self, capsys):
        assert run("--help") == 0
        assert "gen-data" in capsys.readouterr().out

    def test_seed_env_fallback(self, monkeypatch):
        monkeypatch.setenv(cli.SEED_ENV, "42")
        assert cli.resolve_seed(None) == 42
        assert cli.resolve_seed(3) == 3
        monkeypatch.delenv(cli.SEED_ENV)
        assert cli.resolve_seed(None) == 0

    def test_bad_seed(self, monkeypatch):
        monkeypatch.setenv(cli.SEED_ENV, "abc")
        assert run("gradcheck", "--cases", 1) == 1
        assert run("gradcheck", "--cases", 1, "--seed", -1) == 1

    def test_verbose_echo(self, capsys):
        assert run("--verbose", "gradcheck", "--cases", 1, "--seed", 2) == 0
        out = capsys.readouterr().out
        config = json.loads(out[:out.index("}") + 1])
        assert config["command"] == "gradcheck" and config["seed"] == 2 and config["cases"] == 1

    def test_global_flags_after_subcommand(self, capsys):
        assert run("gradcheck", "--cases", 1, "--seed", 5, "--verbose") == 0
        assert '"seed": 5' in capsys.readouterr().out


class TestGenData:
    def test_layout(self, data):
        dirs = sorted(p.name for p in data.iterdir() if p.is_dir())
        assert dirs == [f"scene_{i:04d}" for i in range(10)]
        assert (data / "manifest.json").exists()

    def test_repeatable_any_threads(self, data, tmp_path):
        assert run("gen-data", "--out", tmp_path / "again", "--n", 10, "--seed", 7, "--threads", 3) == 0
        assert same_tree(data, tmp_path / "again")

    def test_unwritable(self, tmp_path, capsys):
        blocker = tmp_path / "file"
        blocker.write_text("")
        assert run("gen-data", "--out", blocker / "sub", "--n", 1) == 1
        assert str(blocker) in capsys.readouterr().err

    def test_degenerate_exit_code(self, tmp_path, monkeypatch):
        from umbra import dataio
        from umbra.errors import DegenerateScene

        def boom(*a, **k):
            raise DegenerateScene("no usable scene")

        monkeypatch.setattr(dataio, "sample_scene", boom)
        assert run("gen-data", "--out", tmp_path / "x", "--n", 1) == 2


class TestRender:
    def test_matches_stored_mask(self, data, tmp_path):
        scene = data / "scene_0000"
        assert run("render", "--scene", scene / "scene.json", "--out", tmp_path / "s.pgm",
                   "--segmentation", tmp_path / "seg.pgm") == 0
        np.testing.assert_array_equal(read_pgm(tmp_path / "s.pgm") > 127, read_pgm(scene / "shadow.pgm") > 127)
        np.testing.assert_array_equal(read_pgm(tmp_path / "s.valid.pgm"), read_pgm(scene / "shadow.valid.pgm"))
        np.testing.assert_array_equal(read_pgm(tmp_path / "seg.pgm"), read_pgm(scene / "seg.pgm"))

    def test_missing_scene(self, tmp_path):
        assert run("render", "--scene", tmp_path / "none.json", "--out", tmp_path / "s.pgm") == 1


class TestReconstruct:
    def args(self, data, out, *extra):
        s = data / "scene_0001"
        return ["reconstruct", "--shadow", s / "shadow.pgm", "--scene", s / "scene.json", "--restarts", 2,
                "--steps", 4, "--out", out, *extra]

    def test_outputs(self, data, tmp_path):
        assert run(*self.args(data, tmp_path / "r")) == 0
        for name in ("result.json", "losses.csv", "best.obj", "best_shadow.pgm"):
            assert (tmp_path / "r" / name).exists()
        result = json.loads((tmp_path / "r" / "result.json").read_text())
        assert result["lr"] == 1.0
        assert len(result["restarts"]) == 2
        assert abs(np.linalg.norm(result["latent"]) - 1) < 1e-9
        lines = (tmp_path / "r" / "losses.csv").read_text().splitlines()
        assert lines[0] == "restart,step,loss" and len(lines) == 1 + 2 * 4

    def test_unknown_light_lr(self, data, tmp_path):
        assert run(*self.args(data, tmp_path / "a", "--unknown-light")) == 0
        assert json.loads((tmp_path / "a" / "result.json").read_text())["lr"] == 0.01
        assert run(*self.args(data, tmp_path / "b", "--unknown-light", "--lr", 0.5)) == 0
        assert json.loads((tmp_path / "b" / "result.json").read_text())["lr"] == 0.5

    def test_threads_identical(self, data, tmp_path):
        assert run(*self.args(data, tmp_path / "one"), "--threads", 1) == 0
        assert run(*self.args(data, tmp_path / "two"), "--threads", 2) == 0
        assert same_tree(tmp_path / "one", tmp_path / "two")

    def test_missing_scene(self, data, tmp_path):
        argv = self.args(data, tmp_path / "r")
        argv[argv.index("--scene") + 1] = tmp_path / "missing.json"
        assert run(*argv) == 1

    def test_all_restarts_fail(self, data, tmp_path, monkeypatch):
        def diverge(*a, **k):
            raise UmbraError("every restart diverged")

        monkeypatch.setattr(cli, "reconstruct", diverge)
        assert run(*self.args(data, tmp_path / "r")) == 3


class TestEval:
    @pytest.mark.parametrize("method", ["random", "nn"])
    def test_baselines(self, data, tmp_path, capsys, method):
        assert run("eval", "--dataset", data, "--method", method, "--out", tmp_path / "r.csv",
                   "--iou-samples", 5000) == 0
        rows = read_results_csv(tmp_path / "r.csv")
        assert [int(r["scene"]) for r in rows] == [i for i in range(10) if split_of(i) == "test"]
        assert all(r["method"] == method and 0 <= r["iou"] <= 1 for r in rows)
        out = capsys.readouterr().out
        assert f"{method} blob mean_iou" in out
        assert float(out.split()[3]) == pytest.approx(np.mean([r["iou"] for r in rows]), abs=1e-4)

    def test_latent_threads_identical(self, data, tmp_path):
        common = ["eval", "--dataset", data, "--method", "latent", "--restarts", 2, "--steps", 3,
                  "--iou-samples", 5000]
        assert run(*common, "--out", tmp_path / "a.csv", "--threads", 1) == 0
        assert run(*common, "--out", tmp_path / "b.csv", "--threads", 2) == 0
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_missing_dataset(self, tmp_path):
        assert run("eval", "--dataset", tmp_path / "none", "--method", "random", "--out", tmp_path / "r.csv") == 1


class TestGradcheck:
    def test_passes(self, capsys):
        assert run("gradcheck", "--cases", 1) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert [l.split()[0] for l in lines] == ["decode", "occupancy", "renderer", "loss"]
        assert all(float(l.split()[2]) < 1e-3 for l in lines)

    def test_zero_cases(self):
        assert run("gradcheck", "--cases", 0) == 1

    def test_deterministic(self, capsys):
        run("gradcheck", "--cases", 1, "--seed", 9)
        first = capsys.readouterr().out
        run("gradcheck", "--cases", 1, "--seed", 9)
        assert capsys.readouterr().out == first


def test_console_script(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "umbra.cli", "gradcheck", "--cases", "1"],
                          capture_output=True, text=True, env={**os.environ, "UMBRA_SEED": "1"})
    assert proc.returncode == 0, proc.stderr
    assert "loss max_rel_error" in proc.stdout
