import json
import subprocess
import sys
import time

import numpy as np
import pytest

from dpatn.cli import OUTPUT_ENV, main
from dpatn.imaging import save_image
from dpatn.modelio import load_model, save_model
from dpatn.network import default_network
from dpatn.training import params_to_vector

SMALL_SYNTH = ["--crop", "16", "--sources", "2", "--source-size", "24"]


def run(argv, capsys=None):
    code = main([str(a) for a in argv])
    out = capsys.readouterr() if capsys is not None else None
    return code, out


def stdout_table(text):
    return dict(line.split("\t", 1) for line in text.strip().splitlines())


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "synth"
    assert main(["synth", "--pairs", "3", "--seed", "7", "--out", str(out), *SMALL_SYNTH]) == 0
    return out


@pytest.fixture(scope="module")
def model_file(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("train") / "run"
    code = main(["train", "--manifest", str(dataset / "manifest.txt"), "--stages", "1", "--filters", "2",
                 "--max-iter", "5", "--out", str(out)])
    assert code == 0
    return out / "model.json"


@pytest.fixture(scope="module")
def gmm_file(tmp_path_factory):
    out = tmp_path_factory.mktemp("gmm") / "run"
    assert main(["fit-gmm", "--samples", "3", "--size", "32", "--patch", "5", "--iters", "10",
                 "--out", str(out)]) == 0
    return out / "gmm.json"


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    from dpatn.synth import UnderwaterRecipe, procedural_depth, procedural_scene, synth_underwater
    d = tmp_path_factory.mktemp("scene")
    clean = procedural_scene(32, 32, 1)
    obs, _ = synth_underwater(clean, procedural_depth("radial", 32, 32, 2), UnderwaterRecipe(crop=None))
    save_image(obs, d / "obs.png", bits=16)
    save_image(clean, d / "clean.png", bits=16)
    return d


class TestGeneral:
    def test_version(self, capsys):
        code, out = run(["--version"], capsys)
        assert code == 0 and "dpatn" in out.out

    def test_no_command(self, capsys):
        assert run([], capsys)[0] == 2

    def test_unknown_flag(self, capsys):
        assert run(["synth", "--bogus"], capsys)[0] == 2

    def test_help_lists_commands(self, capsys):
        code, out = run(["--help"], capsys)
        assert code == 0
        for name in ("synth", "train", "dehaze", "underwater", "derain", "fit-gmm", "eval", "audit"):
            assert name in out.out

    def test_entry_point_subprocess(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "dpatn", "synth", "--pairs", "1", *SMALL_SYNTH],
                              cwd=tmp_path, capture_output=True, text=True,
                              env={**__import__("os").environ, OUTPUT_ENV: str(tmp_path / "env")})
        assert proc.returncode == 0, proc.stderr
        assert (tmp_path / "env" / "synth" / "manifest.txt").exists()


class TestSynth:
    def test_outputs(self, dataset):
        lines = (dataset / "manifest.txt").read_text().splitlines()
        assert len(lines) == 3
        for sub in ("obs", "trans", "clean"):
            assert len(list((dataset / sub).glob("*.png"))) == 3
        assert (dataset / "recipes.csv").read_text().count("\n") == 4

    def test_deterministic(self, dataset, tmp_path):
        assert main(["synth", "--pairs", "3", "--seed", "7", "--out", str(tmp_path / "b"), *SMALL_SYNTH]) == 0
        for f in dataset.rglob("*"):
            if f.is_file():
                assert f.read_bytes() == (tmp_path / "b" / f.relative_to(dataset)).read_bytes()

    def test_zero_pairs(self, tmp_path, capsys):
        assert run(["synth", "--pairs", "0", "--out", tmp_path / "x"], capsys)[0] == 2

    def test_crop_too_large(self, tmp_path, capsys):
        code, out = run(["synth", "--pairs", "1", "--crop", "64", "--source-size", "32",
                         "--out", tmp_path / "x"], capsys)
        assert code == 2 and "smaller" in out.err

    def test_non_empty_output_rejected(self, tmp_path, capsys):
        (tmp_path / "x").mkdir()
        (tmp_path / "x" / "keep.txt").write_text("data")
        argv = ["synth", "--pairs", "1", "--out", tmp_path / "x", *SMALL_SYNTH]
        assert run(argv, capsys)[0] == 2
        assert run(argv + ["--overwrite"], capsys)[0] == 0

    def test_concurrent_run_rejected(self, tmp_path, capsys):
        (tmp_path / "x").mkdir()
        (tmp_path / "x" / ".dpatn.lock").write_text("123")
        code, out = run(["synth", "--pairs", "1", "--out", tmp_path / "x", *SMALL_SYNTH], capsys)
        assert code == 2 and "in use" in out.err

    def test_env_default(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "base"))
        assert run(["synth", "--pairs", "1", *SMALL_SYNTH], capsys)[0] == 0
        assert (tmp_path / "base" / "synth" / "manifest.txt").exists()

    def test_underwater_kind(self, tmp_path, capsys):
        assert run(["synth", "--pairs", "1", "--kind", "underwater", "--out", tmp_path / "u", *SMALL_SYNTH],
                   capsys)[0] == 0


class TestConfig:
    def test_config_defaults_and_override(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"pairs": 2, "crop": 16, "sources": 1, "source-size": 24}))
        code, out = run(["synth", "--config", cfg, "--out", tmp_path / "a"], capsys)
        assert code == 0 and stdout_table(out.out)["pairs"] == "2"
        code, out = run(["synth", "--config", cfg, "--pairs", "1", "--out", tmp_path / "b"], capsys)
        assert stdout_table(out.out)["pairs"] == "1"

    def test_unknown_key(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"pears": 2}))
        code, out = run(["synth", "--config", cfg, "--out", tmp_path / "a"], capsys)
        assert code == 2 and "pears" in out.err
        assert not (tmp_path / "a").exists()

    def test_unreadable(self, tmp_path, capsys):
        assert run(["synth", "--config", tmp_path / "none.json"], capsys)[0] == 2


class TestTrain:
    def test_smoke(self, tmp_path, capsys):
        data = tmp_path / "d"
        assert main(["synth", "--pairs", "2", "--out", str(data), *SMALL_SYNTH]) == 0
        start = time.perf_counter()
        code, out = run(["train", "--manifest", data / "manifest.txt", "--stages", "1", "--filters", "2",
                         "--out", tmp_path / "m"], capsys)
        assert code == 0 and time.perf_counter() - start < 60
        table = stdout_table(out.out)
        assert table["n_params"] == str(2 * 24 + 2 * 31 + 1)
        for name in ("model.json", "fit.json", "fit.csv", "loss.png"):
            assert (tmp_path / "m" / name).exists()

    def test_modes_differ(self, dataset, tmp_path):
        vecs = []
        for mode in ("greedy", "joint"):
            assert main(["train", "--manifest", str(dataset / "manifest.txt"), "--stages", "2", "--filters", "2",
                         "--max-iter", "5", "--mode", mode, "--out", str(tmp_path / mode)]) == 0
            vecs.append(params_to_vector(load_model(tmp_path / mode / "model.json")))
        assert not np.array_equal(*vecs)

    def test_deterministic(self, dataset, model_file, tmp_path):
        assert main(["train", "--manifest", str(dataset / "manifest.txt"), "--stages", "1", "--filters", "2",
                     "--max-iter", "5", "--out", str(tmp_path / "again")]) == 0
        assert (tmp_path / "again" / "model.json").read_bytes() == model_file.read_bytes()

    def test_missing_manifest(self, tmp_path, capsys):
        assert run(["train", "--manifest", tmp_path / "none.txt", "--out", tmp_path / "m"], capsys)[0] == 2

    def test_bad_target(self, dataset, tmp_path, capsys):
        (tmp_path / "m.txt").write_text(f"{dataset / 'obs/0000.png'}\t{dataset / 'clean/0000.png'}\n")
        code, out = run(["train", "--manifest", tmp_path / "m.txt", "--out", tmp_path / "m"], capsys)
        assert code == 2 and "grayscale" in out.err


class TestRestore:
    def test_dehaze_with_gt(self, dataset, model_file, tmp_path, capsys):
        code, out = run(["dehaze", dataset / "obs/0000.png", "--model", model_file,
                         "--gt", dataset / "clean/0000.png", "--out", tmp_path / "o"], capsys)
        assert code == 0
        table = stdout_table(out.out)
        assert float(table["psnr"]) > 0 and -1 <= float(table["ssim"]) <= 1
        for name in ("J.png", "t.png", "metrics.json", "metrics.csv", "overview.png"):
            assert (tmp_path / "o" / name).exists()

    def test_prior_keyword(self, dataset, tmp_path, capsys):
        assert run(["dehaze", dataset / "obs/0000.png", "--model", "prior", "--out", tmp_path / "o"],
                   capsys)[0] == 0

    def test_missing_model(self, dataset, tmp_path, capsys):
        code, out = run(["dehaze", dataset / "obs/0000.png", "--model", tmp_path / "none.json",
                         "--out", tmp_path / "o"], capsys)
        assert code == 2 and "none.json" in out.err

    def test_missing_input(self, model_file, tmp_path, capsys):
        assert run(["dehaze", tmp_path / "none.png", "--model", model_file, "--out", tmp_path / "o"],
                   capsys)[0] == 2

    def test_gray_input_rejected(self, dataset, model_file, tmp_path, capsys):
        assert run(["dehaze", dataset / "trans/0000.png", "--model", model_file, "--out", tmp_path / "o"],
                   capsys)[0] == 2

    def test_underwater_arms(self, scene, tmp_path, capsys):
        base = ["underwater", scene / "obs.png", "--model", "prior", "--gt", scene / "clean.png"]
        code, out = run(base + ["--out", tmp_path / "w"], capsys)
        assert code == 0 and "certificate" in stdout_table(out.out)
        code, out = run(base + ["--no-separation", "--out", tmp_path / "wo"], capsys)
        assert code == 0 and "certificate" not in stdout_table(out.out)
        w = json.loads((tmp_path / "w" / "summary.json").read_text())
        wo = json.loads((tmp_path / "wo" / "summary.json").read_text())
        assert "separation" in w and "separation" not in wo
        assert (tmp_path / "w" / "convergence.csv").exists()
        assert not (tmp_path / "wo" / "convergence.csv").exists()
        assert w["channel_disparity"] < wo["channel_disparity"]

    def test_derain(self, scene, gmm_file, tmp_path, capsys):
        code, out = run(["derain", scene / "obs.png", "--model", "prior", "--gmm", gmm_file, "--stride", "2",
                         "--out", tmp_path / "r"], capsys)
        assert code == 0
        assert (tmp_path / "r" / "rain.png").exists() and (tmp_path / "r" / "summary.json").exists()

    def test_derain_bad_gmm(self, scene, model_file, tmp_path, capsys):
        assert run(["derain", scene / "obs.png", "--model", "prior", "--gmm", model_file,
                    "--out", tmp_path / "r"], capsys)[0] == 2


class TestFitGMM:
    def test_synthetic(self, gmm_file):
        d = json.loads(gmm_file.read_text())
        assert d["patch"] == 5 and len(d["weights"]) == 3
        assert (gmm_file.parent / "loglik.csv").exists()

    def test_from_images(self, tmp_path, capsys):
        from dpatn.synth import rain_streaks
        save_image(rain_streaks(32, 32, seed=1), tmp_path / "r.png", bits=16)
        code, out = run(["fit-gmm", tmp_path / "r.png", "--patch", "5", "--components", "2",
                         "--out", tmp_path / "g"], capsys)
        assert code == 0 and stdout_table(out.out)["components"] == "2"

    def test_even_patch(self, tmp_path, capsys):
        assert run(["fit-gmm", "--patch", "4", "--out", tmp_path / "g"], capsys)[0] == 2


class TestEval:
    def test_eval(self, dataset, model_file, tmp_path, capsys):
        code, out = run(["eval", "--model", model_file, "--manifest", dataset / "manifest_clean.txt",
                         "--out", tmp_path / "e"], capsys)
        assert code == 0
        table = stdout_table(out.out)
        assert {"model_psnr", "prior_psnr", "dcp_psnr"} <= set(table)
        summary = json.loads((tmp_path / "e" / "eval.json").read_text())
        assert summary["images"] == 3
        assert (tmp_path / "e" / "psnr.png").exists()


class TestAudit:
    def test_default_model_passes(self, tmp_path, capsys):
        save_model(default_network(), tmp_path / "m.json")
        code, out = run(["audit", "--model", tmp_path / "m.json", "--coords", "40", "--out", tmp_path / "a"],
                        capsys)
        assert code == 0
        lines = out.out.strip().splitlines()
        assert len(lines) == 6 and all("\tpass\t" in l for l in lines)
        assert json.loads((tmp_path / "a" / "audit.json").read_text())["passed"]

    def test_untied_skips_energy(self, tmp_path, capsys):
        save_model(default_network(2, n_filters=3, tied=False), tmp_path / "m.json")
        code, out = run(["audit", "--model", tmp_path / "m.json", "--coords", "0", "--out", tmp_path / "a"],
                        capsys)
        assert code == 0
        status = [l.split("\t")[1] for l in out.out.strip().splitlines()]
        assert status == ["skipped", "skipped", "pass"]

    def test_failure_exit_code(self, tmp_path, capsys):
        save_model(default_network(1, n_filters=2), tmp_path / "m.json")
        code, _ = run(["audit", "--model", tmp_path / "m.json", "--tol", "1e-15", "--out", tmp_path / "a"],
                      capsys)
        assert code == 1

    def test_corrupted_model(self, tmp_path, capsys):
        (tmp_path / "m.json").write_text('{"format": "dpatn-model", "version": 1, "shape": ')
        assert run(["audit", "--model", tmp_path / "m.json", "--out", tmp_path / "a"], capsys)[0] == 2
