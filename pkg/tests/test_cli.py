import json

import numpy as np
import pytest

from w2bary import cli
from w2bary import distributions as dist

TINY_TRAIN = {"iterations": 10, "batch": 32, "pretrain_iters": 5, "hidden_scale": 0.125, "log_every": 5}


def write_config(path, **fields):
    doc = {"train": TINY_TRAIN, "eval_samples": 10_000} | fields
    path.write_text(json.dumps(doc))
    return path


def read_outputs(out):
    files = sorted(p for p in out.rglob("*") if p.is_file())
    return {p.relative_to(out).as_posix(): p.read_bytes() for p in files}


class TestWriteImage:
    def test_pure_red(self, tmp_path):
        p = tmp_path / "a.ppm"
        cli.write_image(p, 1, 1, [[1.0, 0.0, 0.0]])
        assert p.read_bytes().endswith(bytes([255, 0, 0]))

    def test_round_half_up_and_clamp(self, tmp_path):
        p = tmp_path / "a.ppm"
        cli.write_image(p, 1, 1, [[0.5, -0.3, 1.7]])
        assert p.read_bytes()[-3:] == bytes([128, 0, 255])

    def test_round_trip(self, tmp_path):
        p = tmp_path / "a.ppm"
        rows = np.random.default_rng(0).uniform(0, 1, (12, 3))
        cli.write_image(p, 4, 3, rows)
        back = dist.load_palette(p)
        assert back.image_shape == (4, 3)
        assert np.abs(back.values - rows).max() <= 0.5 / 255 + 1e-12

    def test_wrong_row_count(self, tmp_path):
        with pytest.raises(ValueError):
            cli.write_image(tmp_path / "a.ppm", 2, 2, np.zeros((3, 3)))


class TestWeights:
    def test_modes(self):
        np.testing.assert_allclose(cli.resolve_weights("paper_4", 4), [0.1, 0.2, 0.3, 0.4])
        np.testing.assert_allclose(cli.resolve_weights("triangular", 3), [1 / 6, 2 / 6, 3 / 6])
        np.testing.assert_allclose(cli.resolve_weights("uniform", 4), [0.25] * 4)
        np.testing.assert_allclose(cli.resolve_weights([0.3, 0.7], 2), [0.3, 0.7])
        np.testing.assert_allclose(cli.resolve_weights("0.3,0.7", 2), [0.3, 0.7])

    def test_invalid(self):
        with pytest.raises(ValueError):
            cli.resolve_weights("paper_4", 3)
        with pytest.raises(ValueError):
            cli.resolve_weights([0.5, 0.6], 2)


class TestMain:
    def test_selftest(self, capsys):
        assert cli.main(["selftest"]) == 0
        assert "FAIL" not in capsys.readouterr().out

    def test_posterior_requires_config(self, capsys):
        assert cli.main(["posterior"]) == 2
        assert "usage" in capsys.readouterr().err

    def test_unknown_subcommand(self):
        assert cli.main(["bogus"]) == 2

    def test_unknown_flag(self):
        assert cli.main(["location-scatter", "--frobnicate"]) == 2

    def test_missing_input_file(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json", inputs=[str(tmp_path / "absent.csv")], reference=str(tmp_path / "absent.csv"))
        assert cli.main(["posterior", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
        assert "absent.csv" in capsys.readouterr().err

    def test_bad_csv_names_file(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("1,2\n3\n")
        cfg = write_config(tmp_path / "c.json", inputs=[str(bad)], reference=str(bad))
        assert cli.main(["posterior", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
        assert "bad.csv" in capsys.readouterr().err


class TestLocationScatter:
    def test_rerun_is_bit_identical(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", dim=2, n=2, weights="uniform")
        outs = []
        for run in ("a", "b"):
            out = tmp_path / run
            assert cli.main(["location-scatter", "--config", str(cfg), "--seed", "7", "--out", str(out)]) == 0
            outs.append(read_outputs(out))
        a, b = outs
        a.pop("manifest.json"), b.pop("manifest.json")  # records the output path
        assert a == b
        assert {"report.json", "report.csv", "training_log.json", "checkpoints/manifest.json"} <= set(a)
        assert "pushforward_0.csv" in a

    def test_manifest_reproduces(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", dim=2, n=2, weights="uniform")
        first = tmp_path / "first"
        assert cli.main(["location-scatter", "--config", str(cfg), "--seed", "3", "--out", str(first)]) == 0
        manifest = json.loads((first / "manifest.json").read_text())
        assert manifest["config"]["seed"] == 3
        assert manifest["config"]["train"]["seed"] == 3
        assert manifest["config"]["train"]["tau"] == 5.0  # defaults are resolved
        again = tmp_path / "again"
        assert cli.main(["location-scatter", "--config", str(first / "manifest.json"), "--out", str(again)]) == 0
        assert (first / "report.json").read_bytes() == (again / "report.json").read_bytes()

    def test_overrides(self, tmp_path):
        args = cli._parser().parse_args(["location-scatter", "--dim", "3", "--tau", "2", "--weights", "uniform"])
        cfg = cli.config_from_args(args)
        assert (cfg.dim, cfg.train.tau, cfg.weights) == (3, 2.0, "uniform")

    def test_report_columns(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", dim=2, n=2, weights="uniform", out=str(tmp_path / "o"))
        result = cli.run(cli.ExperimentConfig.from_dict(json.loads(cfg.read_text())))
        header = (result.out / "report.csv").read_text().splitlines()[0]
        assert header == "row,weight,l2_uvp,bw2_uvp,cycle,congruence,samples"


class TestPosterior:
    def test_runs_and_hashes_inputs(self, tmp_path):
        rng = np.random.default_rng(0)
        paths = []
        for i in range(3):
            p = tmp_path / f"s{i}.csv"
            np.savetxt(p, rng.standard_normal((500, 2)), delimiter=",", header="a,b", comments="")
            paths.append(str(p))
        cfg = write_config(tmp_path / "c.json", inputs=paths[:2], reference=paths[2])
        out = tmp_path / "o"
        assert cli.main(["posterior", "--config", str(cfg), "--out", str(out)]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert set(manifest["input_hashes"]) == set(paths)
        assert all(len(h) == 40 for h in manifest["input_hashes"].values())
        assert len(json.loads((out / "report.json").read_text())["bw2_uvp"]) == 2


class TestPalette:
    def test_output_pixel_count(self, tmp_path):
        rng = np.random.default_rng(0)
        imgs = []
        for i in range(2):
            p = tmp_path / f"im{i}.ppm"
            cli.write_image(p, 5, 4, rng.uniform(0, 1, (20, 3)))
            imgs.append(str(p))
        out = tmp_path / "o"
        assert cli.main(["palette", "--inputs", *imgs, "--out", str(out), "--iterations", "5", "--pretrain-iters", "5", "--hidden-scale", "0.125", "--eval-samples", "10000"]) == 0
        for i in range(2):
            rec = dist.load_palette(out / f"recolored_{i}.ppm")
            assert rec.image_shape == (5, 4) and rec.values.shape == (20, 3)

    def test_needs_two_images(self, tmp_path):
        p = tmp_path / "im.ppm"
        cli.write_image(p, 1, 1, [[0.1, 0.2, 0.3]])
        assert cli.main(["palette", "--inputs", str(p), "--out", str(tmp_path / "o")]) == 1


def test_mixture2d_emits_samples(tmp_path):
    cfg = write_config(tmp_path / "c.json", n=2)
    out = tmp_path / "o"
    assert cli.main(["mixture2d", "--config", str(cfg), "--out", str(out)]) == 0
    for i in range(2):
        lines = (out / f"pushforward_{i}.csv").read_text().splitlines()
        assert lines[0] == "x,y" and len(lines) == 2001
    manifest = json.loads((out / "manifest.json").read_text())
    assert len(manifest["config"]["mixtures"]) == 2
