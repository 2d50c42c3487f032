import pytest

from msfm.cli import main
from msfm.config import PipelineConfig, parse_config_text
from msfm.errors import ConfigError
from msfm.io import read_model
from msfm.synth import SceneSpec, generate_scene, write_scene


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("scene")
    scene = generate_scene(SceneSpec(
        n_cameras=10, n_points=700, visibility_fraction=0.7,
        pixel_noise=0.3, descriptor_noise=3.0, seed=91))
    write_scene(scene, path)
    return path, scene


class TestConfig:
    def test_defaults(self):
        cfg = PipelineConfig()
        assert cfg.eta == 20.0
        assert cfg.d == 8.0
        assert cfg.ratio_unguided == 0.6
        assert cfg.ratio_guided == 0.8
        assert cfg.covis_threshold == 8
        assert cfg.candidate_fraction == 0.10
        assert cfg.ranked_k == 10
        assert cfg.set_cover_k == 400
        assert cfg.set_cover_engage == 100_000
        assert cfg.min_inliers == 16
        assert cfg.iterations == 2

    def test_parse_and_override(self):
        cfg = parse_config_text("eta = 30\npreemptive = on\nthreads=2\n# comment\n")
        assert cfg.eta == 30.0
        assert cfg.preemptive is True
        assert cfg.threads == 2

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            parse_config_text("no_such_key = 1\n")

    def test_invalid_value(self):
        with pytest.raises(ConfigError):
            parse_config_text("eta = 0\n")


class TestCliCommands:
    def test_synth_and_validate(self, tmp_path, capsys):
        spec = tmp_path / "scene.cfg"
        spec.write_text("n_cameras = 3\nn_points = 120\nseed = 5\n")
        assert main(["synth", "--spec", str(spec), "--out", str(tmp_path / "s")]) == 0
        assert main(["features", "validate", str(tmp_path / "s" / "image_00000.msft")]) == 0
        out = capsys.readouterr().out
        assert "image_id=0" in out

    def test_synth_bad_spec_exit2(self, tmp_path):
        spec = tmp_path / "bad.cfg"
        spec.write_text("bogus = 1\n")
        assert main(["synth", "--spec", str(spec), "--out", str(tmp_path / "x")]) == 2

    def test_missing_file_exit3(self, tmp_path):
        assert main(["features", "validate", str(tmp_path / "nope.msft")]) == 3

    def test_match_coarse_localize_densify_eval(self, scene_dir, tmp_path, capsys):
        feat_dir, scene = scene_dir
        graph = tmp_path / "graph.txt"
        assert main(["match", "--features", str(feat_dir),
                     "--out", str(graph), "--focal", "900"]) == 0
        model0 = tmp_path / "model0.msfm"
        assert main(["coarse", "--graph", str(graph), "--features", str(feat_dir),
                     "--out", str(model0), "--focal", "900"]) == 0
        model1 = tmp_path / "model1.msfm"
        report = tmp_path / "loc.txt"
        assert main(["localize", "--model", str(model0), "--features", str(feat_dir),
                     "--graph", str(graph), "--out", str(model1),
                     "--report", str(report), "--focal", "900"]) == 0
        model2 = tmp_path / "model2.msfm"
        assert main(["densify", "--model", str(model1), "--features", str(feat_dir),
                     "--iteration", "1", "--out", str(model2), "--focal", "900"]) == 0
        m = read_model(model2)
        assert len(m.points) > len(read_model(model0).points)
        assert main(["eval", "--model", str(model2),
                     "--reference", str(feat_dir / "ground_truth.msfm")]) == 0
        out = capsys.readouterr().out
        assert "rot_err_deg_median=" in out
        ply = tmp_path / "cloud.ply"
        assert main(["export-ply", "--model", str(model2), "--out", str(ply)]) == 0
        assert ply.read_text().startswith("ply")

    def test_bench_guided(self, scene_dir, tmp_path, capsys):
        feat_dir, scene = scene_dir
        pairs = tmp_path / "pairs.txt"
        pairs.write_text("0 1\n")
        for strategy in ("linear", "radial", "grid"):
            code = main(["bench", "guided", "--features", str(feat_dir),
                         "--pairs", str(pairs),
                         "--model", str(feat_dir / "ground_truth.msfm"),
                         "--strategy", strategy, "--d", "8"])
            assert code == 0
        out = capsys.readouterr().out
        assert "strategy=grid" in out
        assert "comparisons=" in out


class TestRunPipelineCli:
    def test_run_produces_snapshots(self, scene_dir, tmp_path, capsys):
        feat_dir, scene = scene_dir
        out = tmp_path / "run"
        assert main(["run", "--features", str(feat_dir), "--out", str(out),
                     "--focal", "900", "--iterations", "1"]) == 0
        assert (out / "model_coarse.msfm").exists()
        assert (out / "model_localize_1.msfm").exists()
        assert (out / "model_densify_1.msfm").exists()
        assert (out / "model_final.msfm").exists()
        assert (out / "points_final.ply").exists()
        stage_text = (out / "stages.txt").read_text()
        assert "stage=coarse" in stage_text
        final = read_model(out / "model_final.msfm")
        assert len(final.cameras) == 10
