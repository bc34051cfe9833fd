import json

import numpy as np
import pytest

from crossreg.geom import PointCloud, Pose
from crossreg.harness import (AblationSetting, Scene, SceneGenerationError, apply_ablation, benchmark_csv,
                              default_intrinsics, generate_scene, load_dataset, load_scene, read_settings,
                              run_benchmark, save_scene, scene_from_text, scene_to_text, write_dataset)
from crossreg.metrics import SceneMetrics, ir


class TestGenerate:
    def test_deterministic_bytes(self):
        assert scene_to_text(generate_scene(5)) == scene_to_text(generate_scene(5))

    def test_different_seeds_differ(self):
        assert scene_to_text(generate_scene(5)) != scene_to_text(generate_scene(6))

    def test_ground_truth_reprojects_exactly(self, small_scene):
        idx, pix = small_scene.gt_correspondences()
        assert len(idx) >= 50
        assert ir(small_scene.points[idx], pix, small_scene.gt_pose, small_scene.intrinsics, 1e-9) == 1.0

    def test_gt_cells_lie_inside_the_grid(self, small_scene):
        cells = small_scene.gt_cells()
        vis = cells >= 0
        assert vis.sum() >= 50
        assert np.all(cells[vis] < 32 * 32)
        np.testing.assert_array_equal(vis, small_scene.visibility())

    def test_zero_bounds_give_identity(self):
        s = generate_scene(2, max_rotation_deg=0.0, max_translation=0.0)
        assert s.gt_pose == Pose.identity()

    def test_grid_shape_and_range(self):
        s = generate_scene(4, grid=(24, 16))
        assert s.grid.shape == (16, 24)
        assert s.grid.min() >= 0.0 and s.grid.max() <= 1.0

    def test_retry_budget(self):
        with pytest.raises(SceneGenerationError):
            generate_scene(0, num_points=60, min_visible=60)

    def test_too_few_points(self):
        with pytest.raises(ValueError):
            generate_scene(0, num_points=10)


class TestAblation:
    def test_zero_setting_is_identity(self, small_scene):
        out = apply_ablation(small_scene, AblationSetting(0.0, 0, 0), 1)
        assert out.content_equal(small_scene)

    def test_noise_and_occlusion(self):
        s = generate_scene(1, num_points=500)
        grid = np.array(s.grid)
        grid[grid == 0.0] = 0.01        # no accidental zeros before occlusion
        s = Scene(s.cloud, grid, s.intrinsics, s.gt_pose, s.id)
        out = apply_ablation(s, AblationSetting(0.1, 16, 16), 3)
        assert int(np.sum(out.grid == 0.0)) == 256
        zero_r, zero_c = np.nonzero(out.grid == 0.0)
        assert np.ptp(zero_r) == 15 and np.ptp(zero_c) == 15
        assert out.gt_pose == s.gt_pose

    def test_noise_statistics(self):
        pts = np.zeros((10_000 // 3 + 1, 3))
        s = Scene(PointCloud(pts), np.zeros((32, 32)), default_intrinsics(), Pose.identity(), "z")
        out = apply_ablation(s, AblationSetting(0.1, 0, 0), 7)
        d = out.points.reshape(-1)
        assert d.size >= 10_000
        assert abs(d.std() - 0.1) < 0.01

    def test_occlusion_must_fit(self, small_scene):
        with pytest.raises(ValueError):
            apply_ablation(small_scene, AblationSetting(0.0, 40, 4), 0)

    def test_setting_names(self):
        s = AblationSetting.parse("noise_0.1_occlusion_16x16")
        assert (s.noise_sigma, s.occlusion_w, s.occlusion_h) == (0.1, 16, 16)
        assert s.name == "noise_0.1_occlusion_16x16"
        assert AblationSetting.parse(AblationSetting(0.0, 0, 0).name) == AblationSetting(0.0, 0, 0)
        with pytest.raises(ValueError):
            AblationSetting.parse("noise_x")

    def test_read_settings(self, tmp_path):
        p = tmp_path / "s.txt"
        p.write_text("# table rows\nnoise_0_occlusion_0x0\n\nnoise_0.2_occlusion_32x32\n")
        assert [s.name for s in read_settings(p)] == ["noise_0_occlusion_0x0", "noise_0.2_occlusion_32x32"]


class TestPersistence:
    def test_scene_round_trip(self, tmp_path, small_scene):
        path = tmp_path / "s.scene"
        save_scene(small_scene, path)
        back = load_scene(path)
        assert back.content_equal(small_scene) and back.id == small_scene.id
        text = path.read_text().splitlines()
        assert text[0] == "# crossreg-scene v1"
        assert any(line.startswith("intrinsics ") for line in text[:5])
        assert any(line.startswith("pose ") and len(line.split()) == 13 for line in text[:5])

    def test_bad_header(self):
        with pytest.raises(ValueError):
            scene_from_text("something else\n")

    def test_dataset(self, tmp_path):
        scenes = [generate_scene(s) for s in (1, 2)]
        manifest = write_dataset(tmp_path / "d", scenes, {"seed": 1})
        meta = json.loads(manifest.read_text())
        assert [e["id"] for e in meta["scenes"]] == [s.id for s in scenes]
        back = load_dataset(tmp_path / "d")
        assert all(a.content_equal(b) for a, b in zip(scenes, back))

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="manifest"):
            load_dataset(tmp_path)


class TestBenchmark:
    def test_empty_scene_list(self):
        assert run_benchmark(lambda s: None, [], [AblationSetting()]) == []

    def test_failures_are_recorded(self, small_scene):
        def evaluate(scene):
            raise RuntimeError("boom")

        rows = run_benchmark(evaluate, [small_scene], [AblationSetting()])
        assert rows[0].report.scenes[0].error == "boom"
        assert rows[0].report.recall == 0.0

    def test_csv_layout(self, small_scene):
        def evaluate(scene):
            return SceneMetrics(scene.id, 1.0, 0.5, 0.8, 1.0, True, 10)

        rows = run_benchmark(evaluate, [small_scene, small_scene], [AblationSetting(), AblationSetting(0.1, 16, 16)])
        lines = benchmark_csv(rows).splitlines()
        assert lines[0] == "setting,rre_mean,rre_std,rte_mean,rte_std,ir,rr"
        assert lines[2] == "noise_0.1_occlusion_16x16,1,0,0.5,0,0.8,1"

    def test_threads_give_same_result(self, small_scene):
        def evaluate(scene):
            return SceneMetrics(scene.id, float(scene.points.sum()), 0.0, 1.0, 0.0, True, 1)

        scenes = [small_scene] * 4
        settings = [AblationSetting(0.05, 8, 8)]
        a = run_benchmark(evaluate, scenes, settings, seed=3, threads=1)
        b = run_benchmark(evaluate, scenes, settings, seed=3, threads=3)
        assert [s.rre for s in a[0].report.scenes] == [s.rre for s in b[0].report.scenes]
