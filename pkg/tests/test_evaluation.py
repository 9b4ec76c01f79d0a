import math

import numpy as np
import pytest
import torch

from csd import arch, data, evaluation
import oracles


def test_rgb_to_y_endpoints():
    assert evaluation.rgb_to_y(np.zeros((3, 2, 2))) == pytest.approx(16 / 255)
    assert evaluation.rgb_to_y(np.ones((3, 2, 2))) == pytest.approx(235 / 255, abs=1e-12)
    red = np.zeros((3, 1, 1))
    red[0] = 1
    assert evaluation.rgb_to_y(red)[0, 0] == pytest.approx((65.481 + 16) / 255)


class TestPSNR:
    def test_uniform_offset_is_20db(self):
        a = np.full((16, 16), 0.3)
        assert abs(evaluation.psnr(a, a + 0.1) - 20.0) <= 1e-6

    def test_identical_is_infinite(self):
        a = np.random.default_rng(0).random((8, 8))
        assert evaluation.psnr(a, a) == math.inf

    def test_matches_loop_with_shave(self, rng):
        a, b = rng.random((20, 20)), rng.random((20, 20))
        for shave in (0, 2, 4):
            assert abs(evaluation.psnr(a, b, shave) - oracles.psnr_loop(a, b, shave)) <= 1e-10

    def test_shave_ignores_border(self, rng):
        a = rng.random((12, 12))
        b = a.copy()
        b[0, :] += 0.5
        assert evaluation.psnr(a, b, 1) == math.inf

    def test_errors(self):
        with pytest.raises(ValueError):
            evaluation.psnr(np.zeros((4, 4)), np.zeros((4, 5)))
        with pytest.raises(ValueError):
            evaluation.psnr(np.zeros((4, 4)), np.zeros((4, 4)), shave=2)


class TestSSIM:
    def test_self_similarity_is_one(self, rng):
        x = rng.random((24, 24))
        assert evaluation.ssim(x, x) == 1.0

    def test_inverted_image_scores_low(self, rng):
        x = rng.random((24, 24))
        assert evaluation.ssim(x, 1 - x) < 0.1

    def test_matches_loop(self, rng):
        a = rng.random((16, 18))
        b = np.clip(a + 0.1 * rng.standard_normal((16, 18)), 0, 1)
        assert abs(evaluation.ssim(a, b) - oracles.ssim_loop(a, b)) <= 1e-6

    def test_window_is_normalised_gaussian(self):
        g = evaluation.gaussian_window()
        assert g.sum() == pytest.approx(1.0)
        assert g[5] == g.max() and g[0] == pytest.approx(g[10])

    def test_too_small(self):
        with pytest.raises(ValueError):
            evaluation.ssim(np.zeros((10, 30)), np.zeros((10, 30)))


class TestSelfEnsemble:
    @pytest.mark.parametrize("r", [0.5, 1.0])
    def test_equals_explicit_views(self, r):
        net = arch.build_backbone(8, 1, 2, seed=4).double()
        x = torch.rand(1, 3, 6, 9, dtype=torch.float64)
        views = []
        with torch.no_grad():
            for flip in (False, True):
                xf = torch.flip(x, [3]) if flip else x
                for k in range(4):
                    y = net(torch.rot90(xf, k, [2, 3]), r)
                    y = torch.rot90(y, 4 - k, [2, 3])
                    views.append(torch.flip(y, [3]) if flip else y)
            want = torch.stack(views).mean(0)
            got = evaluation.self_ensemble(net, x, r)
        assert (got - want).abs().max().item() <= 1e-6

    def test_equivariant_net_is_unchanged(self):
        # nearest-neighbour upsampling commutes with every dihedral view
        net = lambda t, r: torch.nn.functional.interpolate(t, scale_factor=2, mode="nearest")
        x = torch.rand(1, 3, 5, 7)
        torch.testing.assert_close(evaluation.self_ensemble(net, x), net(x, 1.0))

    def test_single_image(self, tiny_net):
        assert evaluation.self_ensemble(tiny_net, torch.rand(3, 4, 4)).shape == (3, 8, 8)

    def test_dihedral_round_trip(self):
        x = torch.rand(1, 3, 4, 6)
        for flip in (False, True):
            for k in range(4):
                assert torch.equal(evaluation.inverse_dihedral(evaluation.dihedral(x, k, flip),
                                                               k, flip), x)


class TestBenchmark:
    def test_image_metrics_quantize_and_shave(self):
        hr = torch.rand(3, 20, 20)
        p, s = evaluation.image_metrics(hr + 1e-4, hr, 2)
        assert p > 50 and s > 0.99

    def test_evaluate_dataset_fields(self, tiny_net):
        ds = data.synthetic_dataset(2, 32, 2, seed=1, name="syn")
        res = evaluation.evaluate_dataset(tiny_net, ds, 0.5, passes=3)
        assert res.dataset == "syn" and res.method == "student" and res.width == 0.5
        assert len(res.psnr_per_image) == 2 and res.ms_per_image > 0
        assert res.params == arch.parameter_count(tiny_net, 0.5)
        assert res.psnr_db == pytest.approx(np.mean(res.psnr_per_image))

    def test_bicubic_baseline_is_finite(self):
        res = evaluation.bicubic_baseline(data.synthetic_dataset(2, 32, 2))
        assert 10 < res.psnr_db < 60 and res.method == "bicubic"

    def test_empty_and_missing_lists(self, tiny_net, tmp_path, caplog):
        assert evaluation.benchmark(tiny_net, [], [1.0]) == []
        assert evaluation.benchmark(tiny_net, ["Set5"], [1.0], root=tmp_path) == []
        assert "Set5" in caplog.text

    def test_benchmark_rows(self, tiny_net):
        ds = data.synthetic_dataset(1, 32, 2, name="syn")
        rows = evaluation.benchmark(tiny_net, [ds], [0.5, 1.0], passes=3, warmup=1)
        assert [(r.dataset, r.width) for r in rows] == [("syn", 0.5), ("syn", 1.0)]

    def test_folder_dataset_alias(self, tiny_net, tmp_path):
        (tmp_path / "B100" / "HR").mkdir(parents=True)
        data.write_image(torch.rand(3, 24, 24), tmp_path / "B100" / "HR" / "x.png")
        rows = evaluation.benchmark(tiny_net, ["BSD100"], [1.0], root=tmp_path)
        assert len(rows) == 1 and rows[0].dataset == "BSD100"

    def test_report_round_trip(self, tmp_path):
        rows = [evaluation.MetricResult("Set5", "teacher", 1.0, 31.123456789, 0.87654321, 1000,
                                        12.5, [30.1, 32.146913578], [0.8, 0.95308642]),
                evaluation.MetricResult("Set5", "student", 0.25, 30.5, 0.85, 70, 3.25, [30.5], [0.85])]
        paths = evaluation.emit_report(rows, tmp_path / "out")
        assert all(p.is_file() and p.stat().st_size > 0 for p in paths.values())
        back = evaluation.read_results(paths["csv"])
        assert back == rows

    def test_report_needs_rows(self, tmp_path):
        with pytest.raises(ValueError):
            evaluation.emit_report([], tmp_path)
