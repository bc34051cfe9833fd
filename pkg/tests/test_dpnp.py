import numpy as np
import pytest

import oracles
from conftest import make_pnp_points
from crossreg import diffgraph as dg
from crossreg.dpnp import (DegenerateConfigurationError, PnPProblem, dpnp_forward_backward, gauss_newton_refine,
                           pnp_init, pose_loss, proj_loss, reproj_loss, solve_pnp)
from crossreg.geom import (Pose, axis_angle_to_matrix, compose, inverse, is_rotation, project_points, random_pose,
                           rot_z, rotation_angle_deg)
from crossreg.metrics import rre, rte


def noiseless(seed, n, k, pose=None):
    cloud, pose = make_pnp_points(seed, n, pose)
    uv, _, _ = project_points(cloud, pose, k)
    return PnPProblem(cloud, uv, np.ones(n), k), pose


def perturb(pose, deg, dist, seed):
    rng = np.random.default_rng(seed)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    d = rng.normal(size=3)
    d *= dist / np.linalg.norm(d)
    return Pose(axis_angle_to_matrix(np.deg2rad(deg) * axis) @ pose.rotation, pose.translation + d)


class TestInit:
    def test_noiseless_recovery(self, intrinsics):
        for seed in range(20):
            problem, gt = noiseless(seed, 8, intrinsics)
            init = pnp_init(problem)
            assert rre(gt, init) < 1.0
            assert rte(gt, init) < 0.01 * np.ptp(problem.points, axis=0).max()

    def test_identity_pose(self, intrinsics):
        problem, _ = noiseless(3, 10, intrinsics, Pose.identity())
        init = pnp_init(problem)
        np.testing.assert_allclose(init.rotation, np.eye(3), atol=1e-8)
        np.testing.assert_allclose(init.translation, 0.0, atol=1e-8)

    def test_collinear(self, intrinsics):
        pts = np.column_stack([np.linspace(-1, 1, 10), np.zeros(10), np.full(10, 5.0)])
        uv, _, _ = project_points(pts, Pose.identity(), intrinsics)
        with pytest.raises(DegenerateConfigurationError):
            pnp_init(PnPProblem(pts, uv, None, intrinsics))

    def test_coplanar(self, intrinsics, rng):
        pts = np.column_stack([rng.uniform(-1, 1, 12), rng.uniform(-1, 1, 12), np.full(12, 5.0)])
        uv, _, _ = project_points(pts, Pose.identity(), intrinsics)
        with pytest.raises(DegenerateConfigurationError):
            pnp_init(PnPProblem(pts, uv, None, intrinsics))

    def test_too_few_weighted(self, intrinsics):
        problem, _ = noiseless(1, 10, intrinsics)
        w = np.zeros(10)
        w[:5] = 1.0
        with pytest.raises(DegenerateConfigurationError):
            pnp_init(PnPProblem(problem.points, problem.pixel_values, w, intrinsics))

    def test_deterministic(self, intrinsics):
        problem, _ = noiseless(2, 12, intrinsics)
        assert pnp_init(problem) == pnp_init(problem)


class TestRefine:
    def test_fixed_point(self, intrinsics):
        problem, gt = noiseless(5, 12, intrinsics)
        sol = gauss_newton_refine(problem, gt)
        assert sol.residual < 1e-9
        assert sol.iterations <= 1

    def test_perturbed_init(self, intrinsics):
        for seed in range(10):
            problem, gt = noiseless(seed, 12, intrinsics)
            sol = gauss_newton_refine(problem, perturb(gt, 5.0, 0.1, seed))
            assert rre(gt, sol.pose) < 1e-3 and rte(gt, sol.pose) < 1e-4
            assert sol.converged

    def test_cost_never_increases(self, intrinsics, rng):
        problem, gt = noiseless(6, 30, intrinsics)
        noisy = PnPProblem(problem.points, problem.pixel_values + rng.normal(scale=2.0, size=(30, 2)),
                           rng.uniform(0.2, 1.0, 30), intrinsics)
        sol = gauss_newton_refine(noisy, perturb(gt, 10.0, 0.3, 1))
        assert all(b <= a for a, b in zip(sol.history, sol.history[1:]))
        assert is_rotation(sol.pose.rotation)

    def test_statistical_residual(self, intrinsics):
        sigma, n = 1.0, 50
        residuals = []
        for trial in range(100):
            problem, gt = noiseless(1000 + trial, n, intrinsics)
            noise = np.random.default_rng(trial).normal(scale=sigma, size=(n, 2))
            sol = solve_pnp(PnPProblem(problem.points, problem.pixel_values + noise, None, intrinsics))
            residuals.append(sol.residual)
        # E[cost] = sigma^2 (2n - 6) for 2n residuals and 6 pose parameters; residual is sqrt(cost / n)
        expected = sigma * np.sqrt(2 - 6 / n)
        assert abs(np.mean(residuals) - expected) < 0.2 * expected

    def test_equivariance(self, intrinsics):
        problem, gt = noiseless(8, 15, intrinsics)
        noisy = PnPProblem(problem.points, problem.pixel_values + np.random.default_rng(0).normal(size=(15, 2)),
                           None, intrinsics)
        g = random_pose(77, 60.0, 2.0)
        moved = PnPProblem(problem.points @ g.rotation.T + g.translation, noisy.pixel_values, None, intrinsics)
        a = solve_pnp(noisy).pose
        b = solve_pnp(moved).pose
        want = compose(a, inverse(g))
        np.testing.assert_allclose(b.rotation, want.rotation, atol=1e-7)
        np.testing.assert_allclose(b.translation, want.translation, atol=1e-6)

    def test_point_behind_camera_is_flagged(self, intrinsics):
        problem, gt = noiseless(9, 12, intrinsics)
        pts = problem.points.copy()
        # put one point far behind the camera under the ground-truth pose
        pts[0] = inverse(gt).rotation @ np.array([0.0, 0.0, -5.0]) + inverse(gt).translation
        bad = PnPProblem(pts, problem.pixel_values, None, intrinsics)
        sol = gauss_newton_refine(bad, gt, max_iters=1)
        assert sol.behind[0] and not sol.behind[1:].any()
        assert np.isfinite(sol.residual)

    def test_degenerate_falls_back(self, intrinsics):
        pts = np.column_stack([np.linspace(-1, 1, 10), np.zeros(10), np.full(10, 5.0)])
        uv, _, _ = project_points(pts, Pose.identity(), intrinsics)
        sol = solve_pnp(PnPProblem(pts, uv, None, intrinsics), fallback=Pose.identity())
        assert sol.residual < 1e-9


class TestLosses:
    def test_pose_loss_examples(self):
        gt = Pose.identity()
        assert pose_loss(gt, gt) == 0.0
        assert pose_loss(Pose(np.eye(3), [1.0, 0.0, 0.0]), gt) == pytest.approx(1.0)
        r = rot_z(180.0)
        want = float(np.sum((r - np.eye(3)) ** 2))
        assert pose_loss(Pose(r, np.zeros(3)), gt) == pytest.approx(want, abs=1e-12)
        assert want == pytest.approx(8.0, abs=1e-12)

    def test_reproj_examples(self, intrinsics):
        problem, gt = noiseless(4, 10, intrinsics)
        assert reproj_loss(gt, problem) == pytest.approx(0.0, abs=1e-18)
        one = PnPProblem(problem.points[:1], problem.pixel_values[:1] + [3.0, 0.0], None, intrinsics)
        assert reproj_loss(gt, one) == pytest.approx(9.0, abs=1e-9)

    def test_against_naive(self, intrinsics, rng):
        k = intrinsics
        for seed in range(10):
            problem, gt = noiseless(seed, 8, intrinsics)
            pix = problem.pixel_values + rng.normal(scale=3.0, size=(8, 2))
            w = rng.uniform(size=8)
            noisy = PnPProblem(problem.points, pix, w, k)
            pred = perturb(gt, 3.0, 0.1, seed)
            args = (pred.rotation.tolist(), pred.translation.tolist())
            naive_re = oracles.reproj(*args, problem.points.tolist(), pix.tolist(), w.tolist(), k.fx, k.fy, k.cx, k.cy)
            assert reproj_loss(pred, noisy) == pytest.approx(naive_re, rel=1e-12)
            naive_proj = oracles.proj(*args, gt.rotation.tolist(), gt.translation.tolist(), problem.points.tolist(),
                                      pix.tolist(), w.tolist(), k.fx, k.fy, k.cx, k.cy, 0.7)
            assert proj_loss(pred, gt, noisy, 0.7) == pytest.approx(naive_proj, rel=1e-12)

    def test_graph_and_value_forms_agree(self, intrinsics, rng):
        problem, gt = noiseless(2, 9, intrinsics)
        g = dg.Graph()
        pix = g.param("pix", problem.pixel_values + rng.normal(size=(9, 2)))
        p = PnPProblem(problem.points, pix, None, intrinsics)
        pred = perturb(gt, 2.0, 0.05, 3)
        node = proj_loss((g.const(pred.rotation), g.const(pred.translation)), gt, p)
        assert float(node.value) == pytest.approx(proj_loss(pred, gt, p.detached()), rel=1e-12)

    def test_proj_is_sum_of_parts(self, intrinsics):
        problem, gt = noiseless(3, 9, intrinsics)
        pred = perturb(gt, 4.0, 0.2, 0)
        assert proj_loss(pred, gt, problem) == pytest.approx(pose_loss(pred, gt) + reproj_loss(pred, problem))
        assert proj_loss(gt, gt, problem) == pytest.approx(0.0, abs=1e-12)
        assert proj_loss(pred, gt, problem, 0.0) == pytest.approx(
            np.sum((pred.rotation - gt.rotation) ** 2) + reproj_loss(pred, problem))


def diff_setup(intrinsics, seed=0, n=10, noise=0.0):
    problem, gt = noiseless(seed, n, intrinsics)
    rng = np.random.default_rng(seed)
    pix = problem.pixel_values + rng.normal(scale=noise, size=(n, 2))
    w = rng.uniform(0.3, 1.0, n)
    return problem.points, pix, w, gt


class TestDifferentiable:
    @pytest.mark.parametrize("mode", ["unrolled", "implicit"])
    def test_pose_loss_gradient_wrt_pixels(self, intrinsics, mode):
        pts, pix, w, gt = diff_setup(intrinsics, 1, 10, 0.0)
        init = solve_pnp(PnPProblem(pts, pix, w, intrinsics)).pose
        target = perturb(gt, 2.0, 0.05, 9)

        def f(g, x):
            res = dpnp_forward_backward(PnPProblem(pts, x, g.const(w), intrinsics), mode, init=init)
            return pose_loss((res.rotation, res.translation), target)

        assert dg.finite_diff_check(f, pix, step=1e-5).error < 1e-3

    def test_zero_weight_has_zero_gradient(self, intrinsics):
        pts, pix, w, gt = diff_setup(intrinsics, 2, 10, 0.5)
        w[3] = 0.0
        g = dg.Graph()
        px, wn = g.param("pix", pix), g.param("w", w)
        res = dpnp_forward_backward(PnPProblem(pts, px, wn, intrinsics))
        grads = g.backward(pose_loss((res.rotation, res.translation), perturb(gt, 1.0, 0.1, 0)))
        np.testing.assert_array_equal(grads["pix"][3], 0.0)
        assert np.any(grads["pix"][4] != 0)

    def test_unrolled_matches_implicit(self, intrinsics):
        pts, pix, w, gt = diff_setup(intrinsics, 3, 12, 0.8)
        target = perturb(gt, 3.0, 0.1, 4)
        out = {}
        for mode in ("unrolled", "implicit"):
            g = dg.Graph()
            px, wn = g.param("pix", pix), g.param("w", w)
            res = dpnp_forward_backward(PnPProblem(pts, px, wn, intrinsics), mode, iters=20)
            out[mode] = g.backward(pose_loss((res.rotation, res.translation), target))
        for name in ("pix", "w"):
            a, b = out["unrolled"][name], out["implicit"][name]
            assert np.max(np.abs(a - b)) / np.max(np.abs(b)) < 1e-2

    def test_forward_matches_solver(self, intrinsics):
        pts, pix, w, gt = diff_setup(intrinsics, 4, 10, 1.0)
        g = dg.Graph()
        res = dpnp_forward_backward(PnPProblem(pts, g.param("pix", pix), g.param("w", w), intrinsics))
        ref = solve_pnp(PnPProblem(pts, pix, w, intrinsics))
        assert rotation_angle_deg(res.rotation.value.T @ ref.pose.rotation) < 1e-6
        np.testing.assert_allclose(res.translation.value, ref.pose.translation, atol=1e-6)

    def test_needs_graph_inputs(self, intrinsics):
        problem, _ = noiseless(0, 8, intrinsics)
        with pytest.raises(ValueError):
            dpnp_forward_backward(problem)

    def test_unknown_mode(self, intrinsics):
        pts, pix, w, _ = diff_setup(intrinsics)
        g = dg.Graph()
        with pytest.raises(ValueError):
            dpnp_forward_backward(PnPProblem(pts, g.param("p", pix), w, intrinsics), mode="magic")


class TestProblem:
    def test_text_round_trip(self, tmp_path, intrinsics, rng):
        problem = PnPProblem(rng.normal(size=(7, 3)), rng.normal(size=(7, 2)), rng.uniform(size=7), intrinsics)
        path = tmp_path / "p.txt"
        problem.save(path)
        back = PnPProblem.load(path)
        assert back.intrinsics == intrinsics
        np.testing.assert_array_equal(back.points, problem.points)
        np.testing.assert_array_equal(back.pixel_values, problem.pixel_values)
        np.testing.assert_array_equal(back.weight_values, problem.weight_values)
        assert path.read_text().splitlines()[0].startswith("#")

    def test_validation(self, intrinsics):
        with pytest.raises(ValueError):
            PnPProblem(np.zeros((3, 3)), np.zeros((3, 2)), [0.5, 1.5, 0.2], intrinsics)
        with pytest.raises(ValueError):
            PnPProblem(np.zeros((3, 3)), np.zeros((2, 2)), None, intrinsics)
