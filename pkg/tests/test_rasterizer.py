import numpy as np
import pytest

from digs import tape as T
from digs.rasterizer import (
    available_backends,
    build_targets,
    composite,
    conic_and_radii,
    depth_order,
    project_batch,
    rasterize_t,
    reference_render_arrays,
    render,
)
from digs.scene import Camera, GaussianPrimitive, project_gaussian

from .util import numeric_gradient

BACKENDS = available_backends()


def random_scene(seed, n, height, width, tie_depths=False):
    r = np.random.default_rng(seed)
    means = np.stack(
        [r.uniform(-2.0, width + 2.0, n), r.uniform(-2.0, height + 2.0, n)], axis=1
    )
    theta = r.uniform(0, np.pi, n)
    sx = r.uniform(0.4, 3.0, n)
    sy = r.uniform(0.4, 3.0, n)
    cov = np.empty((n, 2, 2))
    ct, st = np.cos(theta), np.sin(theta)
    for i in range(n):
        rot = np.array([[ct[i], -st[i]], [st[i], ct[i]]])
        cov[i] = rot @ np.diag([sx[i] ** 2, sy[i] ** 2]) @ rot.T
        cov[i][0, 0] += 0.3
        cov[i][1, 1] += 0.3
    conics, radii = conic_and_radii(cov)
    depths = r.uniform(0.5, 5.0, n)
    if tie_depths and n >= 4:
        depths[1] = depths[0]
        depths[3] = depths[0]
    colors = r.uniform(0.0, 1.0, (n, 3))
    alphas = r.uniform(0.05, 1.0, n)
    normals = r.normal(size=(n, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return means, conics, colors, alphas, depths, normals, radii


def lookat_camera(w=5, h=5, fx=10.0):
    return Camera(fx, fx, w / 2.0, h / 2.0, w, h, np.eye(3), np.zeros(3))


class TestCompositeTrivial:
    @pytest.mark.parametrize("backend", BACKENDS)
    def test_single_opaque_gaussian(self, backend):
        # alpha' = 1 exactly at its mean: pixel takes the color, alpha = 1
        means = np.array([[2.5, 2.5]])
        conics = np.array([[1.0, 0.0, 1.0]])
        colors = np.array([[0.3, 0.6, 0.9]])
        alphas = np.array([1.0])
        depths = np.array([1.0])
        normals = np.array([[0.0, 0.0, 1.0]])
        radii = np.array([[50.0, 50.0]])
        img, _, _, acc = composite(
            means, conics, colors, alphas, depths, normals, radii,
            depth_order(depths), 5, 5, backend=backend,
        )
        np.testing.assert_array_equal(img[2, 2], colors[0])
        assert acc[2, 2] == 1.0

    @pytest.mark.parametrize("backend", BACKENDS)
    def test_two_gaussian_expansion(self, backend):
        # front red 0.5 over back green 0.5 -> (0.5, 0.25, 0)
        means = np.array([[2.5, 2.5], [2.5, 2.5]])
        conics = np.array([[1.0, 0.0, 1.0], [1.0, 0.0, 1.0]])
        colors = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        alphas = np.array([0.5, 0.5])
        depths = np.array([1.0, 2.0])
        normals = np.zeros((2, 3))
        radii = np.full((2, 2), 50.0)
        img, _, _, _ = composite(
            means, conics, colors, alphas, depths, normals, radii,
            depth_order(depths), 5, 5, backend=backend,
        )
        np.testing.assert_allclose(img[2, 2], [0.5, 0.25, 0.0], atol=1e-15)

    @pytest.mark.parametrize("backend", BACKENDS)
    def test_empty_scene_background(self, backend):
        bg = np.array([0.2, 0.4, 0.6])
        img, _, _, acc = composite(
            np.zeros((0, 2)), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0),
            np.zeros(0), np.zeros((0, 3)), np.zeros((0, 2)),
            np.zeros(0, dtype=np.int64), 4, 4, background=bg, backend=backend,
        )
        np.testing.assert_array_equal(img, np.broadcast_to(bg, (4, 4, 3)))
        np.testing.assert_array_equal(acc, 0.0)


class TestOracleEquality:
    @pytest.mark.parametrize("backend", BACKENDS)
    @pytest.mark.parametrize("seed", range(10))
    def test_small_scene_bitwise(self, backend, seed):
        scene = random_scene(seed, 20, 8, 8, tie_depths=True)
        order = depth_order(scene[4])
        got = composite(*scene, order, 8, 8, backend=backend)
        want = reference_render_arrays(*scene, order, 8, 8)
        for g, w in zip(got, want):
            np.testing.assert_array_equal(g, w)

    @pytest.mark.parametrize("backend", BACKENDS)
    def test_hundred_gaussian_scene_bitwise(self, backend):
        scene = random_scene(123, 100, 16, 16, tie_depths=True)
        order = depth_order(scene[4])
        got = composite(*scene, order, 16, 16, backend=backend)
        want = reference_render_arrays(*scene, order, 16, 16)
        for g, w in zip(got, want):
            np.testing.assert_array_equal(g, w)

    @pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled kernels unavailable")
    @pytest.mark.parametrize("seed", range(5))
    def test_backends_agree_bitwise(self, seed):
        scene = random_scene(seed + 50, 40, 16, 16)
        order = depth_order(scene[4])
        a = composite(*scene, order, 16, 16, backend="python")
        b = composite(*scene, order, 16, 16, backend="cython")
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)


class TestInvariants:
    @pytest.mark.parametrize("backend", BACKENDS)
    @pytest.mark.parametrize("seed", range(5))
    def test_transmittance_telescoping(self, backend, seed):
        # with zero colors and white background the image equals T_final,
        # so alpha_acc + T_final must be 1 (holds at any early-out prefix)
        scene = list(random_scene(seed + 7, 30, 8, 8))
        scene[2] = np.zeros_like(scene[2])  # colors
        img, _, _, acc = composite(
            *scene, depth_order(scene[4]), 8, 8,
            background=np.ones(3), backend=backend,
        )
        np.testing.assert_allclose(acc + img[..., 0], 1.0, atol=1e-6)

    def test_far_sdf_gaussian_changes_nothing(self):
        # |f| = 10 delta -> opacity exp(-100); pixels move < 1e-3
        cam = lookat_camera(w=8, h=8)
        base = [
            GaussianPrimitive([0.0, 0.0, 1.0], [1, 0, 0, 0], [0.2, 0.2, 0.2],
                              [0.9, 0.1, 0.2], sdf=0.0)
        ]
        ghost = base + [
            GaussianPrimitive([0.05, 0.05, 0.8], [1, 0, 0, 0], [0.3, 0.3, 0.3],
                              [0.0, 1.0, 0.0], sdf=1.0)
        ]
        delta = 0.1
        a = render(base, None, cam, delta=delta)
        b = render(ghost, None, cam, delta=delta)
        assert np.max(np.abs(a.color.data - b.color.data)) < 1e-3


class TestProjectionBatch:
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_single_gaussian_projection(self, seed):
        r = np.random.default_rng(seed)
        rot, _ = np.linalg.qr(r.normal(size=(3, 3)))
        if np.linalg.det(rot) < 0:
            rot[:, 0] *= -1
        cam = Camera(70.0, 75.0, 31.0, 33.0, 64, 64, rot.T, r.normal(size=3) * 0.1)
        prims = []
        for _ in range(8):
            q = r.normal(size=4)
            q /= np.linalg.norm(q)
            prims.append(
                GaussianPrimitive(r.normal(size=3) + [0, 0, 3.0], q,
                                  r.uniform(0.05, 0.4, 3), np.full(3, 0.5))
            )
        centers = np.array([g.center for g in prims])
        covs = np.stack([g.covariance() for g in prims])
        means2d, cov2d, depths, visible = project_batch(centers, covs, cam)
        for i, g in enumerate(prims):
            single = project_gaussian(g, cam)
            if single is None:
                assert not visible[i]
                continue
            assert visible[i]
            np.testing.assert_allclose(means2d[i], single[0], rtol=1e-12)
            np.testing.assert_allclose(cov2d[i], single[1], rtol=1e-10)
            assert depths[i] == pytest.approx(single[2], rel=1e-12)


class TestRasterizeGradients:
    @pytest.mark.parametrize("backend", BACKENDS)
    def test_noncontributing_color_gradient_zero(self, backend):
        scene = list(random_scene(3, 5, 8, 8))
        scene[0][4] = [500.0, 500.0]  # far off screen
        means, conics, colors, alphas, depths, normals, radii = scene
        mt = T.parameter(means)
        ct = T.parameter(conics)
        colt = T.parameter(colors)
        at = T.parameter(alphas)
        img, _ = rasterize_t(mt, ct, colt, at, depths, normals, radii, 8, 8,
                             backend=backend)
        T.GradientTape().backward(img.sum())
        np.testing.assert_array_equal(colt.grad[4], 0.0)

    @pytest.mark.parametrize("backend", BACKENDS)
    @pytest.mark.parametrize("seed", range(4))
    def test_finite_difference_all_inputs(self, backend, seed):
        means, conics, colors, alphas, depths, normals, radii = random_scene(
            seed + 11, 6, 8, 8
        )
        r = np.random.default_rng(seed)
        weights = r.uniform(0.2, 1.0, size=(8, 8, 3))
        mt = T.parameter(means.copy())
        ct = T.parameter(conics.copy())
        colt = T.parameter(colors.copy())
        at = T.parameter(alphas.copy())

        def forward_value():
            img, _ = composite(
                mt.data, ct.data, colt.data, at.data, depths, normals, radii,
                depth_order(depths), 8, 8, backend=backend,
            )[0:2]
            return float((img * weights).sum())

        img, _ = rasterize_t(mt, ct, colt, at, depths, normals, radii, 8, 8,
                             backend=backend)
        T.GradientTape().backward((img * T.tensor(weights)).sum())
        for p in (mt, ct, colt, at):
            fd = numeric_gradient(forward_value, p.data, eps=1e-6)
            err = np.abs(p.grad - fd)
            tol = 1e-6 + 1e-3 * np.abs(fd)
            assert np.all(err <= tol), f"{p.name}: max err {err.max()}"

    @pytest.mark.parametrize("backend", BACKENDS)
    def test_background_term_gradient(self, backend):
        # with a bright background the alpha gradient carries the -bg term
        means = np.array([[4.5, 4.5]])
        conics = np.array([[0.5, 0.0, 0.5]])
        colors = np.array([[0.1, 0.1, 0.1]])
        alphas0 = np.array([0.7])
        depths = np.array([1.0])
        normals = np.zeros((1, 3))
        radii = np.full((1, 2), 30.0)
        bg = np.array([1.0, 1.0, 1.0])
        at = T.parameter(alphas0.copy())

        def forward_value():
            img = composite(
                means, conics, colors, at.data, depths, normals, radii,
                depth_order(depths), 9, 9, background=bg, backend=backend,
            )[0]
            return float(img.sum())

        img, _ = rasterize_t(
            T.tensor(means), T.tensor(conics), T.tensor(colors), at,
            depths, normals, radii, 9, 9, background=bg, backend=backend,
        )
        T.GradientTape().backward(img.sum())
        fd = numeric_gradient(forward_value, at.data, eps=1e-7)
        np.testing.assert_allclose(at.grad, fd, rtol=1e-4, atol=1e-8)


class TestRenderTargets:
    def test_depth_and_normal_images(self):
        cam = lookat_camera(w=7, h=7, fx=14.0)
        g = GaussianPrimitive([0.0, 0.0, 2.0], [1, 0, 0, 0], [0.5, 0.5, 0.05],
                              [1.0, 1.0, 1.0], sdf=0.0)
        out = render([g], None, cam, delta=0.1)
        center = out.depth.data[3, 3, 0]
        assert center == pytest.approx(2.0, rel=1e-6)
        # normal is the smallest-scale axis (z), unit where alpha is high
        assert out.alpha.data[3, 3, 0] > 0.5
        np.testing.assert_allclose(np.abs(out.normal.data[3, 3]), [0, 0, 1], atol=1e-9)

    def test_build_targets_zero_alpha_normal_sentinel(self):
        targets = build_targets(
            np.zeros((2, 2, 3)), np.zeros((2, 2)), np.zeros((2, 2, 3)),
            np.zeros((2, 2)), 2, 2,
        )
        np.testing.assert_array_equal(targets.normal.data, 0.0)
