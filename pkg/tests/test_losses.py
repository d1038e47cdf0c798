import numpy as np
import pytest

from digs import tape as T
from digs.errors import InvalidInputError
from digs.losses import (
    LossReport,
    LossWeights,
    eikonal_loss,
    eikonal_loss_t,
    flattening_loss,
    flattening_loss_t,
    make_report,
    rgb_loss,
    rgb_loss_t,
    sdf_center_loss,
    sdf_center_loss_t,
    ssim,
    ssim_t,
    total_loss_t,
)

from .util import assert_gradients_match


class TestSsim:
    def test_identical_images(self):
        img = np.random.default_rng(0).uniform(0, 1, (16, 16, 3))
        assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)

    def test_constant_zero_vs_one_closed_form(self):
        # means 0 and 1, zero variance: S = C1 / (1 + C1)
        a = np.zeros((16, 16, 3))
        b = np.ones((16, 16, 3))
        expected = 1e-4 / (1.0 + 1e-4)
        assert ssim(a, b) == pytest.approx(expected, rel=1e-9)

    @pytest.mark.parametrize("seed", range(3))
    def test_symmetry(self, seed):
        r = np.random.default_rng(seed)
        a = r.uniform(0, 1, (14, 17, 3))
        b = r.uniform(0, 1, (14, 17, 3))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_skimage_oracle(self, seed):
        from skimage.metrics import structural_similarity

        r = np.random.default_rng(seed)
        a = r.uniform(0, 1, (24, 20, 3))
        b = np.clip(a + r.normal(0, 0.15, a.shape), 0, 1)
        want = structural_similarity(
            a, b, data_range=1.0, channel_axis=2, gaussian_weights=True,
            sigma=1.5, use_sample_covariance=False,
        )
        assert ssim(a, b) == pytest.approx(want, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            ssim(np.zeros((12, 12, 3)), np.zeros((12, 13, 3)))

    @pytest.mark.parametrize("seed", range(3))
    def test_gradient_matches_fd(self, seed):
        r = np.random.default_rng(seed + 10)
        truth = r.uniform(0, 1, (13, 13, 3))
        x = T.parameter(np.clip(truth + r.normal(0, 0.2, truth.shape), 0.05, 0.95))
        assert_gradients_match(lambda: ssim_t(x, truth), [x], eps=1e-6, rtol=1e-4)

    def test_small_image_window_shrinks(self):
        r = np.random.default_rng(4)
        a = r.uniform(0, 1, (8, 8, 3))
        assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


class TestRgbLoss:
    def test_identical_is_zero(self):
        img = np.random.default_rng(1).uniform(0, 1, (16, 16, 3))
        assert rgb_loss(img, img, 0.05) == pytest.approx(0.0, abs=1e-12)

    def test_pure_l1(self):
        a = np.zeros((12, 12, 3))
        b = np.full((12, 12, 3), 0.5)
        assert rgb_loss(a, b, 0.0) == pytest.approx(0.5)

    @pytest.mark.parametrize("seed", range(3))
    def test_term_by_term_oracle(self, seed):
        r = np.random.default_rng(seed + 5)
        a = r.uniform(0, 1, (15, 15, 3))
        b = r.uniform(0, 1, (15, 15, 3))
        mix = 0.05
        want = (1 - mix) * np.abs(a - b).mean() + mix * (1.0 - ssim(a, b))
        assert rgb_loss(a, b, mix) == pytest.approx(want, rel=1e-12)

    def test_tape_value_matches_numpy(self):
        r = np.random.default_rng(9)
        a = r.uniform(0, 1, (13, 13, 3))
        b = r.uniform(0, 1, (13, 13, 3))
        lt = rgb_loss_t(T.parameter(a), b, 0.05)
        assert float(lt.data) == pytest.approx(rgb_loss(a, b, 0.05), rel=1e-12)

    def test_tape_gradient(self):
        r = np.random.default_rng(11)
        truth = r.uniform(0, 1, (12, 12, 3))
        x = T.parameter(np.clip(truth + r.normal(0, 0.1, truth.shape), 0.05, 0.95))
        assert_gradients_match(
            lambda: rgb_loss_t(x, truth, 0.05), [x], eps=1e-6, rtol=1e-3
        )


class TestFlattening:
    def test_paper_weight_example(self):
        assert flattening_loss(np.array([[0.5, 1.0, 0.05]]), 100.0) == pytest.approx(5.0)

    def test_equal_scales(self):
        s = np.full((7, 3), 0.3)
        assert flattening_loss(s, 100.0) == pytest.approx(30.0)

    def test_gradient_goes_to_argmin_only(self):
        scales = T.parameter(np.array([[0.5, 1.0, 0.05], [0.2, 0.2, 0.9]]))
        T.GradientTape().backward(flattening_loss_t(scales, 100.0))
        expected = 100.0 / 2 * np.array([[0, 0, 1.0], [1.0, 0, 0]])
        np.testing.assert_allclose(scales.grad, expected)

    def test_tape_matches_numpy(self):
        r = np.random.default_rng(3)
        s = r.uniform(0.01, 1.0, (9, 3))
        lt = flattening_loss_t(T.parameter(s.copy()), 100.0)
        assert float(lt.data) == pytest.approx(flattening_loss(s, 100.0), rel=1e-12)


class _StubField:
    """Duck-typed field with prescribed SDF values and gradients."""

    def __init__(self, sdf_fn, grad_fn, delta=1.0):
        self._sdf = sdf_fn
        self._grad = grad_fn
        self.delta = delta

    def sdf_at(self, p, level):
        return self._sdf(np.asarray(p))

    def sdf_spatial_gradient(self, p, level):
        return self._grad(np.asarray(p))


class _StubGaussian:
    def __init__(self, center):
        self.center = np.asarray(center, dtype=np.float64)
        self.level = 0


class TestSdfCenter:
    def test_all_zero(self):
        field = _StubField(lambda p: 0.0, lambda p: np.zeros(3))
        gs = [_StubGaussian([0, 0, 0]), _StubGaussian([1, 1, 1])]
        assert sdf_center_loss(gs, field) == 0.0

    def test_mean_of_squares(self):
        values = {(0.0,): 0.1, (1.0,): -0.2}
        field = _StubField(lambda p: values[(p[0],)], lambda p: np.zeros(3))
        gs = [_StubGaussian([0.0, 0, 0]), _StubGaussian([1.0, 0, 0])]
        assert sdf_center_loss(gs, field) == pytest.approx(0.025)

    def test_far_gaussians_excluded(self):
        # |f| = 5 with delta 1 -> opacity ~ 1e-11 < 0.1, excluded
        field = _StubField(lambda p: 5.0 if p[0] > 0.5 else 0.1,
                           lambda p: np.zeros(3))
        gs = [_StubGaussian([0.0, 0, 0]), _StubGaussian([1.0, 0, 0])]
        assert sdf_center_loss(gs, field) == pytest.approx(0.01)

    def test_tape_selection_and_gradient(self):
        sdf = T.parameter(np.array([0.1, -0.2, 3.0]))
        alphas = np.exp(-(sdf.data ** 2))  # delta = 1
        loss = sdf_center_loss_t(sdf, alphas)
        assert float(loss.data) == pytest.approx(0.025)
        T.GradientTape().backward(loss)
        np.testing.assert_allclose(sdf.grad, [0.1, -0.2, 0.0])

    def test_tape_no_candidates(self):
        sdf = T.parameter(np.array([9.0, 9.0]))
        loss = sdf_center_loss_t(sdf, np.array([0.0, 0.0]))
        assert float(loss.data) == 0.0


class TestEikonal:
    def test_unit_gradient_field(self):
        field = _StubField(lambda p: p[0], lambda p: np.array([1.0, 0, 0]))
        pts = np.random.default_rng(0).uniform(size=(10, 3))
        assert eikonal_loss(field, pts, levels=[0] * 10) == pytest.approx(0.0)

    def test_double_slope(self):
        field = _StubField(lambda p: 2 * p[0], lambda p: np.array([2.0, 0, 0]))
        pts = np.zeros((4, 3))
        assert eikonal_loss(field, pts, levels=[0] * 4) == pytest.approx(1.0)

    def test_empty_samples_rejected(self):
        field = _StubField(lambda p: 0.0, lambda p: np.zeros(3))
        with pytest.raises(InvalidInputError):
            eikonal_loss(field, np.zeros((0, 3)))

    def test_permutation_invariance_and_samplewise_oracle(self):
        r = np.random.default_rng(5)
        grads = {i: r.normal(size=3) for i in range(8)}
        field = _StubField(lambda p: 0.0, lambda p: grads[int(p[0])])
        pts = np.array([[i, 0, 0] for i in range(8)], dtype=float)
        base = eikonal_loss(field, pts, levels=[0] * 8)
        oracle = np.mean([(np.linalg.norm(grads[i]) - 1) ** 2 for i in range(8)])
        assert base == pytest.approx(oracle, rel=1e-12)
        perm = r.permutation(8)
        assert eikonal_loss(field, pts[perm], levels=[0] * 8) == pytest.approx(base)

    def test_tape_gradient(self):
        g = T.parameter(np.random.default_rng(6).normal(size=(5, 3)))
        assert_gradients_match(lambda: eikonal_loss_t(g), [g])


class TestTotal:
    def test_weighted_sum_value(self):
        w = LossWeights()
        total = total_loss_t(
            T.tensor(np.asarray(0.1)), T.tensor(np.asarray(5.0)),
            T.tensor(np.asarray(0.025)), T.tensor(np.asarray(1.0)), w,
        )
        assert float(total.data) == pytest.approx(5.11025)

    def test_all_zero(self):
        w = LossWeights()
        z = T.tensor(np.asarray(0.0))
        assert float(total_loss_t(z, z, z, z, w).data) == 0.0

    def test_gradient_linearity(self):
        # total gradient equals the sum of separately computed term gradients
        r = np.random.default_rng(8)
        x = T.parameter(r.uniform(0.1, 0.9, size=6))
        w = LossWeights(sdf_center=0.01, eikonal=0.01)

        def terms():
            rgb = x.square().mean()
            flat = x.mean() * 2.0
            sdfc = (x - 0.5).square().mean()
            eik = (x * 3.0).mean()
            return rgb, flat, sdfc, eik

        x.zero_grad()
        T.GradientTape().backward(total_loss_t(*terms(), w))
        total_grad = x.grad.copy()

        acc = np.zeros_like(total_grad)
        for i, scale in enumerate([1.0, 1.0, w.sdf_center, w.eikonal]):
            x.zero_grad()
            T.GradientTape().backward(terms()[i])
            acc += scale * x.grad
        np.testing.assert_allclose(total_grad, acc, rtol=1e-12)

    def test_report_invariant(self):
        w = LossWeights()
        rep = make_report(0.1, 5.0, 0.025, 1.0,
                          0.1 + 5.0 + w.sdf_center * 0.025 + w.eikonal * 1.0)
        lhs = rep.total
        rhs = rep.rgb + rep.flatten + w.sdf_center * rep.sdf_center + w.eikonal * rep.eikonal
        assert abs(lhs - rhs) < 1e-6

    def test_report_csv_row(self):
        rep = make_report(0.1, 0.2, 0.3, 0.4, 0.5, n_gaussians=42)
        row = rep.csv_row(7)
        assert row.startswith("7,0.1,") and row.endswith(",42")

    def test_weights_validation(self):
        with pytest.raises(InvalidInputError):
            LossWeights(sdf_center=-1.0)
        with pytest.raises(InvalidInputError):
            LossWeights(ssim_mix=1.5)


def test_every_loss_nonnegative_on_random_inputs():
    r = np.random.default_rng(12)
    a = r.uniform(0, 1, (13, 13, 3))
    b = r.uniform(0, 1, (13, 13, 3))
    assert rgb_loss(a, b, 0.05) >= 0
    assert flattening_loss(r.uniform(0.01, 1, (5, 3)), 100.0) >= 0
    g = T.tensor(r.normal(size=(6, 3)))
    assert float(eikonal_loss_t(g).data) >= 0
