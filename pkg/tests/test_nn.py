import numpy as np
import pytest

from racdnn import nn
from racdnn import tensor as T
from racdnn.errors import BatchError, ShapeError

from gradcheck import check_grad


def conv_params(w, b=None, stride=1, padding=0, grad=True):
    return nn.Conv2dParams(
        weights=T.Tensor(w, requires_grad=grad),
        bias=None if b is None else T.Tensor(b, requires_grad=grad),
        stride=stride,
        padding=padding,
    )


class TestConv2d:
    def test_identity_kernel(self):
        x = T.Tensor(np.random.default_rng(0).normal(size=(3, 5, 5)))
        p = conv_params(np.eye(3).reshape(3, 3, 1, 1), np.zeros(3))
        out = nn.conv2d(x, p)
        np.testing.assert_array_equal(out.data, x.data)

    def test_hand_cross_correlation(self):
        x = T.Tensor(np.array([[[0.0, 1, 0], [1, 1, 1], [0, 1, 0]]]))
        p = conv_params(np.ones((1, 1, 3, 3)), np.zeros(1), padding=1)
        out = nn.conv2d(x, p)
        assert out.data[0, 1, 1] == 5.0
        # corners see only the 2x2 neighbourhood that exists
        assert out.data[0, 0, 0] == 3.0

    def test_stride_and_shape_algebra(self):
        x = T.zeros([3, 11, 11])
        p = conv_params(np.zeros((4, 3, 5, 5)), np.zeros(4), stride=2, padding=2)
        out = nn.conv2d(x, p)
        assert out.shape == (4, 6, 6)
        assert nn.conv_output_size(11, 5, 2, 2) == 6

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            nn.conv2d(T.zeros([2, 4, 4]), conv_params(np.zeros((1, 3, 3, 3))))

    def test_kernel_too_large(self):
        with pytest.raises(ShapeError):
            nn.conv2d(T.zeros([1, 2, 2]), conv_params(np.zeros((1, 1, 5, 5))))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(5)
        x_data = rng.normal(size=(1, 3, 8, 8))
        w_data = rng.normal(size=(2, 3, 3, 3)) * 0.5
        b_data = rng.normal(size=(2,))

        def run(xd, wd, bd):
            p = conv_params(wd, bd, stride=2, padding=1)
            x = T.Tensor(xd, requires_grad=True)
            with T.Graph():
                loss = T.sum_all(T.sigmoid(nn.conv2d(x, p)))
                T.backward(loss)
            return x, p, loss

        x, p, _ = run(x_data, w_data, b_data)

        def loss_of_x(xd):
            xt = T.Tensor(xd)
            return T.sum_all(T.sigmoid(nn.conv2d(xt, conv_params(w_data, b_data, 2, 1, grad=False)))).item()

        def loss_of_w(wd):
            return T.sum_all(T.sigmoid(nn.conv2d(T.Tensor(x_data), conv_params(wd, b_data, 2, 1, grad=False)))).item()

        def loss_of_b(bd):
            return T.sum_all(T.sigmoid(nn.conv2d(T.Tensor(x_data), conv_params(w_data, bd, 2, 1, grad=False)))).item()

        check_grad(loss_of_x, x_data, x.grad, n_coords=20, tol=1e-4)
        check_grad(loss_of_w, w_data, p.weights.grad, n_coords=20, tol=1e-4)
        check_grad(loss_of_b, b_data, p.bias.grad, n_coords=2, tol=1e-4)


class TestUnpool:
    def test_top_left_rule_bit_exact(self):
        out = nn.unpool(T.Tensor([[[7.5]]]), 2)
        np.testing.assert_array_equal(out.data, [[[7.5, 0.0], [0.0, 0.0]]])

    def test_k1_identity(self):
        x = T.Tensor(np.random.default_rng(1).normal(size=(2, 3, 3)))
        np.testing.assert_array_equal(nn.unpool(x, 1).data, x.data)

    def test_sparsity_count(self):
        x = T.Tensor(np.random.default_rng(2).uniform(0.5, 1.0, size=(1, 7, 7)))
        out = nn.unpool(x, 2)
        assert out.shape == (1, 14, 14)
        assert np.count_nonzero(out.data) == 49

    def test_mass_preserved_exactly(self):
        # integer-valued entries keep both sums exact regardless of order
        x = T.Tensor(np.random.default_rng(3).integers(-50, 50, size=(2, 5, 4)).astype(float))
        assert nn.unpool(x, 3).data.sum() == x.data.sum()

    def test_gradient_routes_to_top_left_only(self):
        x = T.Tensor(np.random.default_rng(4).normal(size=(1, 2, 2)), requires_grad=True)
        with T.Graph():
            out = nn.unpool(x, 2)
            T.backward(T.sum_all(T.mul(out, out)))
        np.testing.assert_allclose(x.grad, 2.0 * x.data)

    def test_invalid_factor(self):
        with pytest.raises(ShapeError):
            nn.unpool(T.zeros([1, 2, 2]), 0)


def bn_params(c, gamma=None, beta=None, rmean=None, rvar=None):
    return nn.BatchNormParams(
        gamma=T.Tensor(np.ones(c) if gamma is None else gamma, requires_grad=True),
        beta=T.Tensor(np.zeros(c) if beta is None else beta, requires_grad=True),
        running_mean=T.Tensor(np.zeros(c) if rmean is None else rmean),
        running_var=T.Tensor(np.ones(c) if rvar is None else rvar),
    )


class TestBatchNorm:
    def test_normalized_input_is_fixed_point(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(16, 3, 4, 4))
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
        out = nn.batchnorm(T.Tensor(x), bn_params(3), "train")
        np.testing.assert_allclose(out.data, x, atol=1e-3)

    def test_train_output_mean_equals_beta(self):
        rng = np.random.default_rng(7)
        beta = np.array([0.5, -1.0])
        out = nn.batchnorm(T.Tensor(rng.normal(2.0, 3.0, size=(8, 2, 5, 5))),
                           bn_params(2, beta=beta), "train")
        np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), beta, atol=1e-6)

    def test_train_output_variance_equals_gamma_sq(self):
        # batch variance >> epsilon so the normalized variance is 1 to 1e-7
        rng = np.random.default_rng(8)
        gamma = np.array([2.0, 0.5])
        out = nn.batchnorm(T.Tensor(rng.normal(0.0, 10.0, size=(32, 2, 6, 6))),
                           bn_params(2, gamma=gamma), "train")
        np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), gamma**2, atol=1e-5)

    def test_infer_identity_statistics(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(1, 3, 4, 4))
        out = nn.batchnorm(T.Tensor(x), bn_params(3), "infer")
        np.testing.assert_allclose(out.data, x, atol=1e-4)

    def test_running_statistics_updated(self):
        rng = np.random.default_rng(10)
        x = rng.normal(3.0, 2.0, size=(64, 1, 8, 8))
        p = bn_params(1)
        nn.batchnorm(T.Tensor(x), p, "train")
        assert abs(p.running_mean.data[0] - 0.1 * x.mean()) < 1e-12
        assert abs(p.running_var.data[0] - (0.9 + 0.1 * x.var())) < 1e-12

    def test_single_sample_train_rejected(self):
        with pytest.raises(BatchError):
            nn.batchnorm(T.zeros([1, 2, 3, 3]), bn_params(2), "train")

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(11)
        x_data = rng.normal(size=(4, 2, 3, 3))
        gamma = rng.uniform(0.5, 1.5, size=2)
        beta = rng.normal(size=2)

        def loss_from(xd, gd, bd):
            p = nn.BatchNormParams(
                gamma=T.Tensor(gd), beta=T.Tensor(bd),
                running_mean=T.zeros([2]), running_var=T.full([2], 1.0))
            return T.sum_all(T.sigmoid(nn.batchnorm(T.Tensor(xd), p, "train"))).item()

        p = bn_params(2, gamma=gamma, beta=beta)
        x = T.Tensor(x_data, requires_grad=True)
        with T.Graph():
            T.backward(T.sum_all(T.sigmoid(nn.batchnorm(x, p, "train"))))

        check_grad(lambda xd: loss_from(xd, gamma, beta), x_data, x.grad, n_coords=15, tol=1e-4)
        check_grad(lambda gd: loss_from(x_data, gd, beta), gamma, p.gamma.grad, n_coords=2, tol=1e-4)
        check_grad(lambda bd: loss_from(x_data, gamma, bd), beta, p.beta.grad, n_coords=2, tol=1e-4)


class TestLinear:
    def test_identity(self):
        x = T.Tensor([1.0, -2.0, 3.0])
        p = nn.LinearParams(T.Tensor(np.eye(3)), T.Tensor(np.zeros(3)))
        np.testing.assert_array_equal(nn.linear(x, p).data, x.data)

    def test_hand_value(self):
        p = nn.LinearParams(T.Tensor([[1.0, 1.0]]), T.Tensor([1.0]))
        assert nn.linear(T.Tensor([2.0, 3.0]), p).data.tolist() == [6.0]

    def test_paper_scale_shapes(self):
        rng = np.random.default_rng(12)
        p = nn.LinearParams(T.Tensor(rng.normal(size=(256, 512))), T.Tensor(np.zeros(256)))
        assert nn.linear(T.Tensor(rng.normal(size=512)), p).shape == (256,)
        assert nn.linear(T.Tensor(rng.normal(size=(4, 512))), p).shape == (4, 256)

    def test_dimension_mismatch(self):
        p = nn.LinearParams(T.Tensor(np.zeros((2, 3))), None)
        with pytest.raises(ShapeError):
            nn.linear(T.Tensor([1.0, 2.0]), p)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(13)
        x_data = rng.normal(size=(3, 5))
        w_data = rng.normal(size=(4, 5))
        b_data = rng.normal(size=4)

        def loss_from(xd, wd, bd):
            p = nn.LinearParams(T.Tensor(wd), T.Tensor(bd))
            return T.sum_all(T.sigmoid(nn.linear(T.Tensor(xd), p))).item()

        x = T.Tensor(x_data, requires_grad=True)
        p = nn.LinearParams(T.Tensor(w_data, requires_grad=True),
                            T.Tensor(b_data, requires_grad=True))
        with T.Graph():
            T.backward(T.sum_all(T.sigmoid(nn.linear(x, p))))

        check_grad(lambda d: loss_from(d, w_data, b_data), x_data, x.grad, n_coords=10, tol=1e-4)
        check_grad(lambda d: loss_from(x_data, d, b_data), w_data, p.weights.grad, n_coords=10, tol=1e-4)
        check_grad(lambda d: loss_from(x_data, w_data, d), b_data, p.bias.grad, n_coords=4, tol=1e-4)


class TestBCE:
    def test_perfect_prediction(self):
        g = np.array([[0.0, 1.0], [1.0, 0.0]])
        loss = nn.bce_loss(T.Tensor(g), g)
        assert loss.item() <= 1e-6

    def test_uniform_half_gives_ln2(self):
        g = np.array([0.0, 1.0, 1.0, 0.0])
        loss = nn.bce_loss(T.Tensor(np.full(4, 0.5)), g)
        assert abs(loss.item() - np.log(2.0)) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            nn.bce_loss(T.zeros([2, 2]), np.zeros((3, 2)))

    def test_logit_gradient_analytic(self):
        rng = np.random.default_rng(14)
        r_data = rng.normal(size=(6, 6)) * 2.0
        g = (rng.uniform(size=(6, 6)) > 0.5).astype(float)
        r = T.Tensor(r_data, requires_grad=True)
        with T.Graph():
            T.backward(nn.bce_loss(T.sigmoid(r), g))
        s = 1.0 / (1.0 + np.exp(-r_data))
        np.testing.assert_allclose(r.grad, (s - g) / r_data.size, rtol=1e-9)

        def f(rd):
            return nn.bce_loss(T.sigmoid(T.Tensor(rd)), g).item()

        check_grad(f, r_data, r.grad, n_coords=12, tol=1e-4)

    def test_bce_with_logits_matches_probability_path(self):
        rng = np.random.default_rng(15)
        r = rng.normal(size=(5, 5)) * 3.0
        g = (rng.uniform(size=(5, 5)) > 0.4).astype(float)
        via_probs = nn.bce_loss(T.sigmoid(T.Tensor(r)), g).item()
        via_logits = nn.bce_with_logits(T.Tensor(r), g).item()
        assert abs(via_probs - via_logits) < 1e-9

    def test_bce_with_logits_gradient(self):
        rng = np.random.default_rng(16)
        r_data = rng.normal(size=(4, 4))
        g = (rng.uniform(size=(4, 4)) > 0.5).astype(float)
        r = T.Tensor(r_data, requires_grad=True)
        with T.Graph():
            T.backward(nn.bce_with_logits(r, g))
        check_grad(lambda d: nn.bce_with_logits(T.Tensor(d), g).item(),
                   r_data, r.grad, n_coords=10, tol=1e-4)

    def test_stability_across_extreme_logits(self):
        r = np.linspace(-50.0, 50.0, 101)
        g = (np.arange(101) % 2).astype(float)
        via_logits = nn.bce_with_logits(T.Tensor(r), g)
        via_probs = nn.bce_loss(T.sigmoid(T.Tensor(r)), g)
        assert np.isfinite(via_logits.item())
        assert np.isfinite(via_probs.item())
        rt = T.Tensor(r, requires_grad=True)
        with T.Graph():
            T.backward(nn.bce_with_logits(rt, g))
        assert np.all(np.isfinite(rt.grad))

    def test_nonnegative_and_zero_only_when_perfect(self):
        rng = np.random.default_rng(17)
        for _ in range(50):
            pred = rng.uniform(size=(3, 3))
            g = (rng.uniform(size=(3, 3)) > 0.5).astype(float)
            loss = nn.bce_loss(T.Tensor(pred), g).item()
            assert loss >= 0.0
            if np.abs(pred - g).max() > 0.01:
                assert loss > 1e-6
