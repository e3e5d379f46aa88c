import numpy as np
import pytest

from nirom import neuralnet as nn
from nirom.errors import (
    DimensionMismatchError,
    InvalidSpecError,
    NonFiniteValuesError,
)
from nirom.neuralnet import LayerSpec as L


def finite_diff_param_grad(net, x, y, mode, eps=1e-5):
    p0 = net.get_params()
    fd = np.zeros_like(p0)
    for i in range(p0.size):
        for s, sign in ((eps, 1.0), (-eps, -1.0)):
            p = p0.copy()
            p[i] += s
            net.set_params(p)
            loss = nn.mse_loss(nn.forward(net, x, mode)[0], y)[0]
            fd[i] += sign * loss
        fd[i] /= 2 * eps
    net.set_params(p0)
    return fd


class TestForward:
    def test_identity_linear_layer(self):
        net = nn.MLPNet([L(3, 3, "linear")], seed=0)
        net.W[0] = np.eye(3)
        net.b[0] = np.zeros(3)
        x = np.random.default_rng(0).standard_normal((3, 4))
        out, _ = nn.forward(net, x)
        assert np.array_equal(out, x)

    def test_tanh_odd_at_zero(self):
        net = nn.MLPNet([L(1, 1, "tanh")], seed=0)
        net.W[0] = np.array([[1.0]])
        out, _ = nn.forward(net, np.zeros((1, 1)))
        assert out[0, 0] == 0.0

    def test_matches_hand_rolled_matmul(self):
        # independent re-evaluation with plain numpy expressions
        rng = np.random.default_rng(5)
        net = nn.MLPNet([L(4, 6, "tanh"), L(6, 2, "sigmoid")], seed=7)
        x = rng.standard_normal((4, 9))
        out, _ = nn.forward(net, x)
        h = np.tanh(net.W[0] @ x + net.b[0][:, None])
        oracle = 1.0 / (1.0 + np.exp(-(net.W[1] @ h + net.b[1][:, None])))
        assert np.allclose(out, oracle, atol=1e-14)

    def test_batchnorm_train_vs_infer(self):
        net = nn.MLPNet([L(3, 5, "relu", batchnorm=True), L(5, 2)], seed=1)
        x = np.random.default_rng(2).standard_normal((3, 16))
        out_train, _ = nn.forward(net, x, "train")
        out_infer, _ = nn.forward(net, x, "infer")
        assert not np.allclose(out_train, out_infer)
        # train mode updated running stats deterministically
        r1 = net.run_mean[0].copy()
        nn.forward(net, x, "train")
        assert not np.allclose(net.run_mean[0], r1)

    def test_dim_mismatch(self):
        net = nn.MLPNet([L(3, 2)], seed=0)
        with pytest.raises(DimensionMismatchError):
            nn.forward(net, np.zeros((4, 1)))

    def test_incompatible_layers_rejected(self):
        with pytest.raises(InvalidSpecError):
            nn.MLPNet([L(3, 4), L(5, 2)], seed=0)


class TestBackward:
    def test_zero_output_gradient(self):
        net = nn.MLPNet([L(3, 4, "elu"), L(4, 2)], seed=3)
        x = np.random.default_rng(1).standard_normal((3, 5))
        _, cache = nn.forward(net, x)
        gp, gx = nn.backward(net, cache, np.zeros((2, 5)))
        assert np.all(gp == 0.0) and np.all(gx == 0.0)

    def test_single_neuron_hand_gradient(self):
        # one linear neuron, MSE on one sample: dW = 2(Wx+b-y)x, db = 2(Wx+b-y)
        net = nn.MLPNet([L(2, 1, "linear")], seed=0)
        net.W[0] = np.array([[0.5, -1.0]])
        net.b[0] = np.array([0.25])
        x = np.array([[1.5], [2.0]])
        y = np.array([[1.0]])
        out, cache = nn.forward(net, x)
        loss, g = nn.mse_loss(out, y)
        gp, _ = nn.backward(net, cache, g)
        resid = float(out[0, 0] - y[0, 0])
        hand = np.array([2 * resid * 1.5, 2 * resid * 2.0, 2 * resid])
        assert np.allclose(gp, hand, atol=1e-14)

    @pytest.mark.parametrize("layers", [
        [L(4, 3, "linear")],
        [L(5, 8, "relu"), L(8, 2, "linear")],
        [L(4, 6, "elu"), L(6, 3, "tanh")],
        [L(3, 5, "sigmoid"), L(5, 2, "sigmoid")],
        [L(4, 6, "relu", batchnorm=True), L(6, 2, "linear")],
        [L(3, 7, "tanh", batchnorm=True), L(7, 3, "elu", batchnorm=True)],
    ], ids=["linear", "relu", "elu_tanh", "sigmoid", "bn", "double_bn"])
    def test_gradients_vs_finite_differences(self, layers):
        rng = np.random.default_rng(11)
        net = nn.MLPNet(layers, seed=4)
        x = rng.standard_normal((net.in_dim, 6))
        y = rng.standard_normal((net.out_dim, 6))
        out, cache = nn.forward(net, x, "train")
        _, g = nn.mse_loss(out, y)
        gp, _ = nn.backward(net, cache, g)
        fd = finite_diff_param_grad(net, x, y, "train")
        mask = np.abs(gp) > 1e-8
        rel = np.abs(gp[mask] - fd[mask]) / np.abs(gp[mask])
        assert rel.max() < 1e-5


class TestOptimizer:
    def test_staircase_decay(self):
        opt = nn.Optimizer("rmsprop", lr=1e-3, schedule=nn.Schedule.staircase(5000, 0.5))
        assert opt.current_lr(0) == 1e-3
        assert opt.current_lr(4999) == 1e-3
        assert abs(opt.current_lr(10000) - 2.5e-4) < 1e-19

    def test_plateau_never_fires_on_improvement(self):
        net = nn.MLPNet([L(2, 2)], seed=0)
        opt = nn.Optimizer("adam", lr=1e-3, schedule=nn.Schedule.plateau(200, 0.5))
        g = np.zeros(net.n_params)
        lrs = [opt.step(net, g, e, loss=1.0 - e * 1e-3) for e in range(500)]
        assert all(lr == 1e-3 for lr in lrs)

    def test_plateau_halves_on_flat_loss(self):
        net = nn.MLPNet([L(2, 2)], seed=0)
        opt = nn.Optimizer("adam", lr=1e-3, schedule=nn.Schedule.plateau(200, 0.5))
        g = np.zeros(net.n_params)
        lrs = [opt.step(net, g, e, loss=1.0) for e in range(601)]
        assert lrs[199] == 1e-3
        assert lrs[200] == 5e-4
        assert lrs[400] == 2.5e-4
        assert lrs[600] == 1.25e-4

    def test_descent_on_quadratic(self):
        # tiny step on an MSE loss must reduce it
        rng = np.random.default_rng(9)
        net = nn.MLPNet([L(3, 2, "linear")], seed=2)
        x = rng.standard_normal((3, 8))
        y = rng.standard_normal((2, 8))
        for algo in ("adam", "rmsprop"):
            before = nn.mse_loss(nn.forward(net, x)[0], y)[0]
            opt = nn.Optimizer(algo, lr=1e-6)
            out, cache = nn.forward(net, x)
            _, g = nn.mse_loss(out, y)
            gp, _ = nn.backward(net, cache, g)
            p0 = net.get_params()
            opt.step(net, gp, 0)
            after = nn.mse_loss(nn.forward(net, x)[0], y)[0]
            assert after < before
            net.set_params(p0)

    def test_rejects_non_finite_gradient(self):
        net = nn.MLPNet([L(2, 2)], seed=0)
        opt = nn.Optimizer("adam")
        g = np.full(net.n_params, np.nan)
        with pytest.raises(NonFiniteValuesError):
            opt.step(net, g, 0)

    def test_rejects_wrong_length(self):
        net = nn.MLPNet([L(2, 2)], seed=0)
        opt = nn.Optimizer("adam")
        with pytest.raises(DimensionMismatchError):
            opt.step(net, np.zeros(3), 0)


class TestDeterminism:
    def test_bit_identical_training_trajectory(self):
        rng = np.random.default_rng(21)
        x = rng.standard_normal((4, 10))
        y = rng.standard_normal((2, 10))

        def train_once():
            net = nn.MLPNet([L(4, 6, "tanh"), L(6, 2)], seed=13)
            opt = nn.Optimizer("rmsprop", lr=1e-3)
            for e in range(50):
                out, cache = nn.forward(net, x)
                loss, g = nn.mse_loss(out, y)
                gp, _ = nn.backward(net, cache, g)
                opt.step(net, gp, e, loss=loss)
            return net.get_params()

        assert train_once().tobytes() == train_once().tobytes()


class TestCheckpoints:
    def test_net_round_trip(self, tmp_path):
        net = nn.MLPNet([L(3, 5, "relu", batchnorm=True), L(5, 2, "tanh")], seed=6)
        x = np.random.default_rng(0).standard_normal((3, 12))
        nn.forward(net, x, "train")  # move running stats off their init
        path = tmp_path / "net.nnet"
        nn.save_net(net, path)
        back = nn.load_net(path)
        assert np.array_equal(back.get_params(), net.get_params())
        assert np.array_equal(back.run_mean[0], net.run_mean[0])
        assert np.array_equal(back.run_var[0], net.run_var[0])
        a, _ = nn.forward(net, x, "infer")
        b, _ = nn.forward(back, x, "infer")
        assert np.array_equal(a, b)

    def test_history_csv(self, tmp_path):
        hist = [nn.LossRecord(0, 0.5, 1e-3), nn.LossRecord(1, 0.25, 1e-3)]
        text = nn.history_to_csv(hist, tmp_path / "h.csv")
        lines = text.strip().splitlines()
        assert lines[0] == "epoch,loss,lr"
        assert lines[1].startswith("0,0.5,")
