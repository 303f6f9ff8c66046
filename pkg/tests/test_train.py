import math

import numpy as np
import pytest

from priornet import dirichlet as D
from priornet.data import LabeledDataset, UnlabeledDataset
from priornet.net import Mlp, forward, init_mlp, softmax
from priornet.train import (
    LrSchedule,
    Nadam,
    TargetSpec,
    TrainConfig,
    TrainingDivergedError,
    ce_loss_and_grad,
    dnn_objective,
    dpn_loss_and_grad,
    dpn_objective,
    lr_at,
    target_alphas,
    target_dirichlet_in,
    target_dirichlet_out,
    train_dnn,
    train_dpn,
)


def central_difference(f, z, h):
    z = np.array(z, dtype=np.float64)
    out = np.empty_like(z)
    for j in range(z.size):
        up, down = z.copy(), z.copy()
        up[j] += h
        down[j] -= h
        out[j] = (f(up) - f(down)) / (2 * h)
    return out


def assert_gradient_close(fd, g, floor=1e-3):
    # relative error, with a floor below which finite-difference rounding dominates
    scale = np.maximum(np.maximum(np.abs(fd), np.abs(g)), floor)
    assert np.all(np.abs(fd - g) <= 1e-5 * scale)


def small_net(seed=0, keep=1.0, activation="relu"):
    # moderate logits keep the loss O(10), so finite differences stay accurate
    rng = np.random.default_rng(seed)
    sizes = [2, 6, 5, 3]
    return Mlp(
        [rng.normal(0, 0.5, (o, i)) for i, o in zip(sizes[:-1], sizes[1:])],
        [rng.normal(0, 0.3, o) for o in sizes[1:]],
        activation,
        [keep, keep],
    )


class TestTargets:
    def test_in_domain(self):
        d = target_dirichlet_in(0, TargetSpec(100.0, 0.01, 3))
        np.testing.assert_allclose(d.alpha, [98.0, 1.0, 1.0], rtol=1e-14)

    def test_ten_classes(self):
        spec = TargetSpec(100.0, 0.01, 10)
        assert spec.on_class_mean == pytest.approx(0.91, abs=1e-15)

    @pytest.mark.parametrize("k,eps,a0", [(2, 0.1, 5.0), (3, 0.01, 100.0), (10, 0.05, 1000.0)])
    def test_sums(self, k, eps, a0):
        spec = TargetSpec(a0, eps, k)
        for label in range(k):
            alpha = target_dirichlet_in(label, spec).alpha
            assert alpha.sum() == pytest.approx(a0, rel=1e-14)
            assert D.mean(alpha).sum() == pytest.approx(1.0, abs=1e-15)
            assert np.argmax(alpha) == label

    def test_batched_matches_single(self):
        spec = TargetSpec(1000.0, 0.02, 4)
        batch = target_alphas([3, 0, 2], spec)
        for row, label in zip(batch, [3, 0, 2]):
            np.testing.assert_array_equal(row, target_dirichlet_in(label, spec).alpha)

    def test_invalid(self):
        with pytest.raises(ValueError):
            TargetSpec(100.0, 0.5, 3)
        with pytest.raises(ValueError):
            target_dirichlet_in(3, TargetSpec())

    def test_out_of_distribution(self):
        flat = target_dirichlet_out(3)
        np.testing.assert_array_equal(flat.alpha, [1.0, 1.0, 1.0])
        np.testing.assert_allclose(D.mean(flat).mu, [1 / 3] * 3, atol=1e-15)
        rng = np.random.default_rng(0)
        others = np.exp(rng.uniform(-3, 5, size=(500, 3)))
        assert np.all(D.differential_entropy(others) <= D.differential_entropy(flat) + 1e-12)


class TestDpnLoss:
    def test_optimum(self):
        target = target_dirichlet_in(1, TargetSpec())
        loss, grad = dpn_loss_and_grad(np.log(target.alpha), target)
        assert loss == pytest.approx(0.0, abs=1e-10)
        np.testing.assert_allclose(grad, 0.0, atol=1e-10)

    def test_matches_kl(self):
        z = np.array([0.5, -1.0, 2.0])
        target = D.DirichletParams([3.0, 1.5, 0.2])
        loss, _ = dpn_loss_and_grad(z, target)
        assert loss == pytest.approx(D.kl_divergence(target, np.exp(z)), abs=1e-12)

    def test_non_negative(self):
        rng = np.random.default_rng(1)
        z = rng.normal(0, 3, size=(1000, 4))
        target = np.exp(rng.uniform(-2, 6, size=(1000, 4)))
        loss, _ = dpn_loss_and_grad(z, target)
        assert np.all(loss >= -1e-9)

    def test_finite_differences(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            k = rng.integers(2, 6)
            z = rng.normal(0, 2, k)
            target = np.exp(rng.uniform(-1, 5, k))
            _, grad = dpn_loss_and_grad(z, target)
            fd = central_difference(lambda v: dpn_loss_and_grad(v, target)[0], z, 1e-6)
            assert_gradient_close(fd, grad)

    def test_clamped_coordinates_have_zero_gradient(self):
        _, grad = dpn_loss_and_grad(np.array([40.0, 0.0, -35.0]), np.ones(3))
        assert grad[0] == 0.0 and grad[2] == 0.0 and grad[1] != 0.0

    def test_batched(self):
        z = np.array([[0.1, 0.2], [1.0, -1.0]])
        loss, grad = dpn_loss_and_grad(z, np.ones(2))
        assert loss.shape == (2,) and grad.shape == (2, 2)
        assert loss[1] == pytest.approx(dpn_loss_and_grad(z[1], np.ones(2))[0], abs=1e-15)


class TestCeLoss:
    def test_uniform(self):
        assert ce_loss_and_grad(np.zeros(4), 2)[0] == pytest.approx(math.log(4.0), abs=1e-15)

    def test_confident(self):
        assert ce_loss_and_grad(np.array([30.0, -30.0, -30.0]), 0)[0] == pytest.approx(0.0, abs=1e-20)

    def test_gradient_form(self):
        z = np.array([0.3, -0.2, 1.1])
        _, g = ce_loss_and_grad(z, 1)
        np.testing.assert_allclose(g, softmax(z) - [0, 1, 0], atol=1e-16)

    def test_finite_differences(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            z = rng.normal(0, 3, 5)
            label = int(rng.integers(5))
            _, grad = ce_loss_and_grad(z, label)
            fd = central_difference(lambda v: ce_loss_and_grad(v, label)[0], z, 1e-6)
            assert_gradient_close(fd, grad)


class TestObjective:
    def setup_method(self):
        rng = np.random.default_rng(4)
        self.x_in = rng.normal(size=(5, 2))
        self.labels = np.array([0, 1, 2, 1, 0])
        self.x_ood = rng.normal(0, 4, size=(4, 2))
        self.spec = TargetSpec(100.0, 0.01, 3)

    def test_decomposition(self):
        net = small_net(5)
        gamma = 0.7
        loss, parts, _, _ = dpn_objective(net, self.x_in, self.labels, self.x_ood, self.spec, gamma)
        z_in, _ = forward(net, self.x_in)
        z_ood, _ = forward(net, self.x_ood)
        kl_in = np.mean(dpn_loss_and_grad(z_in, target_alphas(self.labels, self.spec))[0])
        ce = np.mean(ce_loss_and_grad(z_in, self.labels)[0])
        kl_ood = np.mean(dpn_loss_and_grad(z_ood, np.ones(3))[0])
        assert loss == pytest.approx(kl_in + gamma * ce + kl_ood, abs=1e-12)
        assert parts["in"] == pytest.approx(kl_in, abs=1e-12)
        assert parts["ce"] == pytest.approx(ce, abs=1e-12)
        assert parts["ood"] == pytest.approx(kl_ood, abs=1e-12)

    def test_without_ood(self):
        loss, parts, _, _ = dpn_objective(small_net(), self.x_in, self.labels, None, self.spec)
        assert parts["ood"] == 0.0 and loss == parts["in"]

    @pytest.mark.parametrize("activation", ["relu", "leaky_relu"])
    @pytest.mark.parametrize("keep", [1.0, 0.8])
    def test_network_gradient(self, activation, keep):
        net = small_net(6, keep, activation)
        rng = np.random.default_rng(7)
        _, _, grads, trace = dpn_objective(
            net, self.x_in, self.labels, self.x_ood, self.spec, 0.5, rng=rng
        )
        masks = trace.masks

        def total():
            return dpn_objective(
                net, self.x_in, self.labels, self.x_ood, self.spec, 0.5, masks=masks
            )[0]

        for p, g in zip(net.params(), grads):
            flat = p.reshape(-1)
            fd = np.empty(flat.size)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + 1e-6
                up = total()
                flat[j] = orig - 1e-6
                down = total()
                flat[j] = orig
                fd[j] = (up - down) / 2e-6
            assert_gradient_close(fd, g.reshape(-1))

    def test_dnn_gradient(self):
        net = small_net(8)
        _, grads, _ = dnn_objective(net, self.x_in, self.labels)
        w = net.weights[1].reshape(-1)
        fd = np.empty(w.size)
        for j in range(w.size):
            orig = w[j]
            w[j] = orig + 1e-6
            up = dnn_objective(net, self.x_in, self.labels)[0]
            w[j] = orig - 1e-6
            down = dnn_objective(net, self.x_in, self.labels)[0]
            w[j] = orig
            fd[j] = (up - down) / 2e-6
        assert_gradient_close(fd, grads[2].reshape(-1))


class TestOptimizer:
    @pytest.mark.parametrize("kind,nesterov", [("adam", True), ("adam", False), ("momentum", False)])
    def test_zero_gradient_is_a_no_op(self, kind, nesterov):
        params = [np.array([1.0, -2.0]), np.array([[0.5]])]
        before = [p.copy() for p in params]
        opt = Nadam(params, nesterov=nesterov, kind=kind)
        for _ in range(5):
            opt.step(params, [np.zeros(2), np.zeros((1, 1))], 0.1)
        for a, b in zip(params, before):
            np.testing.assert_array_equal(a, b)

    def test_first_step_size(self):
        # bias correction makes the first Adam step about lr in magnitude
        p = [np.array([0.0])]
        Nadam(p, nesterov=False).step(p, [np.array([3.0])], 0.01)
        assert p[0][0] == pytest.approx(-0.01, rel=1e-6)

    def test_minimises_quadratic(self):
        p = [np.array([5.0, -3.0])]
        opt = Nadam(p)
        for _ in range(3000):
            opt.step(p, [2 * p[0]], 0.05)
        np.testing.assert_allclose(p[0], 0.0, atol=1e-3)


class TestSchedule:
    def test_one_cycle(self):
        s = LrSchedule("one_cycle", 1e-3, cycle_length=30, total_epochs=40)
        assert lr_at(s, 0) == 1e-3
        assert lr_at(s, 15) == pytest.approx(1e-2, rel=1e-12)
        assert lr_at(s, 30) == pytest.approx(1e-3, rel=1e-12)
        assert lr_at(s, 40) == pytest.approx(1e-6, rel=1e-12)
        assert lr_at(s, 7.5) == pytest.approx(5.5e-3, rel=1e-12)

    def test_one_cycle_positive(self):
        s = LrSchedule("one_cycle", 1e-3, cycle_length=30, total_epochs=40)
        assert all(lr_at(s, t) > 0 for t in np.linspace(0, 40, 401))

    def test_exponential(self):
        s = LrSchedule("exponential_decay", 1e-3, decay_rate=0.9)
        assert lr_at(s, 0) == 1e-3
        assert lr_at(s, 2) == pytest.approx(8.1e-4, rel=1e-12)

    def test_out_of_range(self):
        s = LrSchedule("one_cycle", 1e-3, cycle_length=30, total_epochs=40)
        with pytest.raises(ValueError):
            lr_at(s, 40.5)
        with pytest.raises(ValueError):
            lr_at(s, -1)

    def test_invalid(self):
        with pytest.raises(ValueError):
            LrSchedule("cosine")
        with pytest.raises(ValueError):
            LrSchedule("one_cycle", 1e-3, cycle_length=50, total_epochs=40)


def toy_classes(n=60, seed=0):
    rng = np.random.default_rng(seed)
    x = np.vstack([rng.normal([-3, 0], 0.5, (n, 2)), rng.normal([3, 0], 0.5, (n, 2))])
    return LabeledDataset(x, np.repeat([0, 1], n), 2)


class TestLoops:
    def test_zero_lr_leaves_parameters(self):
        data = toy_classes()
        net = small_net(9, keep=0.8)
        net.weights[-1] = net.weights[-1][:2]
        net.biases[-1] = net.biases[-1][:2]
        cfg = TrainConfig(LrSchedule("constant", 0.0), epochs=3, batch_size=16)
        trained, _ = train_dnn(net, data, cfg)
        ood = UnlabeledDataset(np.random.default_rng(1).normal(0, 6, (40, 2)))
        trained_dpn, _ = train_dpn(net, data, ood, TargetSpec(num_classes=2, smoothing=0.1), cfg)
        for a, b, c in zip(net.params(), trained.params(), trained_dpn.params()):
            np.testing.assert_array_equal(a, b)
            np.testing.assert_array_equal(a, c)

    def test_input_net_not_mutated(self):
        net = init_mlp([2, 8, 2], seed=0)
        before = [p.copy() for p in net.params()]
        train_dnn(net, toy_classes(), TrainConfig(LrSchedule("constant", 1e-2), epochs=2))
        for a, b in zip(net.params(), before):
            np.testing.assert_array_equal(a, b)

    def test_single_point_overfit(self):
        data = LabeledDataset(np.array([[0.5, -1.0]]), np.array([0]), 3)
        cfg = TrainConfig(LrSchedule("constant", 1e-2), epochs=3000, batch_size=1)
        _, history = train_dpn(init_mlp([2, 8, 3], seed=0), data, None, TargetSpec(), cfg)
        assert abs(history[-1]) <= 1e-3

    def test_separable_classes(self):
        data = toy_classes()
        cfg = TrainConfig(LrSchedule("constant", 1e-2), epochs=200, batch_size=32, seed=1)
        net, history = train_dnn(init_mlp([2, 10, 2], seed=1), data, cfg)
        z, _ = forward(net, data.features)
        assert np.mean(z.argmax(axis=1) == data.labels) == 1.0
        assert np.all(np.isfinite(history))

    def test_deterministic(self):
        data = toy_classes()
        ood = UnlabeledDataset(np.random.default_rng(2).normal(0, 6, (50, 2)))
        spec = TargetSpec(num_classes=2, smoothing=0.05)
        cfg = TrainConfig(LrSchedule("constant", 1e-2), epochs=5, batch_size=16, seed=3)
        runs = [train_dpn(init_mlp([2, 8, 2], keep_prob=0.8), data, ood, spec, cfg) for _ in range(2)]
        assert runs[0][1] == runs[1][1]
        for a, b in zip(runs[0][0].params(), runs[1][0].params()):
            np.testing.assert_array_equal(a, b)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reports_state(self):
        net = init_mlp([2, 4, 2], seed=0)
        net.weights[0][0, 0] = np.inf
        cfg = TrainConfig(LrSchedule("constant", 1e-3), epochs=2, batch_size=8)
        with pytest.raises(TrainingDivergedError) as info:
            train_dnn(net, toy_classes(n=8), cfg)
        err = info.value
        assert (err.step, err.epoch, err.batch, err.lr) == (0, 0, 0, 1e-3)
        assert not math.isfinite(err.loss)
        assert "step 0" in str(err)
