"""Network construction, forward evaluation, backprop, and training.

Gradients are checked against central finite differences of an
independently coded forward pass; the RMSprop loop is replayed by hand
for a short schedule; the divergence guard is exercised with a
deliberately unstable deep relu stack.
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from darcyda.errors import (
    InvalidArgumentError,
    NumericOverflowError,
    TrainingDivergedError,
)
from darcyda.surrogate import (
    NetworkSpec,
    SurrogateNet,
    TrainingConfig,
    design_spec,
    latin_hypercube,
    load_network,
    loss_and_gradients,
    probit,
    rmse,
    save_network,
    split_training_set,
    train,
)

import oracles


def small_net(seed=401, sizes=(3, 8, 6, 4, 2)):
    spec = NetworkSpec(layer_sizes=list(sizes),
                       activations=["sigmoid", "relu", "relu", "exponential"])
    return SurrogateNet.initialize(spec, np.random.default_rng(seed))


class TestSpec:
    def test_design_layout(self):
        spec = design_spec(32, 25)
        assert spec.layer_sizes == [32, 128, 256, 128, 25]
        assert spec.activations == ["sigmoid", "relu", "relu", "exponential"]

    def test_validation(self):
        with pytest.raises(InvalidArgumentError):
            NetworkSpec(layer_sizes=[4], activations=[])
        with pytest.raises(InvalidArgumentError):
            NetworkSpec(layer_sizes=[4, 2], activations=["relu", "relu"])
        with pytest.raises(InvalidArgumentError):
            NetworkSpec(layer_sizes=[4, 0], activations=["relu"])
        with pytest.raises(InvalidArgumentError):
            NetworkSpec(layer_sizes=[4, 2], activations=["softmax"])


class TestInitialization:
    def test_glorot_bounds_and_zero_biases(self):
        spec = design_spec(16, 9)
        net = SurrogateNet.initialize(spec, np.random.default_rng(402))
        sizes = spec.layer_sizes
        for l, (w, b) in enumerate(zip(net.weights, net.biases)):
            limit = np.sqrt(6.0 / (sizes[l] + sizes[l + 1]))
            assert np.max(np.abs(w)) <= limit
            # a uniform draw over hundreds of entries fills its range
            assert np.max(np.abs(w)) > 0.8 * limit
            assert_allclose(b, 0.0, rtol=0, atol=0)

    def test_seed_reproducible(self):
        a = small_net(seed=403)
        b = small_net(seed=403)
        c = small_net(seed=404)
        assert all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights))
        assert any(not np.array_equal(x, y) for x, y in zip(a.weights, c.weights))

    def test_shape_validation(self):
        spec = NetworkSpec(layer_sizes=[2, 3], activations=["relu"])
        with pytest.raises(InvalidArgumentError):
            SurrogateNet(spec, [np.zeros((2, 3))], [np.zeros(3)])


class TestForward:
    def test_single_matches_batch(self):
        net = small_net()
        rng = np.random.default_rng(405)
        xs = rng.standard_normal((12, 3))
        batch = net.forward_batch(xs)
        for x, row in zip(xs, batch):
            assert_allclose(net.forward(x), row, rtol=1e-13, atol=1e-15)

    def test_callable_alias(self):
        net = small_net()
        x = np.zeros(3)
        assert_allclose(net(x), net.forward(x), rtol=0, atol=0)

    def test_input_validated(self):
        net = small_net()
        with pytest.raises(InvalidArgumentError):
            net.forward(np.zeros(4))
        with pytest.raises(InvalidArgumentError):
            net.forward_batch(np.zeros((5, 4)))

    def test_overflow_surfaces_package_error(self):
        spec = NetworkSpec(layer_sizes=[1, 1], activations=["linear"])
        net = SurrogateNet(spec, [np.full((1, 1), 1e308)], [np.zeros(1)])
        with pytest.raises(NumericOverflowError):
            net.forward(np.array([1e10]))
        with pytest.raises(NumericOverflowError):
            net.forward_batch(np.array([[1e10]]))

    def test_parameter_copy_isolated(self):
        net = small_net()
        w, b = net.parameter_copy()
        w[0][0, 0] += 99.0
        assert net.weights[0][0, 0] != w[0][0, 0]
        net.set_parameters((w, b))
        assert net.weights[0][0, 0] == w[0][0, 0]


class TestDesign:
    def test_latin_hypercube_stratified(self):
        rng = np.random.default_rng(406)
        n, k = 50, 3
        design = latin_hypercube(n, k, rng)
        assert design.shape == (n, k)
        assert np.all((design > 0.0) & (design < 1.0))
        for j in range(k):
            cells = np.floor(design[:, j] * n).astype(int)
            assert np.array_equal(np.sort(cells), np.arange(n))

    def test_latin_hypercube_seeded(self):
        a = latin_hypercube(20, 2, np.random.default_rng(7))
        b = latin_hypercube(20, 2, np.random.default_rng(7))
        assert np.array_equal(a, b)

    def test_latin_hypercube_validation(self):
        with pytest.raises(InvalidArgumentError):
            latin_hypercube(0, 2, np.random.default_rng(0))

    def test_probit_matches_bisection(self):
        rng = np.random.default_rng(407)
        us = np.concatenate([[1e-6, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0 - 1e-6],
                             rng.random(200)])
        got = probit(us)
        want = [oracles.probit_bisect(u) for u in us]
        assert_allclose(got, want, atol=1e-10)

    def test_probit_far_tail_against_bisection(self):
        # the erf-based CDF has ~1e-16 granularity near 1, so dividing
        # by the tail density ~1e-11 caps the oracle's own resolution
        # near 1e-5; the comparison tolerance reflects the oracle, not
        # the implementation
        us = np.array([1e-12, 1.0 - 1e-12])
        want = [oracles.probit_bisect(u) for u in us]
        assert_allclose(probit(us), want, atol=1e-4)

    def test_probit_monotone_and_symmetric(self):
        u = np.linspace(0.01, 0.99, 99)
        z = probit(u)
        assert np.all(np.diff(z) > 0)
        assert_allclose(z, -probit(1.0 - u), atol=1e-12)
        assert probit(np.array([0.5]))[0] == pytest.approx(0.0, abs=1e-15)

    def test_probit_rejects_boundary(self):
        with pytest.raises(InvalidArgumentError):
            probit(np.array([0.0, 0.5]))
        with pytest.raises(InvalidArgumentError):
            probit(np.array([0.5, 1.0]))


class TestSplitAndMetrics:
    def test_nine_to_one_split(self):
        x = np.arange(40.0).reshape(20, 2)
        y = np.arange(20.0).reshape(20, 1)
        xtr, ytr, xte, yte = split_training_set(x, y)
        assert xtr.shape == (18, 2) and xte.shape == (2, 2)
        assert_allclose(xte, x[18:], rtol=0, atol=0)
        assert_allclose(ytr, y[:18], rtol=0, atol=0)

    def test_split_validation(self):
        with pytest.raises(InvalidArgumentError):
            split_training_set(np.zeros((5, 2)), np.zeros((4, 1)))
        with pytest.raises(InvalidArgumentError):
            split_training_set(np.zeros((5, 2)), np.zeros((5, 1)))

    def test_rmse_hand_value(self):
        p = np.array([[1.0, 2.0], [3.0, 4.0]])
        t = np.array([[1.0, 0.0], [3.0, 2.0]])
        assert rmse(p, t) == pytest.approx(np.sqrt(2.0))
        with pytest.raises(InvalidArgumentError):
            rmse(p, t[:1])


class TestGradients:
    def test_backprop_matches_central_differences(self):
        net = small_net(seed=408)
        rng = np.random.default_rng(409)
        x = 0.5 * rng.standard_normal((5, 3))
        y = rng.random((5, 2)) + 0.5
        loss, gw, gb, _ = loss_and_gradients(net, x, y)
        names = net.spec.activations
        h = 1e-6

        def fd(params_w, params_b):
            return oracles.forward_loss(params_w, params_b, names, x, y)

        for l in range(len(net.weights)):
            w_pert = [w.copy() for w in net.weights]
            for idx in [(0, 0), (net.weights[l].shape[0] - 1,
                                 net.weights[l].shape[1] - 1)]:
                w_pert[l][idx] += h
                up = fd(w_pert, net.biases)
                w_pert[l][idx] -= 2 * h
                down = fd(w_pert, net.biases)
                w_pert[l][idx] += h
                want = (up - down) / (2 * h)
                assert gw[l][idx] == pytest.approx(want, rel=1e-5, abs=1e-10)
            b_pert = [b.copy() for b in net.biases]
            b_pert[l][0] += h
            up = fd(net.weights, b_pert)
            b_pert[l][0] -= 2 * h
            down = fd(net.weights, b_pert)
            want = (up - down) / (2 * h)
            assert gb[l][0] == pytest.approx(want, rel=1e-5, abs=1e-10)

    def test_loss_is_mean_over_batch_and_outputs(self):
        net = small_net(seed=410)
        rng = np.random.default_rng(411)
        x = rng.standard_normal((7, 3))
        y = rng.standard_normal((7, 2))
        loss, *_ = loss_and_gradients(net, x, y)
        resid = net.forward_batch(x) - y
        assert loss == pytest.approx(np.sum(resid ** 2) / 14.0, rel=1e-13)

    def test_relu_kink_gradient_is_zero_sided(self):
        # single relu unit: at negative pre-activation both the unit's
        # output and its weight gradient vanish
        spec = NetworkSpec(layer_sizes=[1, 1], activations=["relu"])
        net = SurrogateNet(spec, [np.array([[1.0]])], [np.array([-2.0])])
        loss, gw, gb, _ = loss_and_gradients(net, np.array([[1.0]]),
                                             np.array([[3.0]]))
        assert loss == pytest.approx(9.0)
        assert gw[0][0, 0] == 0.0 and gb[0][0] == 0.0


class TestTraining:
    def test_rmsprop_replayed_by_hand(self):
        """Full-batch schedule: the trained parameters must match a
        literal transcription of the update rule."""
        net = small_net(seed=412)
        rng = np.random.default_rng(413)
        x = rng.standard_normal((6, 3))
        y = rng.random((6, 2)) + 0.5
        cfg = TrainingConfig(epochs=3, batch_size=6, learning_rate=1e-3)

        ref = small_net(seed=412)
        v_w = [np.zeros_like(w) for w in ref.weights]
        v_b = [np.zeros_like(b) for b in ref.biases]
        for _ in range(cfg.epochs):
            _, gw, gb, _ = loss_and_gradients(ref, x, y)
            for l in range(len(ref.weights)):
                v_w[l] = cfg.rho * v_w[l] + (1 - cfg.rho) * gw[l] ** 2
                v_b[l] = cfg.rho * v_b[l] + (1 - cfg.rho) * gb[l] ** 2
                ref.weights[l] -= cfg.learning_rate * gw[l] / (np.sqrt(v_w[l]) + cfg.epsilon)
                ref.biases[l] -= cfg.learning_rate * gb[l] / (np.sqrt(v_b[l]) + cfg.epsilon)

        train(net, x, y, cfg, np.random.default_rng(414))
        for w_got, w_want in zip(net.weights, ref.weights):
            assert_allclose(w_got, w_want, rtol=1e-10, atol=1e-14)
        for b_got, b_want in zip(net.biases, ref.biases):
            assert_allclose(b_got, b_want, rtol=1e-10, atol=1e-14)

    def test_loss_decreases_on_smooth_target(self):
        rng = np.random.default_rng(415)
        x = rng.uniform(-1, 1, size=(80, 2))
        y = np.exp(0.3 * x[:, :1] - 0.2 * x[:, 1:])
        spec = NetworkSpec(layer_sizes=[2, 8, 1],
                           activations=["sigmoid", "exponential"])
        net = SurrogateNet.initialize(spec, np.random.default_rng(416))
        hist = train(net, x, y, TrainingConfig(epochs=60, batch_size=20),
                     np.random.default_rng(417))
        assert hist.final_loss < 0.5 * hist.initial_loss
        assert len(hist.epoch_losses) == 60
        assert hist.final_loss == hist.epoch_losses[-1]
        assert 0 <= hist.best_epoch < 60

    def test_zero_epochs_is_noop(self):
        net = small_net(seed=418)
        before = net.parameter_copy()
        hist = train(net, np.zeros((4, 3)), np.ones((4, 2)),
                     TrainingConfig(epochs=0), np.random.default_rng(419))
        assert all(np.array_equal(a, b) for a, b in zip(net.weights, before[0]))
        assert hist.epoch_losses == []
        assert np.isnan(hist.initial_loss)

    def test_same_seed_same_weights(self):
        rng = np.random.default_rng(420)
        x = rng.standard_normal((30, 3))
        y = rng.random((30, 2)) + 0.5
        cfg = TrainingConfig(epochs=5, batch_size=8)
        runs = []
        for _ in range(2):
            net = small_net(seed=421)
            train(net, x, y, cfg, np.random.default_rng(422))
            runs.append(net.parameter_copy())
        for a, b in zip(runs[0][0], runs[1][0]):
            assert np.array_equal(a, b)

    @pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
    @pytest.mark.filterwarnings("ignore:invalid value:RuntimeWarning")
    def test_divergence_restores_best_checkpoint(self):
        """A deep relu stack with an absurd learning rate overshoots in
        one epoch; the error must carry the checkpoint and the net must
        be rolled back to it."""
        sizes = [2] + [4] * 20 + [1]
        spec = NetworkSpec(layer_sizes=sizes,
                           activations=["relu"] * 20 + ["linear"])
        rng = np.random.default_rng(0)
        net = SurrogateNet.initialize(spec, rng)
        x = rng.standard_normal((8, 2))
        y = rng.standard_normal((8, 1))
        w0, _ = net.parameter_copy()
        cfg = TrainingConfig(epochs=10, batch_size=8, learning_rate=1e9)
        with pytest.raises(TrainingDivergedError) as err:
            train(net, x, y, cfg, np.random.default_rng(1))
        assert err.value.epoch == 0
        assert err.value.checkpoint is not None
        assert all(np.array_equal(a, b) for a, b in zip(net.weights, w0))

    def test_config_validation(self):
        with pytest.raises(InvalidArgumentError):
            TrainingConfig(epochs=-1)
        with pytest.raises(InvalidArgumentError):
            TrainingConfig(batch_size=0)
        with pytest.raises(InvalidArgumentError):
            TrainingConfig(rho=1.0)
        with pytest.raises(InvalidArgumentError):
            TrainingConfig(learning_rate=0.0)


class TestSerialization:
    def test_round_trip_bit_exact(self, tmp_path):
        net = small_net(seed=426)
        net.meta = {"test_rmse": 0.125, "epochs": 7}
        path = tmp_path / "net.json"
        save_network(path, net)
        back = load_network(path)
        assert back.spec.layer_sizes == net.spec.layer_sizes
        assert back.spec.activations == net.spec.activations
        for a, b in zip(back.weights, net.weights):
            assert np.array_equal(a, b)
        for a, b in zip(back.biases, net.biases):
            assert np.array_equal(a, b)
        assert back.meta == net.meta

    def test_tampered_activation_rejected(self, tmp_path):
        import json
        net = small_net(seed=427)
        path = tmp_path / "net.json"
        save_network(path, net)
        data = json.loads(path.read_text())
        data["layers"][0]["activation"] = "relu"
        path.write_text(json.dumps(data))
        with pytest.raises(InvalidArgumentError):
            load_network(path)

    def test_missing_field_rejected(self, tmp_path):
        path = tmp_path / "net.json"
        path.write_text('{"spec": {"layer_sizes": [2, 1], "activations": ["relu"]}}')
        with pytest.raises(InvalidArgumentError):
            load_network(path)
