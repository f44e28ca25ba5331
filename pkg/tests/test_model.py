import numpy as np
import pytest

from rsbnet.losses import IPMConfig, LossWeights, sample_weights
from rsbnet.model import ConfigError, NetworkConfig, RSBNet
from rsbnet.tensor import ContractError, grad_check, zero_grads
from rsbnet.trainer import FactualData, objective

SMALL = dict(encoder_layers=(7, 5), rep_dim_a=2, rep_dim_bc=3, decoder_layers=(4,), head_layers=(4,))


def small_net(seed=0, input_dim=6, gain=1.0):
    return RSBNet(NetworkConfig(input_dim=input_dim, init_gain=gain, **SMALL), seed=seed)


class TestConfig:
    def test_rep_width_must_match(self):
        with pytest.raises(ConfigError):
            NetworkConfig(input_dim=4, encoder_layers=(10, 9), rep_dim_a=2, rep_dim_bc=3)

    def test_unknown_activation(self):
        with pytest.raises(ConfigError):
            NetworkConfig(input_dim=4, activation="tanh")

    def test_defaults(self):
        cfg = NetworkConfig(input_dim=25)
        assert cfg.encoder_layers == (200, 200, 200)
        assert (cfg.rep_dim_a, cfg.rep_dim_bc) == (50, 150)


class TestEncodeDecode:
    def test_shapes(self):
        net = RSBNet(NetworkConfig(input_dim=25), seed=0)
        a, bc = net.encode(np.random.default_rng(0).normal(size=(32, 25)))
        assert a.shape == (32, 50) and bc.shape == (32, 150)
        assert net.decode(a, bc).shape == (32, 25)

    def test_row_independence(self):
        net = small_net()
        row = np.random.default_rng(1).normal(size=(1, 6))
        a, bc = net.encode(np.vstack([row, row]))
        assert np.array_equal(a[0], a[1]) and np.array_equal(bc[0], bc[1])

    def test_deterministic(self):
        x = np.random.default_rng(2).normal(size=(5, 6))
        out1 = small_net(seed=9).representation(x)
        out2 = small_net(seed=9).representation(x)
        assert np.array_equal(out1, out2)

    def test_zero_input_finite(self):
        net = small_net()
        a, bc = net.encode(np.zeros((3, 6)))
        assert np.isfinite(net.decode(a, bc)).all()

    def test_input_dim_checked(self):
        with pytest.raises(ConfigError):
            small_net().encode(np.zeros((3, 5)))


class TestPredict:
    def test_invalid_treatment(self):
        net = small_net()
        with pytest.raises(ContractError):
            net.predict(np.zeros((2, 3)), 2)

    def test_phi_a_unreachable(self):
        net = small_net()
        x = np.random.default_rng(3).normal(size=(4, 6))
        _, bc = net.encode(x)
        before = net.predict(bc, 1)
        # predict only consumes the BC block, so any value of the A block is irrelevant
        a, bc2 = net.encode(x)
        a += 100.0
        assert np.array_equal(net.predict(bc2, 1), before)

    def test_identical_heads_zero_ite(self):
        net = small_net()
        for (_, l0), (_, l1) in zip(net.head0.items(), net.head1.items()):
            l1.w.value[...] = l0.w.value
            l1.b.value[...] = l0.b.value
        assert not net.predict_ite(np.random.default_rng(4).normal(size=(6, 6))).any()

    def test_ite_is_difference(self):
        net = small_net()
        x = np.random.default_rng(5).normal(size=(6, 6))
        _, bc = net.encode(x)
        assert np.array_equal(net.predict_ite(x), net.predict(bc, 1) - net.predict(bc, 0))

    def test_batch_routing_matches_per_sample(self):
        net = small_net()
        rng = np.random.default_rng(6)
        x, t = rng.normal(size=(7, 6)), np.array([0, 1, 1, 0, 1, 0, 0])
        y_hat = net.forward(x, t).y_hat
        for i in range(7):
            _, bc = net.encode(x[i : i + 1])
            np.testing.assert_allclose(y_hat[i], net.predict(bc, int(t[i]))[0], rtol=0, atol=1e-14)


class TestGradients:
    def test_full_objective_20_batches(self):
        rng = np.random.default_rng(0)
        lw = LossWeights(alpha=0.7, beta=0.5, gamma=2.0, lam=0.01)
        for k in range(20):
            net = small_net(seed=k)
            x, y = rng.normal(size=(8, 6)), rng.normal(size=(8, 1))
            t = rng.permutation([0, 1] * 4)
            w = sample_weights(t).w
            data = FactualData(x, t, y)
            params = net.params()
            for p in params:
                p.value[...] += 0.1 * rng.normal(size=p.shape)

            def loss():
                zero_grads(params)
                total, _ = objective(net, data, w, lw, IPMConfig())
                return total, [p.grad for p in params]

            report = grad_check(loss, [p.value for p in params], max_coords=150, rng=np.random.default_rng(k))
            assert report.passed, (k, report.max_error)

    def test_prediction_gradient_skips_phi_a(self):
        net = small_net()
        rng = np.random.default_rng(1)
        x, y, t = rng.normal(size=(8, 6)), rng.normal(size=(8, 1)), np.array([0, 1] * 4)
        cache = net.forward(x, t)
        zero_grads(net.params())
        d_y = rng.normal(size=(8, 1))
        # only the A columns of the representation layer are inspected
        net.backward(cache, d_y_hat=d_y)
        last = list(net.encoder.values())[-1]
        assert not last.w.grad[:, :2].any() and not last.b.grad[:, :2].any()
        assert last.w.grad[:, 2:].any()


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        net = small_net(seed=3)
        for p in net.params():
            p.value[...] += np.random.default_rng(0).normal(size=p.shape) * 1e-3
        net.save(tmp_path / "c.json")
        back = RSBNet.load(tmp_path / "c.json")
        for (k, v), (k2, v2) in zip(net.state_dict().items(), back.state_dict().items()):
            assert k == k2 and np.array_equal(v, v2)
        assert back.config == net.config

    def test_bad_format(self):
        with pytest.raises(ConfigError):
            RSBNet.from_document({"format": "other"})

    def test_shape_mismatch(self):
        net = small_net()
        state = net.state_dict()
        state["enc0.w"] = np.zeros((2, 2))
        with pytest.raises(ConfigError):
            net.load_state_dict(state)
