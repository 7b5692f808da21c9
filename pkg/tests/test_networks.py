import numpy as np
import pytest
import torch
from torch import nn

from conceptbench.learners.gradcheck import check_gradients, relative_error
from conceptbench.learners.networks import (
    NetworkSpec,
    TrainConfig,
    TrainingDiverged,
    count_parameters,
    forward_until,
    init_network,
    layer_names,
    load_checkpoint,
    run_steps,
    save_checkpoint,
    state_from_bytes,
    state_to_bytes,
    to_tensor,
    train_supervised,
)


def _separable(n=200, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 2)).astype(np.float32)
    y = (X @ np.array([1.0, -2.0]) > 0).astype(np.int64)
    X += np.where(y[:, None] == 1, 0.3, -0.3) * np.array([1.0, -2.0]) / np.sqrt(5)
    return X, y


class TestSpec:
    def test_mlp_parameter_count(self):
        net = init_network(NetworkSpec("mlp", (64,), (10,), widths=(32,)), 0)
        assert count_parameters(net) == 64 * 32 + 32 + 32 * 10 + 10 == 2410

    def test_same_seed_same_parameters(self):
        spec = NetworkSpec("conv_encoder", (1, 32, 32), (10,), widths=(8, 8), hidden=16)
        a, b = init_network(spec, 3), init_network(spec, 3)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb) and torch.isfinite(pa).all()
        c = init_network(spec, 4)
        assert not all(torch.equal(p, q) for p, q in zip(a.parameters(), c.parameters()))

    @pytest.mark.parametrize("kwargs", [
        dict(kind="conv_encoder", input_shape=(1, 30, 30), output_shape=(10,)),
        dict(kind="mlp", input_shape=(1, 4, 4), output_shape=(10,)),
        dict(kind="transformer", input_shape=(4,), output_shape=(2,)),
        dict(kind="mlp", input_shape=(4,), output_shape=(2,), widths=(0,)),
    ])
    def test_invalid_specs(self, kwargs):
        with pytest.raises(ValueError):
            NetworkSpec(**kwargs)

    def test_shapes_and_taps(self):
        spec = NetworkSpec("conv_encoder", (3, 64, 64), (7,))
        net = init_network(spec, 0)
        x = torch.zeros(2, 3, 64, 64)
        assert net(x).shape == (2, 7)
        assert layer_names(net) == ["conv1", "conv2", "conv3", "conv4", "flatten", "dense", "out"]
        assert forward_until(net, x, "dense").shape == (2, 256)
        with pytest.raises(KeyError):
            forward_until(net, x, "nope")
        dec = init_network(NetworkSpec("deconv_decoder", (10,), (1, 64, 64)), 0)
        assert dec(torch.zeros(2, 10)).shape == (2, 1, 64, 64)

    def test_to_tensor_layout(self):
        assert to_tensor(np.zeros((2, 8, 6, 3))).shape == (2, 3, 8, 6)


class TestGradients:
    """Autograd against central differences for every layer type, in float64."""

    @pytest.mark.parametrize("layer, shape", [
        (nn.Linear(5, 3), (4, 5)),
        (nn.Conv2d(2, 3, 4, 2, 1), (2, 2, 8, 8)),
        (nn.ConvTranspose2d(3, 2, 4, 2, 1), (2, 3, 4, 4)),
        (nn.ELU(), (3, 6)),
        (nn.Tanh(), (3, 6)),
        (nn.Softplus(), (3, 6)),
    ])
    def test_layer(self, layer, shape):
        torch.manual_seed(0)
        layer = layer.double()
        x = torch.randn(*shape, dtype=torch.float64, requires_grad=True)
        w = torch.randn_like(layer(x))
        tensors = [x, *layer.parameters()]
        assert check_gradients(lambda: (layer(x) * w).sum(), tensors) < 1e-4

    def test_relu_away_from_kink(self):
        x = torch.tensor([[-1.0, -0.5, 0.4, 2.0]], dtype=torch.float64, requires_grad=True)
        assert check_gradients(lambda: (torch.relu(x) ** 2).sum(), [x]) < 1e-4

    def test_cross_entropy_head(self):
        torch.manual_seed(1)
        net = init_network(NetworkSpec("mlp", (6,), (4,), widths=(5,), activation="tanh"), 0).double()
        x = torch.randn(8, 6, dtype=torch.float64)
        y = torch.randint(0, 4, (8,))
        err = check_gradients(lambda: nn.functional.cross_entropy(net(x), y), list(net.parameters()))
        assert err < 1e-4

    def test_encoder_network(self):
        net = init_network(NetworkSpec("conv_encoder", (1, 8, 8), (3,), widths=(2, 2), hidden=6,
                                       activation="elu"), 0).double()
        x = torch.randn(2, 1, 8, 8, dtype=torch.float64)
        assert check_gradients(lambda: net(x).square().sum(), list(net.parameters()), max_entries=8) < 1e-4

    def test_detects_wrong_gradient(self):
        x = torch.randn(5, dtype=torch.float64, requires_grad=True)

        class Wrong(torch.autograd.Function):
            @staticmethod
            def forward(ctx, t):
                return t ** 2

            @staticmethod
            def backward(ctx, g):
                return g

        assert check_gradients(lambda: Wrong.apply(x).sum(), [x]) > 1e-2

    def test_relative_error_floor(self):
        assert relative_error(0.0, 0.0) == 0.0
        assert np.isclose(relative_error(1.0, 1.1), 0.1 / 1.1)


class TestTraining:
    def test_separable_toy(self):
        X, y = _separable()
        net = init_network(NetworkSpec("mlp", (2,), (2,), widths=(16,)), 0)
        net, losses = train_supervised(net, X, y, cfg=TrainConfig(lr=1e-2, batch_size=32, steps=200))
        acc = (net(torch.as_tensor(X)).argmax(1).numpy() == y).mean()
        assert acc >= 0.99
        smooth = np.convolve(losses, np.ones(20) / 20, mode="valid")
        assert smooth[-1] < smooth[0]

    def test_zero_learning_rate(self):
        X, y = _separable()
        net = init_network(NetworkSpec("mlp", (2,), (2,), widths=(8,)), 0)
        before = [p.detach().clone() for p in net.parameters()]
        train_supervised(net, X, y, cfg=TrainConfig(lr=0.0, steps=20, optimizer="sgd"))
        assert all(torch.equal(a, b) for a, b in zip(before, net.parameters()))

    def test_determinism(self):
        X, y = _separable()
        runs = []
        for _ in range(2):
            net = init_network(NetworkSpec("mlp", (2,), (2,), widths=(8,)), 5)
            runs.append(train_supervised(net, X, y, cfg=TrainConfig(steps=50, seed=2))[1])
        assert np.allclose(runs[0], runs[1], rtol=1e-6)

    def test_callback_schedule(self):
        X, y = _separable()
        net = init_network(NetworkSpec("mlp", (2,), (2,), widths=(8,)), 0)
        steps = []
        train_supervised(net, X, y, cfg=TrainConfig(steps=25, eval_every=10), callback=steps.append)
        assert steps == [10, 20, 25]

    def test_mse_loss(self):
        X, _ = _separable()
        target = X.sum(1, keepdims=True)
        net = init_network(NetworkSpec("mlp", (2,), (1,), widths=(8,)), 0)
        _, losses = train_supervised(net, X, target, loss="mse", cfg=TrainConfig(lr=1e-2, steps=300))
        assert np.mean(losses[-20:]) < 0.1 * np.mean(losses[:20])

    def test_bad_labels(self):
        X, y = _separable()
        net = init_network(NetworkSpec("mlp", (2,), (2,), widths=(8,)), 0)
        with pytest.raises(ValueError):
            train_supervised(net, X, y + 2)

    def test_nan_aborts(self):
        p = torch.zeros(1, requires_grad=True)
        with pytest.raises(TrainingDiverged):
            run_steps([p], 10, lambda idx, step: p.sum() * float("nan"), TrainConfig(steps=3))

    @pytest.mark.parametrize("kwargs", [dict(lr=-1), dict(batch_size=0), dict(optimizer="rmsprop"),
                                        dict(steps=0), dict(eval_every=0)])
    def test_bad_config(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)


class TestCheckpoints:
    def test_round_trip_bit_identical(self, tmp_path):
        spec = NetworkSpec("conv_encoder", (1, 16, 16), (4,), widths=(4, 4), hidden=8)
        net = init_network(spec, 0)
        x = torch.randn(3, 1, 16, 16)
        save_checkpoint(net, spec, tmp_path / "ck")
        again, spec2 = load_checkpoint(tmp_path / "ck")
        assert spec2 == spec
        assert torch.equal(net.eval()(x), again(x))

    def test_blob_validation(self):
        blob = state_to_bytes({"w": torch.ones(2)})
        assert torch.equal(state_from_bytes(blob)["w"], torch.ones(2))
        with pytest.raises(ValueError):
            state_from_bytes(b"XXXXXX" + blob[6:])
        with pytest.raises(ValueError):
            state_from_bytes(blob[:6] + (99).to_bytes(2, "little") + blob[8:])
