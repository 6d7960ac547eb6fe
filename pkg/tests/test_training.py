import json
import zipfile

import numpy as np
import pytest

from ternspike import tensor as tn
from ternspike.data import DatasetHandle, Split
from ternspike.errors import ConfigurationError, FormatError, TrainingDiverged
from ternspike.network import LayerSpec, Network, NetworkSpec, build_small_cnn, init_params
from ternspike.neurons import LIFConfig, NeuronKind
from ternspike.selftest import surrogate_gradient_errors, tiny_spiking_mlp
from ternspike.training import (
    SGD,
    Adam,
    Checkpoint,
    TrainConfig,
    clip_grad_norm,
    evaluate,
    evaluate_network,
    learning_rate,
    train,
)


@pytest.fixture(scope="module")
def small(mnist):
    """600 training and 200 test images; enough for quick end-to-end runs."""
    return DatasetHandle(mnist.name, mnist.train.subset(600), mnist.test.subset(200), mnist.mean, mnist.std)


QUICK = dict(epochs=1, batch_size=50, max_steps=6, val_fraction=0.0)


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.optimizer, cfg.momentum, cfg.weight_decay, cfg.lr_schedule, cfg.grad_clip) == ("sgd", 0.9, 5e-4, "cosine", 5.0)

    @pytest.mark.parametrize(
        "kw", [{"epochs": 0}, {"batch_size": 0}, {"learning_rate": -1}, {"optimizer": "lbfgs"}, {"lr_schedule": "step"}, {"momentum": 1.0}]
    )
    def test_invalid(self, kw):
        with pytest.raises(ConfigurationError):
            TrainConfig(**kw)

    def test_round_trip(self):
        cfg = TrainConfig(epochs=7, optimizer="adam", lr_schedule="constant")
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_field(self):
        with pytest.raises(ConfigurationError):
            TrainConfig.from_dict({"epochz": 3})

    def test_cosine_schedule(self):
        cfg = TrainConfig(learning_rate=0.2)
        assert learning_rate(cfg, 0, 100) == pytest.approx(0.2)
        assert learning_rate(cfg, 50, 100) == pytest.approx(0.1)
        assert learning_rate(cfg, 100, 100) == pytest.approx(0.0)


class TestOptimizers:
    def _param(self):
        p = tn.Parameter([1.0, -2.0], "w.weight")
        p.grad = np.array([0.5, 0.5], np.float32)
        return p

    @pytest.mark.parametrize("opt", [SGD, Adam])
    def test_zero_lr_is_identity(self, opt):
        p = self._param()
        before = p.data.copy()
        opt([p], weight_decay=0.1).step(0.0)
        assert np.array_equal(p.data, before)

    def test_sgd_momentum(self):
        p = self._param()
        opt = SGD([p], momentum=0.9)
        opt.step(0.1)
        opt.step(0.1)
        # v1 = g, v2 = 0.9 g + g
        np.testing.assert_allclose(p.data, [1.0 - 0.1 * 0.5 * 2.9, -2.0 - 0.1 * 0.5 * 2.9], rtol=1e-6)

    def test_amplitude_not_decayed(self):
        a = tn.Parameter(1.0, "lif.amplitude")
        a.grad = np.zeros((), np.float32)
        SGD([a], weight_decay=0.5).step(0.1)
        assert a.data == 1.0

    def test_clip(self):
        p = self._param()
        p.grad = np.array([3.0, 4.0], np.float32)
        assert clip_grad_norm([p], 1.0) == pytest.approx(5.0)
        assert np.linalg.norm(p.grad) == pytest.approx(1.0, rel=1e-5)


class TestSurrogateGradients:
    @pytest.mark.parametrize("kind", list(NeuronKind))
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_tape_matches_relaxed_finite_differences(self, kind, seed):
        errs = surrogate_gradient_errors(seed, kind)
        assert max(errs.values()) < 1e-2, errs

    def test_amplitude_gradient_sums_base_times_upstream(self):
        spec = tiny_spiking_mlp(NeuronKind.TRAINABLE_TERNARY, timesteps=2)
        params, _ = init_params(spec, 0)
        params["fc1.weight"].data *= 3
        net = Network(spec, params)
        x = np.random.default_rng(0).standard_normal((5, 4)).astype(np.float32)
        with tn.GradTape() as tape:
            logits, rec = net(x, record=True)
            loss = tn.reduce_sum(logits)
        tn.backward(tape, loss)
        # d(sum logits)/d o = column sums of fc2 weight / T, at every (t, n)
        upstream = params["fc2.weight"].data.sum(axis=0) / 2
        want = float((rec.layers["lif"].base * upstream).sum())
        assert params["lif.amplitude"].grad == pytest.approx(want, rel=1e-5)


class TestTrain:
    def test_zero_lr_leaves_parameters(self, small):
        spec = build_small_cnn("mlp-mnist", NeuronKind.TRAINABLE_TERNARY)
        ckpt = train(spec, small, TrainConfig(learning_rate=0.0, **QUICK))
        init, _ = init_params(spec, 0)
        assert all(np.array_equal(ckpt.params[k], init[k].data) for k in init)

    def test_zero_lr_metrics_match_initialization(self, small):
        spec = build_small_cnn("mlp-mnist", NeuronKind.TERNARY)
        ckpt = train(spec, small, TrainConfig(learning_rate=0.0, **QUICK))
        init = Network.initialize(spec, 0)
        init.buffers = {k: v.copy() for k, v in ckpt.buffers.items()}
        a = evaluate(ckpt, small.test.images, small.test.labels)
        b = evaluate_network(init, small.test.images, small.test.labels)
        assert a == b

    def test_seed_reproducible(self, small):
        spec = build_small_cnn("cnn-mnist", NeuronKind.TERNARY)
        cfg = TrainConfig(**{**QUICK, "val_fraction": 0.2})
        a, b = train(spec, small, cfg), train(spec, small, cfg)
        assert a.history == b.history
        assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)

    def test_returns_best_validation_epoch(self, small):
        spec = build_small_cnn("mlp-mnist", NeuronKind.BINARY)
        ckpt = train(spec, small, TrainConfig(epochs=3, batch_size=100, val_fraction=0.2))
        best = max(ckpt.history, key=lambda e: e["val_accuracy"])
        assert ckpt.epoch == best["epoch"]

    def test_learns(self, small):
        spec = build_small_cnn("mlp-mnist", NeuronKind.TERNARY)
        ckpt = train(spec, small, TrainConfig(epochs=2, batch_size=32, val_fraction=0.0))
        assert evaluate(ckpt, small.test.images, small.test.labels)["accuracy"] > 0.7

    def test_amplitudes_receive_updates(self, small):
        spec = build_small_cnn("mlp-mnist", NeuronKind.TRAINABLE_TERNARY)
        ckpt = train(spec, small, TrainConfig(**QUICK))
        assert ckpt.params["lif2.amplitude"] != 1.0

    def test_shape_mismatch(self, small):
        spec = build_small_cnn("mlp-mnist", input_shape=(1, 14, 14))
        with pytest.raises(ConfigurationError):
            train(spec, small, TrainConfig(**QUICK))

    def test_divergence_names_epoch_and_layer(self, small):
        spec = build_small_cnn("mlp-mnist", NeuronKind.TERNARY)
        cfg = TrainConfig(epochs=2, batch_size=50, val_fraction=0.0, learning_rate=1e30, grad_clip=0.0, lr_schedule="constant")
        with pytest.raises(TrainingDiverged) as e:
            with np.errstate(all="ignore"):
                train(spec, small, cfg)
        assert e.value.epoch == 1 and e.value.layer in {l.name for l in spec.layers}
        assert "epoch 1" in str(e.value)

    def test_non_finite_inputs_abort(self, small):
        spec = build_small_cnn("mlp-mnist", NeuronKind.TERNARY)
        bad = small.train.images[:64].copy()
        bad[0, 0, 0, 0] = np.inf
        data = DatasetHandle("bad", Split(bad, small.train.labels[:64]), small.test, 0, 1)
        with pytest.raises(TrainingDiverged):
            with np.errstate(all="ignore"):
                train(spec, data, TrainConfig(**QUICK))


class TestEvaluate:
    def test_silent_network(self, small):
        net = Network.initialize(build_small_cnn("mlp-mnist", NeuronKind.TERNARY))
        for p in net.parameters():
            if p.name.endswith(("weight", "bias", "beta")):
                p.data[...] = 0
        m = evaluate_network(net, small.test.images, small.test.labels)
        assert m["mean_sparsity"] == 0 and all(v == 0 for v in m["sparsity"].values())
        # every logit ties at zero, so the prediction is class 0
        assert m["accuracy"] == pytest.approx(np.mean(small.test.labels == 0))

    def test_always_firing(self, small):
        spec = NetworkSpec(
            (1, 28, 28),
            [
                LayerSpec("flatten", "flat"),
                LayerSpec("linear", "fc1", units=16),
                LayerSpec("neuron", "lif", neuron=LIFConfig(NeuronKind.BINARY, v_th=1e-30)),
                LayerSpec("linear", "fc2", units=10),
            ],
        )
        net = Network.initialize(spec)
        net.params["fc1.weight"].data[...] = 0
        net.params["fc1.bias"].data[...] = 1
        m = evaluate_network(net, small.test.images, small.test.labels)
        assert m["sparsity"]["lif"] == 1.0

    def test_counts_negative_spikes(self):
        spec = tiny_spiking_mlp(NeuronKind.TERNARY, timesteps=1)
        net = Network.initialize(spec)
        net.params["fc1.weight"].data[...] = 0
        net.params["fc1.bias"].data[...] = np.array([-2, -2, 2, 2, 0, 0, 0, 0], np.float32)
        m = evaluate_network(net, np.zeros((3, 4), np.float32), np.zeros(3, int))
        assert m["sparsity"]["lif"] == 0.5


@pytest.fixture(scope="module")
def trained(small):
    return train(build_small_cnn("cnn-mnist", NeuronKind.TRAINABLE_TERNARY), small, TrainConfig(**QUICK))


class TestCheckpoint:
    def test_round_trip_is_bit_exact(self, trained, small, tmp_path):
        trained.save(tmp_path / "a.ckpt")
        again = Checkpoint.load(tmp_path / "a.ckpt")
        assert evaluate(trained, small.test.images, small.test.labels) == evaluate(again, small.test.images, small.test.labels)
        assert again.history == trained.history and again.epoch == trained.epoch

    def test_archive_layout(self, trained, tmp_path):
        trained.save(tmp_path / "a.ckpt")
        with zipfile.ZipFile(tmp_path / "a.ckpt") as z:
            names = set(z.namelist())
            manifest = json.loads(z.read("manifest.json"))
        assert "params/lif1.amplitude.tspk" in names and "buffers/bn1.running_mean.tspk" in names
        assert manifest["spec"] == trained.spec.to_dict()

    def test_not_a_checkpoint(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"garbage")
        with pytest.raises(FormatError):
            Checkpoint.load(tmp_path / "x.ckpt")
