import numpy as np
import pytest

from ternspike import tensor as tn
from ternspike.errors import ConfigurationError
from ternspike.gradcheck import scalar_lif_trace
from ternspike.network import (
    PRESETS,
    LayerKind,
    LayerSpec,
    Network,
    NetworkSpec,
    build_small_cnn,
    forward,
    init_params,
)
from ternspike.neurons import LIFConfig, NeuronKind

L = LayerSpec


def set_params(params, values):
    for k, v in values.items():
        params[k].data[...] = v


@pytest.fixture(params=list(NeuronKind))
def kind(request):
    return request.param


class TestForwardExamples:
    def test_pass_through(self):
        spec = NetworkSpec((3,), [L("linear", "fc", units=3)], timesteps=1)
        params, _ = init_params(spec)
        set_params(params, {"fc.weight": np.eye(3), "fc.bias": 0})
        x = np.array([[0.5, -2.0, 3.0]], np.float32)
        logits, _ = forward(spec, params, x)
        assert np.array_equal(logits.data, x)

    @pytest.mark.parametrize("T", [1, 2, 5])
    def test_zero_weights_are_silent(self, kind, T):
        spec = build_small_cnn("cnn-mnist", kind, T)
        net = Network.initialize(spec)
        for p in net.parameters():
            if not p.name.endswith(("gamma", "amplitude")):
                p.data[...] = 0
        x = np.random.default_rng(0).standard_normal((3, 1, 28, 28)).astype(np.float32)
        logits, rec = net(x, record=True)
        assert np.all(logits.data == 0)
        assert all(np.all(t.base == 0) for t in rec.layers.values())

    @pytest.mark.parametrize("k", [NeuronKind.BINARY, NeuronKind.TERNARY, NeuronKind.TRAINABLE_TERNARY])
    def test_two_layer_hand_trace(self, k):
        cfg = LIFConfig(k)
        spec = NetworkSpec(
            (2,), [L("linear", "fc1", units=2), L("neuron", "lif", neuron=cfg), L("linear", "fc2", units=1)], timesteps=2
        )
        params, _ = init_params(spec)
        w1, b1 = np.array([[1.5, -0.5], [-1.0, -0.75]]), np.array([0.1, -0.2])
        w2, b2 = np.array([[2.0, -3.0]]), np.array([0.25])
        set_params(params, {"fc1.weight": w1, "fc1.bias": b1, "fc2.weight": w2, "fc2.bias": b2})
        amp = 0.5
        if k is NeuronKind.TRAINABLE_TERNARY:
            params["lif.amplitude"].data[...] = amp
        x = np.array([[0.8, 0.4]], np.float32)

        current = (w1.astype(np.float32) @ x[0] + b1.astype(np.float32)).astype(np.float32)
        spikes = np.array([scalar_lif_trace([c, c], cfg, amp)[1] for c in current])  # (neuron, t)
        per_t = [float(w2[0] @ spikes[:, t] + b2[0]) for t in range(2)]
        logits, _ = forward(spec, params, x)
        assert logits.data[0, 0] == pytest.approx(np.mean(per_t), abs=1e-6)

    def test_bad_batch_shape(self):
        spec = build_small_cnn("mlp-mnist")
        with pytest.raises(ConfigurationError):
            Network.initialize(spec)(np.zeros((2, 1, 27, 28), np.float32))


class TestSpecValidation:
    def test_chain_break_names_layer(self):
        spec = NetworkSpec((1, 8, 8), [L("conv", "c", out_channels=2, kernel_size=3), L("linear", "head", units=3)])
        with pytest.raises(ConfigurationError, match="head"):
            spec.shapes()

    def test_readout_must_not_spike(self):
        spec = NetworkSpec((4,), [L("linear", "fc", units=3), L("neuron", "lif", neuron=LIFConfig())])
        with pytest.raises(ConfigurationError, match="lif"):
            spec.shapes()

    def test_residual_shape_mismatch(self):
        spec = NetworkSpec(
            (4,), [L("linear", "a", units=3), L("linear", "b", units=2), L("residual", "r", source="a"), L("linear", "c", units=2)]
        )
        with pytest.raises(ConfigurationError, match="r"):
            spec.shapes()

    def test_duplicate_names(self):
        spec = NetworkSpec((4,), [L("linear", "a", units=3), L("linear", "a", units=2)])
        with pytest.raises(ConfigurationError):
            spec.shapes()

    def test_zero_timesteps(self):
        with pytest.raises(ConfigurationError):
            build_small_cnn("mlp-mnist", timesteps=0)

    def test_unknown_layer_field(self):
        d = build_small_cnn("mlp-mnist").to_dict()
        d["layers"][1]["kernel"] = 3
        with pytest.raises(ConfigurationError, match="unknown fields"):
            NetworkSpec.from_dict(d)

    def test_unknown_preset_lists_presets(self):
        with pytest.raises(ConfigurationError, match="cnn-mnist"):
            build_small_cnn("vgg")


class TestPresets:
    def test_mlp_dimensions(self):
        spec = build_small_cnn("mlp-mnist")
        assert [spec.shapes()[l.name] for l in spec.weighted_layers()] == [(256,), (256,), (10,)]
        assert len(spec.neuron_layers()) == 2

    def test_cnn_has_two_conv_blocks(self):
        spec = build_small_cnn("cnn-mnist")
        kinds = [l.kind for l in spec.weighted_layers()]
        assert kinds == [LayerKind.CONV, LayerKind.CONV, LayerKind.LINEAR]

    def test_resnet_mini(self):
        spec = build_small_cnn("resnet-mini")
        convs = [l for l in spec.layers if l.kind is LayerKind.CONV]
        residuals = [l for l in spec.layers if l.kind is LayerKind.RESIDUAL]
        assert len(convs) == 6 and len(residuals) == 2

    @pytest.mark.parametrize("preset", PRESETS)
    def test_first_weighted_layer_is_real_input(self, preset):
        spec = build_small_cnn(preset)
        assert spec.real_input_layers() == [spec.weighted_layers()[0].name]

    @pytest.mark.parametrize("preset", PRESETS)
    def test_one_amplitude_per_trainable_layer(self, preset):
        spec = build_small_cnn(preset, NeuronKind.TRAINABLE_TERNARY)
        params, _ = init_params(spec)
        amps = sorted(k for k in params if k.endswith(".amplitude"))
        assert amps == sorted(f"{l.name}.amplitude" for l in spec.neuron_layers())
        assert all(params[a].data == 1.0 for a in amps)

    @pytest.mark.parametrize("preset", PRESETS)
    def test_json_round_trip(self, preset, kind):
        spec = build_small_cnn(preset, kind, 3)
        again = NetworkSpec.from_json(spec.to_json())
        assert again.to_dict() == spec.to_dict()


class TestForwardProperties:
    @pytest.fixture
    def batch(self):
        return np.random.default_rng(3).standard_normal((4, 1, 28, 28)).astype(np.float32)

    @pytest.mark.parametrize("preset", PRESETS)
    def test_spike_closure(self, preset, kind, batch):
        net = Network.initialize(build_small_cnn(preset, kind, 2), seed=1)
        if kind is NeuronKind.TRAINABLE_TERNARY:
            for k, p in net.params.items():
                if k.endswith("amplitude"):
                    p.data[...] = 0.7
        _, rec = net(batch, train=True, record=True)
        for trace in rec.layers.values():
            assert set(np.unique(trace.base)) <= ({0.0, 1.0} if kind is NeuronKind.BINARY else {-1.0, 0.0, 1.0})
            assert np.array_equal(trace.spikes, trace.base * trace.amplitude)

    def test_deterministic(self, batch):
        net = Network.initialize(build_small_cnn("resnet-mini", NeuronKind.TERNARY, 2))
        a, _ = net(batch)
        b, _ = net(batch)
        assert np.array_equal(a.data, b.data)

    def test_timestep_values_independent_of_T(self, batch, kind):
        spec = build_small_cnn("cnn-mnist", kind, 2)
        params, buffers = init_params(spec, 2)
        _, r2 = forward(spec, params, batch, buffers, record=True)
        _, r5 = forward(spec.with_timesteps(5), params, batch, buffers, record=True)
        for name in r2.layers:
            assert np.array_equal(r2.layers[name].membrane, r5.layers[name].membrane[:2])
            assert np.array_equal(r2.layers[name].base, r5.layers[name].base[:2])

    def test_record_shapes(self, batch):
        spec = build_small_cnn("cnn-mnist", NeuronKind.TERNARY, 3)
        _, rec = Network.initialize(spec)(batch, record=True)
        shapes = spec.shapes()
        for name, trace in rec.layers.items():
            assert trace.membrane.shape == (3, 4) + shapes[name]

    def test_no_record_by_default(self, batch):
        _, rec = Network.initialize(build_small_cnn("mlp-mnist"))(batch)
        assert rec is None

    def test_train_mode_updates_running_stats(self, batch):
        net = Network.initialize(build_small_cnn("mlp-mnist"))
        before = net.buffers["bn1.running_mean"].copy()
        net(batch, train=True)
        assert not np.array_equal(before, net.buffers["bn1.running_mean"])
        after = net.buffers["bn1.running_mean"].copy()
        net(batch)
        assert np.array_equal(after, net.buffers["bn1.running_mean"])

    def test_gradients_reach_every_parameter(self, batch):
        net = Network.initialize(build_small_cnn("resnet-mini", NeuronKind.TRAINABLE_TERNARY, 2))
        with tn.GradTape() as tape:
            logits, _ = net(batch * 3, train=True)
            loss = tn.softmax_cross_entropy(logits, [0, 1, 2, 3])
        tn.backward(tape, loss)
        silent = [p.name for p in net.parameters() if not np.any(p.grad) and not p.name.endswith("bias")]
        assert silent == []
