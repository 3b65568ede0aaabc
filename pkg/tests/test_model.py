import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vggfinetune import ops
from vggfinetune.errors import ConfigurationError, DimensionError, MissingWeightError, StateError
from vggfinetune.gradcheck import STEP, TOLERANCE
from vggfinetune.model import (
    ParamCount,
    Tape,
    attach_finetune_head,
    backward_layers,
    build,
    build_features,
    build_vgg16,
    build_vgg19,
    conv_param_count,
    forward_pass,
    freeze_features,
    init_weights,
    param_count,
    run_layers,
    unfreeze_all,
)
from vggfinetune.training import AdamState, TrainConfig, adam_step, task_loss

# (cin, cout) per conv layer, written out by hand
VGG16_CONVS = [(3, 64), (64, 64), (64, 128), (128, 128), (128, 256), (256, 256), (256, 256),
               (256, 512), (512, 512), (512, 512), (512, 512), (512, 512), (512, 512)]
VGG19_CONVS = [(3, 64), (64, 64), (64, 128), (128, 128), (128, 256), (256, 256), (256, 256), (256, 256),
               (256, 512), (512, 512), (512, 512), (512, 512), (512, 512), (512, 512), (512, 512), (512, 512)]


def conv_oracle(pairs):
    return sum(3 * 3 * cin * cout + cout for cin, cout in pairs)


def head_oracle(k, flat=18432, units=512):
    return flat * units + units + units * units + units + units * k + k


def kinds(graph, kind):
    return [layer for layer in graph.layers if layer.kind == kind]


class TestArchitecture:
    @pytest.mark.parametrize("arch,convs", [("vgg16", 13), ("vgg19", 16)])
    def test_layer_counts(self, arch, convs):
        g = build(arch, "multiclass")
        assert len(kinds(g, "conv")) == convs
        assert len(kinds(g, "dense")) == 3
        assert len(g.weight_layers()) == convs + 3
        assert len(kinds(g, "maxpool")) == 5

    @pytest.mark.parametrize("arch", ["vgg16", "vgg19"])
    def test_kernel_settings(self, arch):
        g = build(arch, "binary")
        assert all(layer.params == ops.KernelParams(3, 1, 1) for layer in kinds(g, "conv"))
        assert all(layer.params == ops.KernelParams(2, 2, 0) for layer in kinds(g, "maxpool"))

    def test_conv_param_totals(self):
        assert conv_param_count(build_vgg16("binary")) == conv_oracle(VGG16_CONVS) == 14_714_688
        assert conv_param_count(build_vgg19("binary")) == conv_oracle(VGG19_CONVS) == 20_024_384

    def test_total_params(self):
        assert param_count(build_vgg16("multiclass")).total == conv_oracle(VGG16_CONVS) + head_oracle(3)
        assert param_count(build_vgg16("multiclass")).total == 24_416_579
        assert param_count(build_vgg19("binary")).total == conv_oracle(VGG19_CONVS) + head_oracle(2)

    def test_frozen_counts(self):
        counts = param_count(freeze_features(build_vgg16("multiclass")))
        assert counts == ParamCount(24_416_579, 9_701_891, 14_714_688)
        assert head_oracle(3) == 9_701_891

    def test_empty_graph_count(self):
        assert param_count(None) == (0, 0, 0)

    @pytest.mark.parametrize("arch", ["vgg16", "vgg19"])
    def test_shape_chain(self, arch):
        g = build(arch, "multiclass")
        trace = dict(g.shape_trace())
        sizes = [trace[f"pool{i}"][1:] for i in range(1, 6)]
        assert sizes == [(96, 96), (48, 48), (24, 24), (12, 12), (6, 6)]
        for layer in kinds(g, "conv"):
            assert trace[layer.name][1:] in [(192, 192), (96, 96), (48, 48), (24, 24), (12, 12)]
        assert g.flatten_width == 512 * 6 * 6 == 18432
        assert trace["fc3"] == (3,)

    def test_binary_head(self):
        g = build_vgg16("binary")
        assert g.num_classes == 2
        assert g.layer("fc3").out_size == 2
        assert g.layer("output").activation == "sigmoid"
        assert build_vgg16("multiclass").layer("output").activation == "softmax"

    def test_head_same_for_both_architectures(self):
        def head(g):
            return [(layer.kind, layer.in_size, layer.out_size, layer.rate)
                    for layer in g.layers[g.index_of("flatten"):]]
        assert head(build_vgg16("multiclass")) == head(build_vgg19("multiclass"))

    def test_dropout_placement(self):
        g = build_vgg16("multiclass")
        order = [layer.kind for layer in g.layers[g.index_of("flatten"):]]
        assert order == ["flatten", "dense", "relu", "dropout", "dense", "relu", "dropout", "dense", "output"]

    def test_attach_twice(self):
        with pytest.raises(StateError):
            attach_finetune_head(build_vgg16("binary"), "binary")

    def test_unknown_names(self):
        with pytest.raises(ConfigurationError):
            build_features("vgg11")
        with pytest.raises(ConfigurationError):
            attach_finetune_head(build_features("vgg16"), "ternary")

    def test_tiny(self):
        g = build("vgg16", "multiclass", tiny=True)
        assert g.input_shape == (3, 64, 64)
        assert g.flatten_width == 64 * 2 * 2
        assert g.layer("conv1_1").out_size == 8
        assert param_count(g).total == 626_347

    def test_freeze_and_unfreeze(self):
        g = freeze_features(build_vgg16("multiclass"))
        trainable = [layer.name for layer in g.weight_layers() if layer.trainable]
        assert trainable == ["fc1", "fc2", "fc3"]
        assert all(layer.trainable for layer in unfreeze_all(g).weight_layers())


class TestInitAndForward:
    def test_init_deterministic(self):
        g = build("vgg19", "binary", tiny=True)
        assert init_weights(g, 4).equals(init_weights(g, 4))
        assert not init_weights(g, 4).equals(init_weights(g, 5))

    def test_init_statistics(self):
        g = build("vgg16", "binary", tiny=True)
        store = init_weights(g, 0)
        w, b = store["fc1"]
        limit = np.sqrt(6.0 / 256)
        assert w.dtype == np.float32
        assert np.abs(w).max() <= limit
        assert not np.any(b)

    def test_zero_weights_uniform(self):
        g = build("vgg16", "multiclass", tiny=True)
        store = init_weights(g, 0)
        for name, (w, b) in store.entries.items():
            store.entries[name] = (np.zeros_like(w), np.zeros_like(b))
        p = forward_pass(g, store, np.random.default_rng(0).random((2, 3, 64, 64), dtype=np.float32))
        np.testing.assert_allclose(p, np.full((2, 3), 1 / 3), atol=1e-7)

    def test_full_size_forward(self):
        g = build_vgg16("multiclass")
        store = init_weights(g, 0)
        p = forward_pass(g, store, np.random.default_rng(0).random((1, 3, 192, 192), dtype=np.float32))
        assert p.shape == (1, 3)
        assert p.dtype == np.float32
        np.testing.assert_allclose(p.sum(), 1.0, atol=1e-6)

    @pytest.mark.parametrize("arch,task,k", [("vgg16", "binary", 2), ("vgg19", "multiclass", 3)])
    def test_output_shape_and_range(self, arch, task, k):
        g = build(arch, task, tiny=True)
        p = forward_pass(g, init_weights(g, 1), np.random.default_rng(1).random((4, 3, 64, 64), dtype=np.float32))
        assert p.shape == (4, k)
        assert np.all((p >= 0) & (p <= 1))

    def test_deterministic(self):
        g = build("vgg16", "binary", tiny=True)
        store = init_weights(g, 0)
        x = np.random.default_rng(2).random((3, 3, 64, 64), dtype=np.float32)
        assert forward_pass(g, store, x).tobytes() == forward_pass(g, store, x).tobytes()
        a = forward_pass(g, store, x, mode="training", seed=9)
        b = forward_pass(g, store, x, mode="training", seed=9)
        assert a.tobytes() == b.tobytes()

    def test_inference_ignores_seed(self):
        g = build("vgg16", "binary", tiny=True)
        store = init_weights(g, 0)
        x = np.random.default_rng(2).random((2, 3, 64, 64), dtype=np.float32)
        assert forward_pass(g, store, x, seed=1).tobytes() == forward_pass(g, store, x, seed=2).tobytes()

    def test_wrong_input_shape(self):
        g = build("vgg16", "binary", tiny=True)
        with pytest.raises(DimensionError):
            forward_pass(g, init_weights(g, 0), np.zeros((1, 3, 32, 32), np.float32))
        with pytest.raises(DimensionError):
            forward_pass(g, init_weights(g, 0), np.zeros((3, 64, 64), np.float32))

    def test_missing_weight(self):
        g = build("vgg16", "binary", tiny=True)
        store = init_weights(g, 0)
        del store.entries["conv3_2"]
        with pytest.raises(MissingWeightError) as exc:
            forward_pass(g, store, np.zeros((1, 3, 64, 64), np.float32))
        assert exc.value.layer == "conv3_2"

    def test_no_head(self):
        g = build_features("vgg16", tiny=True)
        with pytest.raises(StateError):
            forward_pass(g, init_weights(g, 0), np.zeros((1, 3, 64, 64), np.float32))

    def test_bad_mode(self):
        g = build("vgg16", "binary", tiny=True)
        with pytest.raises(ConfigurationError):
            forward_pass(g, init_weights(g, 0), np.zeros((1, 3, 64, 64), np.float32), mode="eval")


class TestBackward:
    def test_head_weight_gradient_full_size(self):
        """Loss gradient w.r.t. fc3 of the real 18432-512-512-3 head, in float64."""
        g = freeze_features(build_vgg16("multiclass"))
        store = init_weights(g, 3)
        for name in ("fc1", "fc2", "fc3"):
            w, b = store.entries[name]
            store.entries[name] = (w.astype(np.float64), b.astype(np.float64))
        rng = np.random.default_rng(0)
        feats = rng.random((2, 18432))
        y = np.eye(3)[[0, 2]]
        start = g.index_of("flatten") + 1
        tape = Tape()
        logits = run_layers(g, store, feats, training=True, seed=5, start=start, tape=tape,
                            record_from=g.first_trainable())
        _, _, grad = task_loss("multiclass", logits, y)
        grads = backward_layers(g, store, tape, grad)
        assert set(grads) == {"fc1", "fc2", "fc3"}

        loss = lambda _: task_loss("multiclass", run_layers(g, store, feats, training=True, seed=5, start=start), y)[0]
        w3 = store.entries["fc3"][0]
        fd = finite_diff_gradient_subset(loss, w3, rng.choice(w3.size, 40, replace=False))
        idx = np.flatnonzero(fd)
        assert ops.max_relative_error(grads["fc3"][0].ravel()[idx], fd.ravel()[idx]) < TOLERANCE

    def test_frozen_prefix_gets_no_gradient(self):
        g = freeze_features(build("vgg16", "binary", tiny=True))
        store = init_weights(g, 0)
        tape = Tape()
        x = np.random.default_rng(0).random((2, 3, 64, 64), dtype=np.float32)
        logits = run_layers(g, store, x, training=True, tape=tape, record_from=g.first_trainable())
        assert min(tape.records) == g.first_trainable()
        grads = backward_layers(g, store, tape, np.ones_like(logits))
        assert set(grads) == {"fc1", "fc2", "fc3"}

    def test_full_gradient_shapes(self):
        g = build("vgg19", "multiclass", tiny=True)
        store = init_weights(g, 0)
        tape = Tape()
        logits = run_layers(g, store, np.random.default_rng(0).random((2, 3, 64, 64), dtype=np.float32),
                            training=True, tape=tape)
        grads = backward_layers(g, store, tape, np.ones_like(logits))
        assert set(grads) == {layer.name for layer in g.weight_layers()}
        for name, (gw, gb) in grads.items():
            assert gw.shape == store[name][0].shape
            assert gb.shape == store[name][1].shape

    @settings(max_examples=5, deadline=None)
    @given(seed=st.integers(0, 1000), steps=st.integers(1, 3))
    def test_frozen_tensors_unchanged_by_steps(self, seed, steps):
        g = freeze_features(build("vgg16", "binary", tiny=True))
        store = init_weights(g, seed)
        before = store.copy()
        rng = np.random.default_rng(seed)
        params = {f"{n}.{p}": t for n in ("fc1", "fc2", "fc3") for p, t in zip(("weight", "bias"), store[n])}
        state = AdamState()
        for _ in range(steps):
            tape = Tape()
            x = rng.random((2, 3, 64, 64), dtype=np.float32)
            logits = run_layers(g, store, x, training=True, seed=seed, tape=tape, record_from=g.first_trainable())
            _, _, grad = task_loss("binary", logits, np.eye(2, dtype=np.float32)[[0, 1]])
            grads = backward_layers(g, store, tape, grad)
            flat = {f"{n}.{p}": t for n, pair in grads.items() for p, t in zip(("weight", "bias"), pair)}
            adam_step(params, flat, state, TrainConfig())
        for layer in g.weight_layers():
            same = all(a.tobytes() == b.tobytes() for a, b in zip(store[layer.name], before[layer.name]))
            assert same == (layer.kind == "conv")


def finite_diff_gradient_subset(f, x, indices):
    return ops.finite_diff_gradient(f, x, STEP, indices=indices)
