"""VGG-16/VGG-19 graphs, the fine-tuning head, freezing and forward/backward."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from . import ops
from .errors import ConfigurationError, DimensionError, MissingWeightError, StateError, WeightShapeError
from .ops import CONV3, POOL2, DropoutState, KernelParams, OpRecord

ARCHITECTURES = ("vgg16", "vgg19")
TASKS = {"binary": 2, "multiclass": 3}

STAGE_WIDTHS = (64, 128, 256, 512, 512)
STAGE_DEPTHS = {"vgg16": (2, 2, 3, 3, 3), "vgg19": (2, 2, 4, 4, 4)}

INPUT_SIZE = 192
HEAD_UNITS = 512
DROPOUT_RATE = 0.5

# --tiny smoke graphs: conv widths divided by 8, 64x64 input
TINY_WIDTH_DIVISOR = 8
TINY_INPUT_SIZE = 64

WEIGHT_KINDS = ("conv", "dense")


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | maxpool | flatten | dense | relu | dropout | output
    name: str
    in_size: int = 0
    out_size: int = 0
    params: KernelParams | None = None
    trainable: bool = True
    rate: float = 0.0
    activation: str = ""

    @property
    def has_weights(self) -> bool:
        return self.kind in WEIGHT_KINDS

    def weight_shapes(self) -> tuple[tuple[int, ...], tuple[int, ...]]:
        if self.kind == "conv":
            k = self.params.kernel_size
            return (self.out_size, self.in_size, k, k), (self.out_size,)
        if self.kind == "dense":
            return (self.out_size, self.in_size), (self.out_size,)
        raise StateError(f"layer {self.name} carries no weights")

    def num_params(self) -> int:
        if not self.has_weights:
            return 0
        w, b = self.weight_shapes()
        return int(np.prod(w)) + int(np.prod(b))


@dataclass(frozen=True)
class ModelGraph:
    arch: str
    layers: tuple[LayerSpec, ...]
    task: str | None = None
    input_shape: tuple[int, int, int] = (3, INPUT_SIZE, INPUT_SIZE)
    tiny: bool = False

    def __post_init__(self):
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ConfigurationError("layer names must be unique within a graph")

    @property
    def num_classes(self) -> int:
        if self.task is None:
            raise StateError("graph has no classifier head")
        return TASKS[self.task]

    @property
    def has_head(self) -> bool:
        return any(layer.kind == "output" for layer in self.layers)

    def weight_layers(self) -> list[LayerSpec]:
        return [layer for layer in self.layers if layer.has_weights]

    def layer(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def index_of(self, kind: str) -> int:
        for i, layer in enumerate(self.layers):
            if layer.kind == kind:
                return i
        raise StateError(f"graph has no {kind} layer")

    def first_trainable(self) -> int | None:
        for i, layer in enumerate(self.layers):
            if layer.has_weights and layer.trainable:
                return i
        return None

    def shape_trace(self) -> list[tuple[str, tuple[int, ...]]]:
        """Per-sample output shape after every layer, from shape arithmetic alone."""
        shape: tuple[int, ...] = self.input_shape
        trace = []
        for layer in self.layers:
            if layer.kind == "conv":
                if shape[0] != layer.in_size:
                    raise DimensionError(f"{layer.name}: channel axis {shape[0]} != {layer.in_size}")
                shape = (layer.out_size, layer.params.output_size(shape[1]), layer.params.output_size(shape[2]))
            elif layer.kind == "maxpool":
                shape = (shape[0], layer.params.output_size(shape[1]), layer.params.output_size(shape[2]))
            elif layer.kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif layer.kind == "dense":
                if shape != (layer.in_size,):
                    raise DimensionError(f"{layer.name}: input width {shape} != ({layer.in_size},)")
                shape = (layer.out_size,)
            trace.append((layer.name, shape))
        return trace

    @property
    def flatten_width(self) -> int:
        return dict(self.shape_trace())["flatten"][0]


def build_features(arch: str, tiny: bool = False) -> ModelGraph:
    """Convolutional stack of ``arch`` ending at the flatten layer."""
    if arch not in STAGE_DEPTHS:
        raise ConfigurationError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")
    div = TINY_WIDTH_DIVISOR if tiny else 1
    size = TINY_INPUT_SIZE if tiny else INPUT_SIZE
    layers = []
    cin = 3
    for stage, (width, depth) in enumerate(zip(STAGE_WIDTHS, STAGE_DEPTHS[arch]), start=1):
        width //= div
        for i in range(1, depth + 1):
            layers.append(LayerSpec("conv", f"conv{stage}_{i}", cin, width, CONV3))
            layers.append(LayerSpec("relu", f"relu{stage}_{i}"))
            cin = width
        layers.append(LayerSpec("maxpool", f"pool{stage}", params=POOL2))
    layers.append(LayerSpec("flatten", "flatten"))
    return ModelGraph(arch, tuple(layers), None, (3, size, size), tiny)


def attach_finetune_head(graph: ModelGraph, task: str, units: int = HEAD_UNITS,
                         dropout_rate: float = DROPOUT_RATE) -> ModelGraph:
    """Append the 512-512-K classifier block.

    Multiclass heads end in a softmax; binary heads end in two sigmoid units.
    """
    if graph.has_head or graph.task is not None:
        raise StateError("classifier head already attached")
    if not graph.layers or graph.layers[-1].kind != "flatten":
        raise StateError("graph must end at a flatten layer before a head can be attached")
    if task not in TASKS:
        raise ConfigurationError(f"unknown task {task!r}; expected one of {tuple(TASKS)}")
    width = graph.flatten_width
    k = TASKS[task]
    head = [
        LayerSpec("dense", "fc1", width, units),
        LayerSpec("relu", "relu_fc1"),
        LayerSpec("dropout", "drop_fc1", rate=dropout_rate),
        LayerSpec("dense", "fc2", units, units),
        LayerSpec("relu", "relu_fc2"),
        LayerSpec("dropout", "drop_fc2", rate=dropout_rate),
        LayerSpec("dense", "fc3", units, k),
        LayerSpec("output", "output", activation="softmax" if task == "multiclass" else "sigmoid"),
    ]
    return replace(graph, layers=graph.layers + tuple(head), task=task)


def build_vgg16(task: str, tiny: bool = False) -> ModelGraph:
    return attach_finetune_head(build_features("vgg16", tiny), task)


def build_vgg19(task: str, tiny: bool = False) -> ModelGraph:
    return attach_finetune_head(build_features("vgg19", tiny), task)


def build(arch: str, task: str, tiny: bool = False) -> ModelGraph:
    return attach_finetune_head(build_features(arch, tiny), task)


def freeze_features(graph: ModelGraph) -> ModelGraph:
    """Mark every conv layer non-trainable; dense layers stay trainable."""
    layers = tuple(
        replace(layer, trainable=layer.kind != "conv") if layer.has_weights else layer
        for layer in graph.layers
    )
    return replace(graph, layers=layers)


def unfreeze_all(graph: ModelGraph) -> ModelGraph:
    return replace(graph, layers=tuple(replace(layer, trainable=True) for layer in graph.layers))


class ParamCount(NamedTuple):
    total: int
    trainable: int
    frozen: int


def param_count(graph: ModelGraph | None) -> ParamCount:
    if graph is None:
        return ParamCount(0, 0, 0)
    total = trainable = 0
    for layer in graph.layers:
        n = layer.num_params()
        total += n
        if layer.trainable:
            trainable += n
    return ParamCount(total, trainable, total - trainable)


def conv_param_count(graph: ModelGraph) -> int:
    return sum(layer.num_params() for layer in graph.layers if layer.kind == "conv")


# ---------------------------------------------------------------------------
# weights
# ---------------------------------------------------------------------------

@dataclass
class WeightStore:
    """Named (weight, bias) pairs for every weight-bearing layer."""

    arch: str
    task: str | None
    entries: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    frozen: dict[str, bool] = field(default_factory=dict)

    def __getitem__(self, name):
        return self.entries[name]

    def __contains__(self, name):
        return name in self.entries

    def sync_frozen(self, graph: ModelGraph):
        self.frozen = {layer.name: not layer.trainable for layer in graph.weight_layers()}

    def validate(self, graph: ModelGraph):
        for layer in graph.weight_layers():
            if layer.name not in self.entries:
                raise MissingWeightError(f"no weights for layer {layer.name}", layer=layer.name)
            w, b = self.entries[layer.name]
            ws, bs = layer.weight_shapes()
            if w.shape != ws or b.shape != bs:
                raise WeightShapeError(
                    f"layer {layer.name}: expected {ws}/{bs}, got {w.shape}/{b.shape}", layer=layer.name
                )

    def copy(self) -> "WeightStore":
        return WeightStore(
            self.arch, self.task,
            {k: (w.copy(), b.copy()) for k, (w, b) in self.entries.items()},
            dict(self.frozen),
        )

    def equals(self, other: "WeightStore") -> bool:
        """Bitwise equality of every tensor."""
        if self.entries.keys() != other.entries.keys():
            return False
        return all(
            w.dtype == ow.dtype and w.shape == ow.shape and w.tobytes() == ow.tobytes()
            and b.tobytes() == ob.tobytes()
            for (w, b), (ow, ob) in ((self.entries[k], other.entries[k]) for k in self.entries)
        )


def _layer_seed(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & (2**64 - 1), index]))


def init_layer(layer: LayerSpec, seed: int, index: int) -> tuple[np.ndarray, np.ndarray]:
    """He-uniform weights scaled by fan-in, zero biases."""
    ws, bs = layer.weight_shapes()
    fan_in = int(np.prod(ws[1:]))
    limit = np.sqrt(6.0 / fan_in)
    w = _layer_seed(seed, index).uniform(-limit, limit, size=ws).astype(np.float32)
    return w, np.zeros(bs, dtype=np.float32)


def init_weights(graph: ModelGraph, seed: int = 0) -> WeightStore:
    store = WeightStore(graph.arch, graph.task)
    for i, layer in enumerate(graph.layers):
        if layer.has_weights:
            store.entries[layer.name] = init_layer(layer, seed, i)
    store.sync_frozen(graph)
    return store


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

@dataclass
class Tape:
    """Records kept by a training-mode forward pass, keyed by layer index."""

    records: dict[int, OpRecord] = field(default_factory=dict)


def dropout_seed(seed: int, layer_index: int) -> int:
    ss = np.random.SeedSequence([seed & (2**64 - 1), layer_index])
    return int(ss.generate_state(1, np.uint64)[0])


def run_layers(graph: ModelGraph, store: WeightStore, x: np.ndarray, *, training: bool = False,
               seed: int = 0, start: int = 0, stop: int | None = None, tape: Tape | None = None,
               record_from: int = 0) -> np.ndarray:
    """Apply ``graph.layers[start:stop]`` to ``x``; the output activation is skipped.

    With a ``tape``, ops at index >= ``record_from`` are recorded for
    :func:`backward_layers`.
    """
    stop = len(graph.layers) if stop is None else stop
    for i in range(start, stop):
        layer = graph.layers[i]
        rec = tape is not None and i >= record_from
        r = None
        if layer.kind in WEIGHT_KINDS:
            if layer.name not in store.entries:
                raise MissingWeightError(f"no weights for layer {layer.name}", layer=layer.name)
            w, b = store.entries[layer.name]
            fn = ops.conv2d if layer.kind == "conv" else ops.dense
            args = (x, w, b, layer.params) if layer.kind == "conv" else (x, w, b)
            out = fn(*args, record=rec)
        elif layer.kind == "relu":
            out = ops.relu(x, record=rec)
        elif layer.kind == "maxpool":
            out = ops.maxpool2x2(x, record=rec)
            out = (out[0], out[2]) if rec else out[0]
        elif layer.kind == "flatten":
            out = ops.flatten(x, record=rec)
        elif layer.kind == "dropout":
            state = DropoutState(layer.rate, training, dropout_seed(seed, i))
            out = ops.dropout(x, state, record=rec)
        elif layer.kind == "output":
            continue
        else:
            raise StateError(f"unknown layer kind {layer.kind!r}")
        if rec:
            out, r = out
            tape.records[i] = r
        x = out
    return x


def backward_layers(graph: ModelGraph, store: WeightStore, tape: Tape, grad: np.ndarray,
                    stop: int | None = None) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Back-propagate a logit gradient; returns gradients for trainable layers only.

    Propagation halts at the earliest trainable layer, so frozen prefixes
    cost nothing.
    """
    first = graph.first_trainable()
    grads: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    if first is None:
        return grads
    stop = len(graph.layers) if stop is None else stop
    for i in range(stop - 1, first - 1, -1):
        layer = graph.layers[i]
        if layer.kind == "output":
            continue
        if i not in tape.records:
            raise StateError(f"layer {layer.name} has no forward record")
        need_input = i > first
        out = ops.backward(tape.records[i], grad, need_input_grad=need_input)
        if layer.has_weights and layer.trainable:
            grads[layer.name] = (out["weight"], out["bias"])
        grad = out["input"]
    return grads


def output_activation(graph: ModelGraph, logits: np.ndarray) -> np.ndarray:
    if graph.task == "multiclass":
        return ops.softmax(logits)
    return ops.sigmoid(logits)


def check_batch(graph: ModelGraph, batch: np.ndarray):
    if batch.ndim != 4 or batch.shape[1:] != graph.input_shape:
        raise DimensionError(
            f"batch must have shape (N, {', '.join(map(str, graph.input_shape))}), got {batch.shape}"
        )


def forward_pass(graph: ModelGraph, weights: WeightStore, batch: np.ndarray, mode: str = "inference",
                 seed: int = 0, tape: Tape | None = None) -> np.ndarray:
    """Class probabilities for ``batch`` (softmax rows, or two sigmoid units)."""
    if mode not in ("inference", "training"):
        raise ConfigurationError(f"mode must be 'inference' or 'training', got {mode!r}")
    if not graph.has_head:
        raise StateError("forward_pass needs a graph with a classifier head")
    check_batch(graph, batch)
    first = graph.first_trainable()
    logits = run_layers(graph, weights, batch, training=mode == "training", seed=seed, tape=tape,
                        record_from=len(graph.layers) if first is None else first)
    return output_activation(graph, logits)
