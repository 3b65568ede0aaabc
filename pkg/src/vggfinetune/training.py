"""Adam fine-tuning loop and test-set evaluation."""
from __future__ import annotations

import io
import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .data import AugmentConfig, LabeledSample, augment, load_image, sample_rng
from .errors import ConfigurationError, DimensionError, DivergenceError, InputError, StateError
from .metrics import ConfusionMatrix, MetricsReport, classification_metrics, confusion_matrix
from .model import ModelGraph, Tape, WeightStore, backward_layers, output_activation, run_layers

log = logging.getLogger(__name__)

# batch size / epochs per task, from the two experiment setups
TASK_DEFAULTS = {"binary": (24, 12), "multiclass": (32, 16)}

FEATURE_CHUNK = 8


@dataclass
class TrainConfig:
    task: str = "binary"
    learning_rate: float = 1e-4
    batch_size: int | None = None
    epochs: int | None = None
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)
    augment_validation: bool = True

    def __post_init__(self):
        if self.task not in TASK_DEFAULTS:
            raise ConfigurationError(f"unknown task {self.task!r}")
        batch, epochs = TASK_DEFAULTS[self.task]
        if self.batch_size is None:
            self.batch_size = batch
        if self.epochs is None:
            self.epochs = epochs
        if not self.learning_rate > 0:
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.epsilon > 0):
            raise ConfigurationError("Adam constants need 0 <= beta < 1 and epsilon > 0")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              config: TrainConfig):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    for name, p in params.items():
        if name not in grads:
            raise DimensionError(f"no gradient for parameter {name}")
        if grads[name].shape != p.shape:
            raise DimensionError(f"{name}: gradient shape {grads[name].shape} != parameter shape {p.shape}")
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name].astype(p.dtype, copy=False)
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        if m.shape != p.shape:
            raise DimensionError(f"{name}: Adam moment shape {m.shape} != parameter shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / p.dtype.type(bc1)
        v_hat = v / p.dtype.type(bc2)
        p -= p.dtype.type(config.learning_rate) * m_hat / (np.sqrt(v_hat) + p.dtype.type(config.epsilon))
    return params, state


@dataclass
class EpochReport:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float


def epochs_csv(reports: list[EpochReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "train_accuracy", "val_loss", "val_accuracy"])
    for r in reports:
        w.writerow([r.epoch, repr(r.train_loss), repr(r.train_accuracy), repr(r.val_loss), repr(r.val_accuracy)])
    return buf.getvalue()


def task_loss(task: str, logits: np.ndarray, onehot: np.ndarray):
    """(loss, probs, logit gradient) for the head belonging to ``task``."""
    if task == "multiclass":
        loss, probs = ops.softmax_cross_entropy(logits, onehot)
        return loss, probs, ops.softmax_cross_entropy_backward(probs, onehot)
    loss, probs = ops.sigmoid_binary_loss(logits, onehot)
    return loss, probs, ops.sigmoid_binary_loss_backward(probs, onehot)


def _one_hot(labels: np.ndarray, k: int, dtype=np.float32) -> np.ndarray:
    out = np.zeros((len(labels), k), dtype=dtype)
    out[np.arange(len(labels)), labels] = 1
    return out


def _step_seed(seed: int, epoch: int, batch: int) -> int:
    ss = np.random.SeedSequence([seed & (2**64 - 1), epoch, batch])
    return int(ss.generate_state(1, np.uint64)[0])


def _images(samples: list[LabeledSample], size: int, aug: AugmentConfig | None, epoch: int) -> np.ndarray:
    batch = []
    for s in samples:
        img = load_image(s, size)
        if aug is not None:
            img = augment(img, aug, sample_rng(aug.seed, s.path, epoch))
        batch.append(img)
    return np.stack(batch).astype(np.float32, copy=False)


def extract_features(graph: ModelGraph, weights: WeightStore, x: np.ndarray, chunk: int = FEATURE_CHUNK):
    """Flattened conv-stack output for ``x``, computed ``chunk`` samples at a time."""
    stop = graph.index_of("flatten") + 1
    parts = [run_layers(graph, weights, x[i : i + chunk], stop=stop) for i in range(0, len(x), chunk)]
    return np.concatenate(parts)


def _trainable_params(graph: ModelGraph, weights: WeightStore) -> dict[str, np.ndarray]:
    params = {}
    for layer in graph.weight_layers():
        if layer.trainable:
            w, b = weights.entries[layer.name]
            params[f"{layer.name}.weight"] = w
            params[f"{layer.name}.bias"] = b
    return params


def fit(graph: ModelGraph, weights: WeightStore, train: list[LabeledSample], val: list[LabeledSample],
        config: TrainConfig) -> tuple[WeightStore, list[EpochReport]]:
    """Train the trainable layers of ``graph`` for ``config.epochs`` epochs.

    ``weights`` is updated in place and returned with one report per epoch.
    When every conv layer is frozen and a partition is not augmented, its
    conv features are computed once and reused across epochs.
    """
    if not train:
        raise InputError("training split is empty")
    if not val:
        raise InputError("validation split is empty")
    if not graph.has_head:
        raise StateError("attach a classifier head before training")
    if config.task != graph.task:
        raise ConfigurationError(f"config task {config.task} does not match graph task {graph.task}")
    weights.validate(graph)
    weights.sync_frozen(graph)
    first = graph.first_trainable()
    if first is None:
        raise StateError("graph has no trainable layers")

    k = graph.num_classes
    size = graph.input_shape[1]
    head_start = graph.index_of("flatten") + 1
    features_frozen = first >= head_start
    train_aug = config.augment
    val_aug = config.augment if config.augment_validation else None

    train_labels = np.array([s.label for s in train])
    val_labels = np.array([s.label for s in val])
    train_cache = val_cache = None
    if features_frozen and train_aug is None:
        train_cache = extract_features(graph, weights, _images(train, size, None, 0))
    if features_frozen and val_aug is None:
        val_cache = extract_features(graph, weights, _images(val, size, None, 0))

    params = _trainable_params(graph, weights)
    state = AdamState()
    reports = []
    n = len(train)
    bs = config.batch_size
    for epoch in range(config.epochs):
        order = np.random.default_rng(config.seed ^ epoch).permutation(n)
        loss_sum = 0.0
        correct = 0
        for b, lo in enumerate(range(0, n, bs)):
            idx = order[lo : lo + bs]
            onehot = _one_hot(train_labels[idx], k)
            if train_cache is not None:
                x, start = train_cache[idx], head_start
            else:
                x = _images([train[i] for i in idx], size, train_aug, epoch)
                start = 0
                if features_frozen:
                    x, start = extract_features(graph, weights, x), head_start
            tape = Tape()
            logits = run_layers(graph, weights, x, training=True, seed=_step_seed(config.seed, epoch, b),
                                start=start, tape=tape, record_from=first)
            loss, probs, grad = task_loss(graph.task, logits, onehot)
            if not math.isfinite(loss):
                raise DivergenceError(epoch, b, loss)
            grads = backward_layers(graph, weights, tape, grad)
            flat = {}
            for name, (gw, gb) in grads.items():
                flat[f"{name}.weight"] = gw
                flat[f"{name}.bias"] = gb
            adam_step(params, flat, state, config)
            loss_sum += loss * len(idx)
            correct += int((probs.argmax(axis=1) == train_labels[idx]).sum())

        val_loss, val_acc = _score(graph, weights, val, val_labels, val_cache, val_aug, epoch)
        report = EpochReport(epoch + 1, loss_sum / n, correct / n, val_loss, val_acc)
        log.info("epoch %d/%d loss %.4f acc %.4f val_loss %.4f val_acc %.4f", report.epoch, config.epochs,
                 report.train_loss, report.train_accuracy, report.val_loss, report.val_accuracy)
        reports.append(report)
    return weights, reports


def _score(graph, weights, samples, labels, cache, aug, epoch, batch_size=32):
    k = graph.num_classes
    size = graph.input_shape[1]
    head_start = graph.index_of("flatten") + 1
    loss_sum = 0.0
    correct = 0
    for lo in range(0, len(samples), batch_size):
        if cache is not None:
            logits = run_layers(graph, weights, cache[lo : lo + batch_size], start=head_start)
        else:
            x = extract_features(graph, weights, _images(samples[lo : lo + batch_size], size, aug, epoch))
            logits = run_layers(graph, weights, x, start=head_start)
        y = labels[lo : lo + batch_size]
        loss, probs, _ = task_loss(graph.task, logits, _one_hot(y, k, logits.dtype))
        loss_sum += loss * len(y)
        correct += int((probs.argmax(axis=1) == y).sum())
    return loss_sum / len(samples), correct / len(samples)


def predict_proba(graph: ModelGraph, weights: WeightStore, samples: list[LabeledSample],
                  batch_size: int = 16) -> np.ndarray:
    """Inference-mode output-layer values for every sample, in order."""
    size = graph.input_shape[1]
    head_start = graph.index_of("flatten") + 1
    out = []
    for lo in range(0, len(samples), batch_size):
        x = extract_features(graph, weights, _images(samples[lo : lo + batch_size], size, None, 0))
        out.append(output_activation(graph, run_layers(graph, weights, x, start=head_start)))
    return np.concatenate(out)


def evaluate(graph: ModelGraph, weights: WeightStore, split: list[LabeledSample], task: str | None = None,
             class_names: list[str] | None = None,
             positive_class: int | None = None) -> tuple[ConfusionMatrix, MetricsReport]:
    """Confusion matrix and metrics of argmax predictions over ``split``."""
    if not split:
        raise InputError("evaluation split is empty")
    task = task or graph.task
    if task != graph.task:
        raise ConfigurationError(f"task {task} does not match graph task {graph.task}")
    k = graph.num_classes
    probs = predict_proba(graph, weights, split)
    true = np.array([s.label for s in split])
    cm = confusion_matrix(true, probs.argmax(axis=1), k, class_names)
    return cm, classification_metrics(cm, positive_class)
