"""Finite-difference verification of every backward kernel.

Each check runs in float64 on small random inputs (at most 200 elements
per probed tensor) and compares the analytic gradient of a random linear
projection of the kernel output with central differences.
"""
from __future__ import annotations

import numpy as np

from . import ops
from .model import LayerSpec, ModelGraph, Tape, WeightStore, backward_layers, run_layers
from .ops import finite_diff_gradient, max_relative_error

STEP = 1e-3
TOLERANCE = 1e-4


def _projected(fn, proj):
    return lambda *a: float((fn(*a) * proj).sum())


def check_conv2d(rng):
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    out, rec = ops.conv2d(x, w, b, record=True)
    proj = rng.standard_normal(out.shape)
    g = ops.backward(rec, proj)
    f = lambda: float((ops.conv2d(x, w, b) * proj).sum())
    return max(
        max_relative_error(g["input"], finite_diff_gradient(lambda _: f(), x, STEP)),
        max_relative_error(g["weight"], finite_diff_gradient(lambda _: f(), w, STEP)),
        max_relative_error(g["bias"], finite_diff_gradient(lambda _: f(), b, STEP)),
    )


def check_dense(rng):
    x = rng.standard_normal((3, 6))
    w = rng.standard_normal((4, 6))
    b = rng.standard_normal(4)
    out, rec = ops.dense(x, w, b, record=True)
    proj = rng.standard_normal(out.shape)
    g = ops.backward(rec, proj)
    f = lambda _: float((ops.dense(x, w, b) * proj).sum())
    return max(
        max_relative_error(g["input"], finite_diff_gradient(f, x, STEP)),
        max_relative_error(g["weight"], finite_diff_gradient(f, w, STEP)),
        max_relative_error(g["bias"], finite_diff_gradient(f, b, STEP)),
    )


def _away_from_zero(rng, shape, margin=10 * STEP):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * (margin + np.abs(x)), x)


def check_relu(rng):
    x = _away_from_zero(rng, (4, 10))
    out, rec = ops.relu(x, record=True)
    proj = rng.standard_normal(out.shape)
    g = ops.backward(rec, proj)["input"]
    return max_relative_error(g, finite_diff_gradient(_projected(ops.relu, proj), x, STEP))


def check_dropout(rng):
    x = rng.standard_normal((3, 10))
    state = ops.DropoutState(0.5, training=True, rng_seed=int(rng.integers(2**32)))
    out, rec = ops.dropout(x, state, record=True)
    proj = rng.standard_normal(out.shape)
    g = ops.backward(rec, proj)["input"]
    # the seed is fixed on the state, so every probe redraws the same mask
    f = lambda v: float((ops.dropout(v, state) * proj).sum())
    return max_relative_error(g, finite_diff_gradient(f, x, STEP))


def check_maxpool(rng):
    # distinct values spaced well beyond the probe step keep argmax stable
    x = rng.permutation(32).reshape(1, 2, 4, 4).astype(np.float64) * 0.1
    out, _, rec = ops.maxpool2x2(x, record=True)
    proj = rng.standard_normal(out.shape)
    g = ops.backward(rec, proj)["input"]
    f = lambda v: float((ops.maxpool2x2(v)[0] * proj).sum())
    return max_relative_error(g, finite_diff_gradient(f, x, STEP))


def _labels(rng, n, k):
    y = np.zeros((n, k))
    y[np.arange(n), rng.integers(0, k, n)] = 1
    return y


def check_softmax_cross_entropy(rng):
    z = rng.standard_normal((4, 3))
    y = _labels(rng, 4, 3)
    _, probs = ops.softmax_cross_entropy(z, y)
    g = ops.softmax_cross_entropy_backward(probs, y)
    return max_relative_error(g, finite_diff_gradient(lambda v: ops.softmax_cross_entropy(v, y)[0], z, STEP))


def check_sigmoid_binary(rng):
    z = rng.standard_normal((4, 2))
    y = _labels(rng, 4, 2)
    _, probs = ops.sigmoid_binary_loss(z, y)
    g = ops.sigmoid_binary_loss_backward(probs, y)
    return max_relative_error(g, finite_diff_gradient(lambda v: ops.sigmoid_binary_loss(v, y)[0], z, STEP))


def small_head(width=6, units=5, k=3) -> ModelGraph:
    """A miniature flatten->dense->relu->dropout x2->dense head for composite checks."""
    task = "multiclass" if k == 3 else "binary"
    layers = (
        LayerSpec("flatten", "flatten"),
        LayerSpec("dense", "fc1", width, units),
        LayerSpec("relu", "relu_fc1"),
        LayerSpec("dropout", "drop_fc1", rate=0.5),
        LayerSpec("dense", "fc2", units, units),
        LayerSpec("relu", "relu_fc2"),
        LayerSpec("dropout", "drop_fc2", rate=0.5),
        LayerSpec("dense", "fc3", units, k),
        LayerSpec("output", "output", activation="softmax" if k == 3 else "sigmoid"),
    )
    return ModelGraph("vgg16", layers, task, (width, 1, 1))


def check_head(rng, k=3, margin=0.05):
    """Loss gradient w.r.t. every head weight, through relu and fixed dropout masks.

    Draws are rejected until every relu input sits at least ``margin`` from
    the kink, since a probe that crosses it invalidates the central difference.
    """
    from .training import task_loss

    graph = small_head(k=k)
    while True:
        store = WeightStore("vgg16", graph.task)
        for layer in graph.weight_layers():
            ws, bs = layer.weight_shapes()
            scale = 1.0 / np.sqrt(ws[1])
            store.entries[layer.name] = (rng.standard_normal(ws) * scale, rng.standard_normal(bs) * 0.1)
        x = rng.standard_normal((4, 6, 1, 1))
        y = _labels(rng, 4, k)
        seed = int(rng.integers(2**32))
        tape = Tape()
        logits = run_layers(graph, store, x, training=True, seed=seed, tape=tape, record_from=1)
        relu_inputs = [r.saved["x"] for r in tape.records.values() if r.op == "relu"]
        if min(np.abs(z).min() for z in relu_inputs) > margin:
            break

    _, _, grad = task_loss(graph.task, logits, y)
    grads = backward_layers(graph, store, tape, grad)

    def loss(_):
        return task_loss(graph.task, run_layers(graph, store, x, training=True, seed=seed), y)[0]

    worst = 0.0
    for name, (gw, gb) in grads.items():
        w, b = store.entries[name]
        worst = max(worst, max_relative_error(gw, finite_diff_gradient(loss, w, STEP)))
        worst = max(worst, max_relative_error(gb, finite_diff_gradient(loss, b, STEP)))
    return worst


CHECKS = {
    "conv2d": check_conv2d,
    "dense": check_dense,
    "relu": check_relu,
    "dropout": check_dropout,
    "maxpool2x2": check_maxpool,
    "softmax_cross_entropy": check_softmax_cross_entropy,
    "sigmoid_binary_loss": check_sigmoid_binary,
    "head_multiclass": lambda rng: check_head(rng, 3),
    "head_binary": lambda rng: check_head(rng, 2),
}


def run_gradcheck(seed: int = 0) -> dict[str, float]:
    """Max relative error per kernel."""
    return {name: check(np.random.default_rng([seed, i])) for i, (name, check) in enumerate(CHECKS.items())}
