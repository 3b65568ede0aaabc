"""Binary ``.vggw`` weight files.

Layout (little-endian)::

    b"VGGW" | u32 version=1 | u8 arch (1=vgg16, 2=vgg19) | u8 task (0=features, 2=binary, 3=multiclass)
    u32 entry count
    per entry: u32 name length | UTF-8 name | u8 rank | rank * u32 dims | float32 values (row-major)

Entry names are ``<layer>.weight`` and ``<layer>.bias``.
"""
from __future__ import annotations

import os
import struct

import numpy as np

from .errors import (
    ArchitectureMismatchError,
    MissingWeightError,
    TruncatedWeightFileError,
    WeightError,
    WeightFormatError,
    WeightShapeError,
)
from .model import ModelGraph, WeightStore, init_layer

MAGIC = b"VGGW"
VERSION = 1
ARCH_IDS = {"vgg16": 1, "vgg19": 2}
TASK_IDS = {None: 0, "binary": 2, "multiclass": 3}
_ARCH_NAMES = {v: k for k, v in ARCH_IDS.items()}
_TASK_NAMES = {v: k for k, v in TASK_IDS.items()}


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def dumps(store: WeightStore, features_only: bool = False, graph: ModelGraph | None = None) -> bytes:
    names = list(store.entries)
    if graph is not None:
        names = [layer.name for layer in graph.weight_layers()]
    if features_only:
        if graph is None:
            raise WeightError("features-only export needs the graph to identify conv layers")
        names = [layer.name for layer in graph.weight_layers() if layer.kind == "conv"]
    task = None if features_only else store.task
    parts = [MAGIC, struct.pack("<IBBI", VERSION, ARCH_IDS[store.arch], TASK_IDS[task], 2 * len(names))]
    for name in names:
        w, b = store.entries[name]
        parts.append(_pack_tensor(f"{name}.weight", w))
        parts.append(_pack_tensor(f"{name}.bias", b))
    return b"".join(parts)


def save_weights(store: WeightStore, path, features_only: bool = False, graph: ModelGraph | None = None):
    data = dumps(store, features_only, graph)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int, what: str, layer=None) -> memoryview:
        if self.pos + n > len(self.data):
            raise TruncatedWeightFileError(
                f"file truncated while reading {what}" + (f" of {layer}" if layer else ""), layer=layer
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str, layer=None):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what, layer))


def read_entries(data: bytes):
    """Parse a weight file into ``(arch, task, {entry_name: array})``."""
    r = _Reader(data)
    if bytes(r.take(4, "magic")) != MAGIC:
        raise WeightFormatError("bad magic bytes; not a VGGW weight file")
    version, arch_id, task_id, count = r.unpack("<IBBI", "header")
    if version != VERSION:
        raise WeightFormatError(f"unsupported weight file version {version}")
    if arch_id not in _ARCH_NAMES:
        raise ArchitectureMismatchError(f"unknown architecture id {arch_id}")
    if task_id not in _TASK_NAMES:
        raise WeightFormatError(f"unknown task id {task_id}")
    tensors: dict[str, np.ndarray] = {}
    last = None
    for _ in range(count):
        (nlen,) = r.unpack("<I", "entry name length", last)
        name = bytes(r.take(nlen, "entry name", last)).decode("utf-8")
        layer = name.rsplit(".", 1)[0]
        last = layer
        (rank,) = r.unpack("<B", "rank", layer)
        dims = r.unpack(f"<{rank}I", "dims", layer)
        size = int(np.prod(dims, dtype=np.int64))
        values = np.frombuffer(r.take(4 * size, "values", layer), dtype="<f4")
        tensors[name] = values.reshape(dims).astype(np.float32)
    if r.pos != len(r.data):
        raise WeightFormatError(f"{len(r.data) - r.pos} trailing bytes after the last entry")
    return _ARCH_NAMES[arch_id], _TASK_NAMES[task_id], tensors


def load_weights(path, graph: ModelGraph, seed: int = 0) -> WeightStore:
    """Read a weight file and check it against ``graph``.

    A features-only file fills the conv layers; the head is freshly
    initialised from ``seed``.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    return loads(data, graph, seed)


def loads(data: bytes, graph: ModelGraph, seed: int = 0) -> WeightStore:
    arch, task, tensors = read_entries(data)
    if arch != graph.arch:
        raise ArchitectureMismatchError(f"weight file is {arch} but the graph is {graph.arch}")
    if task is not None and task != graph.task:
        raise ArchitectureMismatchError(f"weight file task {task} does not match graph task {graph.task}")
    known = {layer.name for layer in graph.weight_layers()}
    for name in tensors:
        layer = name.rsplit(".", 1)[0]
        if layer not in known or not name.endswith((".weight", ".bias")):
            raise WeightError(f"weight file entry {name!r} matches no layer of the graph", layer=layer)
    store = WeightStore(graph.arch, graph.task)
    for i, layer in enumerate(graph.layers):
        if not layer.has_weights:
            continue
        w = tensors.get(f"{layer.name}.weight")
        b = tensors.get(f"{layer.name}.bias")
        if w is None or b is None:
            if task is None and layer.kind == "dense":
                store.entries[layer.name] = init_layer(layer, seed, i)
                continue
            raise MissingWeightError(f"weight file has no entry for layer {layer.name}", layer=layer.name)
        ws, bs = layer.weight_shapes()
        if w.shape != ws or b.shape != bs:
            raise WeightShapeError(
                f"layer {layer.name}: file holds {w.shape}/{b.shape}, graph expects {ws}/{bs}", layer=layer.name
            )
        store.entries[layer.name] = (w, b)
    store.sync_frozen(graph)
    return store
