"""Command-line interface: ``vggfinetune <command> [options]``.

Commands: split, train, evaluate, predict, gradcheck, inspect. Options can
also come from a flat ``key = value`` config file (``--config``); flags
given on the command line win over file values.
"""
from __future__ import annotations

import argparse
import logging
import re
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

from . import __version__
from .data import AugmentConfig, LabeledSample, load_dataset, read_manifest, stratified_split
from .errors import ConfigurationError, VGGError
from .gradcheck import TOLERANCE, run_gradcheck
from .metrics import confusion_csv, metrics_csv
from .model import (
    ARCHITECTURES, TASKS, ModelGraph, attach_finetune_head, build_features, freeze_features, init_weights,
    param_count,
)
from .training import TASK_DEFAULTS, TrainConfig, epochs_csv, evaluate, fit, predict_proba
from .weightfile import load_weights, save_weights

PROG = "vggfinetune"
COMMANDS = ("split", "train", "evaluate", "predict", "gradcheck", "inspect")
FREEZE_MODES = ("head-only", "full")

WEIGHTS_FILE = "weights.vggw"
SPLITS_FILE = "splits.csv"
METRICS_FILE = "metrics.csv"
CONFUSION_FILE = "confusion.csv"
EPOCHS_FILE = "epochs.csv"



@dataclass
class RunConfig:
    data: str | None = None
    arch: str = "vgg16"
    task: str = "binary"
    weights: str | None = None
    seed: int = 0
    learning_rate: float = 1e-4
    batch_size: int | None = None
    epochs: int | None = None
    rotation: float = 15.0
    flip_prob: float = 0.5
    augment_validation: bool = True
    dropout: float = 0.5
    freeze: str = "head-only"
    out: str = "run"
    positive_class: str | None = None
    tiny: bool = False

    def finalize(self) -> "RunConfig":
        if self.arch not in ARCHITECTURES:
            raise ConfigurationError(f"arch must be one of {ARCHITECTURES}, got {self.arch!r}")
        if self.task not in TASKS:
            raise ConfigurationError(f"task must be one of {tuple(TASKS)}, got {self.task!r}")
        if self.freeze not in FREEZE_MODES:
            raise ConfigurationError(f"freeze must be one of {FREEZE_MODES}, got {self.freeze!r}")
        batch, epochs = TASK_DEFAULTS[self.task]
        if self.batch_size is None:
            self.batch_size = batch
        if self.epochs is None:
            self.epochs = epochs
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be > 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigurationError("batch_size and epochs must be >= 1")
        if self.rotation < 0 or not 0 <= self.flip_prob <= 1 or not 0 <= self.dropout < 1:
            raise ConfigurationError("rotation must be >= 0, flip_prob in [0, 1], dropout in [0, 1)")
        if self.seed < 0:
            raise ConfigurationError("seed must be non-negative")
        return self


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
_ALIASES = {"lr": "learning_rate", "batch": "batch_size", "positive-class": "positive_class",
            "flip-prob": "flip_prob", "augment-validation": "augment_validation"}
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(key: str, raw: str, line=None):
    kind = _FIELD_TYPES[key]
    try:
        if "bool" in kind:
            low = raw.lower()
            if low not in _TRUE | _FALSE:
                raise ValueError(raw)
            return low in _TRUE
        if "int" in kind:
            return int(raw)
        if "float" in kind:
            return float(raw)
    except ValueError:
        raise ConfigurationError(f"cannot parse {key} = {raw!r}", line=line) from None
    return raw


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = re.sub(r"(^|\s)#.*$", "", line).strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"expected 'key = value', got {line!r}", line=lineno)
        key, raw = (part.strip() for part in line.split("=", 1))
        key = _ALIASES.get(key, key)
        if key not in _FIELD_TYPES:
            raise ConfigurationError(f"unknown key {key!r}", line=lineno)
        values[key] = _coerce(key, raw, lineno)
    return values


def parse_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Config file values, then non-None ``overrides``, then defaults; validated."""
    values = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text(encoding="utf-8")))
    for key, value in (overrides or {}).items():
        if value is not None:
            values[_ALIASES.get(key, key)] = value
    unknown = set(values) - set(_FIELD_TYPES)
    if unknown:
        raise ConfigurationError(f"unknown settings {sorted(unknown)}")
    return RunConfig(**values).finalize()


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog=PROG, description="Fine-tune VGG-16/VGG-19 classifier heads on image folders.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("images", nargs="*", help="image files (predict only)")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--data", help="dataset root: <root>/<class>/<images>")
    p.add_argument("--arch", choices=ARCHITECTURES)
    p.add_argument("--task", choices=tuple(TASKS))
    p.add_argument("--weights", help="weight file (.vggw); features-only files seed the conv stack")
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--batch", dest="batch_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--rotation", type=float, help="max rotation in degrees")
    p.add_argument("--flip-prob", dest="flip_prob", type=float)
    p.add_argument("--no-augment-validation", dest="augment_validation", action="store_const", const=False)
    p.add_argument("--freeze", choices=FREEZE_MODES)
    p.add_argument("--out", help="artifact directory")
    p.add_argument("--positive-class", dest="positive_class")
    p.add_argument("--tiny", action="store_const", const=True,
                   help="width/8 conv stack at 64x64 input for smoke tests (not the published setup)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def make_graph(cfg: RunConfig) -> ModelGraph:
    graph = attach_finetune_head(build_features(cfg.arch, cfg.tiny), cfg.task, dropout_rate=cfg.dropout)
    return freeze_features(graph) if cfg.freeze == "head-only" else graph


def _normalized(name: str) -> str:
    return re.sub(r"[^a-z0-9]", "", name.lower())


def resolve_positive(class_names: list[str], requested: str | None) -> int | None:
    """Index of the positive class: the requested name, else a class named like COVID-19."""
    if requested is not None:
        if requested not in class_names:
            raise ConfigurationError(f"positive class {requested!r} is not one of {class_names}")
        return class_names.index(requested)
    for i, name in enumerate(class_names):
        if _normalized(name) in ("covid", "covid19"):
            return i
    return None


def _require_data(cfg: RunConfig) -> Path:
    if cfg.data is None:
        raise ConfigurationError("this command needs --data")
    root = Path(cfg.data)
    if not root.is_dir():
        raise ConfigurationError(f"dataset root {root} does not exist")
    return root


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _notice(msg: str):
    print(f"note: {msg}")


def cmd_split(cfg: RunConfig) -> int:
    samples, names = load_dataset(_require_data(cfg))
    split = stratified_split(samples, seed=cfg.seed, class_names=names)
    path = _out_dir(cfg) / SPLITS_FILE
    split.write_manifest(path)
    print(f"{'class':<20}{'train':>8}{'val':>8}{'test':>8}")
    for name, (tr, va, te) in split.counts().items():
        print(f"{name:<20}{tr:>8}{va:>8}{te:>8}")
    print(f"wrote {path}")
    return 0


def _initial_weights(cfg: RunConfig, graph: ModelGraph):
    if cfg.weights:
        return load_weights(cfg.weights, graph, seed=cfg.seed)
    _notice("no pretrained weights given; conv layers start from seeded random values (not the published setup)")
    return init_weights(graph, cfg.seed)


def cmd_train(cfg: RunConfig) -> int:
    samples, names = load_dataset(_require_data(cfg))
    out = _out_dir(cfg)
    split = stratified_split(samples, seed=cfg.seed, class_names=names)
    split.write_manifest(out / SPLITS_FILE)
    graph = make_graph(cfg)
    if cfg.tiny:
        _notice("--tiny graph: conv widths / 8 at 64x64 input (not the published setup)")
    weights = _initial_weights(cfg, graph)
    train_cfg = TrainConfig(
        task=cfg.task, learning_rate=cfg.learning_rate, batch_size=cfg.batch_size, epochs=cfg.epochs,
        seed=cfg.seed, augment=AugmentConfig(cfg.rotation, cfg.flip_prob, cfg.seed) if cfg.rotation or cfg.flip_prob
        else None, augment_validation=cfg.augment_validation,
    )
    start = time.perf_counter()
    weights, reports = fit(graph, weights, split.train, split.validation, train_cfg)
    save_weights(weights, out / WEIGHTS_FILE, graph=graph)
    (out / EPOCHS_FILE).write_text(epochs_csv(reports), encoding="utf-8")
    last = reports[-1]
    print(f"trained {len(reports)} epochs in {time.perf_counter() - start:.1f}s; "
          f"final loss {last.train_loss:.4f} acc {last.train_accuracy:.3f} "
          f"val_loss {last.val_loss:.4f} val_acc {last.val_accuracy:.3f}")
    print(f"wrote {out / WEIGHTS_FILE}, {out / EPOCHS_FILE}, {out / SPLITS_FILE}")
    return 0


def _weights_path(cfg: RunConfig) -> Path:
    path = Path(cfg.weights) if cfg.weights else Path(cfg.out) / WEIGHTS_FILE
    if not path.is_file():
        raise ConfigurationError(f"weight file {path} does not exist")
    return path


def cmd_evaluate(cfg: RunConfig) -> int:
    manifest = Path(cfg.out) / SPLITS_FILE
    if not manifest.is_file():
        raise ConfigurationError(f"split manifest {manifest} does not exist; run 'split' or 'train' first")
    split = read_manifest(manifest)
    graph = make_graph(cfg)
    weights = load_weights(_weights_path(cfg), graph, seed=cfg.seed)
    positive = resolve_positive(split.class_names, cfg.positive_class)
    cm, report = evaluate(graph, weights, split.test, cfg.task, split.class_names, positive)
    out = _out_dir(cfg)
    (out / METRICS_FILE).write_text(metrics_csv(report, cfg.arch, cfg.task), encoding="utf-8")
    (out / CONFUSION_FILE).write_text(confusion_csv(cm), encoding="utf-8")
    print(report.summary())
    print(f"wrote {out / METRICS_FILE}, {out / CONFUSION_FILE}")
    return 0


def cmd_predict(cfg: RunConfig, images: list[str]) -> int:
    if not images:
        raise ConfigurationError("predict needs at least one image path")
    graph = make_graph(cfg)
    weights = load_weights(_weights_path(cfg), graph, seed=cfg.seed)
    manifest = Path(cfg.out) / SPLITS_FILE
    names = read_manifest(manifest).class_names if manifest.is_file() else [str(i) for i in range(graph.num_classes)]
    probs = predict_proba(graph, weights, [LabeledSample(p, 0, "") for p in images])
    for path, row in zip(images, probs):
        best = int(row.argmax())
        scores = " ".join(f"{n}={v:.4f}" for n, v in zip(names, row))
        print(f"{path}\t{names[best]}\t{scores}")
    return 0


def cmd_gradcheck(cfg: RunConfig) -> int:
    start = time.perf_counter()
    results = run_gradcheck(cfg.seed)
    ok = True
    for name, err in results.items():
        passed = err < TOLERANCE
        ok &= passed
        print(f"{name:<24} max_rel_err {err:.3e}  {'PASS' if passed else 'FAIL'}")
    print(f"gradcheck {'passed' if ok else 'FAILED'} in {time.perf_counter() - start:.2f}s (tolerance {TOLERANCE:g})")
    return 0 if ok else 1


def cmd_inspect(cfg: RunConfig) -> int:
    graph = make_graph(cfg)
    trace = dict(graph.shape_trace())
    print(f"{graph.arch} / {graph.task}{' (tiny)' if graph.tiny else ''}, input {graph.input_shape}")
    print(f"{'layer':<12}{'kind':<10}{'output shape':<20}{'params':>12}  trainable")
    for layer in graph.layers:
        shape = trace.get(layer.name)
        shape_txt = "x".join(map(str, shape)) if shape else "-"
        flag = ("yes" if layer.trainable else "no") if layer.has_weights else ""
        print(f"{layer.name:<12}{layer.kind:<10}{shape_txt:<20}{layer.num_params():>12,}  {flag}")
    convs = sum(layer.kind == "conv" for layer in graph.layers)
    dense = sum(layer.kind == "dense" for layer in graph.layers)
    pools = sum(layer.kind == "maxpool" for layer in graph.layers)
    counts = param_count(graph)
    print(f"weight layers: {convs + dense} ({convs} conv + {dense} dense), pools: {pools}")
    print(f"flatten width: {graph.flatten_width}")
    print(f"parameters: total {counts.total:,}  trainable {counts.trainable:,}  frozen {counts.frozen:,}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_intermixed_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "images", "config", "verbose")}
    try:
        cfg = parse_config(args.config, overrides)
        if args.command == "predict":
            return cmd_predict(cfg, args.images)
        if args.images:
            raise ConfigurationError(f"unexpected arguments for {args.command}: {args.images}")
        handler = {
            "split": cmd_split, "train": cmd_train, "evaluate": cmd_evaluate,
            "gradcheck": cmd_gradcheck, "inspect": cmd_inspect,
        }[args.command]
        return handler(cfg)
    except (VGGError, OSError) as exc:
        print(f"{PROG}: error: {type(exc).__name__}: {exc}".replace("\n", " "), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
