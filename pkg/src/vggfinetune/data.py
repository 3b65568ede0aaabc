"""Dataset loading, image decoding, resizing, splitting and augmentation.

Datasets live on disk as ``<root>/<class_name>/<image files>``. Class
indices follow the lexicographic order of the class directory names.
"""
from __future__ import annotations

import csv
import io
import math
import zlib
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import (
    ClassTooSmallError,
    ConfigurationError,
    DecodeError,
    EmptyClassError,
    InputError,
    NoClassesError,
    TruncatedImageError,
    UnknownFormatError,
    UnreadableFileError,
)

IMAGE_EXTENSIONS = (".pgm", ".ppm", ".png", ".jpg", ".jpeg")
SPLIT_RATIOS = (0.7, 0.1, 0.2)


@dataclass
class LabeledSample:
    path: str
    label: int
    class_name: str
    image: np.ndarray | None = field(default=None, repr=False, compare=False)


def load_dataset(root) -> tuple[list[LabeledSample], list[str]]:
    """One sample per image file under ``root/<class>/``; images stay undecoded."""
    root = Path(root)
    if not root.is_dir():
        raise NoClassesError(f"dataset root {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith("."))
    if not class_dirs:
        raise NoClassesError(f"no class directories under {root}")
    names = [p.name for p in class_dirs]
    samples = []
    for label, cdir in enumerate(class_dirs):
        files = sorted(
            p for p in cdir.iterdir()
            if p.suffix.lower() in IMAGE_EXTENSIONS and not p.name.startswith(".")
        )
        if not files:
            raise EmptyClassError(f"class directory {cdir} contains no image files")
        for f in files:
            try:
                with open(f, "rb"):
                    pass
            except OSError as exc:
                raise UnreadableFileError(f"cannot read {f}: {exc.strerror or exc}") from exc
            samples.append(LabeledSample(str(f), label, cdir.name))
    return samples, names


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

def _pnm_header(data: bytes):
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise TruncatedImageError("PNM header ends early")
        if data[pos : pos + 1] == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        try:
            tokens.append(int(data[start:pos]))
        except ValueError:
            raise DecodeError(f"bad PNM header token {data[start:pos]!r}") from None
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def read_pnm(data: bytes) -> np.ndarray:
    """Decode binary PGM (P5) or PPM (P6) into a (C, H, W) float32 array of 0..255 values."""
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise UnknownFormatError(f"not a binary PGM/PPM file (magic {magic!r})")
    (width, height, maxval), start = _pnm_header(data)
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise DecodeError(f"invalid PNM geometry {width}x{height}, maxval {maxval}")
    channels = 1 if magic == b"P5" else 3
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * channels
    raster = data[start : start + count * dtype.itemsize]
    if len(raster) < count * dtype.itemsize:
        raise TruncatedImageError(f"PNM raster holds {len(raster)} bytes, expected {count * dtype.itemsize}")
    pix = np.frombuffer(raster, dtype=dtype).astype(np.float32).reshape(height, width, channels)
    if maxval != 255:
        pix = pix * np.float32(255.0 / maxval)
    return np.ascontiguousarray(pix.transpose(2, 0, 1))


def _pillow_decoder(data: bytes) -> np.ndarray:
    try:
        from PIL import Image
    except ImportError as exc:
        raise UnknownFormatError("PNG/JPEG decoding needs Pillow (pip install 'artifact[images]')") from exc
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except Exception as exc:  # Pillow raises a zoo of types for corrupt data
        raise DecodeError(f"could not decode image: {exc}") from exc
    if img.mode not in ("L", "RGB"):
        img = img.convert("RGB")
    arr = np.asarray(img, dtype=np.float32)
    return arr[None] if arr.ndim == 2 else np.ascontiguousarray(arr.transpose(2, 0, 1))


# magic prefix -> decoder(bytes) -> (C, H, W) float32 in 0..255
DECODERS: dict[bytes, Callable[[bytes], np.ndarray]] = {
    b"P5": read_pnm,
    b"P6": read_pnm,
    b"\x89PNG": _pillow_decoder,
    b"\xff\xd8": _pillow_decoder,
}


def register_decoder(magic: bytes, decoder: Callable[[bytes], np.ndarray]):
    """Install a decoder for files starting with ``magic``."""
    DECODERS[magic] = decoder


def decode_bytes(data: bytes) -> np.ndarray:
    for magic, decoder in sorted(DECODERS.items(), key=lambda kv: -len(kv[0])):
        if data.startswith(magic):
            img = decoder(data)
            break
    else:
        raise UnknownFormatError(f"unknown image format (leading bytes {data[:4]!r})")
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    return img


def decode_image(path) -> np.ndarray:
    """Decode an image file to (3, H, W) float32 with raw 0..255 values.

    Grayscale images are replicated across the three channels.
    """
    with open(path, "rb") as fh:
        return decode_bytes(fh.read())


# ---------------------------------------------------------------------------
# resize / normalize
# ---------------------------------------------------------------------------

def _axis_weights(in_size: int, out_size: int):
    # half-pixel centres, edge-clamped
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * (in_size / out_size) - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, in_size - 1)
    return lo, hi, src - lo


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    if out_h < 1 or out_w < 1:
        raise ConfigurationError(f"target size must be positive, got {out_h}x{out_w}")
    c, h, w = image.shape
    if (h, w) == (out_h, out_w):
        return image.copy()
    y0, y1, wy = _axis_weights(h, out_h)
    x0, x1, wx = _axis_weights(w, out_w)
    img = image.astype(np.float64)
    wy = wy[None, :, None]
    rows = img[:, y0, :] * (1 - wy) + img[:, y1, :] * wy
    out = rows[:, :, x0] * (1 - wx) + rows[:, :, x1] * wx
    return out.astype(image.dtype)


def normalize(image: np.ndarray, scheme: str = "unit", mean=None, std=None) -> np.ndarray:
    """``unit`` maps 0..255 to 0..1; ``meanstd`` further applies (x - mean) / std per channel."""
    x = image.astype(np.float32) / np.float32(255.0)
    if scheme == "unit":
        return x
    if scheme == "meanstd":
        if mean is None or std is None:
            raise ConfigurationError("meanstd normalisation needs mean and std")
        m = np.asarray(mean, dtype=np.float32).reshape(-1, 1, 1)
        s = np.asarray(std, dtype=np.float32).reshape(-1, 1, 1)
        return (x - m) / s
    raise ConfigurationError(f"unknown normalisation scheme {scheme!r}")


def load_image(sample: LabeledSample, size: int, scheme: str = "unit", cache: bool = True) -> np.ndarray:
    """Decoded, resized and normalised (3, size, size) tensor for ``sample``."""
    img = sample.image
    if img is not None and img.shape[1:] == (size, size):
        return img
    if img is None:
        img = normalize(resize_bilinear(decode_image(sample.path), size, size), scheme)
    else:
        img = resize_bilinear(img, size, size)
    if cache:
        sample.image = img
    return img


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

def _round_half_up(x: Fraction) -> int:
    return math.floor(x + Fraction(1, 2))


def split_counts(n: int, ratios=SPLIT_RATIOS) -> tuple[int, int, int]:
    """(train, validation, test) sizes for a class of ``n`` samples."""
    _, val_ratio, test_ratio = (Fraction(str(r)) for r in ratios)
    test = _round_half_up(test_ratio * n)
    val = _round_half_up(val_ratio * n)
    return n - test - val, val, test


@dataclass
class DatasetSplit:
    class_names: list[str]
    train: list[LabeledSample]
    validation: list[LabeledSample]
    test: list[LabeledSample]
    seed: int = 0

    PARTITIONS = ("train", "validation", "test")

    def partition(self, name: str) -> list[LabeledSample]:
        if name not in self.PARTITIONS:
            raise InputError(f"unknown partition {name!r}")
        return getattr(self, name)

    def counts(self) -> dict[str, tuple[int, int, int]]:
        """Per-class (train, validation, test) counts."""
        out = {}
        for c, name in enumerate(self.class_names):
            out[name] = tuple(sum(s.label == c for s in part) for part in (self.train, self.validation, self.test))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["path", "class", "partition"])
        rows = [(s.path, s.class_name, p) for p in self.PARTITIONS for s in self.partition(p)]
        w.writerows(sorted(rows))
        return buf.getvalue()

    def write_manifest(self, path):
        Path(path).write_text(self.to_csv(), encoding="utf-8")


def read_manifest(path, class_names: list[str] | None = None) -> DatasetSplit:
    """Rebuild a split from a ``path,class,partition`` CSV."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["path", "class", "partition"]:
            raise InputError(f"{path}: expected header path,class,partition")
        rows = list(reader)
    names = class_names or sorted({r["class"] for r in rows})
    index = {n: i for i, n in enumerate(names)}
    parts: dict[str, list[LabeledSample]] = {p: [] for p in DatasetSplit.PARTITIONS}
    for line, r in enumerate(rows, start=2):
        if r["class"] not in index or r["partition"] not in parts:
            raise InputError(f"{path}:{line}: unknown class or partition")
        parts[r["partition"]].append(LabeledSample(r["path"], index[r["class"]], r["class"]))
    return DatasetSplit(names, parts["train"], parts["validation"], parts["test"])


def stratified_split(samples: list[LabeledSample], ratios=SPLIT_RATIOS, seed: int = 0,
                     class_names: list[str] | None = None) -> DatasetSplit:
    """Per-class shuffle, then test and validation sizes by round-half-up; train keeps the rest."""
    if abs(sum(ratios) - 1.0) > 1e-9 or any(r < 0 for r in ratios):
        raise ConfigurationError(f"split ratios must be non-negative and sum to 1, got {ratios}")
    if class_names is None:
        by_label = {s.label: s.class_name for s in samples}
        class_names = [by_label[i] for i in sorted(by_label)]
    train, val, test = [], [], []
    for c, name in enumerate(class_names):
        members = [s for s in samples if s.label == c]
        if len(members) < 3:
            raise ClassTooSmallError(f"class {name!r} has {len(members)} samples; at least 3 are needed")
        _, n_val, n_test = split_counts(len(members), ratios)
        rng = np.random.default_rng(np.random.SeedSequence([seed, c]))
        order = rng.permutation(len(members))
        test_idx = sorted(order[:n_test])
        val_idx = sorted(order[n_test : n_test + n_val])
        train_idx = sorted(order[n_test + n_val :])
        test += [members[i] for i in test_idx]
        val += [members[i] for i in val_idx]
        train += [members[i] for i in train_idx]
    return DatasetSplit(list(class_names), train, val, test, seed)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    rotation: float = 15.0
    flip_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.rotation < 0:
            raise ConfigurationError(f"rotation range must be >= 0, got {self.rotation}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigurationError(f"flip probability must lie in [0, 1], got {self.flip_prob}")


def sample_rng(seed: int, path: str, epoch: int) -> np.random.Generator:
    """Per-sample stream: independent of processing order."""
    key = zlib.crc32(f"{path}|{epoch}".encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([seed & (2**64 - 1), key]))


def hflip(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(image[:, :, ::-1])


def _bilinear_sample(image: np.ndarray, sy: np.ndarray, sx: np.ndarray) -> np.ndarray:
    c, h, w = image.shape
    y0 = np.floor(sy).astype(np.intp)
    x0 = np.floor(sx).astype(np.intp)
    fy = sy - y0
    fx = sx - x0
    out = np.zeros((c,) + sy.shape, dtype=np.float64)
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            yy, xx = y0 + dy, x0 + dx
            inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            vals = image[:, np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
            out += np.where(inside, wy * wx, 0.0) * vals
    return out


def rotate(image: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate counter-clockwise (as displayed) about the image centre; zero fill outside."""
    if degrees == 0:
        return image.copy()
    c, h, w = image.shape
    theta = math.radians(degrees)
    cos, sin = math.cos(theta), math.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64) - cy, np.arange(w, dtype=np.float64) - cx, indexing="ij")
    sx = xx * cos - yy * sin + cx
    sy = xx * sin + yy * cos + cy
    return _bilinear_sample(image.astype(np.float64), sy, sx).astype(image.dtype)


def augment(image: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Random horizontal flip, then a uniform rotation in [-rotation, +rotation] degrees."""
    flip = rng.random() < config.flip_prob
    angle = rng.uniform(-config.rotation, config.rotation) if config.rotation > 0 else 0.0
    out = hflip(image) if flip else image
    return rotate(out, angle) if angle else out.copy()
