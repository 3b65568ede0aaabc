import numpy as np
import pytest

from vggfinetune.data import LabeledSample

# criterion id -> (description, passed); filled by test_acceptance
ACCEPTANCE_RESULTS: dict[int, tuple[str, bool]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE_RESULTS):
        desc, ok = ACCEPTANCE_RESULTS[cid]
        terminalreporter.write_line(f"criterion {cid}: {'PASS' if ok else 'FAIL'}  {desc}")


def write_pgm(path, pixels: np.ndarray):
    h, w = pixels.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + pixels.astype(np.uint8).tobytes())


def pattern_images(n: int, size: int, seed: int = 1, noise: float = 0.15):
    """Three visually distinct classes (x ramp, y ramp, checkerboard) plus noise, in [0, 1]."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    patterns = [xx, yy, (np.floor(xx * 4) + np.floor(yy * 4)) % 2]
    out = []
    for i in range(n):
        c = i % 3
        img = 0.7 * patterns[c] + noise * rng.random((3, size, size))
        out.append((np.clip(img, 0, 1).astype(np.float32), c))
    return out


def synthetic_samples(n: int, size: int, seed: int = 1) -> list[LabeledSample]:
    return [
        LabeledSample(f"synthetic/c{c}/{i:03d}", c, f"c{c}", img)
        for i, (img, c) in enumerate(pattern_images(n, size, seed))
    ]


@pytest.fixture
def image_dataset(tmp_path):
    """Small on-disk two-class PGM dataset with varying image sizes."""

    def make(classes=("covid", "non_covid"), per_class=12, root_name="ds"):
        rng = np.random.default_rng(0)
        root = tmp_path / root_name
        for c, name in enumerate(classes):
            d = root / name
            d.mkdir(parents=True)
            for i in range(per_class):
                size = 40 + i
                yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
                base = [xx, yy, (xx + yy) / 2][c % 3]
                write_pgm(d / f"{i:03d}.pgm", (0.6 * base + 0.3 * rng.random((size, size))) * 255)
        return root

    return make


def count_layout(root, counts: dict[str, int]):
    """Empty placeholder files; enough for listing and splitting."""
    for name, n in counts.items():
        d = root / name
        d.mkdir(parents=True)
        for i in range(n):
            (d / f"{i:04d}.pgm").touch()
    return root
