import numpy as np
import pytest

from kbnet.imgio import save_image


def make_test_image(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Procedural RGB test image: smooth gradients, soft blobs, and a few
    hard-edged rectangles, normalized into [0.02, 0.98]."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) / max(h, w)
    img = np.zeros((3, h, w))
    img += rng.uniform(0.2, 0.8, 3)[:, None, None]
    for _ in range(3):
        a, b = rng.uniform(-1, 1, 2)
        img += rng.uniform(0.1, 0.4) * (a * xx + b * yy)[None]
    for _ in range(6):
        cy, cx = rng.uniform(0, 1, 2)
        s = rng.uniform(0.05, 0.25)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        img += rng.uniform(-0.5, 0.5, 3)[:, None, None] * blob[None]
    for _ in range(4):
        y0, y1 = np.sort(rng.integers(0, h, 2))
        x0, x1 = np.sort(rng.integers(0, w, 2))
        img[:, y0:y1, x0:x1] += rng.uniform(-0.3, 0.3, 3)[:, None, None]
    lo, hi = img.min(), img.max()
    img = 0.02 + 0.96 * (img - lo) / (hi - lo)
    return img.astype(np.float32)


def write_corpus(directory, count: int, size: int, seed: int) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for i in range(count):
        save_image(make_test_image(rng, size, size), directory / f"img_{i:03d}.png")


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """24 train + 6 eval procedural images, 96x96."""
    root = tmp_path_factory.mktemp("corpus")
    write_corpus(root / "train", 24, 96, seed=100)
    write_corpus(root / "eval", 6, 96, seed=200)
    return root
