"""Datasets: synthetic glyph digits, a flat binary format, image folders.

The built-in benchmark is a 10-class set of 16x16 grayscale digit
glyphs. Each sample is a 5x7 bitmap font glyph placed near the center
with positional jitter, scaled by a random low intensity, and buried in
faint Gaussian pixel noise. The wide quiet margin around the glyph is
deliberate: like the dark border of handwritten-digit scans, it gives
input perturbations room to act without colliding with glyph pixels,
while keeping the classification task itself easy for a small convnet.

Three pairwise disjoint splits are produced: a training set for the
victim, a small attacker-visible pool, and a held-out test set that
metrics are computed on.
"""

import csv
import io
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, FormatError, InputError

DATASET_MAGIC = b"SFLDATA\x00"
DATASET_VERSION = 1

DEFAULT_TRAIN = 4000
DEFAULT_ATTACKER = 512
DEFAULT_TEST = 2000
IMAGE_SIDE = 16

# 5x7 glyphs, row strings, '1' marks an on pixel
_GLYPHS = {
    0: ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    1: ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    2: ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    3: ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    4: ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    5: ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    6: ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    7: ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    8: ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    9: ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
}


@dataclass
class Dataset:
    """Images (N,H,W,C) in [0,1] with integer class labels and a split tag."""

    images: np.ndarray
    labels: np.ndarray
    tag: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DimensionError("images must be (N, H, W, C)")
        if self.labels.shape != (self.images.shape[0],):
            raise DimensionError("labels must match the image count")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise InputError("pixel values must lie in [0, 1]")

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_shape(self):
        return self.images.shape[1:]


@dataclass
class Splits:
    """Disjoint victim-training / attacker-visible / held-out sets."""

    train: Dataset
    attacker: Dataset
    test: Dataset


def _glyph_array(digit):
    rows = _GLYPHS[digit]
    return np.array([[float(ch) for ch in row] for row in rows])  # 7x5


def _render_split(n, rng, noise_sigma, tag):
    images = np.zeros((n, IMAGE_SIDE, IMAGE_SIDE, 1))
    labels = np.zeros(n, dtype=np.int64)
    glyphs = [_glyph_array(d) for d in range(10)]
    digits = np.arange(n) % 10  # balanced classes
    rng.shuffle(digits)
    for i in range(n):
        d = int(digits[i])
        glyph = glyphs[d]
        gh, gw = glyph.shape
        r0 = 4 + int(rng.integers(-1, 2))
        c0 = 5 + int(rng.integers(-1, 2))
        intensity = rng.uniform(0.15, 0.35)
        canvas = np.zeros((IMAGE_SIDE, IMAGE_SIDE))
        canvas[r0:r0 + gh, c0:c0 + gw] = glyph * intensity
        canvas += rng.normal(0.0, noise_sigma, size=canvas.shape)
        images[i, :, :, 0] = np.clip(canvas, 0.0, 1.0)
        labels[i] = d
    return Dataset(images, labels, tag=tag)


def make_digit_splits(seed, n_train=DEFAULT_TRAIN, n_attacker=DEFAULT_ATTACKER,
                      n_test=DEFAULT_TEST, noise_sigma=0.01):
    """Deterministic synthetic benchmark; each split has its own stream."""
    ss = np.random.SeedSequence(seed)
    kids = ss.spawn(3)
    return Splits(
        train=_render_split(n_train, np.random.default_rng(kids[0]), noise_sigma, "train"),
        attacker=_render_split(n_attacker, np.random.default_rng(kids[1]), noise_sigma, "attacker"),
        test=_render_split(n_test, np.random.default_rng(kids[2]), noise_sigma, "test"),
    )


def sample_attack_batch(dataset, size, seed):
    """Choose the attacker's working batch from the attacker pool."""
    if size > len(dataset):
        raise InputError(
            f"attack batch of {size} exceeds the attacker pool ({len(dataset)})")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(dataset), size=size, replace=False)
    idx.sort()
    return Dataset(dataset.images[idx], dataset.labels[idx],
                   tag=dataset.tag + "/batch")


# ---------------------------------------------------------------------------
# flat binary file
#
# magic[8] version:u32 N:u32 H:u32 W:u32 C:u32
# pixels: u8[N*H*W*C] row-major, then labels: u8[N]


def save_dataset(dataset, path):
    n, h, w, c = dataset.images.shape
    if dataset.labels.size and dataset.labels.max() > 255:
        raise InputError("flat binary labels are limited to 0..255")
    out = io.BytesIO()
    out.write(DATASET_MAGIC)
    out.write(struct.pack("<IIIII", DATASET_VERSION, n, h, w, c))
    pixels = np.floor(dataset.images * 255.0 + 0.5).astype(np.uint8)
    out.write(pixels.tobytes())
    out.write(dataset.labels.astype(np.uint8).tobytes())
    with open(path, "wb") as fh:
        fh.write(out.getvalue())


def load_dataset(path, tag=""):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != DATASET_MAGIC:
        raise FormatError("not a dataset file (bad magic)")
    header = struct.Struct("<IIIII")
    if len(blob) < 8 + header.size:
        raise FormatError("dataset file truncated")
    version, n, h, w, c = header.unpack_from(blob, 8)
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    off = 8 + header.size
    n_pix = n * h * w * c
    if len(blob) != off + n_pix + n:
        raise FormatError("dataset payload has the wrong size")
    pixels = np.frombuffer(blob, dtype=np.uint8, count=n_pix, offset=off)
    labels = np.frombuffer(blob, dtype=np.uint8, count=n, offset=off + n_pix)
    images = pixels.astype(np.float64).reshape(n, h, w, c) / 255.0
    return Dataset(images, labels.astype(np.int64), tag=tag)


# ---------------------------------------------------------------------------
# image directory with a label manifest


def load_image_directory(root, manifest="manifest.csv", grayscale=True, tag=""):
    """Read images listed in a two-column (filename,label) manifest."""
    from pathlib import Path

    from PIL import Image

    root = Path(root)
    manifest_path = root / manifest
    if not manifest_path.exists():
        raise InputError(f"manifest not found: {manifest_path}")
    images = []
    labels = []
    with open(manifest_path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row or row[0].startswith("#"):
                continue
            if i == 0 and [f.strip().lower() for f in row] == ["filename", "label"]:
                continue  # optional header row
            if len(row) != 2:
                raise FormatError(f"manifest row needs filename,label: {row!r}")
            img = Image.open(root / row[0].strip())
            img = img.convert("L" if grayscale else "RGB")
            arr = np.asarray(img, dtype=np.float64) / 255.0
            if grayscale:
                arr = arr[:, :, None]
            images.append(arr)
            labels.append(int(row[1]))
    if not images:
        raise InputError("manifest lists no images")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DimensionError(f"images disagree on shape: {sorted(shapes)}")
    return Dataset(np.stack(images), np.array(labels, dtype=np.int64), tag=tag)
