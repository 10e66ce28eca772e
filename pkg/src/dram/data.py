"""Task datasets: IDX loading, synthetic task generators, binary cache.

Every generated sample is produced by its own counter-based stream keyed by
(seed, task, index), so datasets are reproducible sample-by-sample and any
sample can be regenerated bit-exactly from its meta record alone.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .rng import sample_stream
from .sensor import resize_bilinear

DIGIT_SIZE = 28
CACHE_MAGIC = b"DRAM"
CACHE_VERSION = 1
LABEL_PAD = 0xFF


class FormatError(ValueError):
    """A binary input file does not match its declared format."""


# ---------------------------------------------------------------------------
# MNIST IDX format


def _read_exact(f, n: int, what: str):
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"{what}: expected {n} bytes at offset {f.tell() - len(buf)}, file truncated")
    return buf


def load_idx_images(path) -> np.ndarray:
    """(N, rows, cols) float32 in [0, 1] from a big-endian IDX image file."""
    with open(path, "rb") as f:
        magic = struct.unpack(">I", _read_exact(f, 4, "idx image header"))[0]
        if magic != 0x00000803:
            raise FormatError(f"bad image magic 0x{magic:08x} at offset 0 (want 0x00000803)")
        n, rows, cols = struct.unpack(">III", _read_exact(f, 12, "idx image dims"))
        raw = _read_exact(f, n * rows * cols, "idx image pixels")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(n, rows, cols)
    return pixels.astype(np.float32) / 255.0


def load_idx_labels(path) -> np.ndarray:
    """(N,) uint8 labels from a big-endian IDX label file."""
    with open(path, "rb") as f:
        magic = struct.unpack(">I", _read_exact(f, 4, "idx label header"))[0]
        if magic != 0x00000801:
            raise FormatError(f"bad label magic 0x{magic:08x} at offset 0 (want 0x00000801)")
        n = struct.unpack(">I", _read_exact(f, 4, "idx label count"))[0]
        raw = _read_exact(f, n, "idx label bytes")
    return np.frombuffer(raw, dtype=np.uint8).copy()


def load_mnist_idx(images_path, labels_path):
    """Paired IDX image/label files -> (images (N,28,28) float32, labels (N,) uint8)."""
    images = load_idx_images(images_path)
    labels = load_idx_labels(labels_path)
    if len(images) != len(labels):
        raise FormatError(f"image count {len(images)} != label count {len(labels)}")
    return images, labels


_BUILTIN_CACHE = None


def builtin_digit_corpus():
    """Offline digit corpus: sklearn's 8x8 digits upscaled bilinearly to 28x28.

    Stand-in source for environments without the real MNIST files; same
    label space and scale conventions.
    """
    global _BUILTIN_CACHE
    if _BUILTIN_CACHE is None:
        from sklearn.datasets import load_digits

        raw = load_digits()
        small = raw.images / 16.0
        images = np.empty((len(small), DIGIT_SIZE, DIGIT_SIZE), dtype=np.float32)
        for i, im in enumerate(small):
            up = resize_bilinear(im, (DIGIT_SIZE, DIGIT_SIZE))
            images[i] = np.clip(up, 0.0, 1.0)
        _BUILTIN_CACHE = (images, raw.target.astype(np.uint8))
    return _BUILTIN_CACHE


# ---------------------------------------------------------------------------
# dataset container and cache file


@dataclass
class Dataset:
    """Images plus per-sample label sequences (single-object tasks use length 1)."""

    task: str
    images: np.ndarray                 # (N, h, w) float32
    labels: list                       # list of list[int], left-to-right
    num_classes: int                   # includes EOS for sequential tasks
    max_len: int
    meta: list = field(default_factory=list)

    def __len__(self):
        return len(self.images)

    @property
    def image_hw(self):
        return self.images.shape[1:]


def save_dataset(ds: Dataset, path) -> None:
    """Flat binary cache: 'DRAM' magic, LE u32 header, fixed-size records."""
    h, w = (ds.images.shape[1], ds.images.shape[2]) if len(ds.images) else (0, 0)
    with open(path, "wb") as f:
        f.write(CACHE_MAGIC)
        f.write(struct.pack("<IIIIII", CACHE_VERSION, len(ds.images), h, w, ds.num_classes, ds.max_len))
        for img, labs in zip(ds.images, ds.labels):
            rec = bytearray([len(labs)])
            rec.extend(labs)
            rec.extend([LABEL_PAD] * (ds.max_len - len(labs)))
            f.write(bytes(rec))
            f.write(np.ascontiguousarray(img, dtype="<f4").tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "cache header")
        if magic != CACHE_MAGIC:
            raise FormatError(f"bad cache magic {magic!r} at offset 0 (want {CACHE_MAGIC!r})")
        version, count, h, w, k, max_len = struct.unpack("<IIIIII", _read_exact(f, 24, "cache header"))
        if version != CACHE_VERSION:
            raise FormatError(f"unsupported cache version {version} at offset 4")
        images = np.empty((count, h, w), dtype=np.float32)
        labels = []
        rec_px = h * w * 4
        for i in range(count):
            head = _read_exact(f, 1 + max_len, f"sample {i} labels")
            n = head[0]
            if n > max_len:
                raise FormatError(f"sample {i}: length {n} exceeds max_len {max_len}")
            labels.append(list(head[1: 1 + n]))
            images[i] = np.frombuffer(_read_exact(f, rec_px, f"sample {i} pixels"), dtype="<f4").reshape(h, w)
        trailing = f.read(1)
        if trailing:
            raise FormatError(f"trailing bytes at offset {f.tell() - 1}")
    task = {55: "pairs", 19: "addition"}.get(k, "sequence") if max_len == 1 else "sequence"
    return Dataset(task=task, images=images, labels=labels, num_classes=k, max_len=max_len)


def label_histogram(ds: Dataset) -> np.ndarray:
    counts = np.zeros(ds.num_classes, dtype=np.int64)
    for labs in ds.labels:
        for y in labs:
            counts[y] += 1
    return counts


# ---------------------------------------------------------------------------
# two-digit canvas tasks (pairs, addition)


def pair_label(a: int, b: int) -> int:
    """Index of the unordered pair {a, b} in lexicographic order of sorted pairs."""
    a, b = min(a, b), max(a, b)
    return a * 10 - a * (a - 1) // 2 + (b - a)


def _place_two_digits(canvas, digits, labels, rng, size):
    """Draw two non-overlapping digits; returns (chosen ids, positions, labels)."""
    idx = rng.integers(0, len(digits), size=2)
    lim = size - DIGIT_SIZE
    r0, c0 = int(rng.integers(0, lim + 1)), int(rng.integers(0, lim + 1))
    for _ in range(200):
        r1, c1 = int(rng.integers(0, lim + 1)), int(rng.integers(0, lim + 1))
        if abs(r1 - r0) >= DIGIT_SIZE or abs(c1 - c0) >= DIGIT_SIZE:
            break
    else:
        # bounded rejection; force a legal spot in the opposite corner
        r1 = 0 if r0 > lim // 2 else lim
        c1 = 0 if c0 > lim // 2 else lim
    for (r, c), di in zip(((r0, c0), (r1, c1)), idx):
        region = canvas[r: r + DIGIT_SIZE, c: c + DIGIT_SIZE]
        np.maximum(region, digits[di], out=region)
    return [int(i) for i in idx], [[r0, c0], [r1, c1]], [int(labels[idx[0]]), int(labels[idx[1]])]


def _add_clutter(canvas, digits, rng, size, patches: int = 6, patch: int = 8, salt: float = 0.01):
    """Stroke-fragment clutter plus salt noise, composed by per-pixel max."""
    for _ in range(patches):
        src = digits[int(rng.integers(0, len(digits)))]
        pr = int(rng.integers(0, DIGIT_SIZE - patch + 1))
        pc = int(rng.integers(0, DIGIT_SIZE - patch + 1))
        r = int(rng.integers(0, size - patch + 1))
        c = int(rng.integers(0, size - patch + 1))
        region = canvas[r: r + patch, c: c + patch]
        np.maximum(region, src[pr: pr + patch, pc: pc + patch], out=region)
    n_salt = int(round(salt * size * size))
    flat = rng.choice(size * size, size=n_salt, replace=False)
    canvas.reshape(-1)[flat] = 1.0


def _gen_two_digit_sample(task, digits, labels, seed, index, size, clutter):
    rng = sample_stream(seed, task, index)
    canvas = np.zeros((size, size), dtype=np.float32)
    ids, pos, labs = _place_two_digits(canvas, digits, labels, rng, size)
    if clutter:
        _add_clutter(canvas, digits, rng, size)
    if task == "pairs":
        y = pair_label(labs[0], labs[1])
    else:
        y = labs[0] + labs[1]
    meta = {"task": task, "seed": seed, "index": index, "digit_ids": ids,
            "positions": pos, "digit_labels": labs}
    return canvas, [y], meta


def gen_pairs_task(digits, labels, count: int, seed: int, size: int = 100) -> Dataset:
    """Unordered-pair classification (55 classes) with distraction clutter."""
    images = np.zeros((count, size, size), dtype=np.float32)
    labs, meta = [], []
    for i in range(count):
        images[i], y, m = _gen_two_digit_sample("pairs", digits, labels, seed, i, size, clutter=True)
        labs.append(y)
        meta.append(m)
    return Dataset("pairs", images, labs, num_classes=55, max_len=1, meta=meta)


def gen_addition_task(digits, labels, count: int, seed: int, size: int = 100) -> Dataset:
    """Sum of two digits (19 classes), clean canvas."""
    images = np.zeros((count, size, size), dtype=np.float32)
    labs, meta = [], []
    for i in range(count):
        images[i], y, m = _gen_two_digit_sample("addition", digits, labels, seed, i, size, clutter=False)
        labs.append(y)
        meta.append(m)
    return Dataset("addition", images, labs, num_classes=19, max_len=1, meta=meta)


# ---------------------------------------------------------------------------
# multi-digit sequence task


def _gen_sequence_sample(digits, labels, seed, index, canvas_hw, max_digits, scale):
    rng = sample_stream(seed, "sequence", index)
    base_h, base_w = canvas_hw
    n = int(rng.integers(1, max_digits + 1))
    gaps = [int(rng.integers(0, 5)) for _ in range(n)]
    total = DIGIT_SIZE * n + sum(gaps[1:])
    x0 = int(rng.integers(0, max(base_w - total, 0) + 1))
    ys = [int(rng.integers(0, base_h - DIGIT_SIZE + 1)) for _ in range(n)]
    ids = [int(rng.integers(0, len(digits))) for _ in range(n)]
    base = np.zeros((base_h, base_w), dtype=np.float32)
    pos = []
    x = x0
    for j in range(n):
        if j > 0:
            x += gaps[j]
        region = base[ys[j]: ys[j] + DIGIT_SIZE, x: x + DIGIT_SIZE]
        np.maximum(region, digits[ids[j]], out=region)
        pos.append([ys[j], x])
        x += DIGIT_SIZE
    if scale == 1:
        canvas = base
        off = [0, 0]
    else:
        big_h, big_w = base_h * scale, base_w * scale
        canvas = np.zeros((big_h, big_w), dtype=np.float32)
        off = [int(rng.integers(0, big_h - base_h + 1)), int(rng.integers(0, big_w - base_w + 1))]
        canvas[off[0]: off[0] + base_h, off[1]: off[1] + base_w] = base
        pos = [[r + off[0], c + off[1]] for r, c in pos]
    labs = [int(labels[i]) for i in ids]
    meta = {"task": "sequence", "seed": seed, "index": index, "digit_ids": ids,
            "positions": pos, "offset": off, "scale": scale}
    return canvas, labs, meta


def gen_sequence_task(digits, labels, count: int, seed: int, canvas_hw=(36, 100),
                      max_digits: int = 3, reversed_labels: bool = False,
                      scale: int = 1) -> Dataset:
    """1..max_digits digits drawn left to right; labels follow reading order.

    `reversed_labels` stores the same images with right-to-left label lists
    (for training a backward decoder). `scale` enlarges the canvas by that
    factor per side and drops the same digit block at a random offset.
    """
    h, w = canvas_hw[0] * scale, canvas_hw[1] * scale
    images = np.zeros((count, h, w), dtype=np.float32)
    labs, meta = [], []
    for i in range(count):
        images[i], y, m = _gen_sequence_sample(digits, labels, seed, i, canvas_hw, max_digits, scale)
        if reversed_labels:
            y = y[::-1]
            m = dict(m, reversed=True)
        labs.append(y)
        meta.append(m)
    return Dataset("sequence", images, labs, num_classes=11, max_len=max_digits, meta=meta)


def regenerate_from_meta(meta: dict, digits, labels, canvas_hw=(36, 100), max_digits: int = 3,
                         size: int = 100):
    """Rebuild one sample's image bit-exactly from its meta record."""
    task = meta["task"]
    if task in ("pairs", "addition"):
        img, _, _ = _gen_two_digit_sample(task, digits, labels, meta["seed"], meta["index"],
                                          size, clutter=(task == "pairs"))
    else:
        img, _, _ = _gen_sequence_sample(digits, labels, meta["seed"], meta["index"],
                                         canvas_hw, max_digits, meta.get("scale", 1))
    return img


GENERATORS = {
    "pairs": gen_pairs_task,
    "addition": gen_addition_task,
    "sequence": gen_sequence_task,
}
