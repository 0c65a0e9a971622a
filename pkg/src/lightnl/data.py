"""Datasets: IDX-format loading/writing, a synthetic long-range task, and a
desk-scale handwritten-digit set in MNIST file format.

The long-range task is built so that purely local receptive fields are
insufficient: the label is the XOR of bright-patch presence in two opposite
corners of the image, which only a mechanism relating distant positions can
compute before global pooling.
"""

import struct
from dataclasses import dataclass

import numpy as np

IDX_MAGIC_IMAGES = 0x00000803
IDX_MAGIC_LABELS = 0x00000801


class IdxParseError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (count, H, W, C) uint8
    labels: np.ndarray  # (count,) int64
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(
                f"images/labels count mismatch: {len(self.images)} vs {len(self.labels)}")
        if len(self.labels) and int(self.labels.max()) >= self.num_classes:
            raise ValueError(
                f"label {int(self.labels.max())} out of range for "
                f"{self.num_classes} classes")

    def __len__(self):
        return len(self.labels)


def _read_exact(f, n, what):
    raw = f.read(n)
    if len(raw) != n:
        raise IdxParseError(
            f"truncated file while reading {what} at offset {f.tell() - len(raw)}: "
            f"wanted {n} bytes, got {len(raw)}")
    return raw


def load_idx_images(path):
    with open(path, "rb") as f:
        (magic,) = struct.unpack(">I", _read_exact(f, 4, "magic"))
        if magic != IDX_MAGIC_IMAGES:
            raise IdxParseError(
                f"bad image magic in {path}: expected {IDX_MAGIC_IMAGES:#010x}, "
                f"got {magic:#010x}")
        count, h, w = struct.unpack(">III", _read_exact(f, 12, "image header"))
        payload = _read_exact(f, count * h * w, "image payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(count, h, w, 1)


def load_idx_labels(path):
    with open(path, "rb") as f:
        (magic,) = struct.unpack(">I", _read_exact(f, 4, "magic"))
        if magic != IDX_MAGIC_LABELS:
            raise IdxParseError(
                f"bad label magic in {path}: expected {IDX_MAGIC_LABELS:#010x}, "
                f"got {magic:#010x}")
        (count,) = struct.unpack(">I", _read_exact(f, 4, "label header"))
        payload = _read_exact(f, count, "label payload")
    return np.frombuffer(payload, dtype=np.uint8).astype(np.int64)


def load_mnist(images_path, labels_path, split="train"):
    """Parse an MNIST-format IDX image/label file pair."""
    images = load_idx_images(images_path)
    labels = load_idx_labels(labels_path)
    return Dataset(images=images, labels=labels, split=split)


def write_idx_images(path, images):
    images = np.asarray(images, dtype=np.uint8)
    count, h, w = images.shape[:3]
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_MAGIC_IMAGES, count, h, w))
        f.write(images.reshape(count, h, w, -1)[..., 0].tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_MAGIC_LABELS, len(labels)))
        f.write(labels.tobytes())


def gen_longrange(seed, count, size=16):
    """Synthetic XOR-of-corners task with exact 50/50 class balance.

    A bright 3x3 patch may sit in the top-left and/or bottom-right corner on
    uniform background noise; the label is 1 iff exactly one patch is present.
    """
    if size < 16:
        raise ValueError(f"size must be >= 16, got {size}")
    if count % 2 != 0:
        raise ValueError(f"count must be even for exact balance, got {count}")
    rng = np.random.default_rng(seed)
    images = (rng.uniform(0.0, 0.3, size=(count, size, size, 1)) * 255).astype(np.uint8)
    labels = np.zeros(count, dtype=np.int64)
    # first half label 1 (one patch), second half label 0 (zero or two)
    labels[: count // 2] = 1
    present = np.zeros((count, 2), dtype=bool)
    pick = rng.integers(0, 2, size=count)
    half = count // 2
    present[:half, 0] = pick[:half] == 0
    present[:half, 1] = pick[:half] == 1
    present[half:, 0] = pick[half:] == 1
    present[half:, 1] = pick[half:] == 1
    for i in range(count):
        if present[i, 0]:
            images[i, 0:3, 0:3, 0] = 255
        if present[i, 1]:
            images[i, size - 3 : size, size - 3 : size, 0] = 255
    order = rng.permutation(count)
    return Dataset(images=images[order], labels=labels[order],
                   split="train", num_classes=2)


def make_digits_idx(outdir, seed=0, train_count=12000, test_count=2000):
    """Write an MNIST-format digit dataset derived from the bundled 8x8 digits.

    Images are upscaled to 28x28 and augmented with small random shifts to
    reach the requested counts; train and test draw from disjoint base images.
    Returns the four file paths (train/test images/labels).
    """
    import os

    from sklearn.datasets import load_digits

    os.makedirs(outdir, exist_ok=True)
    base_images, base_labels = load_digits(return_X_y=True)
    base_images = base_images.reshape(-1, 8, 8)
    # scale 0..16 to 0..255, upsample 3x and pad to 28x28
    scaled = np.clip(base_images * 255.0 / 16.0, 0, 255).astype(np.uint8)
    rng = np.random.default_rng(seed)
    n_base = len(scaled)
    split_at = int(n_base * 0.8)
    perm = rng.permutation(n_base)
    pools = {"train": perm[:split_at], "test": perm[split_at:]}
    counts = {"train": train_count, "test": test_count}
    paths = {}
    for split in ("train", "test"):
        pool = pools[split]
        idx = pool[rng.integers(0, len(pool), size=counts[split])]
        imgs = np.zeros((counts[split], 28, 28), dtype=np.uint8)
        shifts = rng.integers(-2, 3, size=(counts[split], 2))
        for k, (src, (dy, dx)) in enumerate(zip(idx, shifts)):
            big = np.kron(scaled[src], np.ones((3, 3), dtype=np.uint8))  # 24x24
            imgs[k, 2 + dy : 26 + dy, 2 + dx : 26 + dx] = big
        labels = base_labels[idx].astype(np.uint8)
        ip = os.path.join(outdir, f"{split}-images-idx3-ubyte")
        lp = os.path.join(outdir, f"{split}-labels-idx1-ubyte")
        write_idx_images(ip, imgs[..., None])
        write_idx_labels(lp, labels)
        paths[f"{split}_images"] = ip
        paths[f"{split}_labels"] = lp
    return paths
