"""Dataset ingestion, augmentation, and deterministic shuffled batching.

MNIST-family datasets arrive as big-endian IDX containers (magic
0x00000803 for images, 0x00000801 for labels), CIFAR-10 as binary batch
files of 3073-byte records (1 label byte + 3072 pixel bytes). Pixels are
scaled to [0, 1]. Gzip-compressed IDX files are read transparently.

Batching is reproducible: the epoch permutation is a pure function of
(seed, epoch), and each sample's augmentation draws from its own
(seed, epoch, index) substream, so a run can be replayed bitwise.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import Array

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILES = ["test_batch.bin"]
CIFAR_RECORD = 1 + 3072

# conventional per-channel statistics for CIFAR-10 normalization; not a
# measured property of this code, just the usual recipe constants
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)


class DataError(ValueError):
    """Raised for malformed or inconsistent dataset files."""


@dataclass
class Dataset:
    images: Array  # (N, C, H, W) float32 in [0, 1] (plus any normalization)
    labels: Array  # (N,) int64
    name: str = ""
    split: str = ""


@dataclass(frozen=True)
class AugmentPolicy:
    """Per-sample training-time transforms; probabilities in [0, 1]."""

    crop_pad: int = 4
    hflip_prob: float = 0.5
    cutout_size: int = 8
    cutout_count: int = 1
    mean: tuple[float, ...] | None = CIFAR_MEAN
    std: tuple[float, ...] | None = CIFAR_STD

    def __post_init__(self) -> None:
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise DataError(f"hflip_prob must lie in [0, 1], got {self.hflip_prob}")


def _open_maybe_gzip(path):
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_idx_header(fh, path, expect_magic: int, ndim: int):
    raw = fh.read(4 * (1 + ndim))
    if len(raw) < 4 * (1 + ndim):
        raise DataError(f"{path}: truncated IDX header at byte {len(raw)}")
    fields = struct.unpack(f">{1 + ndim}I", raw)
    if fields[0] != expect_magic:
        raise DataError(
            f"{path}: bad IDX magic 0x{fields[0]:08x} at byte 0, expected "
            f"0x{expect_magic:08x}"
        )
    return fields[1:]


def load_idx(images_path, labels_path) -> Dataset:
    """Read one IDX image/label file pair into a dataset scaled to [0, 1]."""
    with _open_maybe_gzip(images_path) as fh:
        n, rows, cols = _read_idx_header(fh, images_path, IDX_IMAGE_MAGIC, 3)
        payload = fh.read(n * rows * cols + 1)
        if len(payload) != n * rows * cols:
            raise DataError(
                f"{images_path}: expected {n * rows * cols} pixel bytes after the "
                f"16-byte header, got {len(payload)}"
            )
        images = np.frombuffer(payload, dtype=np.uint8).reshape(n, 1, rows, cols)
    with _open_maybe_gzip(labels_path) as fh:
        (n_labels,) = _read_idx_header(fh, labels_path, IDX_LABEL_MAGIC, 1)
        if n_labels != n:
            raise DataError(
                f"label count {n_labels} ({labels_path}) does not match image "
                f"count {n} ({images_path})"
            )
        payload = fh.read(n_labels + 1)
        if len(payload) != n_labels:
            raise DataError(
                f"{labels_path}: expected {n_labels} label bytes after the 8-byte "
                f"header, got {len(payload)}"
            )
        labels = np.frombuffer(payload, dtype=np.uint8).astype(np.int64)
    scaled = images.astype(np.float32) / np.float32(255.0)
    return Dataset(images=scaled, labels=labels)


def write_idx(images: Array, labels: Array, images_path, labels_path) -> None:
    """Write uint8 images (N, H, W) or (N, 1, H, W) and labels as IDX files."""
    if images.ndim == 4:
        images = images[:, 0]
    n, rows, cols = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">4I", IDX_IMAGE_MAGIC, n, rows, cols))
        fh.write(np.ascontiguousarray(images, dtype=np.uint8).tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">2I", IDX_LABEL_MAGIC, n))
        fh.write(np.ascontiguousarray(labels, dtype=np.uint8).tobytes())


def _find_idx_file(data_dir: Path, stem: str) -> Path:
    for candidate in (stem, stem + ".gz"):
        p = data_dir / candidate
        if p.exists():
            return p
    raise DataError(
        f"missing dataset file under {data_dir}: expected {stem} or {stem}.gz"
    )


def load_idx_split(data_dir, split: str) -> Dataset:
    """Load the conventional MNIST-layout files for one split."""
    data_dir = Path(data_dir)
    prefix = "train" if split == "train" else "t10k"
    ds = load_idx(
        _find_idx_file(data_dir, f"{prefix}-images-idx3-ubyte"),
        _find_idx_file(data_dir, f"{prefix}-labels-idx1-ubyte"),
    )
    ds.split = split
    return ds


def load_cifar10(data_dir, split: str = "train") -> Dataset:
    """Read CIFAR-10 binary batch files for one split."""
    data_dir = Path(data_dir)
    nested = data_dir / "cifar-10-batches-bin"
    if nested.is_dir():
        data_dir = nested
    names = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
    missing = [n for n in names if not (data_dir / n).exists()]
    if missing:
        raise DataError(
            f"missing CIFAR-10 files under {data_dir}: expected {', '.join(names)}"
        )
    images = []
    labels = []
    for name in names:
        blob = (data_dir / name).read_bytes()
        if len(blob) == 0 or len(blob) % CIFAR_RECORD:
            raise DataError(
                f"{data_dir / name}: size {len(blob)} is not a multiple of "
                f"{CIFAR_RECORD}-byte records"
            )
        rec = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    ds = Dataset(
        images=np.concatenate(images).astype(np.float32) / np.float32(255.0),
        labels=np.concatenate(labels),
        name="cifar10",
        split=split,
    )
    return ds


def load_dataset(name: str, data_dir, split: str) -> Dataset:
    """Dispatch by dataset name; mnist and fashion share the IDX layout."""
    name = name.lower()
    if name in ("mnist", "fashion", "fashion-mnist", "synthetic"):
        ds = load_idx_split(data_dir, split)
        ds.name = name
        return ds
    if name == "cifar10":
        return load_cifar10(data_dir, split)
    raise DataError(f"unknown dataset: {name!r}")


def normalize_images(images: Array, mean, std) -> Array:
    """Per-channel affine normalization (x - mean) / std."""
    m = np.asarray(mean, dtype=images.dtype).reshape(1, -1, 1, 1)
    s = np.asarray(std, dtype=images.dtype).reshape(1, -1, 1, 1)
    return (images - m) / s


def normalized(ds: Dataset, policy: AugmentPolicy | None) -> Dataset:
    """Apply the policy's normalization only (the eval-side transform)."""
    if policy is None or policy.mean is None:
        return ds
    return Dataset(
        images=normalize_images(ds.images, policy.mean, policy.std),
        labels=ds.labels,
        name=ds.name,
        split=ds.split,
    )


def hflip(img: Array) -> Array:
    """Reverse the column order of one (C, H, W) image."""
    return img[:, :, ::-1]


def augment_sample(img: Array, rng: np.random.Generator, policy: AugmentPolicy) -> Array:
    """Crop/flip/normalize/cutout pipeline for one (C, H, W) image."""
    c, h, w = img.shape
    if policy.crop_pad > 0:
        p = policy.crop_pad
        padded = np.pad(img, ((0, 0), (p, p), (p, p)))
        oy = int(rng.integers(0, 2 * p + 1))
        ox = int(rng.integers(0, 2 * p + 1))
        img = padded[:, oy : oy + h, ox : ox + w]
    if policy.hflip_prob > 0 and rng.random() < policy.hflip_prob:
        img = hflip(img)
    img = np.ascontiguousarray(img)
    if policy.mean is not None:
        img = normalize_images(img[None], policy.mean, policy.std)[0]
    for _ in range(policy.cutout_count):
        if policy.cutout_size <= 0:
            break
        cy = int(rng.integers(0, h))
        cx = int(rng.integers(0, w))
        half = policy.cutout_size // 2
        y0, y1 = max(0, cy - half), min(h, cy + half)
        x0, x1 = max(0, cx - half), min(w, cx + half)
        img[:, y0:y1, x0:x1] = 0.0
    return img


def make_batches(
    ds: Dataset,
    batch_size: int,
    seed: int,
    epoch: int,
    policy: AugmentPolicy | None = None,
):
    """Yield (images, labels) minibatches in a (seed, epoch)-determined order.

    Every index appears exactly once per epoch; the final short batch is
    kept. With a policy, each sample is augmented from its own
    (seed, epoch, index) substream so the stream replays bitwise.
    """
    n = ds.images.shape[0]
    if batch_size > n:
        raise DataError(f"batch size {batch_size} exceeds dataset size {n}")
    order = np.random.default_rng(np.random.SeedSequence([seed, epoch])).permutation(n)
    for lo in range(0, n, batch_size):
        idx = order[lo : lo + batch_size]
        images = ds.images[idx]
        if policy is not None:
            out = np.empty_like(images)
            for j, sample_index in enumerate(idx):
                rng = np.random.default_rng(
                    np.random.SeedSequence([seed, epoch, int(sample_index)])
                )
                out[j] = augment_sample(images[j], rng, policy)
            images = out
        yield images, ds.labels[idx]


# ---------------------------------------------------------------------------
# synthetic data for pipeline tests and offline demos

def _draw_class(img: Array, label: int, rng: np.random.Generator) -> None:
    h, w = img.shape
    cy = h // 2 + int(rng.integers(-3, 4))
    cx = w // 2 + int(rng.integers(-3, 4))
    thick = int(rng.integers(2, 4))
    lo, hi = 2, h - 3
    span = np.arange(h)
    if label == 0:  # filled disk
        r = h // 4 + int(rng.integers(-1, 2))
        yy, xx = np.ogrid[:h, :w]
        img[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = 1.0
    elif label == 1:  # vertical bar
        img[lo:hi, cx - thick : cx + thick] = 1.0
    elif label == 2:  # horizontal bar
        img[cy - thick : cy + thick, lo:hi] = 1.0
    elif label == 3:  # main diagonal
        for d in range(-thick, thick + 1):
            ii = span[(span + d >= 0) & (span + d < w)]
            img[ii, ii + d] = 1.0
    elif label == 4:  # anti-diagonal
        for d in range(-thick, thick + 1):
            jj = w - 1 - span + d
            ok = (jj >= 0) & (jj < w)
            img[span[ok], jj[ok]] = 1.0
    elif label == 5:  # hollow square
        r = h // 3
        img[cy - r : cy + r, cx - r : cx + r] = 1.0
        img[cy - r + thick : cy + r - thick, cx - r + thick : cx + r - thick] = 0.0
    elif label == 6:  # plus
        img[lo:hi, cx - thick : cx + thick] = 1.0
        img[cy - thick : cy + thick, lo:hi] = 1.0
    elif label == 7:  # two vertical bars
        off = h // 4
        img[lo:hi, cx - off - thick : cx - off + thick] = 1.0
        img[lo:hi, cx + off - thick : cx + off + thick] = 1.0
    elif label == 8:  # two horizontal bars
        off = h // 4
        img[cy - off - thick : cy - off + thick, lo:hi] = 1.0
        img[cy + off - thick : cy + off + thick, lo:hi] = 1.0
    else:  # checkerboard
        cell = max(3, h // 7)
        yy, xx = np.ogrid[:h, :w]
        img[((yy // cell) + (xx // cell)) % 2 == 0] = 1.0


def synthesize_classification_set(
    n: int, image_hw: int = 28, classes: int = 10, seed: int = 0
) -> tuple[Array, Array]:
    """Procedural grayscale shape dataset: uint8 images (N, H, W) and labels.

    Ten jittered geometric glyph families with brightness variation and
    pixel noise; easy for a working conv net, hopeless for a broken one.
    """
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, classes, size=n).astype(np.uint8)
    images = np.zeros((n, image_hw, image_hw), dtype=np.float32)
    for i in range(n):
        _draw_class(images[i], int(labels[i]), rng)
        images[i] *= rng.uniform(0.6, 1.0)
        images[i] += rng.normal(0.0, 0.08, size=images[i].shape)
    images = np.clip(images, 0.0, 1.0)
    return (images * 255.0 + 0.5).astype(np.uint8), labels


def write_synthetic_idx_dir(
    out_dir, n_train: int, n_test: int, image_hw: int = 28, seed: int = 0
) -> None:
    """Write a synthetic dataset in the MNIST file layout under out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tr_img, tr_lab = synthesize_classification_set(n_train, image_hw, seed=seed)
    te_img, te_lab = synthesize_classification_set(n_test, image_hw, seed=seed + 1)
    write_idx(tr_img, tr_lab, out_dir / "train-images-idx3-ubyte", out_dir / "train-labels-idx1-ubyte")
    write_idx(te_img, te_lab, out_dir / "t10k-images-idx3-ubyte", out_dir / "t10k-labels-idx1-ubyte")
