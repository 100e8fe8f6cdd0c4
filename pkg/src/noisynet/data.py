"""Dataset ingestion: IDX files, a binary container format, and synthetic corpora."""

from __future__ import annotations

import glob
import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

from .tensor import RngStream
from .validation import check_labels

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

CONTAINER_MAGIC = b"NNDS"
CONTAINER_VERSION = 1


class IdxFormatError(ValueError):
    """Base class for IDX parsing failures."""


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


@dataclass
class Dataset:
    """Images in [0, 1] shaped (n, C, H, W) plus integer labels."""

    images: np.ndarray
    labels: np.ndarray
    name: str = ""
    n_classes: int = 0

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (n, C, H, W), got {self.images.shape}")
        self.labels = check_labels(self.labels, name="labels")
        if len(self.labels) != len(self.images):
            raise ValueError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if self.n_classes == 0 and len(self.labels):
            self.n_classes = int(self.labels.max()) + 1

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices)
        return Dataset(self.images[indices], self.labels[indices],
                       name=self.name, n_classes=self.n_classes)


def _open_maybe_gzip(path):
    if str(path).endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(fh, count: int, path, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise IdxTruncatedError(
            f"{path}: truncated while reading {what} "
            f"(wanted {count} bytes, got {len(data)})"
        )
    return data


def load_idx(images_path, labels_path, name: str = "", n_classes: int = 0) -> Dataset:
    """Load an IDX image/label file pair (gzipped files are accepted).

    Pixel bytes are scaled to [0, 1]; 3-D image files (n, H, W) gain a
    singleton channel axis.
    """
    with _open_maybe_gzip(images_path) as fh:
        magic, = struct.unpack(">I", _read_exact(fh, 4, images_path, "magic number"))
        if magic != IDX_IMAGE_MAGIC:
            raise IdxMagicError(
                f"{images_path}: expected image magic 0x{IDX_IMAGE_MAGIC:08x}, "
                f"got 0x{magic:08x}"
            )
        n, rows, cols = struct.unpack(">III", _read_exact(fh, 12, images_path,
                                                          "dimensions"))
        raw = _read_exact(fh, n * rows * cols, images_path, "pixel data")
    images = np.frombuffer(raw, dtype=np.uint8).astype(np.float64) / 255.0
    images = images.reshape(n, 1, rows, cols)

    with _open_maybe_gzip(labels_path) as fh:
        magic, = struct.unpack(">I", _read_exact(fh, 4, labels_path, "magic number"))
        if magic != IDX_LABEL_MAGIC:
            raise IdxMagicError(
                f"{labels_path}: expected label magic 0x{IDX_LABEL_MAGIC:08x}, "
                f"got 0x{magic:08x}"
            )
        n_labels, = struct.unpack(">I", _read_exact(fh, 4, labels_path, "count"))
        labels = np.frombuffer(_read_exact(fh, n_labels, labels_path, "labels"),
                               dtype=np.uint8).astype(np.int64)
    if n_labels != n:
        raise IdxCountMismatchError(
            f"{images_path} holds {n} images but {labels_path} holds "
            f"{n_labels} labels"
        )
    return Dataset(images, labels, name=name or os.path.basename(str(images_path)),
                   n_classes=n_classes)


def save_idx(ds: Dataset, images_path, labels_path) -> None:
    """Write a dataset as an IDX image/label pair (single-channel only)."""
    if ds.images.shape[1] != 1:
        raise ValueError("IDX export supports single-channel images only")
    n, _, rows, cols = ds.images.shape
    pixels = np.clip(np.rint(ds.images * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABEL_MAGIC, n))
        fh.write(ds.labels.astype(np.uint8).tobytes())


def save_dataset(ds: Dataset, path) -> None:
    """Write the repo container format.

    Layout (little-endian): magic "NNDS", u32 version, u32 name length,
    name bytes (utf-8), u32 class count, u32 ndim, u32 dims..., float64
    pixel payload, int64 label block.
    """
    name = ds.name.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CONTAINER_MAGIC)
        fh.write(struct.pack("<I", CONTAINER_VERSION))
        fh.write(struct.pack("<I", len(name)))
        fh.write(name)
        fh.write(struct.pack("<I", ds.n_classes))
        dims = ds.images.shape
        fh.write(struct.pack("<I", len(dims)))
        fh.write(struct.pack(f"<{len(dims)}I", *dims))
        fh.write(np.ascontiguousarray(ds.images, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ds.labels, dtype="<i8").tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CONTAINER_MAGIC:
            raise ValueError(f"{path}: not a dataset container (magic {magic!r})")
        version, = struct.unpack("<I", fh.read(4))
        if version != CONTAINER_VERSION:
            raise ValueError(f"{path}: unsupported container version {version}")
        name_len, = struct.unpack("<I", fh.read(4))
        name = fh.read(name_len).decode("utf-8")
        n_classes, = struct.unpack("<I", fh.read(4))
        ndim, = struct.unpack("<I", fh.read(4))
        dims = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        count = int(np.prod(dims))
        images = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(dims)
        labels = np.frombuffer(fh.read(8 * dims[0]), dtype="<i8")
    return Dataset(images.copy(), labels.copy(), name=name, n_classes=n_classes)


def split(ds: Dataset, ratio=(5, 1, 1), seed: int = 0):
    """Seeded random split into (train, val, test) by the given ratio.

    Sizes are proportional with any remainder going to train; the three
    parts are disjoint and cover the dataset.
    """
    parts = tuple(float(r) for r in ratio)
    if len(parts) != 3 or any(r <= 0 for r in parts):
        raise ValueError(f"ratio must be three positive parts, got {ratio}")
    n = len(ds)
    if n < 3:
        raise ValueError(f"cannot split a dataset of {n} samples three ways")
    total = sum(parts)
    n_val = int(n * parts[1] / total)
    n_test = int(n * parts[2] / total)
    n_train = n - n_val - n_test
    perm = RngStream(seed, stream_id=0x5B117).permutation(n)
    return (ds.subset(perm[:n_train]),
            ds.subset(perm[n_train:n_train + n_val]),
            ds.subset(perm[n_train + n_val:]))


def synthetic_blobs(classes: int, samples_per_class: int, dim: int,
                    seed: int = 0, cluster_std: float = 0.05,
                    separation: float = 0.8) -> Dataset:
    """Gaussian class clusters inside the unit box; linearly separable for
    small cluster_std relative to the separation."""
    if classes > 2 * dim:
        raise ValueError(f"cannot place {classes} separated clusters in {dim} dims")
    stream = RngStream(seed, stream_id=0xB10B5)
    centers = np.full((classes, dim), 0.5)
    for k in range(classes):
        axis = k % dim
        sign = 1.0 if k < dim else -1.0
        centers[k, axis] += sign * separation / 2.0
    images = []
    labels = []
    for k in range(classes):
        pts = centers[k] + cluster_std * stream.standard_normal((samples_per_class, dim))
        images.append(pts)
        labels.append(np.full(samples_per_class, k, dtype=np.int64))
    images = np.clip(np.concatenate(images), 0.0, 1.0).reshape(-1, 1, 1, dim)
    return Dataset(images, np.concatenate(labels), name="blobs", n_classes=classes)


# Bundled fonts known to carry clean digit glyphs.
_DIGIT_FONTS = (
    "DejaVuSans.ttf", "DejaVuSans-Bold.ttf", "DejaVuSans-Oblique.ttf",
    "DejaVuSansMono.ttf", "DejaVuSansMono-Bold.ttf",
    "DejaVuSerif.ttf", "DejaVuSerif-Bold.ttf", "DejaVuSerif-Italic.ttf",
    "cmb10.ttf", "cmr10.ttf", "cmss10.ttf", "cmtt10.ttf",
)


def render_digits(samples_per_class: int, seed: int = 0, size: int = 28) -> Dataset:
    """Procedurally rendered grayscale digit corpus (10 classes).

    Digits are rasterized from the bundled fonts with random font, scale,
    offset, rotation, blur and intensity jitter, producing centered
    white-on-black images statistically similar to scanned digits.  Entirely
    deterministic per seed; useful where a real handwriting corpus is not
    available.
    """
    import matplotlib
    from PIL import Image, ImageDraw, ImageFont, ImageFilter

    font_dir = os.path.join(matplotlib.get_data_path(), "fonts", "ttf")
    font_paths = [os.path.join(font_dir, f) for f in _DIGIT_FONTS
                  if os.path.exists(os.path.join(font_dir, f))]
    if not font_paths:
        font_paths = sorted(glob.glob(os.path.join(font_dir, "DejaVu*.ttf")))
    if not font_paths:
        raise RuntimeError("no usable fonts found for digit rendering")

    root = RngStream(seed, stream_id=0xD161)
    fonts_cache: dict = {}
    images = np.empty((10 * samples_per_class, 1, size, size))
    labels = np.empty(10 * samples_per_class, dtype=np.int64)
    i = 0
    for digit in range(10):
        for j in range(samples_per_class):
            s = root.substream(digit, j)
            draws = s.uniform((8,))
            font_path = font_paths[int(draws[0] * len(font_paths))]
            pt = int(14 + draws[1] * 12)            # 14..25 pt on a 2x canvas
            key = (font_path, pt)
            if key not in fonts_cache:
                fonts_cache[key] = ImageFont.truetype(font_path, pt * 2)
            font = fonts_cache[key]

            canvas = Image.new("L", (size * 2, size * 2), 0)
            drawer = ImageDraw.Draw(canvas)
            left, top, right, bottom = drawer.textbbox((0, 0), str(digit), font=font)
            cx = size - (left + right) / 2 + (draws[2] - 0.5) * 8
            cy = size - (top + bottom) / 2 + (draws[3] - 0.5) * 8
            drawer.text((cx, cy), str(digit), fill=255, font=font)
            angle = (draws[4] - 0.5) * 30.0
            canvas = canvas.rotate(angle, resample=Image.BILINEAR, fillcolor=0)
            if draws[5] < 0.5:
                canvas = canvas.filter(
                    ImageFilter.GaussianBlur(radius=0.4 + draws[6] * 0.8))
            canvas = canvas.resize((size, size), resample=Image.BILINEAR)
            arr = np.asarray(canvas, dtype=np.float64) / 255.0
            peak = arr.max()
            if peak > 0:
                arr = arr / peak * (0.7 + 0.3 * draws[7])
            images[i, 0] = arr
            labels[i] = digit
            i += 1
    return Dataset(np.clip(images, 0.0, 1.0), labels,
                   name="rendered-digits", n_classes=10)


_MNIST_FILES = {
    "train_images": ("train-images-idx3-ubyte", "train-images.idx3-ubyte"),
    "train_labels": ("train-labels-idx1-ubyte", "train-labels.idx1-ubyte"),
    "test_images": ("t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"),
    "test_labels": ("t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"),
}


def _find_idx_file(data_dir, names):
    for name in names:
        for candidate in (name, name + ".gz"):
            path = os.path.join(data_dir, candidate)
            if os.path.exists(path):
                return path
    return None


def load_mnist(data_dir) -> Dataset:
    """Pool the official MNIST train and test IDX files into one dataset.

    The pooled corpus is meant to be re-split (train/val/test) downstream.
    """
    paths = {key: _find_idx_file(data_dir, names)
             for key, names in _MNIST_FILES.items()}
    missing = [k for k, v in paths.items() if v is None]
    if missing:
        raise FileNotFoundError(
            f"MNIST files missing under {data_dir}: {', '.join(missing)}"
        )
    train = load_idx(paths["train_images"], paths["train_labels"],
                     name="mnist", n_classes=10)
    test = load_idx(paths["test_images"], paths["test_labels"],
                    name="mnist", n_classes=10)
    return Dataset(np.concatenate([train.images, test.images]),
                   np.concatenate([train.labels, test.labels]),
                   name="mnist", n_classes=10)
