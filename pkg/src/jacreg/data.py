"""IDX ingestion, channel normalization and synthetic datasets."""

import gzip
import struct
from dataclasses import dataclass, replace

import numpy as np

from jacreg.errors import DegenerateChannelError, IdxParseError
from jacreg.network import atomic_write_bytes

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    """Raw samples plus optional per-channel normalization statistics.

    ``images`` keeps the raw values (pixels in [0, 1] for image data);
    :attr:`x` applies the stored statistics, giving what the network sees.
    """

    images: np.ndarray
    labels: np.ndarray
    n_classes: int
    mean: np.ndarray = None
    std: np.ndarray = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} samples but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def stats(self):
        return None if self.mean is None else (self.mean, self.std)

    @property
    def x(self):
        return apply_stats(self.images, self.stats)

    def subset(self, idx):
        return replace(self, images=self.images[idx], labels=self.labels[idx])


def _bcast(a, ndim):
    return np.asarray(a).reshape((1, -1) + (1,) * (ndim - 2))


def apply_stats(raw, stats):
    """Map raw samples to network inputs: per-channel ``(x - mean) / std``."""
    if stats is None:
        return raw
    mean, std = stats
    return (raw - _bcast(mean, raw.ndim)) / _bcast(std, raw.ndim)


def denormalize(x, stats):
    if stats is None:
        return x
    mean, std = stats
    return x * _bcast(std, x.ndim) + _bcast(mean, x.ndim)


def channel_stats(images):
    axes = (0,) + tuple(range(2, images.ndim))
    mean = images.mean(axis=axes)
    std = images.std(axis=axes)
    bad = np.flatnonzero(std == 0)
    if bad.size:
        raise DegenerateChannelError(f"channel(s) {bad.tolist()} have zero standard deviation")
    return mean, std


def normalize(ds, stats=None):
    """Attach normalization statistics (computed from ``ds`` if not given)."""
    if stats is None:
        stats = channel_stats(ds.images)
    mean, std = (np.asarray(s, dtype=np.float64) for s in stats)
    if np.any(std <= 0):
        raise DegenerateChannelError("standard deviations must be strictly positive")
    return replace(ds, mean=mean, std=std)


def _open(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    with open(path, "rb") as fh:
        return fh.read()


def _parse_idx(buf, magic, ndim_expected, what):
    if len(buf) < 4:
        raise IdxParseError(f"{what}: file too short for the magic number", 0)
    (got,) = struct.unpack(">I", buf[:4])
    if got != magic:
        raise IdxParseError(f"{what}: bad magic 0x{got:08x}, expected 0x{magic:08x}", 0)
    header = 4 + 4 * ndim_expected
    if len(buf) < header:
        raise IdxParseError(f"{what}: truncated dimension header", len(buf))
    dims = struct.unpack(f">{ndim_expected}I", buf[4:header])
    size = int(np.prod(dims))
    if len(buf) < header + size:
        raise IdxParseError(
            f"{what}: truncated payload, expected {size} bytes, found {len(buf) - header}", len(buf)
        )
    data = np.frombuffer(buf, dtype=np.uint8, count=size, offset=header)
    return data.reshape(dims)


def load_idx(images_path, labels_path, n_classes=10):
    """Read an IDX image/label pair (optionally gzip-compressed).

    Images come back as ``(N, 1, H, W)`` float64 in [0, 1].
    """
    images = _parse_idx(_open(images_path), IDX_IMAGES_MAGIC, 3, "images")
    labels = _parse_idx(_open(labels_path), IDX_LABELS_MAGIC, 1, "labels")
    if len(images) != len(labels):
        raise IdxParseError(f"{len(images)} images but {len(labels)} labels", 4)
    raw = images.astype(np.float64)[:, None] / 255.0
    return Dataset(raw, labels.astype(np.int64), n_classes)


def write_idx(ds, images_path, labels_path):
    """Write single-channel images as IDX (bytes = round(255 * pixel)); ``.gz`` paths are compressed."""
    imgs = ds.images
    if imgs.ndim == 4:
        if imgs.shape[1] != 1:
            raise ValueError("IDX images must have a single channel")
        imgs = imgs[:, 0]
    pixels = np.clip(np.rint(imgs * 255.0), 0, 255).astype(np.uint8)
    n, h, w = pixels.shape
    img_bytes = struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + pixels.tobytes()
    lab_bytes = struct.pack(">II", IDX_LABELS_MAGIC, n) + ds.labels.astype(np.uint8).tobytes()
    for path, payload in ((images_path, img_bytes), (labels_path, lab_bytes)):
        if str(path).endswith(".gz"):
            payload = gzip.compress(payload, mtime=0)
        atomic_write_bytes(path, payload)


def _blob_centers(n_classes, dim, separation):
    centers = np.zeros((n_classes, dim))
    if dim == 1:
        centers[:, 0] = separation * np.arange(n_classes)
    elif n_classes <= dim:
        # simplex corners: pairwise distance separation
        centers[np.arange(n_classes), np.arange(n_classes)] = separation / np.sqrt(2)
    else:
        # regular polygon in the first plane; neighbours are separation apart
        ang = 2 * np.pi * np.arange(n_classes) / n_classes
        radius = separation / (2 * np.sin(np.pi / n_classes))
        centers[:, 0] = radius * np.cos(ang)
        centers[:, 1] = radius * np.sin(ang)
    return centers


def synthetic_blobs(rng, n_per_class, n_classes, dim, separation):
    """Unit-variance Gaussian clusters around fixed, ``separation``-spaced centers."""
    if separation < 0:
        raise ValueError("separation must be non-negative")
    centers = _blob_centers(n_classes, dim, separation)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    x = centers[labels] + rng.standard_normal((len(labels), dim))
    order = rng.permutation(len(labels))
    return Dataset(x[order], labels[order], n_classes)


def synthetic_images(rng, n_per_class, n_classes=10, shape=(1, 28, 28), noise=0.3, smooth=5):
    """FashionMNIST-format stand-in: binary blob prototypes plus pixel noise.

    Each class prototype is a box-blurred random field thresholded at its
    median. Samples scale the prototype by a brightness in [0.6, 1], add
    Gaussian pixel noise and clip to [0, 1].
    """
    c, h, w = shape
    protos = rng.random((n_classes, c, h, w))
    kernel = np.ones(smooth) / smooth
    for axis in (2, 3):
        protos = np.apply_along_axis(lambda r: np.convolve(r, kernel, mode="same"), axis, protos)
    protos = (protos > np.median(protos, axis=(1, 2, 3), keepdims=True)).astype(np.float64)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    brightness = rng.uniform(0.6, 1.0, size=(len(labels), 1, 1, 1))
    x = protos[labels] * brightness + noise * rng.standard_normal((len(labels), c, h, w))
    x = np.clip(x, 0.0, 1.0)
    order = rng.permutation(len(labels))
    return Dataset(x[order], labels[order], n_classes)


def train_val_split(ds, n_val, rng):
    order = rng.permutation(len(ds))
    return ds.subset(order[n_val:]), ds.subset(order[:n_val])
