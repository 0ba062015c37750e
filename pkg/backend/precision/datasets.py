"""
Dataset loaders: IDX files (the MNIST distribution format, optionally
gzip-compressed) and seeded Gaussian-blob synthetic data.
"""
import gzip
import logging
import struct
from dataclasses import dataclass, replace
from math import prod
from pathlib import Path
from typing import Optional

import numpy as np

from .exceptions import DatasetError
from .seeding import stream

logger = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

TEST_IMAGES = 't10k-images-idx3-ubyte'
TEST_LABELS = 't10k-labels-idx1-ubyte'

TRAIN_FRACTION = 0.8


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int
    name: str = ''

    def __len__(self):
        return len(self.y)

    @property
    def input_shape(self):
        return tuple(self.x.shape[1:])

    def normalized(self, mean, std):
        return replace(self, x=((self.x - mean) / std).astype(np.float32))

    def limited(self, limit):
        if limit is None or limit >= len(self):
            return self
        return replace(self, x=self.x[:limit], y=self.y[:limit])


@dataclass(frozen=True)
class DataSplit:
    train: Dataset
    test: Dataset
    # (mean, std) applied to both splits, or None
    normalization: Optional[tuple] = None

    @property
    def input_shape(self):
        return self.train.input_shape

    @property
    def num_classes(self):
        return self.train.num_classes


def _open(path):
    path = Path(path)
    return gzip.open(path, 'rb') if path.suffix == '.gz' else open(path, 'rb')


def read_idx(path, magic):
    """Parse one IDX file whose big-endian magic must equal `magic`; returns a uint8 array."""
    try:
        with _open(path) as handle:
            raw = handle.read()
    except (OSError, EOFError) as exc:
        raise DatasetError(f"cannot read IDX file {path}: {exc}") from exc
    if len(raw) < 4:
        raise DatasetError(f"{path}: truncated IDX header ({len(raw)} bytes)")
    found = int.from_bytes(raw[:4], 'big')
    if found != magic:
        raise DatasetError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DatasetError(f"{path}: truncated IDX header, need {header} bytes, got {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = prod(dims)
    if len(raw) - header < count:
        raise DatasetError(f"{path}: truncated payload, expected {count} bytes after the header, got {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def write_idx(path, array, magic):
    """Write a uint8 array as an IDX file (gzip-compressed if `path` ends in .gz)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = magic.to_bytes(4, 'big')[:3] + bytes([array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    opener = gzip.open if Path(path).suffix == '.gz' else open
    with opener(path, 'wb') as handle:
        handle.write(header + array.tobytes())


def load_idx(images_path, labels_path, num_classes=None, limit=None) -> Dataset:
    """Images become N x 1 x H x W float32 in [0, 1]; labels int64."""
    images = read_idx(images_path, IMAGE_MAGIC)
    labels = read_idx(labels_path, LABEL_MAGIC)
    if images.ndim != 3:
        raise DatasetError(f"{images_path}: expected N x H x W images, got {images.ndim} dimensions")
    if labels.ndim != 1:
        raise DatasetError(f"{labels_path}: expected a 1-D label vector, got {labels.ndim} dimensions")
    if images.shape[0] != labels.shape[0]:
        raise DatasetError(f"image/label count mismatch: {images.shape[0]} images in {images_path}, "
                           f"{labels.shape[0]} labels in {labels_path}")
    x = (images.astype(np.float32) / 255.0)[:, None, :, :]
    y = labels.astype(np.int64)
    if num_classes is None:
        num_classes = int(y.max()) + 1 if y.size else 0
    dataset = Dataset(x, y, num_classes, name=Path(images_path).name).limited(limit)
    logger.info(f"Loaded {len(dataset)} samples of shape {dataset.input_shape} from {images_path}")
    return dataset


def find_idx(directory, stem):
    """Locate `stem` or `stem.gz` inside `directory`."""
    for candidate in (Path(directory) / stem, Path(directory) / f"{stem}.gz"):
        if candidate.exists():
            return candidate
    raise DatasetError(f"no {stem}[.gz] in {directory}")


def load_test_dir(directory, num_classes, normalization=None) -> Dataset:
    dataset = load_idx(find_idx(directory, TEST_IMAGES), find_idx(directory, TEST_LABELS), num_classes)
    if normalization is not None:
        dataset = dataset.normalized(*normalization)
    return dataset


def synth_dataset(classes, dims, per_class, seed, radius=3.0, image_shape=None) -> DataSplit:
    """
    Unit-variance Gaussian blobs whose means lie on a random sphere of
    `radius`, shuffled and split 80/20 into train and test.
    """
    if classes < 2:
        raise DatasetError(f"synthetic data needs at least 2 classes, got {classes}")
    rng = stream(seed, 'synthetic')
    directions = rng.standard_normal((classes, dims))
    means = radius * directions / np.linalg.norm(directions, axis=1, keepdims=True)
    x = np.concatenate([means[k] + rng.standard_normal((per_class, dims)) for k in range(classes)])
    y = np.repeat(np.arange(classes, dtype=np.int64), per_class)
    order = rng.permutation(len(y))
    x, y = x[order].astype(np.float32), y[order]
    if image_shape is not None:
        x = x.reshape((len(y),) + tuple(image_shape))
    cut = int(TRAIN_FRACTION * len(y))
    return DataSplit(
        train=Dataset(x[:cut], y[:cut], classes, name='synthetic-train'),
        test=Dataset(x[cut:], y[cut:], classes, name='synthetic-test'),
    )


def load_data(spec, seed) -> DataSplit:
    """Build the train/test split a DataSpec describes."""
    if spec.kind == 'synthetic':
        split = synth_dataset(spec.classes, spec.dims, spec.per_class,
                              spec.seed if spec.seed is not None else seed, spec.radius, spec.image_shape)
        logger.info(f"Synthetic data: {len(split.train)} train / {len(split.test)} test samples, "
                    f"{spec.classes} classes")
        return split
    if spec.kind != 'idx':
        raise DatasetError(f"unknown data kind '{spec.kind}'")

    train = load_idx(spec.train_images, spec.train_labels, limit=spec.limit_train)
    test = load_idx(spec.test_images, spec.test_labels, limit=spec.limit_test)
    if train.input_shape != test.input_shape:
        raise DatasetError(f"train images {train.input_shape} and test images {test.input_shape} differ in shape")
    num_classes = max(train.num_classes, test.num_classes)
    train, test = replace(train, num_classes=num_classes), replace(test, num_classes=num_classes)
    normalization = None
    if spec.normalize:
        normalization = (float(train.x.mean()), float(train.x.std()) or 1.0)
        train, test = train.normalized(*normalization), test.normalized(*normalization)
    return DataSplit(train, test, normalization)


def iterate_batches(dataset: Dataset, batch_size, rng=None):
    """
    Yield (x, y) batches. With `rng` the order is shuffled and the last partial
    batch dropped (training); without it batches are sequential and complete.
    """
    n = len(dataset)
    if rng is None:
        for start in range(0, n, batch_size):
            yield dataset.x[start:start + batch_size], dataset.y[start:start + batch_size]
        return
    order = rng.permutation(n)
    for start in range(0, n - batch_size + 1, batch_size):
        index = order[start:start + batch_size]
        yield dataset.x[index], dataset.y[index]


def batches_per_epoch(dataset: Dataset, batch_size):
    return len(dataset) // batch_size
