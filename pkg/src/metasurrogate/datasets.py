"""Dataset ingestion producing raw-pixel ExampleBatches.

Supported ids:
  mnist    28x28x1 grayscale digits, the canonical IDX archives.
  cifar10  32x32x3 color images, the python pickle batches.
  digits   8x8x1 grayscale digits bundled with scikit-learn; always available
           offline, used as the desk-scale stand-in when the downloadable
           sets are unreachable.

Files are looked up under the cache directory (METASURROGATE_DATA_DIR, else
~/.cache/metasurrogate) and downloaded from the configured endpoint when
missing. Checksums are verified before parsing.
"""

from __future__ import annotations

import gzip
import hashlib
import os
import pickle
import tarfile
import urllib.error
import urllib.request
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .batch import ExampleBatch
from .determinism import generator
from .errors import ConfigError, DataError

DATASET_NAMES = ("mnist", "cifar10", "digits")
SPLITS = ("train", "test")

MNIST_ENDPOINT_VAR = "METASURROGATE_MNIST_URL"
CIFAR_ENDPOINT_VAR = "METASURROGATE_CIFAR10_URL"
DATA_DIR_VAR = "METASURROGATE_DATA_DIR"

_MNIST_DEFAULT_URL = "https://ossci-datasets.s3.amazonaws.com/mnist/"
_CIFAR_DEFAULT_URL = "https://www.cs.toronto.edu/~kriz/"

_MNIST_FILES = {
    ("train", "images"): ("train-images-idx3-ubyte.gz", "f68b3c2dcbeaaa9fbdd348bbdeb94873"),
    ("train", "labels"): ("train-labels-idx1-ubyte.gz", "d53e105ee54ea40749a09fcbcd1e9432"),
    ("test", "images"): ("t10k-images-idx3-ubyte.gz", "9fb629c4189551a2d022fa330f9573f3"),
    ("test", "labels"): ("t10k-labels-idx1-ubyte.gz", "ec29112dd5afa0611ce80d1b7f02629c"),
}
_CIFAR_ARCHIVE = ("cifar-10-python.tar.gz", "c58f30108f718f92721af3b95e74349a")

# Fixed train/test split of the 1797 scikit-learn digit images.
_DIGITS_TRAIN = 1500


def cache_dir() -> Path:
    root = os.environ.get(DATA_DIR_VAR)
    if root:
        return Path(root)
    return Path.home() / ".cache" / "metasurrogate"


def _md5(path: Path) -> str:
    h = hashlib.md5()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _fetch(filename: str, md5: str, endpoint: str) -> Path:
    """Return the verified local path of `filename`, downloading if needed."""
    directory = cache_dir()
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / filename
    if not path.exists():
        url = endpoint.rstrip("/") + "/" + filename
        try:
            tmp = path.with_suffix(path.suffix + ".part")
            urllib.request.urlretrieve(url, tmp)
            os.replace(tmp, path)
        except (urllib.error.URLError, OSError) as exc:
            raise DataError(
                f"dataset file {path} is missing and could not be downloaded "
                f"from {url}: {exc}"
            ) from exc
    actual = _md5(path)
    if actual != md5:
        raise DataError(f"checksum mismatch for {path}: expected {md5}, got {actual}")
    return path


def _parse_idx(raw: bytes, expect_magic: int) -> np.ndarray:
    magic = int.from_bytes(raw[0:4], "big")
    if magic != expect_magic:
        raise DataError(f"bad IDX magic {magic}, expected {expect_magic}")
    ndim = magic & 0xFF
    dims = [int.from_bytes(raw[4 + 4 * i: 8 + 4 * i], "big") for i in range(ndim)]
    offset = 4 + 4 * ndim
    data = np.frombuffer(raw, dtype=np.uint8, offset=offset)
    if data.size != int(np.prod(dims)):
        raise DataError("IDX payload size disagrees with its header")
    return data.reshape(dims)


def _load_mnist(split: str) -> tuple[np.ndarray, np.ndarray]:
    endpoint = os.environ.get(MNIST_ENDPOINT_VAR, _MNIST_DEFAULT_URL)
    img_name, img_md5 = _MNIST_FILES[(split, "images")]
    lab_name, lab_md5 = _MNIST_FILES[(split, "labels")]
    with gzip.open(_fetch(img_name, img_md5, endpoint), "rb") as f:
        images = _parse_idx(f.read(), 0x803)
    with gzip.open(_fetch(lab_name, lab_md5, endpoint), "rb") as f:
        labels = _parse_idx(f.read(), 0x801)
    return images[..., None].astype(np.float32), labels.astype(np.int64)


def _load_cifar10(split: str) -> tuple[np.ndarray, np.ndarray]:
    name, md5 = _CIFAR_ARCHIVE
    endpoint = os.environ.get(CIFAR_ENDPOINT_VAR, _CIFAR_DEFAULT_URL)
    archive = _fetch(name, md5, endpoint)
    members = (
        [f"cifar-10-batches-py/data_batch_{i}" for i in range(1, 6)]
        if split == "train"
        else ["cifar-10-batches-py/test_batch"]
    )
    images, labels = [], []
    try:
        with tarfile.open(archive, "r:gz") as tar:
            for member in members:
                f = tar.extractfile(member)
                if f is None:
                    raise DataError(f"{archive} is missing member {member}")
                entry = pickle.load(f, encoding="latin1")
                images.append(entry["data"])
                labels.extend(entry["labels"])
    except (tarfile.TarError, KeyError, pickle.UnpicklingError) as exc:
        raise DataError(f"corrupt CIFAR-10 archive {archive}: {exc}") from exc
    data = np.concatenate(images).reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return data.astype(np.float32), np.asarray(labels, dtype=np.int64)


def _load_digits(split: str) -> tuple[np.ndarray, np.ndarray]:
    from sklearn.datasets import load_digits

    bunch = load_digits()
    images = bunch.images.astype(np.float32) * (255.0 / 16.0)
    labels = bunch.target.astype(np.int64)
    if split == "train":
        images, labels = images[:_DIGITS_TRAIN], labels[:_DIGITS_TRAIN]
    else:
        images, labels = images[_DIGITS_TRAIN:], labels[_DIGITS_TRAIN:]
    return images[..., None], labels


def dataset_info(name: str) -> dict:
    """Static shape/class facts for a dataset id."""
    info = {
        "mnist": {"input_shape": (28, 28, 1), "num_classes": 10},
        "cifar10": {"input_shape": (32, 32, 3), "num_classes": 10},
        "digits": {"input_shape": (8, 8, 1), "num_classes": 10},
    }
    if name not in info:
        raise ConfigError(f"unknown dataset {name!r}; expected one of {DATASET_NAMES}")
    return info[name]


def load_dataset(name: str, split: str, seed: Optional[int] = None,
                 limit: Optional[int] = None) -> ExampleBatch:
    """Load a dataset split as one ExampleBatch in [0, 255] pixel space.

    Ordering is the canonical file order permuted by `seed` when given, so a
    fixed seed always yields the same sequence. `limit` keeps the first that
    many examples after permutation (class balance comes from the shuffle).
    """
    if name not in DATASET_NAMES:
        raise ConfigError(f"unknown dataset {name!r}; expected one of {DATASET_NAMES}")
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}; expected one of {SPLITS}")
    loader = {"mnist": _load_mnist, "cifar10": _load_cifar10, "digits": _load_digits}[name]
    images, labels = loader(split)
    images_t = torch.from_numpy(np.ascontiguousarray(images))
    labels_t = torch.from_numpy(np.ascontiguousarray(labels))
    if seed is not None:
        perm = torch.randperm(len(labels_t), generator=generator(seed))
        images_t, labels_t = images_t[perm], labels_t[perm]
    if limit is not None:
        images_t, labels_t = images_t[:limit], labels_t[:limit]
    return ExampleBatch(images=images_t, labels=labels_t)


def dataset_available(name: str) -> bool:
    """True when the dataset can be loaded in this environment right now."""
    try:
        load_dataset(name, "test", limit=1)
        return True
    except DataError:
        return False
