"""Datasets: IDX (MNIST) ingestion, synthetic generators and seeded splits."""
from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError, ContractError, FormatError
from .prob import RngStream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

SPLITS = ("train", "val", "test")


@dataclass
class Dataset:
    """Rows of ``inputs`` in [0, 1], each tagged with a split name."""

    name: str
    inputs: np.ndarray
    split: np.ndarray
    labels: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.split = np.asarray(self.split, dtype=object)
        if self.inputs.ndim != 2 or len(self.split) != len(self.inputs):
            raise ContractError("inputs must be N x D with one split tag per row")
        if self.inputs.size and (self.inputs.min() < 0 or self.inputs.max() > 1):
            raise ContractError("dataset values must lie in [0, 1]")

    def part(self, name: str) -> np.ndarray:
        return self.inputs[self.split == name]

    @property
    def train(self) -> np.ndarray:
        return self.part("train")

    @property
    def val(self) -> np.ndarray:
        return self.part("val")

    @property
    def test(self) -> np.ndarray:
        return self.part("test")

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def __len__(self):
        return len(self.inputs)


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Parse an unsigned-byte IDX file into an array of its declared shape."""
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic not in (IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC):
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x} "
                          f"(expected 0x{IDX_IMAGES_MAGIC:08x} or 0x{IDX_LABELS_MAGIC:08x})")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    expected = int(np.prod(dims))
    payload = len(raw) - header
    if payload != expected:
        raise FormatError(f"{path}: payload length {payload} does not match dims {dims} ({expected} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.dtype != np.uint8 or array.ndim not in (1, 3):
        raise ContractError("write_idx expects uint8 labels (1-D) or images (3-D)")
    magic = IDX_IMAGES_MAGIC if array.ndim == 3 else IDX_LABELS_MAGIC
    blob = struct.pack(">I", magic) + struct.pack(">" + "I" * array.ndim, *array.shape) + array.tobytes()
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.GzipFile(path, "wb", mtime=0) as f:
            f.write(blob)
    else:
        path.write_bytes(blob)


def load_idx(images_path, labels_path=None, name="mnist") -> Dataset:
    """Images scaled by 1/255 and flattened; every row tagged ``train`` until split."""
    images = read_idx(images_path)
    if images.ndim != 3:
        raise FormatError(f"{images_path}: expected a 3-D image tensor, got {images.ndim}-D")
    labels = None
    if labels_path is not None:
        labels = read_idx(labels_path)
        if labels.ndim != 1 or len(labels) != len(images):
            raise FormatError(f"{labels_path}: {len(labels)} labels for {len(images)} images")
    inputs = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return Dataset(name, inputs, np.full(len(inputs), "train", dtype=object), labels)


def split_dataset(ds: Dataset, n_train: int, n_val: int, n_test: int, seed: int) -> Dataset:
    """Seeded disjoint train/val/test selection from the rows of ``ds``."""
    total = n_train + n_val + n_test
    if min(n_train, n_val, n_test) < 0 or n_train < 1 or total > len(ds):
        raise ContractError(f"cannot take {n_train}/{n_val}/{n_test} rows from {len(ds)}")
    order = RngStream(seed).child("split").permutation(len(ds))[:total]
    split = np.array(["train"] * n_train + ["val"] * n_val + ["test"] * n_test, dtype=object)
    labels = None if ds.labels is None else ds.labels[order]
    return Dataset(ds.name, ds.inputs[order], split, labels, dict(ds.meta))


def split_fractions(n: int, val_frac: float = 0.1, test_frac: float = 0.1) -> tuple[int, int, int]:
    n_val, n_test = int(round(n * val_frac)), int(round(n * test_frac))
    return n - n_val - n_test, n_val, n_test


MIXTURE_MEANS = np.array([[0.3, 0.3], [0.7, 0.7]])
MIXTURE_STD = 0.05
MIXTURE_WEIGHTS = np.array([0.5, 0.5])


def mixture_log_marginal(x) -> np.ndarray:
    """Exact log density of the (unclipped) two-component isotropic mixture."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    D = x.shape[1]
    sq = ((x[:, None, :] - MIXTURE_MEANS[None, :, :D]) ** 2).sum(-1)
    comp = -0.5 * D * math.log(2 * math.pi * MIXTURE_STD ** 2) - sq / (2 * MIXTURE_STD ** 2)
    return logsumexp(comp + np.log(MIXTURE_WEIGHTS), axis=1)


def _gaussian_mixture(n, rng: RngStream):
    comp = rng.integers(0, len(MIXTURE_WEIGHTS), n)
    x = MIXTURE_MEANS[comp] + MIXTURE_STD * rng.normal((n, 2)).numpy()
    return np.clip(x, 0.0, 1.0), comp


def _pinwheel(n, rng: RngStream, arms=5, radial_std=0.3, tangential_std=0.05, rate=0.25):
    labels = rng.integers(0, arms, n)
    eps = rng.normal((n, 2)).numpy() * np.array([radial_std, tangential_std])
    eps[:, 0] += 1.0
    angles = 2 * np.pi * labels / arms + rate * np.exp(eps[:, 0])
    c, s = np.cos(angles), np.sin(angles)
    x = np.stack([c * eps[:, 0] - s * eps[:, 1], s * eps[:, 0] + c * eps[:, 1]], axis=1)
    return np.clip(x / 8.0 + 0.5, 0.0, 1.0), labels


_GENERATORS = {"gaussian-mixture": _gaussian_mixture, "pinwheel": _pinwheel}


def gen_synthetic(kind: str, n: int, seed: int, val_frac: float = 0.1, test_frac: float = 0.1) -> Dataset:
    """2-D toy data in [0, 1]^2, split 80/10/10 by default.

    ``gaussian-mixture`` puts ``log_marginal`` and ``mean`` in ``meta``.
    """
    if kind not in _GENERATORS:
        raise ConfigError(f"unknown synthetic kind {kind!r}; expected one of {sorted(_GENERATORS)}")
    if n < 1:
        raise ContractError("n must be >= 1")
    x, labels = _GENERATORS[kind](n, RngStream(seed).child("synthetic", kind))
    n_train, n_val, n_test = split_fractions(n, val_frac, test_frac) if n >= 10 else (n, 0, 0)
    split = np.array(["train"] * n_train + ["val"] * n_val + ["test"] * n_test, dtype=object)
    meta = {"kind": kind}
    if kind == "gaussian-mixture":
        meta["log_marginal"] = mixture_log_marginal
        meta["mean"] = MIXTURE_WEIGHTS @ MIXTURE_MEANS
    return Dataset(kind, x, split, labels, meta)
