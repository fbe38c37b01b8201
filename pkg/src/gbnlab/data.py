"""Datasets, batching, checkpoints and the metrics file format.

Checkpoint layout (all integers little-endian)::

    b"GBNCKPT\\n"                     8-byte magic
    u32 version                        currently 1
    u64 n, n bytes                     UTF-8 JSON descriptor, keys sorted:
                                       {"topology": ..., "rng_state": ...}
    u32 count                          number of named arrays
    count times:
        u16 len, len bytes             UTF-8 array name
        u8  dtype                      1 = float64, 2 = int64
        u8  ndim
        ndim x u64                     extents
        raw little-endian data

Array names are parameter names (``conv1.weight``), branch buffers
(``norm1.branches.2.running_mean``) and batch counters
(``...num_batches_seen``, stored as int64). Entries are written in model
order, so saving the same state twice gives identical bytes.

Metrics are JSON lines; every line is a flat object with ``run_id``,
``epoch`` (an int or ``"final"``), ``metric`` and ``value`` plus optional
``attack``, ``domain`` and ``layer``. Floats carry 17 significant digits so
they round-trip exactly.
"""
from __future__ import annotations

import gzip
import io
import json
import math
import os
import struct
from dataclasses import dataclass
from typing import Iterator, List, Optional

import numpy as np

from .layers import BatchNorm, Module

IMAGES_MAGIC = 2051
LABELS_MAGIC = 2049
CHECKPOINT_MAGIC = b"GBNCKPT\n"
CHECKPOINT_VERSION = 1
_DTYPES = {1: np.dtype("<f8"), 2: np.dtype("<i8")}
_DTYPE_CODES = {np.dtype("<f8"): 1, np.dtype("<i8"): 2}


class IdxFormatError(ValueError):
    pass


class IdxConsistencyError(ValueError):
    pass


class IdxLengthError(ValueError):
    pass


class CheckpointVersionError(ValueError):
    pass


class TopologyError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    name: str = "dataset"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, count: int, name: Optional[str] = None) -> "Dataset":
        return Dataset(self.images[:count], self.labels[:count], name or self.name)


# -- IDX ---------------------------------------------------------------------
def _read_bytes(path) -> bytes:
    path = os.fspath(path)
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def parse_idx(raw: bytes, expected_magic: int, what: str = "file") -> np.ndarray:
    """Decode one IDX blob of unsigned bytes, checking the magic number."""
    if len(raw) < 4:
        raise IdxLengthError(f"{what}: {len(raw)} bytes, too short for a header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxFormatError(f"{what}: magic {magic} (0x{magic:08x}), expected {expected_magic}")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxLengthError(f"{what}: header needs {header} bytes, file has {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = math.prod(dims)
    if len(raw) - header < count:
        raise IdxLengthError(f"{what}: expected {count} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def read_idx(images_path, labels_path, name: str = "mnist") -> Dataset:
    """Load an IDX image/label pair (optionally gzipped) with pixels scaled to [0, 1]."""
    images = parse_idx(_read_bytes(images_path), IMAGES_MAGIC, os.fspath(images_path))
    labels = parse_idx(_read_bytes(labels_path), LABELS_MAGIC, os.fspath(labels_path))
    if images.shape[0] != labels.shape[0]:
        raise IdxConsistencyError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    pixels = images.astype(np.float64) / 255.0
    return Dataset(pixels.reshape(images.shape[0], 1, *images.shape[1:]), labels.astype(np.int64), name)


def encode_idx(array: np.ndarray) -> bytes:
    """IDX bytes for a uint8 array (magic 2049 for 1-D, 2051 for 3-D)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x0800 | array.ndim
    return struct.pack(f">I{array.ndim}I", magic, *array.shape) + array.tobytes()


def load_mnist(directory, train_count: Optional[int] = None, test_count: Optional[int] = None) -> tuple:
    """``(train, test)`` from the four standard file names, gzipped or not."""
    def find(stem):
        for suffix in ("", ".gz"):
            path = os.path.join(directory, stem + suffix)
            if os.path.exists(path):
                return path
        raise FileNotFoundError(os.path.join(directory, stem))

    train = read_idx(find("train-images-idx3-ubyte"), find("train-labels-idx1-ubyte"), "mnist-train")
    test = read_idx(find("t10k-images-idx3-ubyte"), find("t10k-labels-idx1-ubyte"), "mnist-test")
    if train_count is not None:
        train = train.subset(train_count)
    if test_count is not None:
        test = test.subset(test_count)
    return train, test


def synth_blobs(num_classes: int, num_per_class: int, dim: int, separation: float, seed: int,
                sigma: float = 1.0) -> Dataset:
    """Gaussian blobs around ``separation * e_c``, affinely mapped into [0, 1].

    The interval [-4 sigma, separation + 4 sigma] is mapped onto [0, 1]
    before clamping, so clamping only touches points more than four standard
    deviations away from their centre.
    """
    if separation <= 0:
        raise ValueError("separation must be positive")
    if dim < num_classes:
        raise ValueError("need dim >= num_classes for one-hot centres")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(num_classes), num_per_class)
    centres = np.zeros((num_classes, dim))
    centres[np.arange(num_classes), np.arange(num_classes)] = separation
    points = centres[labels] + sigma * rng.standard_normal((labels.size, dim))
    images = np.clip((points + 4.0 * sigma) / (separation + 8.0 * sigma), 0.0, 1.0)
    order = rng.permutation(labels.size)
    return Dataset(images[order], labels[order], f"blobs-{num_classes}x{num_per_class}")


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batches(ds: Dataset, batch_size: int, seed: int, epoch: int) -> List[tuple]:
    """Seeded shuffled mini-batches; a trailing batch with one sample is dropped."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = epoch_permutation(len(ds), seed, epoch)
    out = []
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        if len(idx) < 2:
            break
        out.append((ds.images[idx], ds.labels[idx]))
    return out


def iterate(ds: Dataset, batch_size: int) -> Iterator[tuple]:
    """Unshuffled batches covering every sample (for evaluation)."""
    for start in range(0, len(ds), batch_size):
        yield start, ds.images[start:start + batch_size], ds.labels[start:start + batch_size]


# -- checkpoints -------------------------------------------------------------
def model_state(model: Module) -> list:
    """Ordered ``(name, array)`` pairs covering parameters and BN buffers."""
    entries = [(name, p.data) for name, p in model.named_parameters()]
    for prefix, bn in _named_batchnorms(model):
        entries.append((prefix + "running_mean", bn.running_mean))
        entries.append((prefix + "running_var", bn.running_var))
        entries.append((prefix + "num_batches_seen", np.array(bn.num_batches_seen, dtype=np.int64)))
    return entries


def _named_batchnorms(module: Module, prefix: str = "") -> Iterator[tuple]:
    for name, value in vars(module).items():
        children = []
        if isinstance(value, Module):
            children = [(f"{prefix}{name}.", value)]
        elif isinstance(value, (list, tuple)):
            children = [(f"{prefix}{name}.{i}.", v) for i, v in enumerate(value) if isinstance(v, Module)]
        for child_prefix, child in children:
            if isinstance(child, BatchNorm):
                yield child_prefix, child
            yield from _named_batchnorms(child, child_prefix)


def _topology(model) -> dict:
    if hasattr(model, "topology"):
        return model.topology()
    return {"parameters": [[n, list(p.shape)] for n, p in model.named_parameters()]}


def encode_checkpoint(model: Module, rng_state: Optional[dict] = None) -> bytes:
    descriptor = json.dumps({"topology": _topology(model), "rng_state": rng_state},
                            sort_keys=True, separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<Q", len(descriptor)))
    buf.write(descriptor)
    entries = model_state(model)
    buf.write(struct.pack("<I", len(entries)))
    for name, array in entries:
        arr = np.asarray(array)
        arr = arr.astype("<i8") if arr.dtype.kind in "iu" else arr.astype("<f8")
        encoded = name.encode()
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def save_checkpoint(model: Module, path, rng_state: Optional[dict] = None):
    data = encode_checkpoint(model, rng_state)
    with open(path, "wb") as fh:
        fh.write(data)


class _Reader:
    def __init__(self, raw: bytes, path: str):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise IdxLengthError(f"{self.path}: checkpoint truncated at byte {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(raw: bytes, path: str = "<bytes>") -> tuple:
    """``(descriptor, {name: array})`` from checkpoint bytes."""
    r = _Reader(raw, path)
    if r.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointVersionError(f"{path}: not a checkpoint file")
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, this build reads {CHECKPOINT_VERSION}")
    (n,) = r.unpack("<Q")
    descriptor = json.loads(r.take(n).decode())
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        code, ndim = r.unpack("<BB")
        dtype = _DTYPES[code]
        shape = r.unpack(f"<{ndim}Q")
        size = math.prod(shape) * dtype.itemsize
        arrays[name] = np.frombuffer(r.take(size), dtype=dtype).reshape(shape).copy()
    return descriptor, arrays


def _first_difference(expected, found, path="topology"):
    if isinstance(expected, dict) and isinstance(found, dict):
        for key in sorted(set(expected) | set(found)):
            if key not in expected or key not in found:
                return f"{path}.{key}: {expected.get(key, '<missing>')!r} vs {found.get(key, '<missing>')!r}"
            diff = _first_difference(expected[key], found[key], f"{path}.{key}")
            if diff:
                return diff
        return None
    if isinstance(expected, list) and isinstance(found, list):
        for i, (a, b) in enumerate(zip(expected, found)):
            diff = _first_difference(a, b, f"{path}[{i}]")
            if diff:
                return diff
        if len(expected) != len(found):
            return f"{path}: length {len(expected)} vs {len(found)}"
        return None
    return None if expected == found else f"{path}: {expected!r} vs {found!r}"


def load_checkpoint(model: Module, path) -> Optional[dict]:
    """Restore ``model`` in place from ``path``; returns the stored RNG state."""
    with open(path, "rb") as fh:
        raw = fh.read()
    descriptor, arrays = decode_checkpoint(raw, os.fspath(path))
    diff = _first_difference(_topology(model), descriptor["topology"])
    if diff:
        raise TopologyError(f"checkpoint does not match model, first difference at {diff}")
    params = dict(model.named_parameters())
    for name, p in params.items():
        p.data = arrays[name].copy()
        p.grad = None
    for prefix, bn in _named_batchnorms(model):
        bn.running_mean = arrays[prefix + "running_mean"].copy()
        bn.running_var = arrays[prefix + "running_var"].copy()
        bn.num_batches_seen = int(arrays[prefix + "num_batches_seen"])
    return descriptor.get("rng_state")


# -- metrics -----------------------------------------------------------------
def _format_value(v):
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    return float(format(float(v), ".17g"))


def metric_record(run_id: str, epoch, metric: str, value, **extra) -> dict:
    record = {"run_id": run_id, "epoch": epoch, "metric": metric, "value": _format_value(value)}
    for key in ("attack", "domain", "layer"):
        if extra.get(key) is not None:
            record[key] = extra[key]
    return record


def dump_record(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def write_metrics(records, path, append: bool = False):
    """Write metric records (dicts, or an object with ``to_records()``) as JSON lines."""
    if hasattr(records, "to_records"):
        records = records.to_records()
    try:
        with open(path, "a" if append else "w", encoding="utf-8") as fh:
            for record in records:
                fh.write(dump_record(record) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write metrics to {os.fspath(path)}: {exc}") from exc


def read_metrics(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
