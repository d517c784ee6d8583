"""Datasets, synthetic data and the binary checkpoint format."""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .arch import load_arch, resolve_arch, save_arch
from .bitops import BitTensor

__all__ = [
    "Dataset", "SYNTH_KINDS", "CIFAR_MEAN", "CIFAR_STD", "synth_dataset", "synth_splits",
    "read_cifar_records", "load_cifar10", "load_data", "Checkpoint", "CheckpointError",
    "save_checkpoint", "load_checkpoint", "load_arch", "save_arch", "resolve_arch",
]

SYNTH_KINDS = ("separable2", "blobs10")
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)
CIFAR_RECORD = 3073


@dataclass
class Dataset:
    """Images kept as raw [0, 1] floats; batches are normalized on the way out."""

    raw: np.ndarray
    labels: np.ndarray
    num_classes: int
    mean: tuple[float, ...] = (0.5, 0.5, 0.5)
    std: tuple[float, ...] = (0.25, 0.25, 0.25)
    augment: bool = False
    name: str = "dataset"

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.raw.ndim != 4 or self.raw.shape[0] != self.labels.shape[0]:
            raise ValueError(f"images {self.raw.shape} and labels {self.labels.shape} disagree")
        if len(self) == 0:
            raise ValueError("dataset is empty")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.raw.shape[1:])

    def normalize(self, raw: np.ndarray) -> np.ndarray:
        m = np.asarray(self.mean, dtype=np.float32).reshape(1, -1, 1, 1)
        s = np.asarray(self.std, dtype=np.float32).reshape(1, -1, 1, 1)
        return ((raw - m) / s).astype(np.float32)

    @property
    def images(self) -> np.ndarray:
        return self.normalize(self.raw)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.raw[idx], self.labels[idx], self.num_classes, self.mean, self.std,
                       self.augment, self.name)

    def batches(self, batch_size: int, seed: int | None = None, epoch: int = 0,
                shuffle: bool = True, augment: bool | None = None):
        """Yield ``(images, labels)``; order and augmentation depend only on (seed, epoch)."""
        n = len(self)
        aug = self.augment if augment is None else augment
        rng = np.random.default_rng([0 if seed is None else int(seed), int(epoch)])
        order = rng.permutation(n) if shuffle else np.arange(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            raw = self.raw[idx]
            if aug:
                raw = _augment(raw, rng)
            yield self.normalize(raw), self.labels[idx]


def _augment(raw: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random crop from a zero-padded image and random horizontal flip."""
    n, c, h, w = raw.shape
    padded = np.pad(raw, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    flip = rng.random(n) < 0.5
    out = np.empty_like(raw)
    for i in range(n):
        crop = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
        out[i] = crop[:, :, ::-1] if flip[i] else crop
    return out


# ---------------------------------------------------------------- synthetic data

def synth_dataset(kind: str, n: int, seed, size: int = 8) -> Dataset:
    """Deterministic toy data.

    ``separable2``: the label is the sign of mean(R) - mean(B), which is exactly
    +-0.3 by construction, so a linear rule on channel means separates it.
    ``blobs10``: ten balanced classes around fixed smooth prototypes.
    """
    if kind not in SYNTH_KINDS:
        raise ValueError(f"unknown synthetic kind {kind!r}; expected one of {SYNTH_KINDS}")
    classes = 2 if kind == "separable2" else 10
    if n < classes:
        raise ValueError(f"{kind} needs at least {classes} samples, got {n}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % classes)
    if kind == "separable2":
        noise = rng.uniform(-0.2, 0.2, size=(n, 3, size, size))
        noise -= noise.mean(axis=(2, 3), keepdims=True)
        t = np.where(labels == 1, 1.0, -1.0)
        means = np.stack([0.5 + 0.15 * t, np.full(n, 0.5), 0.5 - 0.15 * t], axis=1)
        raw = noise + means[:, :, None, None]
    else:
        proto = _blob_prototypes(size)
        raw = np.clip(proto[labels] + rng.normal(0.0, 0.08, size=(n, 3, size, size)), 0.0, 1.0)
    return Dataset(raw.astype(np.float32), labels, classes, name=f"synth:{kind}")


def _blob_prototypes(size: int) -> np.ndarray:
    rng = np.random.default_rng(20240607)
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    protos = []
    for _ in range(10):
        color = rng.uniform(0.25, 0.75, size=3)
        fy, fx, ph = rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0), rng.uniform(0, 2 * np.pi)
        pattern = 0.15 * np.sin(2 * np.pi * (fy * yy + fx * xx) + ph)
        protos.append(color[:, None, None] + pattern[None] * rng.choice([-1, 1], size=3)[:, None, None])
    return np.clip(np.stack(protos), 0.0, 1.0)


def synth_splits(kind: str, seed: int, n_train: int = 512, n_test: int = 256,
                 size: int = 8) -> tuple[Dataset, Dataset]:
    return (synth_dataset(kind, n_train, [int(seed), 0], size),
            synth_dataset(kind, n_test, [int(seed), 1], size))


# ---------------------------------------------------------------- CIFAR-10

def read_cifar_records(path) -> tuple[np.ndarray, np.ndarray]:
    """Parse a CIFAR-10 binary batch: 1 label byte then 3072 channel-major pixel bytes."""
    buf = Path(path).read_bytes()
    if len(buf) == 0 or len(buf) % CIFAR_RECORD:
        raise ValueError(f"{path}: size {len(buf)} is not a multiple of {CIFAR_RECORD} "
                         "(truncated or not a CIFAR-10 batch)")
    rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise ValueError(f"{path}: label {int(labels.max())} > 9")
    return rec[:, 1:].reshape(-1, 3, 32, 32), labels


def _cifar_dir(path: Path) -> Path:
    if (path / "cifar-10-batches-bin").is_dir():
        return path / "cifar-10-batches-bin"
    return path


def _stratified(labels: np.ndarray, k: int, classes: int = 10) -> np.ndarray:
    per = -(-k // classes)
    idx = np.concatenate([np.flatnonzero(labels == c)[:per] for c in range(classes)])
    return np.sort(idx)[:k] if idx.size > k else np.sort(idx)


def load_cifar10(directory, train_subset: int | None = None, test_subset: int | None = None,
                 augment: bool = True) -> tuple[Dataset, Dataset]:
    """Load the binary CIFAR-10 batches; subsets take the first images of each class."""
    d = _cifar_dir(Path(directory))
    train_files = [d / f"data_batch_{i}.bin" for i in range(1, 6)]
    test_file = d / "test_batch.bin"
    present = [f for f in train_files if f.exists()]
    if not present or not test_file.exists():
        raise FileNotFoundError(f"no CIFAR-10 binary batches under {directory}")
    parts = [read_cifar_records(f) for f in present]
    x_tr = np.concatenate([p[0] for p in parts])
    y_tr = np.concatenate([p[1] for p in parts])
    x_te, y_te = read_cifar_records(test_file)
    train = Dataset(x_tr.astype(np.float32) / 255.0, y_tr, 10, CIFAR_MEAN, CIFAR_STD, augment, "cifar10")
    test = Dataset(x_te.astype(np.float32) / 255.0, y_te, 10, CIFAR_MEAN, CIFAR_STD, False, "cifar10")
    if train_subset:
        train = train.subset(_stratified(train.labels, train_subset))
    if test_subset:
        test = test.subset(_stratified(test.labels, test_subset))
    return train, test


def load_data(spec: str, seed: int = 0, data_dir=None, image_size: int = 8, **kw) -> tuple[Dataset, Dataset]:
    """Resolve ``synth:KIND[:N]``, ``cifar10[:N]`` or a directory of CIFAR batches."""
    if spec.startswith("synth:"):
        parts = spec.split(":")
        n = int(parts[2]) if len(parts) > 2 else 512
        return synth_splits(parts[1], seed, n, max(n // 2, 10), image_size)
    if spec == "cifar10" or spec.startswith("cifar10:"):
        if data_dir is None:
            raise FileNotFoundError("cifar10 needs a data directory (--data-dir or INSTABNN_DATA)")
        sub = int(spec.split(":")[1]) if ":" in spec else None
        return load_cifar10(data_dir, train_subset=sub, **kw)
    return load_cifar10(spec, **kw)


# ---------------------------------------------------------------- checkpoints

MAGIC = b"INSTABNN"
VERSION = 1
_TAGS = {"f32": 0, "bits": 1, "i32": 2, "f64": 3}
_TAG_NAMES = {v: k for k, v in _TAGS.items()}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    meta: dict
    tensors: "OrderedDict[str, object]" = field(default_factory=OrderedDict)

    def model_state(self) -> dict:
        return {k: v for k, v in self.tensors.items() if not k.startswith("optim.")}

    def optim_state(self) -> dict:
        return {k[len("optim."):]: v for k, v in self.tensors.items() if k.startswith("optim.")}


def _encode(name: str, value) -> bytes:
    if isinstance(value, BitTensor):
        tag, dims, payload = _TAGS["bits"], value.shape, value.words.astype("<u8").tobytes()
    else:
        arr = np.asarray(value)
        if arr.dtype == np.float64:
            tag, arr = _TAGS["f64"], arr.astype("<f8")
        elif np.issubdtype(arr.dtype, np.floating):
            tag, arr = _TAGS["f32"], arr.astype("<f4")
        elif np.issubdtype(arr.dtype, np.integer) or arr.dtype == np.bool_:
            tag, arr = _TAGS["i32"], arr.astype("<i4")
        else:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        dims, payload = arr.shape, np.ascontiguousarray(arr).tobytes()
    raw_name = name.encode("utf-8")
    head = struct.pack("<H", len(raw_name)) + raw_name + struct.pack("<BB", tag, len(dims))
    head += struct.pack(f"<{len(dims)}I", *dims) if dims else b""
    return head + struct.pack("<Q", len(payload)) + payload


def save_checkpoint(path, tensors: dict, meta: dict | None = None) -> None:
    """Write tensors (ndarrays or BitTensors) and JSON metadata, little-endian."""
    meta_raw = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    out = [MAGIC, struct.pack("<II", VERSION, len(meta_raw)), meta_raw, struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        out.append(_encode(name, value))
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(out))
    tmp.replace(path)


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, meta_len = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {VERSION}")
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt metadata ({exc})") from None
    (count,) = r.unpack("<I")
    tensors: OrderedDict[str, object] = OrderedDict()
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        tag, ndim = r.unpack("<BB")
        dims = r.unpack(f"<{ndim}I") if ndim else ()
        (plen,) = r.unpack("<Q")
        payload = r.take(plen)
        if name in tensors:
            raise CheckpointError(f"{path}: duplicate tensor {name!r}")
        kind = _TAG_NAMES.get(tag)
        if kind is None:
            raise CheckpointError(f"{path}: {name}: unknown dtype tag {tag}")
        if kind == "bits":
            if len(dims) != 4:
                raise CheckpointError(f"{path}: {name}: bit-packed tensor needs 4 dims")
            n, c, h, w = dims
            words_per = -(-(h * w) // 64)
            if plen != n * c * words_per * 8:
                raise CheckpointError(f"{path}: {name}: payload size does not match shape {dims}")
            words = np.frombuffer(payload, dtype="<u8").reshape(n, c, words_per).astype(np.uint64)
            tensors[name] = BitTensor(tuple(dims), words)
            continue
        dt = {"f32": "<f4", "i32": "<i4", "f64": "<f8"}[kind]
        expected = int(np.prod(dims, dtype=np.int64)) * np.dtype(dt).itemsize
        if plen != expected:
            raise CheckpointError(f"{path}: {name}: payload {plen} bytes, shape {dims} needs {expected}")
        arr = np.frombuffer(payload, dtype=dt).reshape(dims)
        tensors[name] = arr.astype(arr.dtype.newbyteorder("=")).copy()
    if r.pos != len(r.buf):
        raise CheckpointError(f"{path}: {len(r.buf) - r.pos} trailing bytes")
    return Checkpoint(meta, tensors)
