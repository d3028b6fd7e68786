"""Dataset ingestion, class-incremental task splits, preprocessing and augmentation."""
from __future__ import annotations

import gzip
import hashlib
import json
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


class SplitError(ValueError):
    pass


@dataclass
class LabeledSet:
    images: np.ndarray
    labels: np.ndarray
    ids: np.ndarray = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.ids is None:
            self.ids = np.arange(len(self.labels), dtype=np.int64)
        if not (len(self.images) == len(self.labels) == len(self.ids)):
            raise ValueError("images, labels and ids differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, mask_or_index) -> "LabeledSet":
        return LabeledSet(self.images[mask_or_index], self.labels[mask_or_index], self.ids[mask_or_index])

    def of_classes(self, classes) -> "LabeledSet":
        return self.subset(np.isin(self.labels, list(classes)))

    @property
    def classes(self) -> list[int]:
        return sorted(set(self.labels.tolist()))


# --- IDX ------------------------------------------------------------------

def _open_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    return gzip.decompress(raw) if path.suffix == ".gz" else raw


def read_idx(path, expected_magic: Optional[int] = None) -> np.ndarray:
    """Parse an unsigned-byte IDX file into an array shaped by its header."""
    raw = _open_bytes(path)
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: file is {len(raw)} bytes, magic needs bytes 0-3")
    magic = struct.unpack(">I", raw[:4])[0]
    if raw[0] != 0 or raw[1] != 0 or raw[2] != 0x08:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x} at byte offset 0 (need unsigned-byte IDX)")
    if expected_magic is not None and magic != expected_magic:
        raise IdxFormatError(f"{path}: magic 0x{magic:08x} at byte offset 0, expected 0x{expected_magic:08x}")
    ndim = raw[3]
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise IdxFormatError(f"{path}: truncated header, dimensions need bytes 4-{header_end - 1}, "
                             f"file has {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    expected = int(np.prod(dims)) if dims else 0
    payload = len(raw) - header_end
    if payload < expected:
        raise IdxFormatError(f"{path}: truncated payload, expected {expected} bytes from offset {header_end}, "
                             f"found {payload} (file ends at byte {len(raw)})")
    if payload > expected:
        raise IdxFormatError(f"{path}: {payload - expected} trailing bytes after offset {header_end + expected}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header_end).reshape(dims).copy()


def write_idx(path, array: np.ndarray):
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = bytes([0, 0, 0x08, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    data = header + array.tobytes()
    path = Path(path)
    path.write_bytes(gzip.compress(data, mtime=0) if path.suffix == ".gz" else data)


def load_idx(images_path, labels_path) -> LabeledSet:
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"count mismatch: {images_path} header (bytes 4-7) declares {images.shape[0]} "
                             f"images, {labels_path} header (bytes 4-7) declares {labels.shape[0]} labels")
    return LabeledSet(images, labels.astype(np.int64))


def corpus_files(name: str) -> dict[str, Path]:
    """Paths of a shipped IDX corpus (``digits`` or ``letters``)."""
    root = resources.files("adaptmerge") / "corpora"
    files = {}
    for split in ("train", "test"):
        for kind in ("images", "labels"):
            p = Path(str(root / f"{name}-{split}-{kind}.idx"))
            if not p.exists():
                raise FileNotFoundError(f"no shipped corpus file {p.name}")
            files[f"{split}_{kind}"] = p
    return files


def load_corpus(name: str) -> tuple[LabeledSet, LabeledSet]:
    f = corpus_files(name)
    return load_idx(f["train_images"], f["train_labels"]), load_idx(f["test_images"], f["test_labels"])


# --- synthetic ------------------------------------------------------------

@dataclass
class SyntheticData:
    train: LabeledSet
    test: LabeledSet
    patterns: np.ndarray
    distances: np.ndarray
    sigma: float


def generate_synthetic(num_classes: int, per_class: int, image_size: int = 16, sigma: float = 0.0,
                       seed: int = 0, patterns: Optional[np.ndarray] = None, test_per_class: int = 0,
                       channels: int = 1) -> SyntheticData:
    """Class mean pattern plus isotropic gaussian noise, images already in float form.

    ``distances`` holds pairwise Euclidean distances between the patterns.
    """
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    rng = np.random.default_rng(seed)
    shape = (channels, image_size, image_size)
    if patterns is None:
        patterns = rng.uniform(0.0, 1.0, size=(num_classes, *shape)).astype(np.float32)
    patterns = np.asarray(patterns, dtype=np.float32)
    if patterns.shape != (num_classes, *shape):
        raise ValueError(f"patterns shape {patterns.shape} != {(num_classes, *shape)}")
    flat = patterns.reshape(num_classes, -1)
    diff = flat[:, None, :] - flat[None, :, :]
    distances = np.sqrt((diff.astype(np.float64) ** 2).sum(-1))
    if num_classes > 1 and np.any(distances[~np.eye(num_classes, dtype=bool)] == 0):
        raise ValueError("class mean patterns must be distinct")

    def draw(n):
        labels = np.repeat(np.arange(num_classes), n)
        noise = rng.standard_normal((len(labels), *shape)).astype(np.float32)
        return (patterns[labels] + sigma * noise).astype(np.float32), labels

    x, y = draw(per_class)
    train = LabeledSet(x, y)
    xt, yt = draw(test_per_class)
    test = LabeledSet(xt, yt, np.arange(len(yt)) + len(y))
    return SyntheticData(train, test, patterns, distances, float(sigma))


def block_patterns(num_classes: int, image_size: int, grid: int, seed: int = 0, channels: int = 1) -> np.ndarray:
    """Uniform random class means, constant over (image_size/grid)-pixel squares."""
    if grid < 1 or image_size % grid:
        raise ValueError(f"grid {grid} must divide image size {image_size}")
    rng = np.random.default_rng([seed, 1])
    coarse = rng.uniform(0.0, 1.0, size=(num_classes, channels, grid, grid))
    cell = image_size // grid
    return np.repeat(np.repeat(coarse, cell, axis=2), cell, axis=3).astype(np.float32)


def read_synthetic_spec(path) -> dict:
    """``key = value`` lines, ``#`` comments. Known keys: num_classes, per_class,
    test_per_class, image_size, channels, sigma, seed."""
    ints = {"num_classes", "per_class", "test_per_class", "image_size", "channels", "seed"}
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in ints:
            out[key] = int(value)
        elif key == "sigma":
            out[key] = float(value)
        else:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
    return out


# --- task splitting -------------------------------------------------------

@dataclass
class TaskSpec:
    task_id: int
    classes: list
    train: LabeledSet
    test: LabeledSet


@dataclass
class TaskSequence:
    tasks: list
    class_order: list
    class_order_seed: int = 0

    def __len__(self):
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    @property
    def classes(self) -> list[int]:
        return [c for t in self.tasks for c in t.classes]

    def validate(self, universe: Optional[Sequence[int]] = None):
        seen: set[int] = set()
        for t in self.tasks:
            cs = set(t.classes)
            if cs & seen:
                raise SplitError(f"task {t.task_id} repeats class(es) {sorted(cs & seen)}")
            seen |= cs
            for part in (t.train, t.test):
                stray = set(part.labels.tolist()) - cs
                if stray:
                    raise SplitError(f"task {t.task_id} holds samples of foreign class(es) {sorted(stray)}")
        if universe is not None and seen != set(universe):
            raise SplitError(f"tasks cover {sorted(seen)}, universe is {sorted(universe)}")

    def manifest(self) -> dict:
        def split_hash(part: LabeledSet) -> str:
            h = hashlib.sha256()
            h.update(np.ascontiguousarray(part.ids).tobytes())
            h.update(np.ascontiguousarray(part.labels).tobytes())
            h.update(np.ascontiguousarray(part.images).tobytes())
            return h.hexdigest()

        return {"class_order_seed": self.class_order_seed, "class_order": [int(c) for c in self.class_order],
                "tasks": [{"task_id": t.task_id, "classes": [int(c) for c in t.classes],
                           "train_count": len(t.train), "test_count": len(t.test),
                           "train_sha256": split_hash(t.train), "test_sha256": split_hash(t.test)}
                          for t in self.tasks]}

    def write_manifest(self, path):
        Path(path).write_text(json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n")


def split_tasks(train: LabeledSet, test: LabeledSet, classes_per_task: Optional[int] = None,
                class_order_seed: int = 0, partition: Optional[Sequence[Sequence[int]]] = None,
                universe: Optional[Sequence[int]] = None) -> TaskSequence:
    """Seeded class permutation chunked into tasks, or an explicit partition used as given."""
    universe = sorted(set(train.labels.tolist())) if universe is None else sorted(int(c) for c in universe)
    if partition:
        groups = [[int(c) for c in g] for g in partition]
        order = [c for g in groups for c in g]
        if sorted(order) != universe:
            raise SplitError(f"partition covers {sorted(order)}, universe is {universe}")
    else:
        if not classes_per_task or classes_per_task < 1:
            raise SplitError("classes_per_task must be positive when no partition is given")
        if len(universe) % classes_per_task:
            raise SplitError(f"{len(universe)} classes not divisible into tasks of {classes_per_task}")
        order = [int(c) for c in np.random.default_rng(class_order_seed).permutation(universe)]
        groups = [order[i:i + classes_per_task] for i in range(0, len(order), classes_per_task)]
    tasks = [TaskSpec(t, g, train.of_classes(g), test.of_classes(g)) for t, g in enumerate(groups, start=1)]
    seq = TaskSequence(tasks, order, class_order_seed)
    seq.validate(universe)
    return seq


def cap_per_class(data: LabeledSet, limit: int, seed: int) -> LabeledSet:
    """Keep at most ``limit`` samples per class (seeded, original order kept). 0 keeps everything."""
    if not limit:
        return data
    keep = []
    for c in data.classes:
        idx = np.flatnonzero(data.labels == c)
        if len(idx) > limit:
            idx = np.sort(np.random.default_rng([seed, c]).choice(idx, size=limit, replace=False))
        keep.append(idx)
    return data.subset(np.sort(np.concatenate(keep)))


# --- preprocessing --------------------------------------------------------

def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Bilinear weights with half-pixel centres and edge clamping."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for o in range(n_out):
        src = min(max((o + 0.5) * scale - 0.5, 0.0), n_in - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    return m


def resize_bilinear(images: np.ndarray, size: int) -> np.ndarray:
    """Resize the last two axes to ``size`` x ``size``."""
    h, w = images.shape[-2:]
    if h == 0 or w == 0:
        raise ValueError("cannot resize an image with a zero dimension")
    if (h, w) == (size, size):
        return images.astype(np.float64)
    ry, rx = _interp_matrix(h, size), _interp_matrix(w, size)
    return np.einsum("oh,...hw,pw->...op", ry, images.astype(np.float64), rx)


def preprocess(images: np.ndarray, size: int = 32) -> np.ndarray:
    """uint8 pixels (H,W), (C,H,W) or a batch thereof -> float32 (..., C, size, size) in [0, 1].

    A 2-D image or a 3-D batch of 2-D images gains a channel axis.
    """
    images = np.asarray(images)
    if images.ndim < 2 or 0 in images.shape[-2:]:
        raise ValueError(f"invalid image shape {images.shape}")
    out = resize_bilinear(images, size) / 255.0
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def to_batch(images: np.ndarray, size: int, channels: int = 1) -> np.ndarray:
    """Raw IDX-style (N,H,W) uint8 or already-float (N,C,H,W) samples -> (N,C,size,size) float32."""
    images = np.asarray(images)
    if np.issubdtype(images.dtype, np.floating):
        if images.ndim == 3:
            images = images[:, None]
        return images.astype(np.float32) if images.shape[-1] == size else \
            resize_bilinear(images, size).astype(np.float32)
    x = preprocess(images, size)
    if x.ndim == 3:
        x = x[:, None]
    if x.shape[1] != channels:
        if x.shape[1] == 1:
            x = np.repeat(x, channels, axis=1)
        else:
            raise ValueError(f"samples have {x.shape[1]} channels, config expects {channels}")
    return x


def hflip(x: np.ndarray) -> np.ndarray:
    return x[..., ::-1].copy()


def augment(sample: np.ndarray, rng: np.random.Generator, training: bool = True) -> np.ndarray:
    """Horizontal mirror with probability 0.5; identity outside training."""
    if not training:
        return sample
    return hflip(sample) if rng.random() < 0.5 else sample


def flip_coins(rng: np.random.Generator, n: int) -> np.ndarray:
    """The per-sample coin stream used by ``augment_batch``."""
    return rng.random(n) < 0.5


def augment_batch(batch: np.ndarray, rng: np.random.Generator, training: bool = True) -> np.ndarray:
    if not training:
        return batch
    coins = flip_coins(rng, len(batch))
    out = batch.copy()
    out[coins] = out[coins][..., ::-1]
    return out


@dataclass
class DatasetConfig:
    source: str = "digits"
    classes_per_task: int = 2
    partition: str = ""
    class_order_seed: int = 0
    image_size: int = 32
    channels: int = 1
    normalization: str = "unit"
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    max_train_per_class: int = 0
    max_test_per_class: int = 0
    exclude_classes: list = field(default_factory=list)

    def parsed_partition(self) -> Optional[list]:
        if not self.partition:
            return None
        return [[int(c) for c in g.split(",") if c.strip()] for g in self.partition.split(";") if g.strip()]
