"""Fixed-budget, class-balanced random replay buffer."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np


class ReplayError(ValueError):
    pass


@dataclass
class ReplayDraw:
    images: np.ndarray
    labels: np.ndarray
    available: bool


def class_quotas(budget: int, classes) -> dict[int, int]:
    """floor(M / k) per class; the M - q*k leftover slots go one each to the lowest class ids."""
    classes = sorted(int(c) for c in classes)
    k = len(classes)
    if k == 0:
        return {}
    if budget < k:
        raise ReplayError(f"budget {budget} cannot hold one sample for each of {k} classes")
    q, rem = divmod(budget, k)
    return {c: q + (1 if i < rem else 0) for i, c in enumerate(classes)}


def _rng(seed: int, *salt: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, *salt])


class ReplayBuffer:
    """Exemplars of past classes. ``store[c]`` holds (sample ids, images) for class ``c``."""

    def __init__(self, budget: int, seed: int = 0):
        if budget < 1:
            raise ReplayError("replay budget must be positive")
        self.budget = int(budget)
        self.seed = int(seed)
        self.ids: dict[int, np.ndarray] = {}
        self.images: dict[int, np.ndarray] = {}

    @property
    def classes(self) -> list[int]:
        return sorted(self.ids)

    def __len__(self) -> int:
        return int(sum(len(v) for v in self.ids.values()))

    def counts(self) -> dict[int, int]:
        return {c: len(self.ids[c]) for c in self.classes}

    @property
    def quota(self) -> int:
        """Base per-class quota granted to stored classes (0 when empty)."""
        return self.budget // len(self.ids) if self.ids else 0

    def contents(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """All stored (images, labels, ids) ordered by class then storage order."""
        if not self.ids:
            return np.zeros((0,)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
        cs = self.classes
        images = np.concatenate([self.images[c] for c in cs])
        labels = np.concatenate([np.full(len(self.ids[c]), c, dtype=np.int64) for c in cs])
        ids = np.concatenate([self.ids[c] for c in cs])
        return images, labels, ids

    def copy(self) -> "ReplayBuffer":
        other = ReplayBuffer(self.budget, self.seed)
        other.ids = {c: v.copy() for c, v in self.ids.items()}
        other.images = {c: v.copy() for c, v in self.images.items()}
        return other


def update_buffer(buffer: ReplayBuffer, images: np.ndarray, labels: np.ndarray,
                  ids: Optional[np.ndarray] = None, seed: Optional[int] = None) -> ReplayBuffer:
    """Admit a new task's classes and rebalance every class to its quota.

    Returns a new buffer; the input is left untouched.
    """
    labels = np.asarray(labels, dtype=np.int64)
    ids = np.arange(len(labels), dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
    if len(images) != len(labels) or len(ids) != len(labels):
        raise ReplayError("images, labels and ids must have equal length")
    seed = buffer.seed if seed is None else int(seed)
    new_classes = sorted(set(labels.tolist()))
    clash = set(new_classes) & set(buffer.ids)
    if clash:
        raise ReplayError(f"class id(s) {sorted(clash)} already stored: task label sets must be disjoint")
    quotas = class_quotas(buffer.budget, buffer.classes + new_classes)

    out = ReplayBuffer(buffer.budget, buffer.seed)
    for c in buffer.classes:
        have = len(buffer.ids[c])
        keep = min(have, quotas[c])
        if keep < have:
            sel = np.sort(_rng(seed, 1, c).choice(have, size=keep, replace=False))
        else:
            sel = np.arange(have)
        out.ids[c] = buffer.ids[c][sel]
        out.images[c] = buffer.images[c][sel]
    for c in new_classes:
        idx = np.flatnonzero(labels == c)
        take = min(len(idx), quotas[c])
        sel = np.sort(_rng(seed, 2, c).choice(len(idx), size=take, replace=False))
        out.ids[c] = ids[idx[sel]]
        out.images[c] = np.asarray(images)[idx[sel]]
    return out


def draw_other_samples(buffer: ReplayBuffer, n: int, rng: np.random.Generator, other_label: int,
                       replace: Optional[bool] = None) -> ReplayDraw:
    """Uniform draw over all stored samples, relabelled with ``other_label``.

    Sampling is without replacement unless ``n`` exceeds the buffer size or
    ``replace`` is set. An empty buffer yields an empty draw with
    ``available=False``.
    """
    if n < 1:
        raise ReplayError("n must be >= 1")
    size = len(buffer)
    if size == 0:
        return ReplayDraw(np.zeros((0,)), np.zeros(0, dtype=np.int64), False)
    images, _, _ = buffer.contents()
    if replace is None:
        replace = n > size
    idx = rng.choice(size, size=n, replace=replace)
    return ReplayDraw(images[idx], np.full(n, other_label, dtype=np.int64), True)


def build_balanced_set(buffer: ReplayBuffer, images: np.ndarray, labels: np.ndarray,
                       seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Current-task classes undersampled to the stored-class quota, joined with the buffer.

    At the first task (empty buffer) the cap is floor(M / |C_t|).
    """
    labels = np.asarray(labels, dtype=np.int64)
    current = sorted(set(labels.tolist()))
    if not current:
        raise ReplayError("current task has no samples")
    cap = buffer.quota if len(buffer) else buffer.budget // len(current)
    cap = max(cap, 1)
    parts_x, parts_y = [], []
    for c in current:
        idx = np.flatnonzero(labels == c)
        take = min(len(idx), cap)
        sel = np.sort(_rng(seed, 3, c).choice(len(idx), size=take, replace=False))
        parts_x.append(np.asarray(images)[idx[sel]])
        parts_y.append(labels[idx[sel]])
    if len(buffer):
        bx, by, _ = buffer.contents()
        parts_x.insert(0, bx)
        parts_y.insert(0, by)
    return np.concatenate(parts_x), np.concatenate(parts_y)


# --- persistence ----------------------------------------------------------

def _sha(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


def save_buffer(buffer: ReplayBuffer, directory) -> Path:
    """Writes ``class_<c>.npy`` per class and ``manifest.json`` (class -> sample ids -> hashes)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    classes = {}
    for c in buffer.classes:
        fname = f"class_{c}.npy"
        np.save(directory / fname, buffer.images[c], allow_pickle=False)
        classes[str(c)] = {
            "file": fname,
            "samples": [{"id": int(i), "sha256": _sha(x)} for i, x in zip(buffer.ids[c], buffer.images[c])],
        }
    manifest = directory / "manifest.json"
    manifest.write_text(json.dumps({"version": 1, "budget": buffer.budget, "seed": buffer.seed,
                                    "classes": classes}, indent=2, sort_keys=True) + "\n")
    return manifest


def load_buffer(directory) -> ReplayBuffer:
    directory = Path(directory)
    meta = json.loads((directory / "manifest.json").read_text())
    buf = ReplayBuffer(meta["budget"], meta["seed"])
    for key, entry in meta["classes"].items():
        c = int(key)
        images = np.load(directory / entry["file"], allow_pickle=False)
        for x, s in zip(images, entry["samples"]):
            if _sha(x) != s["sha256"]:
                raise ValueError(f"class {c} sample {s['id']}: content hash mismatch")
        buf.images[c] = images
        buf.ids[c] = np.array([s["id"] for s in entry["samples"]], dtype=np.int64)
    return buf
