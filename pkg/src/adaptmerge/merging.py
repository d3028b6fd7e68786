"""Per-block averaging of task-specific adapter weights.

A *weight set* is a list with one ``{tensor name: array}`` dict per backbone
block, as produced by ``AdapterModule.state``. The merged set after ``t``
tasks is the elementwise mean of the ``t`` archived sets.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import AdapterModule, Checkpoint, load_checkpoint, save_checkpoint

WeightSet = list  # list[dict[str, np.ndarray]], one dict per block


class MergeShapeError(ValueError):
    pass


def _check_congruent(reference: WeightSet, other: WeightSet, label: str):
    if len(reference) != len(other):
        raise MergeShapeError(f"{label}: {len(other)} blocks, expected {len(reference)}")
    for j, (ref, cur) in enumerate(zip(reference, other), start=1):
        if set(ref) != set(cur):
            raise MergeShapeError(f"{label}: block {j} tensors {sorted(cur)} != {sorted(ref)}")
        for name in ref:
            if np.shape(ref[name]) != np.shape(cur[name]):
                raise MergeShapeError(f"{label}: block {j} tensor {name!r} has shape "
                                      f"{np.shape(cur[name])}, expected {np.shape(ref[name])}")


def merge_batch(archive: Sequence[WeightSet]) -> WeightSet:
    """Elementwise mean over the archive, computed in float64 in archive order."""
    if len(archive) == 0:
        raise ValueError("cannot merge an empty archive")
    first = archive[0]
    for n, ws in enumerate(archive[1:], start=2):
        _check_congruent(first, ws, f"set {n}")
    merged = []
    for j in range(len(first)):
        block = {}
        for name in first[j]:
            total = np.zeros(np.shape(first[j][name]), dtype=np.float64)
            for ws in archive:
                total += ws[j][name]
            block[name] = total / len(archive)
        merged.append(block)
    return merged


def _copy_set(ws: WeightSet, dtype=np.float64) -> WeightSet:
    return [{k: np.array(v, dtype=dtype, copy=True) for k, v in block.items()} for block in ws]


@dataclass
class MergeState:
    t: int = 0
    merged: WeightSet = field(default_factory=list)
    archive: list = field(default_factory=list)


def merge_incremental(state: MergeState, w_new: WeightSet) -> MergeState:
    """Running mean: merged <- (t * merged + w_new) / (t + 1). Returns a new state."""
    if state.t == 0:
        return MergeState(1, _copy_set(w_new), [_copy_set(w_new)])
    _check_congruent(state.merged, w_new, f"set {state.t + 1}")
    t = state.t
    merged = [{k: (t * block[k] + np.asarray(new[k], dtype=np.float64)) / (t + 1) for k in block}
              for block, new in zip(state.merged, w_new)]
    return MergeState(t + 1, merged, state.archive + [_copy_set(w_new)])


def freeze_merged(state: MergeState, template: Sequence[AdapterModule]) -> list[AdapterModule]:
    """Fresh read-only adapters (shaped like ``template``) holding the merged weights."""
    if state.t < 1:
        raise ValueError("nothing merged yet (t = 0)")
    if len(template) != len(state.merged):
        raise MergeShapeError(f"template has {len(template)} blocks, merged set has {len(state.merged)}")
    frozen = []
    for a, block in zip(template, state.merged):
        dtype = a.down_weight.dtype
        m = AdapterModule(a.block_index, a.channels, a.ratio, task_id=state.t, dtype=dtype)
        m.load({k: v.astype(dtype) for k, v in block.items()})
        frozen.append(m.freeze())
    return frozen


def adapter_weight_set(adapters: Sequence[AdapterModule]) -> WeightSet:
    return [a.state() for a in adapters]


# --- on-disk archive ------------------------------------------------------

def _set_to_tensors(ws: WeightSet) -> dict:
    return {f"block{j}.{k}": np.asarray(v, dtype=np.float32) for j, block in enumerate(ws, start=1)
            for k, v in block.items()}


def _tensors_to_set(tensors: dict) -> WeightSet:
    blocks: dict[int, dict] = {}
    for name, arr in tensors.items():
        head, _, rest = name.partition(".")
        blocks.setdefault(int(head[len("block"):]), {})[rest] = arr
    return [blocks[j] for j in sorted(blocks)]


def save_archive(state: MergeState, directory) -> Path:
    """One checkpoint per task (``task_<n>.ckpt``) plus ``manifest.json`` with sha256 hashes."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for n, ws in enumerate(state.archive, start=1):
        name = f"task_{n:03d}.ckpt"
        digest = save_checkpoint(directory / name, Checkpoint(_set_to_tensors(ws), merge_count=n,
                                                              meta={"kind": "adapter-set", "task": n}))
        entries.append({"task": n, "file": name, "sha256": digest})
    manifest = directory / "manifest.json"
    manifest.write_text(json.dumps({"version": 1, "tasks": entries}, indent=2, sort_keys=True) + "\n")
    return manifest


def load_archive(directory) -> list:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    archive = []
    for e in manifest["tasks"]:
        path = directory / e["file"]
        if hashlib.sha256(path.read_bytes()).hexdigest() != e["sha256"]:
            raise ValueError(f"{path}: content hash does not match manifest")
        archive.append(_tensors_to_set(load_checkpoint(path).tensors))
    return archive
