"""Adapter-augmented convolutional backbone, task heads and the unified head."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .numerics import (Parameter, ShapeError, Tensor, add, conv2d, global_avg_pool, linear,
                       max_pool2d, relu)

DESK_CHANNELS = (16, 32, 64, 128)


class MissingAdapterError(ValueError):
    pass


def _uniform(rng: np.random.Generator, shape, bound: float, dtype=np.float32) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class BackboneBlock:
    """3x3 conv (stride 1, pad 1) -> relu -> 2x2 max-pool."""

    def __init__(self, index: int, in_channels: int, out_channels: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.index = index
        self.in_channels = in_channels
        self.out_channels = out_channels
        fan_in = in_channels * 9
        # He-uniform
        self.weight = Parameter(_uniform(rng, (out_channels, in_channels, 3, 3), np.sqrt(6.0 / fan_in), dtype),
                                name=f"backbone.block{index}.conv.weight")
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype), name=f"backbone.block{index}.conv.bias")

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        return max_pool2d(relu(conv2d(x, self.weight, self.bias, stride=1, padding=1)), 2)


class AdapterModule:
    """Bottleneck 1x1 conv down -> relu -> 1x1 conv up, added residually to the block output."""

    def __init__(self, block_index: int, channels: int, ratio: int = 4, task_id: int = 0,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        if ratio < 1 or channels % ratio:
            raise ValueError(f"bottleneck ratio {ratio} must divide channel count {channels}")
        self.block_index = block_index
        self.channels = channels
        self.ratio = ratio
        self.task_id = task_id
        hidden = channels // ratio
        rng = rng if rng is not None else np.random.default_rng(0)
        prefix = f"adapter.block{block_index}"
        self.down_weight = Parameter(_uniform(rng, (hidden, channels, 1, 1), 1.0 / np.sqrt(channels), dtype),
                                     name=f"{prefix}.down.weight")
        self.down_bias = Parameter(np.zeros(hidden, dtype=dtype), name=f"{prefix}.down.bias")
        # zero up-projection: a fresh adapter is an exact no-op
        self.up_weight = Parameter(np.zeros((channels, hidden, 1, 1), dtype=dtype), name=f"{prefix}.up.weight")
        self.up_bias = Parameter(np.zeros(channels, dtype=dtype), name=f"{prefix}.up.bias")

    @property
    def hidden(self) -> int:
        return self.channels // self.ratio

    def parameters(self) -> list[Parameter]:
        return [self.down_weight, self.down_bias, self.up_weight, self.up_bias]

    def residual(self, h: Tensor) -> Tensor:
        return conv2d(relu(conv2d(h, self.down_weight, self.down_bias)), self.up_weight, self.up_bias)

    def __call__(self, h: Tensor) -> Tensor:
        return add(h, self.residual(h))

    def state(self) -> dict[str, np.ndarray]:
        return {"down.weight": self.down_weight.data.copy(), "down.bias": self.down_bias.data.copy(),
                "up.weight": self.up_weight.data.copy(), "up.bias": self.up_bias.data.copy()}

    def load(self, state: dict[str, np.ndarray]):
        for key, p in zip(("down.weight", "down.bias", "up.weight", "up.bias"), self.parameters()):
            p.assign(state[key])

    @property
    def frozen(self) -> bool:
        return all(p.frozen for p in self.parameters())

    def freeze(self):
        for p in self.parameters():
            p.freeze()
        return self

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


class Backbone:
    """Stack of ``BackboneBlock`` followed by global average pooling.

    ``block_executions`` counts every block evaluated; ``traversals`` counts
    forward calls. Together they instrument single-pass inference.
    """

    def __init__(self, in_channels: int = 1, channels: Sequence[int] = DESK_CHANNELS, seed: int = 0,
                 dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.in_channels = in_channels
        self.channels = tuple(channels)
        self.blocks: list[BackboneBlock] = []
        c = in_channels
        for j, c_out in enumerate(self.channels, start=1):
            self.blocks.append(BackboneBlock(j, c, c_out, rng, dtype))
            c = c_out
        self.block_executions = 0
        self.traversals = 0

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    @property
    def feature_dim(self) -> int:
        return self.channels[-1]

    def parameters(self) -> list[Parameter]:
        return [p for b in self.blocks for p in b.parameters()]

    def freeze(self):
        for p in self.parameters():
            p.freeze()
        return self

    @property
    def frozen(self) -> bool:
        return all(p.frozen for p in self.parameters())

    def forward(self, x, adapters: Optional[Sequence[Optional[AdapterModule]]] = None,
                require_adapters: bool = False) -> Tensor:
        if adapters is not None and len(adapters) != self.num_blocks:
            raise MissingAdapterError(f"expected {self.num_blocks} adapters, got {len(adapters)}")
        if require_adapters:
            if adapters is None:
                raise MissingAdapterError("no merged adapters supplied")
            missing = [j + 1 for j, a in enumerate(adapters) if a is None]
            if missing:
                raise MissingAdapterError(f"missing merged adapter for block(s) {missing}")
        h = x if isinstance(x, Tensor) else Tensor(x)
        self.traversals += 1
        for j, block in enumerate(self.blocks):
            h = block(h)
            self.block_executions += 1
            if adapters is not None and adapters[j] is not None:
                h = adapters[j](h)
        return global_avg_pool(h)

    __call__ = forward

    def make_adapters(self, ratio: int = 4, task_id: int = 0, seed: int = 0) -> list[AdapterModule]:
        rng = np.random.default_rng(seed)
        dtype = self.blocks[0].weight.dtype
        return [AdapterModule(b.index, b.out_channels, ratio, task_id, rng, dtype) for b in self.blocks]

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load(self, state: dict[str, np.ndarray]):
        for p in self.parameters():
            if p.frozen:
                raise ValueError(f"cannot load into frozen parameter {p.name!r}")
            p.assign(state[p.name])


class TaskHead:
    """Linear classifier over one task's classes plus a final "other" output."""

    def __init__(self, task_id: int, feature_dim: int, classes: Sequence[int], dtype=np.float32):
        if feature_dim <= 0:
            raise ValueError("feature dimension must be positive")
        if len(classes) < 1:
            raise ValueError("a task head needs at least one class")
        self.task_id = task_id
        self.classes = [int(c) for c in classes]
        self.weight = Parameter(np.zeros((len(classes) + 1, feature_dim), dtype=dtype),
                                name=f"head.task{task_id}.weight")
        self.bias = Parameter(np.zeros(len(classes) + 1, dtype=dtype), name=f"head.task{task_id}.bias")

    @property
    def width(self) -> int:
        return len(self.classes) + 1

    @property
    def other_index(self) -> int:
        return len(self.classes)

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def __call__(self, features: Tensor) -> Tensor:
        return linear(features, self.weight, self.bias)

    def local_labels(self, global_labels: np.ndarray) -> np.ndarray:
        """In-task position for known classes, ``other_index`` for everything else."""
        lookup = {c: i for i, c in enumerate(self.classes)}
        return np.array([lookup.get(int(y), self.other_index) for y in global_labels], dtype=np.int64)


def new_task_head(feature_dim: int, num_classes: int, task_id: int = 0,
                  classes: Optional[Sequence[int]] = None) -> TaskHead:
    if num_classes < 1:
        raise ValueError("num_classes must be >= 1")
    classes = list(range(num_classes)) if classes is None else list(classes)
    if len(classes) != num_classes:
        raise ValueError("classes does not match num_classes")
    return TaskHead(task_id, feature_dim, classes)


class UnifiedHead:
    """Single linear classifier over every class seen; ``classes[k]`` is the global id of slot k."""

    def __init__(self, feature_dim: int, classes: Sequence[int] = (), dtype=np.float32):
        if feature_dim <= 0:
            raise ValueError("feature dimension must be positive")
        self.feature_dim = feature_dim
        self.classes: list[int] = []
        self.weight = Parameter(np.zeros((0, feature_dim), dtype=dtype), name="head.unified.weight")
        self.bias = Parameter(np.zeros(0, dtype=dtype), name="head.unified.bias")
        if classes:
            self.expand(classes)

    @property
    def width(self) -> int:
        return len(self.classes)

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def __call__(self, features: Tensor) -> Tensor:
        return linear(features, self.weight, self.bias)

    def expand(self, new_classes: Sequence[int]) -> "UnifiedHead":
        new_classes = [int(c) for c in new_classes]
        clash = set(new_classes) & set(self.classes)
        if clash or len(set(new_classes)) != len(new_classes):
            dup = sorted(clash) if clash else sorted({c for c in new_classes if new_classes.count(c) > 1})
            raise ValueError(f"duplicate class id(s) {dup}: task label sets must be disjoint")
        if not new_classes:
            return self
        dtype = self.weight.dtype
        w = np.concatenate([self.weight.data, np.zeros((len(new_classes), self.feature_dim), dtype=dtype)])
        b = np.concatenate([self.bias.data, np.zeros(len(new_classes), dtype=dtype)])
        self.weight = Parameter(w, name="head.unified.weight")
        self.bias = Parameter(b, name="head.unified.bias")
        self.classes.extend(new_classes)
        return self


def expand_unified_head(head: UnifiedHead, new_classes: Sequence[int]) -> UnifiedHead:
    return head.expand(new_classes)


def block_forward_with_adapter(block: BackboneBlock, adapter: AdapterModule, x) -> Tensor:
    if adapter.block_index != block.index:
        raise ValueError(f"adapter for block {adapter.block_index} applied to block {block.index}")
    x = x if isinstance(x, Tensor) else Tensor(x)
    return adapter(block(x))


def forward_single_pass(backbone: Backbone, merged_adapters: Sequence[AdapterModule],
                        head: UnifiedHead, x) -> Tensor:
    if head.width < 1:
        raise ValueError("unified head has no outputs")
    return head(backbone.forward(x, merged_adapters, require_adapters=True))


def checksum(params: Sequence[Parameter]) -> str:
    digest = hashlib.sha256()
    for p in params:
        digest.update((p.name or "").encode())
        digest.update(np.ascontiguousarray(p.data).tobytes())
    return digest.hexdigest()


# --- checkpoint container -------------------------------------------------
#
# Layout (all integers little-endian):
#   8 bytes   magic b"AMCKPT\0\0"
#   u32       format version
#   u32       header length L
#   L bytes   UTF-8 JSON header, sorted keys:
#             {"tensors": [{"name", "shape", "dtype", "offset", "nbytes"}...],
#              "class_table": [...], "merge_count": t, "meta": {...}}
#   payload   raw tensor bytes, concatenated in header order

CKPT_MAGIC = b"AMCKPT\0\0"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    class_table: list[int] = field(default_factory=list)
    merge_count: int = 0
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint) -> str:
    entries, blobs, offset = [], [], 0
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str,
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": entries, "class_table": [int(c) for c in ckpt.class_table],
                         "merge_count": int(ckpt.merge_count), "meta": ckpt.meta},
                        sort_keys=True, separators=(",", ":")).encode()
    data = CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(header)) + header + b"".join(blobs)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[16:16 + hlen])
    base = 16 + hlen
    tensors = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        raw = data[start:start + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise ValueError(f"{path}: truncated tensor {e['name']!r}")
        tensors[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return Checkpoint(tensors, header["class_table"], header["merge_count"], header["meta"])


def adapter_tensors(adapters: Sequence[AdapterModule]) -> dict[str, np.ndarray]:
    return {f"adapter.block{a.block_index}.{k}": v for a in adapters for k, v in a.state().items()}


def layer_specs(in_channels: int, channels: Sequence[int] = DESK_CHANNELS, with_adapters: bool = False,
                ratio: int = 4, num_classes: int = 10) -> list:
    """Layer list of ``Backbone`` (+ adapters) + linear head for the FLOPs analyzer."""
    from .metrics import LayerSpec

    specs, c_in = [], in_channels
    for j, c in enumerate(channels, start=1):
        pooled = f"block{j}.in" if with_adapters else f"block{j}.out"
        specs += [LayerSpec("conv", f"block{j}.conv", c_in, c, 3, 1, 1, True), LayerSpec("relu"),
                  LayerSpec("pool", pooled, kernel=2, stride=2)]
        if with_adapters:
            specs += [LayerSpec("conv", f"block{j}.down", c, c // ratio, 1, 1, 0, True), LayerSpec("relu"),
                      LayerSpec("conv", f"block{j}.up", c // ratio, c, 1, 1, 0, True),
                      LayerSpec("add", f"block{j}.out", operand=pooled)]
        c_in = c
    specs += [LayerSpec("gap"), LayerSpec("linear", "head", channels[-1], num_classes, bias=True)]
    return specs
