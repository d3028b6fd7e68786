"""Accuracy bookkeeping, confusion matrices and static FLOPs accounting."""
from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


# --- accuracy -------------------------------------------------------------

def predict_classes(logits: np.ndarray, class_table: Sequence[int]) -> np.ndarray:
    """Global class id of the arg-max slot; ties resolve to the lowest slot index."""
    logits = np.asarray(logits)
    return np.asarray(class_table, dtype=np.int64)[np.argmax(logits, axis=1)]


def accuracy(predictions, labels) -> float:
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("accuracy of an empty split is undefined")
    if predictions.shape != labels.shape:
        raise ValueError(f"predictions {predictions.shape} and labels {labels.shape} differ")
    return 100.0 * float(np.mean(predictions == labels))


def task_accuracy(model, images, labels) -> float:
    """Percent of ``images`` whose predicted class (``model.predict``) equals the label."""
    if len(labels) == 0:
        raise ValueError("empty test split")
    return accuracy(model.predict(images), labels)


@dataclass
class AccuracyRecord:
    accuracies: list = field(default_factory=list)

    def append(self, value: float):
        if not 0.0 <= value <= 100.0:
            raise ValueError(f"accuracy {value} outside [0, 100]")
        self.accuracies.append(float(value))

    @property
    def average(self) -> float:
        return average_accuracy(self)

    @property
    def last(self) -> float:
        if not self.accuracies:
            raise ValueError("empty accuracy record")
        return self.accuracies[-1]

    def running_averages(self) -> list[float]:
        return [math.fsum(self.accuracies[:i + 1]) / (i + 1) for i in range(len(self.accuracies))]


def average_accuracy(record) -> float:
    values = record.accuracies if isinstance(record, AccuracyRecord) else list(record)
    if not values:
        raise ValueError("cannot average an empty record")
    return math.fsum(values) / len(values)


def confusion_matrix(predictions, labels, k: int) -> np.ndarray:
    """Entry (r, c) counts samples of true class r predicted as c."""
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape:
        raise ValueError(f"length mismatch: {len(predictions)} predictions, {len(labels)} labels")
    for name, arr in (("prediction", predictions), ("label", labels)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise ValueError(f"{name} outside [0, {k})")
    return np.bincount(labels * k + predictions, minlength=k * k).reshape(k, k)


def write_metrics_csv(path, record: AccuracyRecord):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["task_id", "A_i", "avg_acc_so_far"])
        for t, (a, avg) in enumerate(zip(record.accuracies, record.running_averages()), start=1):
            w.writerow([t, f"{a:.6f}", f"{avg:.6f}"])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return [{"task_id": int(r["task_id"]), "A_i": float(r["A_i"]),
                 "avg_acc_so_far": float(r["avg_acc_so_far"])} for r in csv.DictReader(f)]


def write_confusion_csv(path, matrix: np.ndarray, class_ids: Sequence[int]):
    """Rows: true class, columns: predicted class, both in slot order ``class_ids``."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["true\\pred", *[int(c) for c in class_ids]])
        for c, row in zip(class_ids, matrix):
            w.writerow([int(c), *[int(v) for v in row]])


def read_confusion_csv(path) -> tuple[np.ndarray, list[int]]:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    class_ids = [int(c) for c in rows[0][1:]]
    return np.array([[int(v) for v in r[1:]] for r in rows[1:]], dtype=np.int64), class_ids


# --- FLOPs ----------------------------------------------------------------

class SpecError(ValueError):
    pass


@dataclass
class LayerSpec:
    kind: str                      # conv | linear | pool | gap | relu | add | flatten
    name: str = ""
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    bias: bool = False
    source: str = ""               # conv/pool: take input from this layer's output instead of the previous one
    operand: str = ""              # add: second operand (a layer name)


@dataclass
class LayerCost:
    index: int
    name: str
    kind: str
    input_shape: list
    output_shape: list
    macs: int
    elementwise: int
    params: int


@dataclass
class FlopsReport:
    layers: list
    total_macs: int
    total_elementwise: int
    total_params: int
    input_shape: list
    passes: int = 1

    @property
    def total_flops(self) -> int:
        """Headline figure: 1 MAC counted as 1 FLOP, elementwise ops excluded."""
        return self.total_macs * self.passes

    def to_json(self) -> dict:
        d = asdict(self)
        d["total_flops"] = self.total_flops
        d["convention"] = "1 MAC = 1 FLOP; elementwise ops (relu/pool/add) reported separately"
        return d


def _conv_out(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def flops_of(specs: Sequence[LayerSpec], input_shape: Sequence[int]) -> FlopsReport:
    """Walk a layer list from ``input_shape`` = (C, H, W); shapes must chain."""
    shape = list(input_shape)
    outputs: dict[str, list] = {"input": list(shape)}
    rows = []
    for i, spec in enumerate(specs):
        name = spec.name or f"{spec.kind}{i}"
        if spec.source:
            if spec.source not in outputs:
                raise SpecError(f"layer {i} ({name}): unknown source {spec.source!r}")
            shape = list(outputs[spec.source])
        inp = list(shape)
        macs = elementwise = params = 0
        if spec.kind == "conv":
            if len(shape) != 3:
                raise SpecError(f"layer {i} ({name}): conv needs a (C,H,W) input, got {shape}")
            c, h, w = shape
            if spec.in_channels != c:
                raise SpecError(f"layer {i} ({name}): expects {spec.in_channels} input channels, "
                                f"previous layer gives {c}")
            ho, wo = (_conv_out(h, spec.kernel, spec.stride, spec.padding),
                      _conv_out(w, spec.kernel, spec.stride, spec.padding))
            if ho < 1 or wo < 1:
                raise SpecError(f"layer {i} ({name}): kernel {spec.kernel} does not fit input {h}x{w}")
            macs = spec.kernel * spec.kernel * c * spec.out_channels * ho * wo
            params = spec.kernel * spec.kernel * c * spec.out_channels + (spec.out_channels if spec.bias else 0)
            shape = [spec.out_channels, ho, wo]
        elif spec.kind == "pool":
            c, h, w = shape
            ho, wo = (_conv_out(h, spec.kernel, spec.stride, spec.padding),
                      _conv_out(w, spec.kernel, spec.stride, spec.padding))
            if ho < 1 or wo < 1:
                raise SpecError(f"layer {i} ({name}): pool window {spec.kernel} does not fit input {h}x{w}")
            shape = [c, ho, wo]
            elementwise = c * ho * wo * spec.kernel * spec.kernel
        elif spec.kind == "gap":
            c, h, w = shape
            elementwise = c * h * w
            shape = [c]
        elif spec.kind == "flatten":
            shape = [int(np.prod(shape))]
        elif spec.kind == "relu":
            elementwise = int(np.prod(shape))
        elif spec.kind == "add":
            if spec.operand not in outputs:
                raise SpecError(f"layer {i} ({name}): unknown operand {spec.operand!r}")
            if outputs[spec.operand] != shape:
                raise SpecError(f"layer {i} ({name}): cannot add {outputs[spec.operand]} to {shape}")
            elementwise = int(np.prod(shape))
        elif spec.kind == "linear":
            if len(shape) != 1 or shape[0] != spec.in_channels:
                raise SpecError(f"layer {i} ({name}): linear expects {spec.in_channels} features, "
                                f"previous layer gives {shape}")
            macs = spec.in_channels * spec.out_channels
            params = macs + (spec.out_channels if spec.bias else 0)
            shape = [spec.out_channels]
        else:
            raise SpecError(f"layer {i} ({name}): unknown kind {spec.kind!r}")
        outputs[name] = list(shape)
        rows.append(LayerCost(i, name, spec.kind, inp, list(shape), macs, elementwise, params))
    return FlopsReport(rows, sum(r.macs for r in rows), sum(r.elementwise for r in rows),
                       sum(r.params for r in rows), list(input_shape))


def dynamic_inference_cost(single_pass, tasks: int, method: str = "multi-pass"):
    """Per-inference cost after ``tasks`` tasks.

    A multi-pass dynamic model (one forward per task-specific module set)
    costs ``tasks`` single passes; a merged model costs one pass for any ``tasks``.
    Works on a ``FlopsReport`` or any number supporting ``*``.
    """
    if tasks < 1:
        raise ValueError("tasks must be >= 1")
    base = single_pass.total_flops if isinstance(single_pass, FlopsReport) else single_pass
    if method == "multi-pass":
        return tasks * base
    if method == "merged":
        return base
    raise ValueError(f"unknown method {method!r}")


_INT_KEYS = {"in": "in_channels", "out": "out_channels", "k": "kernel", "s": "stride", "p": "padding"}


def parse_arch(text: str, origin: str = "<arch>") -> list[LayerSpec]:
    """One layer per line: ``<kind> key=value ...``; ``#`` starts a comment.

    Keys: name, in, out, k, s, p, bias (0/1), from (input source), with (add operand).
    """
    specs = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        kind, *pairs = line.split()
        spec = LayerSpec(kind=kind)
        if kind not in {"conv", "linear", "pool", "gap", "relu", "add", "flatten"}:
            raise SpecError(f"{origin}:{lineno}: unknown layer kind {kind!r}")
        for pair in pairs:
            if "=" not in pair:
                raise SpecError(f"{origin}:{lineno}: expected key=value, got {pair!r}")
            key, value = pair.split("=", 1)
            try:
                if key in _INT_KEYS:
                    setattr(spec, _INT_KEYS[key], int(value))
                elif key == "bias":
                    spec.bias = value not in ("0", "false", "no")
                elif key == "name":
                    spec.name = value
                elif key == "from":
                    spec.source = value
                elif key == "with":
                    spec.operand = value
                else:
                    raise SpecError(f"{origin}:{lineno}: unknown key {key!r}")
            except ValueError as exc:
                if isinstance(exc, SpecError):
                    raise
                raise SpecError(f"{origin}:{lineno}: bad value for {key!r}: {value!r}") from None
        specs.append(spec)
    return specs


def load_arch(path) -> list[LayerSpec]:
    path = Path(path)
    return parse_arch(path.read_text(), str(path))


def shipped_arch(name: str) -> Path:
    return Path(str(resources.files("adaptmerge") / "archs" / f"{name}.arch"))


def parse_input_size(text: str) -> tuple[int, int]:
    m = re.fullmatch(r"\s*(\d+)\s*[xX]\s*(\d+)\s*", text)
    if not m:
        raise ValueError(f"input size must look like HxW, got {text!r}")
    return int(m.group(1)), int(m.group(2))


def write_flops_report(path, report: FlopsReport, tasks: Optional[int] = None):
    d = report.to_json()
    if tasks:
        d["tasks"] = tasks
        d["multi_pass_total"] = dynamic_inference_cost(report, tasks)
        d["merged_total"] = dynamic_inference_cost(report, tasks, "merged")
    Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")
