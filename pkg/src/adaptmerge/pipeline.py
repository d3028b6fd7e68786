"""Per-task adapter tuning, adapter merging and balanced head fine-tuning.

``run_experiment`` drives a whole task sequence for the merged-adapter
method (in any of the three stage orders) or for one of the two baselines,
evaluates after every task and writes the run directory.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import config as config_mod
from .config import ExperimentConfig, OptimizerConfig
from .data import (LabeledSet, block_patterns, TaskSequence, TaskSpec, cap_per_class, flip_coins, generate_synthetic,
                   hflip, augment_batch, load_corpus, load_idx, split_tasks, to_batch)
from .merging import MergeState, adapter_weight_set, freeze_merged, merge_incremental, save_archive
from .metrics import (AccuracyRecord, accuracy, confusion_matrix, dynamic_inference_cost, flops_of,
                      write_confusion_csv, write_flops_report, write_metrics_csv)
from .model import (AdapterModule, Backbone, Checkpoint, TaskHead, UnifiedHead, adapter_tensors,
                    checksum, layer_specs, save_checkpoint)
from .numerics import SGD, Adam, MultiStepLR, Tensor, cross_entropy, no_grad
from .replay import ReplayBuffer, build_balanced_set, draw_other_samples, save_buffer, update_buffer

log = logging.getLogger(__name__)

_STAGES = {"pretrain": 0, "adapter": 1, "head": 2, "baseline": 3, "balance": 4}


class StageError(RuntimeError):
    pass


def stage_rng(seed: int, task: int, stage: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(task), _STAGES[stage]])


def make_optimizer(params, oc: OptimizerConfig):
    if oc.kind == "sgd":
        return SGD(params, oc.lr, momentum=oc.momentum, weight_decay=oc.weight_decay)
    return Adam(params, oc.lr, oc.beta1, oc.beta2, oc.epsilon, oc.weight_decay)


def fit(params, batch_loss, n: int, oc: OptimizerConfig, rng: np.random.Generator,
        batch_size: Optional[int] = None) -> int:
    """Shuffled mini-batch loop; ``batch_loss(indices)`` returns a scalar loss tensor."""
    opt = make_optimizer(params, oc)
    sched = MultiStepLR(opt, oc.milestones, oc.gamma) if oc.milestones else None
    bs = batch_size or oc.batch_size
    steps = 0
    for _ in range(oc.epochs):
        perm = rng.permutation(n)
        for i in range(0, n, bs):
            loss = batch_loss(perm[i:i + bs])
            if not np.isfinite(loss.data):
                raise StageError(f"non-finite loss after {steps} steps (lower the learning rate)")
            opt.zero_grad()
            loss.backward()
            opt.step()
            steps += 1
        if sched:
            sched.step()
    return steps


class ContinualModel:
    """Backbone plus whatever adapters and heads the method currently infers with."""

    def __init__(self, backbone: Backbone, image_size: int, channels: int, head_mode: str = "unified",
                 eval_batch_size: int = 256):
        self.backbone = backbone
        self.image_size = image_size
        self.channels = channels
        self.head_mode = head_mode
        self.eval_batch_size = eval_batch_size
        self.adapters: Optional[list[AdapterModule]] = None
        self.unified = UnifiedHead(backbone.feature_dim)
        self.task_heads: list[TaskHead] = []
        self.merge_count = 0
        self.last_pass_blocks = 0

    @property
    def class_table(self) -> list[int]:
        if self.head_mode == "unified":
            return list(self.unified.classes)
        return [c for h in self.task_heads for c in h.classes]

    def prepare(self, images) -> np.ndarray:
        return to_batch(images, self.image_size, self.channels)

    def features(self, x: np.ndarray, adapters="current") -> np.ndarray:
        """Pooled backbone features; each batch is one traversal of the blocks."""
        adapters = self.adapters if isinstance(adapters, str) else adapters
        out = []
        m = self.backbone.num_blocks
        with no_grad():
            for i in range(0, len(x), self.eval_batch_size):
                before = self.backbone.block_executions
                out.append(self.backbone.forward(Tensor(x[i:i + self.eval_batch_size]), adapters).data)
                self.last_pass_blocks = self.backbone.block_executions - before
                if self.last_pass_blocks != m:
                    raise StageError(f"inference ran {self.last_pass_blocks} block executions, expected {m}")
        if not out:
            return np.zeros((0, self.backbone.feature_dim), dtype=np.float32)
        return np.concatenate(out)

    def head_logits(self, feats: np.ndarray) -> np.ndarray:
        if self.head_mode == "unified":
            return feats @ self.unified.weight.data.T + self.unified.bias.data
        # per-task class logits side by side, "other" outputs dropped
        return np.concatenate([(feats @ h.weight.data.T + h.bias.data)[:, :-1] for h in self.task_heads], axis=1)

    def logits(self, images) -> np.ndarray:
        return self.head_logits(self.features(self.prepare(images)))

    def predict(self, images) -> np.ndarray:
        table = np.asarray(self.class_table, dtype=np.int64)
        return table[np.argmax(self.logits(images), axis=1)]

    def checkpoint(self, meta: Optional[dict] = None) -> Checkpoint:
        tensors = dict(self.backbone.state())
        if self.adapters is not None:
            tensors.update(adapter_tensors(self.adapters))
        if self.head_mode == "unified":
            tensors.update({p.name: p.data for p in self.unified.parameters()})
        else:
            tensors.update({p.name: p.data for h in self.task_heads for p in h.parameters()})
        return Checkpoint(tensors, self.class_table, self.merge_count,
                          {"head_mode": self.head_mode, **(meta or {})})


# --- datasets -------------------------------------------------------------

def build_tasks(cfg: ExperimentConfig) -> tuple[TaskSequence, Optional[LabeledSet]]:
    """Task sequence plus the reserved pretraining samples (``pretrain.source = split``)."""
    d = cfg.data
    reserved = None
    if d.source == "synthetic":
        s = cfg.synthetic
        patterns = block_patterns(s.num_classes, d.image_size, s.pattern_grid, s.seed, d.channels) \
            if s.pattern_grid else None
        syn = generate_synthetic(s.num_classes, s.per_class, d.image_size, s.sigma, s.seed, patterns,
                                 test_per_class=s.test_per_class, channels=d.channels)
        train, test = syn.train, syn.test
    else:
        if d.source == "digits":
            train, test = load_corpus("digits")
        else:
            train, test = load_idx(d.train_images, d.train_labels), load_idx(d.test_images, d.test_labels)
        train = cap_per_class(train, d.max_train_per_class, d.class_order_seed)
        test = cap_per_class(test, d.max_test_per_class, d.class_order_seed)
    held = set(d.exclude_classes)
    if cfg.model.backbone_init == "pretrain-split" and cfg.pretrain.source == "split":
        held |= set(cfg.pretrain.classes)
        reserved = train.of_classes(cfg.pretrain.classes)
    if held:
        keep = [c for c in train.classes if c not in held]
        train, test = train.of_classes(keep), test.of_classes(keep)
    tasks = split_tasks(train, test, d.classes_per_task, d.class_order_seed, d.parsed_partition())
    return tasks, reserved


# --- backbone initialisation ---------------------------------------------

_PRETRAIN_CACHE: dict = {}


def _pretrain_key(cfg: ExperimentConfig, tag: str) -> tuple:
    oc = cfg.optimizer.pretrain
    return (tag, tuple(cfg.model.channels), cfg.data.channels, cfg.data.image_size, cfg.pretrain.seed,
            cfg.pretrain.max_per_class, tuple(sorted(asdict(oc).items(), key=lambda kv: kv[0])).__repr__())


def train_backbone(backbone: Backbone, data: LabeledSet, cfg: ExperimentConfig, seed: int,
                   image_size: int, channels: int) -> int:
    """Supervised training of backbone + a throwaway linear head; returns step count."""
    x = to_batch(data.images, image_size, channels)
    head = UnifiedHead(backbone.feature_dim, data.classes)
    slot = {c: i for i, c in enumerate(head.classes)}
    y = np.array([slot[c] for c in data.labels.tolist()], dtype=np.int64)
    # zero-initialised rows would leave every feature gradient at zero on the first step
    rng = np.random.default_rng([seed, 7])
    head.weight.assign(rng.normal(0, 0.01, head.weight.shape))
    return fit(backbone.parameters() + head.parameters(),
               lambda idx: cross_entropy(head(backbone(Tensor(x[idx]))), y[idx]),
               len(x), cfg.optimizer.pretrain, stage_rng(seed, 0, "pretrain"))


def init_backbone(cfg: ExperimentConfig, tasks: TaskSequence, reserved: Optional[LabeledSet]) -> Backbone:
    backbone = Backbone(cfg.data.channels, cfg.model.channels, seed=cfg.pretrain.seed)
    mode = cfg.model.backbone_init
    if mode == "random-frozen":
        return backbone
    if mode == "first-task":
        data = tasks.tasks[0].train
        key = _pretrain_key(cfg, "first-task") + (tasks.manifest()["tasks"][0]["train_sha256"],)
    elif cfg.pretrain.source == "letters":
        data, _ = load_corpus("letters")
        data = cap_per_class(data, cfg.pretrain.max_per_class, cfg.pretrain.seed)
        key = _pretrain_key(cfg, "letters")
    else:
        data = reserved
        key = _pretrain_key(cfg, "split") + (tuple(cfg.pretrain.classes),)
    if key not in _PRETRAIN_CACHE:
        log.info("pretraining backbone on %d samples (%s)", len(data), key[0])
        train_backbone(backbone, data, cfg, cfg.pretrain.seed, cfg.data.image_size, cfg.data.channels)
        _PRETRAIN_CACHE[key] = backbone.state()
    backbone.load(_PRETRAIN_CACHE[key])
    return backbone


# --- stages ---------------------------------------------------------------

def run_adapter_tuning(task: TaskSpec, backbone: Backbone, init: Optional[list], buffer: ReplayBuffer,
                       cfg: ExperimentConfig, task_index: int) -> tuple[list, TaskHead, int]:
    """Train fresh (or warm-started) adapters and a task head with replay drawn as "other".

    Returns the trained adapter weight set, the head and the optimizer step count.
    """
    if not backbone.frozen:
        raise StageError("backbone must be frozen before adapter tuning")
    oc = cfg.optimizer.adapter
    rng = stage_rng(cfg.seed, task_index, "adapter")
    adapters = backbone.make_adapters(cfg.model.adapter_ratio, task_index, seed=cfg.seed * 1000 + task_index)
    if init is not None:
        for a, state in zip(adapters, init):
            a.load(state)
    head = TaskHead(task_index, backbone.feature_dim, task.classes)
    x = to_batch(task.train.images, cfg.data.image_size, cfg.data.channels)
    y = head.local_labels(task.train.labels)
    n_replay = int(oc.batch_size * cfg.replay.ratio) if len(buffer) else 0

    def batch_loss(idx):
        xb, yb = x[idx], y[idx]
        if n_replay:
            draw = draw_other_samples(buffer, n_replay, rng, head.other_index)
            xb = np.concatenate([xb, to_batch(draw.images, cfg.data.image_size, cfg.data.channels)])
            yb = np.concatenate([yb, draw.labels])
        xb = augment_batch(xb, rng)
        return cross_entropy(head(backbone(Tensor(xb), adapters)), yb)

    params = [p for a in adapters for p in a.parameters()] + head.parameters()
    steps = fit(params, batch_loss, len(x), oc, rng, batch_size=oc.batch_size - n_replay)
    return adapter_weight_set(adapters), head, steps


def run_merge_stage(state: MergeState, w_t: list, template: Sequence[AdapterModule]):
    state = merge_incremental(state, w_t)
    return state, freeze_merged(state, template)


def run_head_finetune(head_mode: str, model: ContinualModel, adapters: Sequence[AdapterModule],
                      buffer: ReplayBuffer, task: TaskSpec, cfg: ExperimentConfig, task_index: int) -> int:
    """Fine-tune the unified head or all task heads on the class-balanced set.

    Adapters and backbone are fixed here, so features of each sample and of its
    mirror image are computed once; the per-epoch flip coin picks between them.
    """
    images, labels = build_balanced_set(buffer, task.train.images, task.train.labels,
                                        seed=cfg.seed * 1000 + task_index)
    if head_mode == "unified":
        seen = set(model.unified.classes)
    else:
        seen = {c for h in model.task_heads for c in h.classes}
    missing = seen - set(labels.tolist())
    if missing:
        raise StageError(f"balanced set lacks class(es) {sorted(missing)}")
    x = model.prepare(images)
    plain, mirrored = model.features(x, adapters), model.features(hflip(x), adapters)
    rng = stage_rng(cfg.seed, task_index, "head")

    def batch_features(idx):
        coins = flip_coins(rng, len(idx))
        return Tensor(np.where(coins[:, None], mirrored[idx], plain[idx]))

    if head_mode == "unified":
        head = model.unified
        slot = {c: i for i, c in enumerate(head.classes)}
        targets = np.array([slot[c] for c in labels.tolist()], dtype=np.int64)
        return fit(head.parameters(), lambda idx: cross_entropy(head(batch_features(idx)), targets[idx]),
                   len(x), cfg.optimizer.head, rng)

    heads = model.task_heads
    targets = [h.local_labels(labels) for h in heads]

    def tsh_loss(idx):
        f = batch_features(idx)
        loss = None
        for h, t in zip(heads, targets):
            term = cross_entropy(h(f), t[idx])
            loss = term if loss is None else loss + term
        return loss

    return fit([p for h in heads for p in h.parameters()], tsh_loss, len(x), cfg.optimizer.head, rng)


def run_baseline_task(model: ContinualModel, task: TaskSpec, buffer: Optional[ReplayBuffer],
                      cfg: ExperimentConfig, task_index: int) -> int:
    """Whole-network training on the new task, plus every stored exemplar when ``buffer`` is given."""
    model.unified.expand(task.classes)
    images, labels = task.train.images, task.train.labels
    if buffer is not None and len(buffer):
        bx, by, _ = buffer.contents()
        images = np.concatenate([model.prepare(bx), model.prepare(images)])
        labels = np.concatenate([by, labels])
    x = model.prepare(images)
    slot = {c: i for i, c in enumerate(model.unified.classes)}
    y = np.array([slot[c] for c in labels.tolist()], dtype=np.int64)
    rng = stage_rng(cfg.seed, task_index, "baseline")
    head, backbone = model.unified, model.backbone
    return fit(backbone.parameters() + head.parameters(),
               lambda idx: cross_entropy(head(backbone(Tensor(augment_batch(x[idx], rng)))), y[idx]),
               len(x), cfg.optimizer.baseline, rng)


# --- evaluation -----------------------------------------------------------

@dataclass
class Evaluation:
    overall: float
    per_task: list
    confusion: np.ndarray
    class_ids: list


def evaluate(model: ContinualModel, seen: Sequence[TaskSpec]) -> Evaluation:
    class_ids = [c for t in seen for c in t.classes]
    index = {c: i for i, c in enumerate(class_ids)}
    preds, labels, per_task = [], [], []
    for t in seen:
        p = model.predict(t.test.images)
        per_task.append(accuracy(p, t.test.labels))
        preds.append(p)
        labels.append(t.test.labels)
    preds, labels = np.concatenate(preds), np.concatenate(labels)
    cm = confusion_matrix([index[int(c)] for c in preds], [index[int(c)] for c in labels], len(class_ids))
    return Evaluation(accuracy(preds, labels), per_task, cm, class_ids)


# --- experiment -----------------------------------------------------------

@dataclass
class ExperimentReport:
    method: str
    order: str
    seed: int
    record: AccuracyRecord = field(default_factory=AccuracyRecord)
    accuracy_matrix: list = field(default_factory=list)
    class_order: list = field(default_factory=list)
    stages: list = field(default_factory=list)
    freeze_checks: list = field(default_factory=list)
    buffer_counts: list = field(default_factory=list)
    pass_blocks: list = field(default_factory=list)
    num_blocks: int = 0
    flops: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    complete: bool = False
    error: str = ""

    @property
    def average_accuracy(self) -> float:
        return self.record.average

    @property
    def last_accuracy(self) -> float:
        return self.record.last

    def to_json(self) -> dict:
        d = asdict(self)
        d["record"] = {"A": self.record.accuracies,
                       "avg_acc_so_far": self.record.running_averages() if self.record.accuracies else []}
        if self.record.accuracies:
            d["average_accuracy"] = self.average_accuracy
            d["last_accuracy"] = self.last_accuracy
        return d


def _freeze_snapshot(report, model, task, stage):
    entry = {"task": task, "stage": stage, "backbone": checksum(model.backbone.parameters())}
    if model.adapters is not None:
        entry["adapters"] = checksum([p for a in model.adapters for p in a.parameters()])
    report.freeze_checks.append(entry)


def _run_adapter_task(cfg, t, task, model, merge_state, buffer, report):
    init = None
    if cfg.model.adapter_init == "warm-start" and merge_state.t:
        init = [{k: v.astype(np.float32) for k, v in block.items()} for block in merge_state.merged]
    w_t, head, steps = run_adapter_tuning(task, model.backbone, init, buffer, cfg, t)
    report.stages.append({"task": t, "stage": "AT", "epochs": cfg.optimizer.adapter.epochs, "steps": steps})
    _freeze_snapshot(report, model, t, "AT")
    template = model.backbone.make_adapters(cfg.model.adapter_ratio)

    if cfg.order == "AT-FT-MER":
        model.task_heads.append(head)
        own = model.backbone.make_adapters(cfg.model.adapter_ratio, t)
        for a, state in zip(own, w_t):
            a.load(state)
        steps = run_head_finetune("task-specific", model, own, buffer, task, cfg, t)
        report.stages.append({"task": t, "stage": "FT", "epochs": cfg.optimizer.head.epochs, "steps": steps})
        merge_state, model.adapters = run_merge_stage(merge_state, w_t, template)
        report.stages.append({"task": t, "stage": "MER", "epochs": 0, "steps": 0})
        _freeze_snapshot(report, model, t, "MER")
    else:
        merge_state, model.adapters = run_merge_stage(merge_state, w_t, template)
        report.stages.append({"task": t, "stage": "MER", "epochs": 0, "steps": 0})
        _freeze_snapshot(report, model, t, "MER")
        if cfg.order == "AT-MER-FT-unified":
            model.unified.expand(task.classes)
            steps = run_head_finetune("unified", model, model.adapters, buffer, task, cfg, t)
        else:
            model.task_heads.append(head)
            steps = run_head_finetune("task-specific", model, model.adapters, buffer, task, cfg, t)
        report.stages.append({"task": t, "stage": "FT", "epochs": cfg.optimizer.head.epochs, "steps": steps})
        _freeze_snapshot(report, model, t, "FT")
    model.merge_count = merge_state.t
    return merge_state


def inference_flops(cfg: ExperimentConfig, model: ContinualModel, n_tasks: int):
    with_adapters = cfg.method == "merged-adapters"
    n_out = len(model.class_table) or 1
    specs = layer_specs(cfg.data.channels, cfg.model.channels, with_adapters, cfg.model.adapter_ratio, n_out)
    report = flops_of(specs, (cfg.data.channels, cfg.data.image_size, cfg.data.image_size))
    summary = {"single_pass_macs": report.total_macs, "tasks": n_tasks,
               "multi_pass_macs": dynamic_inference_cost(report, n_tasks),
               "merged_macs": dynamic_inference_cost(report, n_tasks, "merged"),
               "params": report.total_params}
    return report, summary


def _prepare_out(out_dir, overwrite: bool) -> Optional[Path]:
    if out_dir is None:
        return None
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not overwrite:
        raise FileExistsError(f"output directory {out} is not empty (pass overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    (out / "checkpoints").mkdir(exist_ok=True)
    return out


def _write_report(out: Optional[Path], report: ExperimentReport):
    if out is not None:
        (out / "report.json").write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")


def run_experiment(cfg: ExperimentConfig, out_dir=None, overwrite: bool = False) -> ExperimentReport:
    cfg.validate()
    out = _prepare_out(out_dir, overwrite)
    report = ExperimentReport(cfg.method, cfg.order, cfg.seed, config=config_mod.to_dict(cfg))
    try:
        if out is not None:
            (out / "config.cfg").write_text(config_mod.to_text(cfg))
        tasks, reserved = build_tasks(cfg)
        report.class_order = [[int(c) for c in t.classes] for t in tasks]
        if out is not None:
            tasks.write_manifest(out / "task_manifest.json")
        backbone = init_backbone(cfg, tasks, reserved)
        head_mode = cfg.head_mode if cfg.method == "merged-adapters" else "unified"
        model = ContinualModel(backbone, cfg.data.image_size, cfg.data.channels, head_mode, cfg.eval_batch_size)
        report.num_blocks = backbone.num_blocks
        if cfg.method == "merged-adapters":
            backbone.freeze()
        buffer = ReplayBuffer(cfg.replay.budget, cfg.seed)
        merge_state = MergeState()
        _freeze_snapshot(report, model, 0, "init")

        for t, task in enumerate(tasks, start=1):
            if cfg.method == "merged-adapters":
                merge_state = _run_adapter_task(cfg, t, task, model, merge_state, buffer, report)
            else:
                use = buffer if cfg.method == "replay-baseline" else None
                steps = run_baseline_task(model, task, use, cfg, t)
                report.stages.append({"task": t, "stage": "train", "epochs": cfg.optimizer.baseline.epochs,
                                      "steps": steps})
            ev = evaluate(model, tasks.tasks[:t])
            report.pass_blocks.append(model.last_pass_blocks)
            report.record.append(ev.overall)
            report.accuracy_matrix.append(ev.per_task)
            if cfg.method != "finetune-baseline":
                buffer = update_buffer(buffer, task.train.images, task.train.labels, task.train.ids)
                if len(buffer) > buffer.budget:
                    raise StageError(f"replay buffer holds {len(buffer)} > budget {buffer.budget}")
            report.buffer_counts.append({str(c): n for c, n in buffer.counts().items()})
            log.info("task %d/%d: A=%.2f per-task=%s", t, len(tasks), ev.overall,
                     ", ".join(f"{a:.1f}" for a in ev.per_task))
            if out is not None:
                write_confusion_csv(out / f"confusion_{t}.csv", ev.confusion, ev.class_ids)
                save_checkpoint(out / "checkpoints" / f"task_{t}.ckpt", model.checkpoint({"task": t}))

        flops_report, report.flops = inference_flops(cfg, model, len(tasks))
        if out is not None:
            write_metrics_csv(out / "metrics.csv", report.record)
            write_flops_report(out / "flops_report.json", flops_report, len(tasks))
            if cfg.method == "merged-adapters":
                save_archive(merge_state, out / "adapters")
            save_buffer(buffer, out / "buffer")
            report.artifacts = {p.name: str(p.relative_to(out)) for p in sorted(out.iterdir())}
        report.complete = True
    except Exception as exc:
        report.complete = False
        report.error = f"{type(exc).__name__}: {exc}"
        if out is not None and report.record.accuracies:
            write_metrics_csv(out / "metrics.csv", report.record)
        _write_report(out, report)
        raise
    _write_report(out, report)
    return report
