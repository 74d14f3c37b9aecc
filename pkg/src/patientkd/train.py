"""Training loops: teacher fine-tuning, student fine-tuning, distillation,
grid search and the Adam optimizer.

Every loop is deterministic for a fixed seed: model initialization, batch
order and (optional) dropout all derive from it. Loss operations sum over
the batch; the step itself minimizes the batch mean. Each run logs a
per-epoch breakdown, evaluates train and dev accuracy at epoch granularity
and returns the checkpoint of the epoch with the best dev accuracy.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field, replace, asdict
from itertools import product
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .autodiff import Tape, Tensor, backward, stop_recording
from .data import Batch, EncodedDataset, batch_iter
from .distill import (
    DistillConfig,
    DistillStrategy,
    LayerMap,
    LossBreakdown,
    build_layer_map,
    init_student_from_teacher,
    loss_ce,
    loss_ds,
    loss_pt,
    softmax_probs,
)
from .encoder import EncoderConfig, EncoderModel, build_model, forward

__all__ = [
    "OptimizerConfig",
    "AdamState",
    "adam_step",
    "TaskData",
    "EpochStats",
    "RunRecord",
    "EvalResult",
    "GridSpec",
    "GridTemplate",
    "GridResult",
    "train_teacher",
    "finetune_student",
    "distill",
    "evaluate",
    "predictions",
    "grid_search",
    "write_metrics_csv",
    "write_run_json",
    "write_grid_csv",
    "load_run_record",
]


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 4
    seed: int = 0
    grad_clip: Optional[float] = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be at least 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be at least 1, got {self.batch_size}")


class AdamState:
    """First/second moment estimates plus the step counter."""

    def __init__(self, params: dict[str, np.ndarray]):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, opt: OptimizerConfig):
    """One Adam update with bias correction; returns (new_params, state).

    Optional global-norm clipping is applied to the gradients before the
    moment updates. Input arrays are never mutated.
    """
    if set(params) != set(grads):
        raise ValueError("params and grads have different keys")
    for name in params:
        if params[name].shape != grads[name].shape:
            raise ValueError(
                f"shape mismatch for {name!r}: param {params[name].shape} "
                f"vs grad {grads[name].shape}")
    if opt.grad_clip is not None:
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if norm > opt.grad_clip:
            factor = opt.grad_clip / norm
            grads = {k: g * factor for k, g in grads.items()}
    state.t += 1
    b1, b2 = opt.beta1, opt.beta2
    correct1 = 1.0 - b1 ** state.t
    correct2 = 1.0 - b2 ** state.t
    new_params = {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        new_params[name] = p - opt.learning_rate * (m / correct1) / (np.sqrt(v / correct2) + opt.adam_eps)
    return new_params, state


@dataclass
class TaskData:
    train: EncodedDataset
    dev: EncodedDataset
    test: Optional[EncodedDataset] = None


@dataclass
class EpochStats:
    epoch: int
    train_loss: LossBreakdown      # per-example means over the epoch
    train_accuracy: float
    dev_accuracy: float
    seconds: float


@dataclass
class RunRecord:
    """Everything one training run produced, echoing its full configuration."""
    config: dict
    epochs: list[EpochStats] = field(default_factory=list)
    step_totals: list[float] = field(default_factory=list)
    selected_epoch: int = 0
    final_test_accuracy: Optional[float] = None
    wall_clock_seconds: float = 0.0

    def best_dev_accuracy(self) -> float:
        return max(e.dev_accuracy for e in self.epochs)


@dataclass
class EvalResult:
    accuracy: float
    per_class_correct: dict[int, int]
    per_class_total: dict[int, int]


def predictions(model: EncoderModel, dataset: EncodedDataset, batch_size: int = 256) -> np.ndarray:
    """Argmax class per example, computed without recording."""
    out = np.zeros(len(dataset), dtype=np.int64)
    with stop_recording():
        for batch in batch_iter(dataset, batch_size):
            trace = forward(model, batch)
            out[batch.indices] = trace.final_logits.data.argmax(axis=-1)
    return out


def evaluate(model: EncoderModel, dataset: EncodedDataset, batch_size: int = 256) -> EvalResult:
    """Argmax accuracy plus per-class counts; deterministic."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty split")
    preds = predictions(model, dataset, batch_size)
    labels = dataset.labels
    correct: dict[int, int] = {}
    total: dict[int, int] = {}
    for cls in sorted(set(int(c) for c in labels)):
        sel = labels == cls
        total[cls] = int(sel.sum())
        correct[cls] = int((preds[sel] == cls).sum())
    accuracy = float((preds == labels).mean())
    return EvalResult(accuracy, correct, total)


# ---------------------------------------------------------------------------
# shared inner loop

# batch_loss(model, batch) -> (batch-sum total Tensor, l_ce, l_ds, l_pt as floats)
BatchLoss = Callable[[EncoderModel, Batch], tuple[Tensor, float, float, float]]


def _run_training(model: EncoderModel, data: TaskData, opt: OptimizerConfig,
                  batch_loss: BatchLoss, config_echo: dict) -> RunRecord:
    started = time.perf_counter()
    record = RunRecord(config=config_echo)
    state = AdamState(model.param_arrays())
    best = (-1.0, 0, None)  # (dev accuracy, epoch, param snapshot)

    for epoch in range(opt.epochs):
        epoch_started = time.perf_counter()
        sums = {"l_ce": 0.0, "l_ds": 0.0, "l_pt": 0.0, "total": 0.0}
        n_seen = 0
        for step, batch in enumerate(
                batch_iter(data.train, opt.batch_size, seed=opt.seed, shuffle=True, epoch=epoch)):
            tape = Tape()
            with tape:
                total, ce_val, ds_val, pt_val = batch_loss(model, batch)
                mean_total = total * (1.0 / len(batch))
            if not np.isfinite(mean_total.data):
                raise RuntimeError(
                    f"training diverged: non-finite loss at epoch {epoch}, step {step}")
            grad_map = backward(tape, mean_total)
            grads = {name: grad_map[p.node_id].data for name, p in model.params.items()}
            new_arrays, state = adam_step(model.param_arrays(), grads, state, opt)
            model.set_param_arrays(new_arrays)
            sums["l_ce"] += ce_val
            sums["l_ds"] += ds_val
            sums["l_pt"] += pt_val
            sums["total"] += total.item()
            n_seen += len(batch)
            record.step_totals.append(mean_total.item())

        breakdown = LossBreakdown(
            l_ce=sums["l_ce"] / n_seen, l_ds=sums["l_ds"] / n_seen,
            l_pt=sums["l_pt"] / n_seen, total=sums["total"] / n_seen)
        train_acc = evaluate(model, data.train).accuracy
        dev_acc = evaluate(model, data.dev).accuracy
        record.epochs.append(EpochStats(
            epoch=epoch, train_loss=breakdown, train_accuracy=train_acc,
            dev_accuracy=dev_acc, seconds=time.perf_counter() - epoch_started))
        if dev_acc > best[0]:
            best = (dev_acc, epoch, {k: v.copy() for k, v in model.param_arrays().items()})

    record.selected_epoch = best[1]
    model.set_param_arrays(best[2])
    if data.test is not None and len(data.test):
        record.final_test_accuracy = evaluate(model, data.test).accuracy
    record.wall_clock_seconds = time.perf_counter() - started
    return record


def _echo(mode: str, encoder_cfg: EncoderConfig, opt: OptimizerConfig,
          distill_cfg: Optional[DistillConfig] = None, **extra) -> dict:
    echo = {"mode": mode, "encoder": encoder_cfg.to_dict(), "optimizer": asdict(opt)}
    if distill_cfg is not None:
        echo["distill"] = json.loads(distill_cfg.to_json())
    echo.update(extra)
    return echo


def train_teacher(config: EncoderConfig, opt: OptimizerConfig, data: TaskData):
    """Fine-tune a fresh model on hard labels; best-dev checkpoint returned."""
    model = build_model(config, seed=opt.seed)
    dropout_rng = np.random.default_rng([opt.seed, 1]) if config.dropout_prob > 0 else None

    def batch_loss(m: EncoderModel, batch: Batch):
        trace = forward(m, batch, train=True, rng=dropout_rng)
        ce = loss_ce(batch.labels, trace.final_logits)
        return ce, ce.item(), 0.0, 0.0

    record = _run_training(model, data, opt, batch_loss, _echo("teacher", config, opt))
    return model, record


def finetune_student(teacher: Optional[EncoderModel], student_layers: int,
                     config: Optional[EncoderConfig], opt: OptimizerConfig,
                     data: TaskData):
    """Direct fine-tuning baseline: pure hard-label loss.

    With a teacher, the student starts from the teacher's first layers;
    otherwise ``config`` (with its own depth forced to ``student_layers``)
    seeds a fresh model.
    """
    if teacher is not None:
        model = init_student_from_teacher(teacher, student_layers)
    else:
        if config is None:
            raise ValueError("either a teacher or an encoder config is required")
        model = build_model(replace(config, num_layers=student_layers), seed=opt.seed)
    cfg = model.config
    dropout_rng = np.random.default_rng([opt.seed, 1]) if cfg.dropout_prob > 0 else None

    def batch_loss(m: EncoderModel, batch: Batch):
        trace = forward(m, batch, train=True, rng=dropout_rng)
        ce = loss_ce(batch.labels, trace.final_logits)
        return ce, ce.item(), 0.0, 0.0

    record = _run_training(
        model, data, opt, batch_loss,
        _echo("finetune", cfg, opt, student_layers=student_layers,
              init_from_teacher=teacher is not None))
    return model, record


class _TeacherCache:
    """Per-example teacher outputs, computed once in dataset order.

    Valid because the teacher is frozen, dropout-free and padding-invariant,
    so an example's outputs do not depend on its batch.
    """

    def __init__(self, teacher: EncoderModel, dataset: EncodedDataset,
                 batch_size: int = 256):
        n = len(dataset)
        cfg = teacher.config
        self.logits = np.zeros((n, cfg.num_classes))
        self.cls = np.zeros((cfg.num_layers, n, cfg.hidden_dim))
        with stop_recording():
            for batch in batch_iter(dataset, batch_size):
                trace = forward(teacher, batch)
                self.logits[batch.indices] = trace.final_logits.data
                for j, layer_state in enumerate(trace.cls_states):
                    self.cls[j, batch.indices] = layer_state.data

    def lookup(self, batch: Batch):
        logits = self.logits[batch.indices]
        cls = [self.cls[j, batch.indices] for j in range(self.cls.shape[0])]
        return logits, cls


def distill(teacher: EncoderModel, student_layers: int, distill_cfg: DistillConfig,
            opt: OptimizerConfig, data: TaskData, cache_teacher: bool = False):
    """Train a student against a frozen teacher under the combined objective.

    The layer map is built up front so skip-divisibility and depth errors
    surface before any compute. ``cache_teacher`` precomputes per-example
    teacher outputs instead of evaluating the teacher on every batch; the
    math is identical because the teacher is frozen.
    """
    layer_map = build_layer_map(teacher.config.num_layers, student_layers,
                                distill_cfg.strategy)
    model = init_student_from_teacher(teacher, student_layers)
    cfg = model.config
    dropout_rng = np.random.default_rng([opt.seed, 1]) if cfg.dropout_prob > 0 else None
    cache = _TeacherCache(teacher, data.train) if cache_teacher else None
    patient = distill_cfg.strategy is not DistillStrategy.NONE
    alpha, beta, temp = distill_cfg.alpha, distill_cfg.beta, distill_cfg.temperature

    def batch_loss(m: EncoderModel, batch: Batch):
        if cache is not None:
            teacher_logits, teacher_cls = cache.lookup(batch)
        else:
            with stop_recording():
                teacher_trace = forward(teacher, batch)
            teacher_logits = teacher_trace.final_logits.data
            teacher_cls = [s.data for s in teacher_trace.cls_states]
        p_t = softmax_probs(teacher_logits, temp)

        trace = forward(m, batch, train=True, rng=dropout_rng)
        ce = loss_ce(batch.labels, trace.final_logits)
        ds = loss_ds(p_t, trace.final_logits, temp, distill_cfg.symmetric_temperature)
        total = ce * (1.0 - alpha) + ds * alpha
        pt_val = 0.0
        if patient:
            pt = loss_pt(trace.cls_states[:-1], teacher_cls, layer_map, distill_cfg.eps_norm)
            total = total + pt * beta
            pt_val = pt.item()
        return total, ce.item(), ds.item(), pt_val

    record = _run_training(
        model, data, opt, batch_loss,
        _echo("distill", cfg, opt, distill_cfg,
              student_layers=student_layers, teacher_layers=teacher.config.num_layers,
              layer_map=list(layer_map.entries), cache_teacher=cache_teacher))
    return model, record


# ---------------------------------------------------------------------------
# grid search


@dataclass(frozen=True)
class GridSpec:
    temperatures: tuple[float, ...]
    alphas: tuple[float, ...]
    betas: tuple[float, ...]
    learning_rates: tuple[float, ...]

    def __post_init__(self):
        for name in ("temperatures", "alphas", "betas", "learning_rates"):
            if not getattr(self, name):
                raise ValueError(f"grid {name} must be non-empty")

    def points(self):
        return list(product(self.temperatures, self.alphas, self.betas, self.learning_rates))


@dataclass
class GridTemplate:
    """The fixed part of a grid run; each point overrides (T, alpha, beta, lr)."""
    teacher: EncoderModel
    student_layers: int
    strategy: DistillStrategy
    opt: OptimizerConfig
    data: TaskData
    symmetric_temperature: bool = False
    eps_norm: float = 1e-12
    cache_teacher: bool = False


@dataclass
class GridResult:
    temperature: float
    alpha: float
    beta: float
    learning_rate: float
    order: int
    record: Optional[RunRecord] = None
    error: Optional[str] = None

    @property
    def best_dev_accuracy(self) -> float:
        return self.record.best_dev_accuracy() if self.record is not None else float("-inf")


def grid_search(grid: GridSpec, fixed: GridTemplate,
                out_path=None) -> list[GridResult]:
    """One distillation run per grid point, ranked by best dev accuracy.

    Ties break toward lower beta, then lower temperature, then lower
    learning rate, then insertion order. A failing point is recorded with
    its error and ranked last rather than aborting the sweep.
    """
    results: list[GridResult] = []
    for order, (temp, alpha, beta, lr) in enumerate(grid.points()):
        result = GridResult(temp, alpha, beta, lr, order)
        try:
            cfg = DistillConfig(
                alpha=alpha, beta=beta, temperature=temp, strategy=fixed.strategy,
                symmetric_temperature=fixed.symmetric_temperature, eps_norm=fixed.eps_norm)
            _, record = distill(fixed.teacher, fixed.student_layers, cfg,
                                replace(fixed.opt, learning_rate=lr), fixed.data,
                                cache_teacher=fixed.cache_teacher)
            result.record = record
        except Exception as exc:  # recorded, not fatal
            result.error = f"{type(exc).__name__}: {exc}"
        results.append(result)

    ranked = sorted(results, key=lambda r: (
        -r.best_dev_accuracy, r.beta, r.temperature, r.learning_rate, r.order))
    if out_path is not None:
        write_grid_csv(ranked, out_path)
    return ranked


# ---------------------------------------------------------------------------
# persistence


def write_metrics_csv(record: RunRecord, path) -> None:
    """Columns: epoch, split, accuracy, l_ce, l_ds, l_pt, total.

    Train rows carry the loss breakdown; dev rows only the accuracy. Output
    is a pure function of the record, so identical runs give identical bytes.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["epoch", "split", "accuracy", "l_ce", "l_ds", "l_pt", "total"])
        for e in record.epochs:
            writer.writerow([e.epoch, "train", repr(e.train_accuracy),
                             repr(e.train_loss.l_ce), repr(e.train_loss.l_ds),
                             repr(e.train_loss.l_pt), repr(e.train_loss.total)])
            writer.writerow([e.epoch, "dev", repr(e.dev_accuracy), "", "", "", ""])


def write_run_json(record: RunRecord, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "config": record.config,
        "selected_epoch": record.selected_epoch,
        "final_test_accuracy": record.final_test_accuracy,
        "wall_clock_seconds": record.wall_clock_seconds,
        "epoch_seconds": [e.seconds for e in record.epochs],
    }
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def write_grid_csv(results: list[GridResult], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["rank", "temperature", "alpha", "beta", "learning_rate",
                         "best_dev_accuracy", "selected_epoch", "status"])
        for rank, r in enumerate(results):
            if r.record is not None:
                writer.writerow([rank, repr(r.temperature), repr(r.alpha), repr(r.beta),
                                 repr(r.learning_rate), repr(r.best_dev_accuracy),
                                 r.record.selected_epoch, "ok"])
            else:
                writer.writerow([rank, repr(r.temperature), repr(r.alpha), repr(r.beta),
                                 repr(r.learning_rate), "", "", f"error: {r.error}"])


def load_run_record(run_dir) -> RunRecord:
    """Rebuild a RunRecord from a run directory's metrics.csv and run.json."""
    run_dir = Path(run_dir)
    meta = json.loads((run_dir / "run.json").read_text(encoding="utf-8"))
    record = RunRecord(config=meta.get("config", {}),
                       selected_epoch=meta.get("selected_epoch", 0),
                       final_test_accuracy=meta.get("final_test_accuracy"),
                       wall_clock_seconds=meta.get("wall_clock_seconds", 0.0))
    rows: dict[int, dict] = {}
    with open(run_dir / "metrics.csv", "r", encoding="utf-8", newline="") as handle:
        for row in csv.DictReader(handle):
            entry = rows.setdefault(int(row["epoch"]), {})
            entry[row["split"]] = row
    for epoch in sorted(rows):
        train = rows[epoch].get("train")
        dev = rows[epoch].get("dev")
        record.epochs.append(EpochStats(
            epoch=epoch,
            train_loss=LossBreakdown(
                l_ce=float(train["l_ce"]), l_ds=float(train["l_ds"]),
                l_pt=float(train["l_pt"]), total=float(train["total"])),
            train_accuracy=float(train["accuracy"]),
            dev_accuracy=float(dev["accuracy"]),
            seconds=0.0))
    return record
