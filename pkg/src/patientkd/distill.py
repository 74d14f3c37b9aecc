"""Distillation objectives, layer-map construction and student initialization.

The student is trained against a frozen teacher with three loss terms:
hard-label cross entropy, soft-label cross entropy against the teacher's
temperature-scaled output distribution, and (for patient distillation) a
mean-square penalty between L2-normalized [CLS] hidden states at mapped
layers. All losses sum over the batch; the trainer divides by batch size
when stepping.

Two layer-map strategies are supported for a teacher of depth ``L_t`` and
a student of depth ``n`` (the student's last layer is never mapped, since
its output already feeds the soft-label loss, so a map has ``n - 1``
entries):

* skip: every ``L_t / n``-th teacher layer, e.g. 12 -> 6 gives {2,4,6,8,10}
* last: the teacher layers just below the top, e.g. 12 -> 6 gives {7,...,11}
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .autodiff import Tensor, log_softmax_rows, l2_normalize, stop_recording
from .encoder import EncoderModel, build_model, forward

__all__ = [
    "DistillStrategy",
    "LayerMap",
    "DistillConfig",
    "LossBreakdown",
    "build_layer_map",
    "soft_labels",
    "softmax_probs",
    "loss_ds",
    "loss_ce",
    "kd_loss",
    "loss_pt",
    "pkd_loss",
    "init_student_from_teacher",
]


class DistillStrategy(Enum):
    SKIP = "skip"
    LAST = "last"
    NONE = "none"

    @classmethod
    def parse(cls, name: str) -> "DistillStrategy":
        try:
            return cls(name.lower())
        except ValueError:
            raise ValueError(
                f"unknown strategy {name!r}; expected one of 'skip', 'last', 'none'") from None


@dataclass(frozen=True)
class LayerMap:
    """Teacher layer indices (1-based) matched to student layers 1..n-1."""
    entries: tuple[int, ...]
    student_layers: int
    teacher_layers: int

    def __len__(self) -> int:
        return len(self.entries)


def build_layer_map(teacher_layers: int, student_layers: int,
                    strategy: DistillStrategy) -> LayerMap:
    """Construct the index set a student distills intermediate states from.

    The teacher's last layer is always excluded. ``skip`` requires the
    teacher depth to be divisible by the student depth.
    """
    if student_layers > teacher_layers:
        raise ValueError(
            f"student depth {student_layers} exceeds teacher depth {teacher_layers}")
    if strategy is DistillStrategy.NONE:
        return LayerMap((), student_layers, teacher_layers)
    if student_layers < 2:
        raise ValueError(
            f"patient strategies need a student depth of at least 2, got {student_layers}")
    if strategy is DistillStrategy.SKIP:
        if teacher_layers % student_layers != 0:
            raise ValueError(
                f"skip strategy needs teacher depth divisible by student depth, "
                f"got {teacher_layers} and {student_layers}")
        stride = teacher_layers // student_layers
        entries = tuple(stride * j for j in range(1, student_layers))
    elif strategy is DistillStrategy.LAST:
        entries = tuple(range(teacher_layers - student_layers + 1, teacher_layers))
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    return LayerMap(entries, student_layers, teacher_layers)


@dataclass(frozen=True)
class DistillConfig:
    alpha: float
    beta: float
    temperature: float
    strategy: DistillStrategy
    symmetric_temperature: bool = False
    eps_norm: float = 1e-12

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.beta < 0.0:
            raise ValueError(f"beta must be nonnegative, got {self.beta}")
        if self.temperature <= 0.0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.strategy is DistillStrategy.NONE and self.beta > 0.0:
            raise ValueError("strategy 'none' (vanilla distillation) cannot take beta > 0")
        if self.eps_norm <= 0.0:
            raise ValueError(f"eps_norm must be positive, got {self.eps_norm}")

    def to_json(self) -> str:
        return json.dumps({
            "alpha": self.alpha,
            "beta": self.beta,
            "temperature": self.temperature,
            "strategy": self.strategy.value,
            "symmetric_temperature": self.symmetric_temperature,
            "eps_norm": self.eps_norm,
        }, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DistillConfig":
        d = json.loads(text)
        return cls(
            alpha=d["alpha"],
            beta=d["beta"],
            temperature=d["temperature"],
            strategy=DistillStrategy.parse(d["strategy"]),
            symmetric_temperature=d.get("symmetric_temperature", False),
            eps_norm=d.get("eps_norm", 1e-12),
        )


@dataclass(frozen=True)
class LossBreakdown:
    """Scalar components of one objective evaluation.

    total = (1 - alpha) * l_ce + alpha * l_ds + beta * l_pt
    """
    l_ce: float
    l_ds: float
    l_pt: float
    total: float


def soft_labels(teacher: EncoderModel, batch, temperature: float) -> np.ndarray:
    """Teacher's temperature-scaled class probabilities, one row per example.

    The teacher runs outside any tape, so these rows are constants and no
    gradient ever reaches the teacher.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    with stop_recording():
        trace = forward(teacher, batch)
    return softmax_probs(trace.final_logits.data, temperature)


def softmax_probs(logit_rows: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Plain numpy row softmax with temperature (no tape)."""
    z = np.asarray(logit_rows, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def loss_ds(p_teacher: np.ndarray, student_logits: Tensor, temperature: float,
            symmetric: bool = False) -> Tensor:
    """Soft-label cross entropy -sum_i sum_c p_t(c) log p_s(c), batch sum.

    By default the student's log-probabilities are taken at temperature 1
    while the teacher rows were produced at ``temperature``. With
    ``symmetric=True`` the student logits are divided by the same
    temperature and the sum is multiplied by temperature**2, the standard
    correction that keeps gradient magnitudes comparable across
    temperatures. Student log-probabilities come straight from the logits
    via log-sum-exp, so zero probabilities never hit a bare log.
    """
    p_t = np.asarray(p_teacher, dtype=np.float64)
    if p_t.shape != student_logits.shape:
        raise ValueError(
            f"teacher rows {p_t.shape} do not match student logits {student_logits.shape}")
    if symmetric:
        log_p_s = log_softmax_rows(student_logits, temperature)
        return (Tensor(p_t) * log_p_s).sum() * (-temperature * temperature)
    log_p_s = log_softmax_rows(student_logits, 1.0)
    return (Tensor(p_t) * log_p_s).sum() * -1.0


def loss_ce(labels: np.ndarray, student_logits: Tensor) -> Tensor:
    """Hard-label cross entropy -sum_i log p_s(y_i), batch sum."""
    labels = np.asarray(labels)
    n, c = student_logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(
            f"label out of range [0, {c}): min {labels.min()}, max {labels.max()}")
    one_hot = np.zeros((n, c))
    one_hot[np.arange(n), labels] = 1.0
    log_p_s = log_softmax_rows(student_logits, 1.0)
    return (Tensor(one_hot) * log_p_s).sum() * -1.0


def kd_loss(alpha: float, l_ce: float, l_ds: float) -> float:
    """Vanilla distillation objective (1 - alpha) * l_ce + alpha * l_ds."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    return (1.0 - alpha) * l_ce + alpha * l_ds


def loss_pt(student_cls: list[Tensor], teacher_cls: list[np.ndarray],
            layer_map: LayerMap, eps_norm: float = 1e-12) -> Tensor:
    """Patient loss: squared distance between unit-normalized [CLS] states.

    ``student_cls`` holds the student's per-layer (batch, hidden) states for
    layers 1..n-1; ``teacher_cls`` holds all teacher layers as plain arrays
    (no gradient flows into the teacher). Entry j of the map names the
    teacher layer matched to student layer j+1. Hidden widths must agree;
    distilling across mismatched widths is unsupported.
    """
    if len(student_cls) != len(layer_map):
        raise ValueError(
            f"layer map has {len(layer_map)} entries but {len(student_cls)} "
            f"student states were given")
    if len(teacher_cls) < layer_map.teacher_layers:
        raise ValueError(
            f"expected {layer_map.teacher_layers} teacher states, got {len(teacher_cls)}")
    total = Tensor(0.0)
    for j, teacher_layer in enumerate(layer_map.entries):
        s = student_cls[j]
        t = np.asarray(teacher_cls[teacher_layer - 1], dtype=np.float64)
        if s.shape != t.shape:
            raise ValueError(
                f"hidden widths must match for patient distillation: student state "
                f"{s.shape} vs teacher state {t.shape}")
        t_norm = t / np.maximum(np.sqrt((t * t).sum(axis=-1, keepdims=True)), eps_norm)
        diff = l2_normalize(s, eps_norm) - Tensor(t_norm)
        total = total + (diff * diff).sum()
    return total


def pkd_loss(config: DistillConfig, l_ce: float, l_ds: float, l_pt: float) -> LossBreakdown:
    """Combine the three components under one configuration."""
    total = (1.0 - config.alpha) * l_ce + config.alpha * l_ds + config.beta * l_pt
    return LossBreakdown(l_ce=l_ce, l_ds=l_ds, l_pt=l_pt, total=total)


def init_student_from_teacher(teacher: EncoderModel, student_layers: int) -> EncoderModel:
    """Deep-copy the teacher's embeddings, first ``student_layers`` transformer
    layers, pooler and classifier into an independent student model."""
    if student_layers > teacher.config.num_layers:
        raise ValueError(
            f"student depth {student_layers} exceeds teacher depth {teacher.config.num_layers}")
    if student_layers < 1:
        raise ValueError(f"student depth must be positive, got {student_layers}")
    config = replace(teacher.config, num_layers=student_layers)
    student = build_model(config, seed=0)
    for name in student.params:
        student.params[name] = Tensor(teacher.params[name].data.copy(), requires_grad=True)
    return student
