"""Patient knowledge distillation for miniature BERT-style classifiers.

A compact, dependency-light stack: a tape-based reverse-mode autodiff
engine over numpy float64 arrays, a small transformer encoder that exposes
every layer's [CLS] state, the distillation objectives (hard labels, soft
labels, patient intermediate-layer matching), deterministic training
loops, and a CLI with an inference benchmark.
"""

from .autodiff import Tape, Tensor, backward, finite_diff_grad
from .data import Example, SyntheticTaskSpec, Vocabulary, batch_iter, synthetic_generate
from .distill import (
    DistillConfig,
    DistillStrategy,
    LayerMap,
    build_layer_map,
    init_student_from_teacher,
)
from .encoder import EncoderConfig, EncoderModel, ForwardTrace, build_model, count_params, forward
from .train import OptimizerConfig, RunRecord, distill, evaluate, finetune_student, train_teacher

__version__ = "0.1.0"
