"""Miniature BERT-style transformer encoder with a classification head.

Post-layer-norm blocks (attention, add & norm, feed-forward, add & norm),
learned token/position/segment embeddings, a tanh pooler on the final
[CLS] state and a linear classifier. The forward pass exposes the [CLS]
hidden state after every layer, which is what patient distillation
consumes. [CLS] is token position 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, matmul, softmax_rows, layer_norm, gelu, tanh, embedding, take

__all__ = [
    "EncoderConfig",
    "EncoderModel",
    "ForwardTrace",
    "ParamReport",
    "parameter_shapes",
    "build_model",
    "forward",
    "logits",
    "count_params",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    max_seq_len: int
    hidden_dim: int
    num_layers: int
    num_heads: int
    ffn_dim: int
    num_classes: int
    dropout_prob: float = 0.0

    def __post_init__(self):
        for name in ("vocab_size", "max_seq_len", "hidden_dim", "num_layers", "num_heads", "ffn_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} is not divisible by num_heads {self.num_heads}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be at least 2, got {self.num_classes}")
        if not 0.0 <= self.dropout_prob < 1.0:
            raise ValueError(f"dropout_prob must be in [0, 1), got {self.dropout_prob}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


def parameter_shapes(config: EncoderConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) list of every parameter tensor; the single
    source of truth for model construction, counting and checkpoints."""
    d, f, c = config.hidden_dim, config.ffn_dim, config.num_classes
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("embeddings.token", (config.vocab_size, d)),
        ("embeddings.position", (config.max_seq_len, d)),
        ("embeddings.segment", (2, d)),
        ("embeddings.norm_gain", (d,)),
        ("embeddings.norm_bias", (d,)),
    ]
    for i in range(config.num_layers):
        p = f"layers.{i}"
        shapes += [
            (f"{p}.attn.wq", (d, d)), (f"{p}.attn.bq", (d,)),
            (f"{p}.attn.wk", (d, d)), (f"{p}.attn.bk", (d,)),
            (f"{p}.attn.wv", (d, d)), (f"{p}.attn.bv", (d,)),
            (f"{p}.attn.wo", (d, d)), (f"{p}.attn.bo", (d,)),
            (f"{p}.attn.norm_gain", (d,)), (f"{p}.attn.norm_bias", (d,)),
            (f"{p}.ffn.w1", (d, f)), (f"{p}.ffn.b1", (f,)),
            (f"{p}.ffn.w2", (f, d)), (f"{p}.ffn.b2", (d,)),
            (f"{p}.ffn.norm_gain", (d,)), (f"{p}.ffn.norm_bias", (d,)),
        ]
    shapes += [
        ("pooler.weight", (d, d)), ("pooler.bias", (d,)),
        ("classifier.weight", (d, c)), ("classifier.bias", (c,)),
    ]
    return shapes


class EncoderModel:
    """Configuration plus an ordered name -> Tensor parameter mapping.

    Parameters are replaced, never mutated in place, so forwards recorded
    on a tape stay valid until the next optimizer step.
    """

    def __init__(self, config: EncoderConfig, params: dict[str, Tensor]):
        expected = parameter_shapes(config)
        if [(n, p.shape) for n, p in params.items()] != expected:
            raise ValueError("parameter names/shapes do not match the configuration")
        self.config = config
        self.params = params

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def set_param_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name in self.params:
            self.params[name] = Tensor(arrays[name], requires_grad=True)

    def copy(self) -> "EncoderModel":
        params = {n: Tensor(p.data.copy(), requires_grad=True) for n, p in self.params.items()}
        return EncoderModel(self.config, params)


@dataclass
class ForwardTrace:
    """Per-batch record of every layer's [CLS] state plus the final logits.

    ``cls_states[j]`` is a (batch, hidden) tensor: the hidden state at
    position 0 after layer j+1. ``final_logits`` comes from the tanh-pooled
    last-layer [CLS] state only.
    """
    cls_states: list[Tensor]
    final_logits: Tensor
    attention: Optional[list[np.ndarray]] = None
    model_ref: int = 0
    batch_size: int = 0

    def cls_matrix(self, example: int) -> np.ndarray:
        """The (num_layers, hidden) [CLS] matrix for one example."""
        return np.stack([layer.data[example] for layer in self.cls_states])


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) resampled until within 2 std, as in BERT's initializer."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


def build_model(config: EncoderConfig, seed: int) -> EncoderModel:
    """Seeded initialization: truncated normal (std 0.02) for weight matrices
    and embeddings, zeros for biases, ones for norm gains."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(config):
        leaf = name.rpartition(".")[2]
        if leaf == "norm_gain":
            arr = np.ones(shape)
        elif leaf == "norm_bias" or leaf.startswith("b"):
            arr = np.zeros(shape)
        else:
            arr = _truncated_normal(rng, shape, 0.02)
        params[name] = Tensor(arr, requires_grad=True)
    return EncoderModel(config, params)


def forward(model: EncoderModel, batch, train: bool = False,
            keep_attention: bool = False,
            rng: Optional[np.random.Generator] = None) -> ForwardTrace:
    """Run the encoder over a batch; records on the active tape, if any.

    ``batch`` needs integer ``token_ids``/``segment_ids`` and a 0/1 ``mask``,
    all of shape (batch, seq). Padding positions are masked out of attention
    and can never influence any [CLS] state. With dropout disabled the pass
    is deterministic and bitwise repeat-stable.
    """
    cfg = model.config
    ids = np.asarray(batch.token_ids)
    segs = np.asarray(batch.segment_ids)
    mask = np.asarray(batch.mask, dtype=np.float64)
    n_batch, seq_len = ids.shape
    if seq_len > cfg.max_seq_len:
        raise ValueError(f"sequence length {seq_len} exceeds max_seq_len {cfg.max_seq_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ValueError(
            f"token id out of vocabulary range [0, {cfg.vocab_size}): "
            f"min {ids.min()}, max {ids.max()}")

    p = model.params
    drop = cfg.dropout_prob if train else 0.0
    if drop > 0.0 and rng is None:
        raise ValueError("dropout is enabled but no rng was provided")

    def maybe_drop(t: Tensor) -> Tensor:
        return ad.dropout(t, drop, rng) if drop > 0.0 else t

    pos_ids = np.broadcast_to(np.arange(seq_len), (n_batch, seq_len))
    x = embedding(p["embeddings.token"], ids) \
        + embedding(p["embeddings.position"], pos_ids) \
        + embedding(p["embeddings.segment"], segs)
    x = layer_norm(x, p["embeddings.norm_gain"], p["embeddings.norm_bias"])
    x = maybe_drop(x)

    # additive attention bias: 0 on real tokens, a huge negative on padding,
    # which underflows to exactly zero probability after softmax
    attn_bias = Tensor(((1.0 - mask) * -1e30)[:, None, None, :])

    heads = cfg.num_heads
    head_dim = cfg.hidden_dim // heads
    inv_sqrt = 1.0 / math.sqrt(head_dim)

    def split_heads(t: Tensor) -> Tensor:
        return t.reshape((n_batch, seq_len, heads, head_dim)).transpose((0, 2, 1, 3))

    cls_states: list[Tensor] = []
    attention: Optional[list[np.ndarray]] = [] if keep_attention else None
    for i in range(cfg.num_layers):
        lp = f"layers.{i}"
        q = split_heads(matmul(x, p[f"{lp}.attn.wq"]) + p[f"{lp}.attn.bq"])
        k = split_heads(matmul(x, p[f"{lp}.attn.wk"]) + p[f"{lp}.attn.bk"])
        v = split_heads(matmul(x, p[f"{lp}.attn.wv"]) + p[f"{lp}.attn.bv"])
        scores = matmul(q, k.transpose((0, 1, 3, 2))) * inv_sqrt + attn_bias
        probs = softmax_rows(scores)
        if attention is not None:
            attention.append(probs.data.copy())
        ctx = matmul(probs, v).transpose((0, 2, 1, 3)).reshape((n_batch, seq_len, cfg.hidden_dim))
        attn_out = maybe_drop(matmul(ctx, p[f"{lp}.attn.wo"]) + p[f"{lp}.attn.bo"])
        x = layer_norm(x + attn_out, p[f"{lp}.attn.norm_gain"], p[f"{lp}.attn.norm_bias"])

        hidden = gelu(matmul(x, p[f"{lp}.ffn.w1"]) + p[f"{lp}.ffn.b1"])
        ffn_out = maybe_drop(matmul(hidden, p[f"{lp}.ffn.w2"]) + p[f"{lp}.ffn.b2"])
        x = layer_norm(x + ffn_out, p[f"{lp}.ffn.norm_gain"], p[f"{lp}.ffn.norm_bias"])

        cls_states.append(take(x, 0, axis=1))

    pooled = tanh(matmul(cls_states[-1], p["pooler.weight"]) + p["pooler.bias"])
    final_logits = matmul(pooled, p["classifier.weight"]) + p["classifier.bias"]
    return ForwardTrace(cls_states=cls_states, final_logits=final_logits,
                        attention=attention, model_ref=id(model), batch_size=n_batch)


def logits(model: EncoderModel, trace: ForwardTrace) -> Tensor:
    """Raw (pre-softmax) classifier outputs for a trace of this model."""
    if trace.model_ref != id(model):
        raise ValueError("trace was produced by a different model")
    return trace.final_logits


@dataclass(frozen=True)
class ParamReport:
    emb_params: int
    trm_params: int
    pooler_params: int
    classifier_params: int
    total: int


def count_params(config: EncoderConfig) -> ParamReport:
    """Closed-form parameter accounting.

    Embeddings cover the three lookup tables plus their layer norm; the
    per-layer transformer cost is the four attention projections, the two
    feed-forward maps and two layer norms, and grows exactly linearly with
    depth. The pooler is reported separately from the task classifier.
    """
    d, f = config.hidden_dim, config.ffn_dim
    emb = (config.vocab_size + config.max_seq_len + 2) * d + 2 * d
    per_layer = 4 * (d * d + d) + (d * f + f) + (f * d + d) + 4 * d
    trm = config.num_layers * per_layer
    pooler = d * d + d
    classifier = d * config.num_classes + config.num_classes
    return ParamReport(emb, trm, pooler, classifier, emb + trm + pooler + classifier)


# ---------------------------------------------------------------------------
# checkpoint format: manifest.json + params.bin (little-endian binary64)


def save_checkpoint(model: EncoderModel, path) -> None:
    """Write manifest.json and params.bin into ``path`` (created if needed)."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    tensors = []
    offset = 0
    blobs = []
    for name, p in model.params.items():
        blob = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        tensors.append({"name": name, "shape": list(p.shape), "byte_offset": offset})
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": model.config.to_dict(),
        "tensors": tensors,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    (out / "params.bin").write_bytes(b"".join(blobs))


def load_checkpoint(path) -> EncoderModel:
    """Inverse of :func:`save_checkpoint`; bitwise lossless."""
    src = Path(path)
    manifest_path = src / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json in checkpoint directory {src}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {manifest.get('format_version')}")
    config = EncoderConfig.from_dict(manifest["config"])
    raw = (src / "params.bin").read_bytes()
    expected = parameter_shapes(config)
    entries = [(t["name"], tuple(t["shape"]), t["byte_offset"]) for t in manifest["tensors"]]
    if [(n, s) for n, s, _ in entries] != expected:
        raise ValueError("checkpoint tensor list does not match its configuration")
    params: dict[str, Tensor] = {}
    for name, shape, offset in entries:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        params[name] = Tensor(arr.astype(np.float64).reshape(shape), requires_grad=True)
    return EncoderModel(config, params)
