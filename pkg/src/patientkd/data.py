"""Synthetic tasks, TSV ingestion, whitespace tokenization and batching.

Tokenization is whitespace splitting plus four reserved tokens; the
distillation math is tokenizer-agnostic, so nothing fancier is needed at
this scale. Sequences are laid out as ``[CLS] a [SEP]`` or
``[CLS] a [SEP] b [SEP]`` and padded to a fixed length.

Three synthetic tasks stand in for large-scale corpora:

* parity: label = (count of token "1") mod 2
* majority: tokens belong to class ``int(token) % 2``; label is the class
  with the larger count (ties go to class 0)
* pattern-pair: label 1 when segment b is a shuffle of segment a, label 0
  when b is an unrelated random sequence

All generation is a pure function of the task spec, splits are disjoint,
and each split is exactly label-balanced.
"""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

logger = logging.getLogger(__name__)

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP)
PAD_ID, UNK_ID, CLS_ID, SEP_ID = 0, 1, 2, 3

__all__ = [
    "Vocabulary",
    "Example",
    "SyntheticTaskSpec",
    "Batch",
    "EncodedDataset",
    "build_vocab",
    "encode",
    "decode",
    "encode_dataset",
    "load_tsv",
    "save_tsv",
    "synthetic_generate",
    "batch_iter",
    "SPECIAL_TOKENS",
    "PAD_ID", "UNK_ID", "CLS_ID", "SEP_ID",
]


class Vocabulary:
    """Dense token -> id mapping with the four reserved tokens at ids 0..3."""

    def __init__(self, tokens: list[str]):
        if tokens[:4] != list(SPECIAL_TOKENS):
            raise ValueError("vocabulary must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary contains duplicate tokens")
        self.id_to_token = list(tokens)
        self.token_to_id = {tok: i for i, tok in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def to_list(self) -> list[str]:
        return list(self.id_to_token)


def build_vocab(examples: list["Example"]) -> Vocabulary:
    """Reserved tokens followed by the sorted unique tokens of the corpus."""
    seen: set[str] = set()
    for ex in examples:
        seen.update(ex.segment_a)
        if ex.segment_b is not None:
            seen.update(ex.segment_b)
    seen -= set(SPECIAL_TOKENS)
    return Vocabulary(list(SPECIAL_TOKENS) + sorted(seen))


@dataclass(frozen=True)
class Example:
    segment_a: tuple[str, ...]
    segment_b: Optional[tuple[str, ...]]
    label: int


@dataclass(frozen=True)
class SyntheticTaskSpec:
    kind: str               # parity | majority | pattern-pair
    vocab_size: int         # number of word tokens "0".."v-1"
    seq_len: int
    count: int              # total examples across all splits
    seed: int

    def __post_init__(self):
        if self.kind not in ("parity", "majority", "pattern-pair"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.vocab_size < 2:
            raise ValueError(f"vocab_size must be at least 2, got {self.vocab_size}")
        if self.seq_len < 1 or self.count < 10:
            raise ValueError("seq_len must be >= 1 and count >= 10")


@dataclass
class Batch:
    token_ids: np.ndarray     # (batch, seq) int64
    segment_ids: np.ndarray   # (batch, seq) int64
    mask: np.ndarray          # (batch, seq) float64, 1 on real tokens
    labels: np.ndarray        # (batch,) int64
    indices: np.ndarray       # (batch,) positions in the source dataset

    def __len__(self) -> int:
        return self.token_ids.shape[0]


@dataclass
class EncodedDataset:
    token_ids: np.ndarray
    segment_ids: np.ndarray
    mask: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return self.token_ids.shape[0]

    def subset(self, idx: np.ndarray) -> Batch:
        return Batch(self.token_ids[idx], self.segment_ids[idx],
                     self.mask[idx], self.labels[idx], np.asarray(idx))

    def full_batch(self) -> Batch:
        return self.subset(np.arange(len(self)))


def encode(vocab: Vocabulary, example: Example, max_seq_len: int):
    """Encode one example to (token_ids, segment_ids, mask) of length max_seq_len.

    Layout is [CLS] a [SEP] (b [SEP] if present); segment ids are 0 over the
    first part and 1 over the second; unknown tokens map to [UNK]. If the
    encoded length exceeds max_seq_len, segment tails are trimmed (longest
    segment first, never the specials) and a warning is logged.
    """
    if not example.segment_a:
        raise ValueError("example has an empty first segment")
    a = list(example.segment_a)
    b = list(example.segment_b) if example.segment_b is not None else None
    n_special = 2 if b is None else 3
    budget = max_seq_len - n_special
    if budget < (1 if b is None else 2):
        raise ValueError(f"max_seq_len {max_seq_len} is too short to hold the layout")
    if len(a) + (len(b) if b else 0) > budget:
        dropped = len(a) + (len(b) if b else 0) - budget
        while len(a) + (len(b) if b else 0) > budget:
            if b and len(b) >= len(a) and len(b) > 1:
                b.pop()
            elif len(a) > 1:
                a.pop()
            elif b:
                b.pop()
        logger.warning("truncated %d token(s) to fit max_seq_len=%d", dropped, max_seq_len)

    tokens = [CLS] + a + [SEP]
    segments = [0] * len(tokens)
    if b is not None:
        tokens += b + [SEP]
        segments += [1] * (len(b) + 1)

    ids = np.zeros(max_seq_len, dtype=np.int64)
    seg = np.zeros(max_seq_len, dtype=np.int64)
    mask = np.zeros(max_seq_len, dtype=np.float64)
    for i, tok in enumerate(tokens):
        ids[i] = vocab.id_of(tok)
        seg[i] = segments[i]
        mask[i] = 1.0
    return ids, seg, mask


def decode(vocab: Vocabulary, ids: np.ndarray) -> list[str]:
    """Tokens for the given ids, excluding padding."""
    return [vocab.id_to_token[i] for i in ids if i != PAD_ID]


def encode_dataset(vocab: Vocabulary, examples: list[Example], max_seq_len: int) -> EncodedDataset:
    n = len(examples)
    token_ids = np.zeros((n, max_seq_len), dtype=np.int64)
    segment_ids = np.zeros((n, max_seq_len), dtype=np.int64)
    mask = np.zeros((n, max_seq_len), dtype=np.float64)
    labels = np.zeros(n, dtype=np.int64)
    for i, ex in enumerate(examples):
        token_ids[i], segment_ids[i], mask[i] = encode(vocab, ex, max_seq_len)
        labels[i] = ex.label
    return EncodedDataset(token_ids, segment_ids, mask, labels)


# ---------------------------------------------------------------------------
# TSV ingestion / export


def load_tsv(path, schema: str) -> list[Example]:
    """Parse a tab-separated file into examples, preserving order.

    ``schema`` is "single" (sentence, label) or "pair"
    (sentence1, sentence2, label). A header row is detected when the label
    column of the first row is not an integer. Malformed rows raise with
    their 1-based line number.
    """
    if schema not in ("single", "pair"):
        raise ValueError(f"unknown schema {schema!r}; expected 'single' or 'pair'")
    n_cols = 2 if schema == "single" else 3
    examples: list[Example] = []
    with open(path, "r", encoding="utf-8", newline="") as handle:
        for line_no, row in enumerate(csv.reader(handle, delimiter="\t"), start=1):
            if not row:
                continue
            if len(row) != n_cols:
                raise ValueError(
                    f"{path}: line {line_no}: expected {n_cols} tab-separated columns, "
                    f"got {len(row)}")
            try:
                label = int(row[-1])
            except ValueError:
                if line_no == 1:
                    continue  # header row
                raise ValueError(
                    f"{path}: line {line_no}: label {row[-1]!r} is not an integer") from None
            if label < 0:
                raise ValueError(f"{path}: line {line_no}: label must be nonnegative")
            seg_a = tuple(row[0].split())
            if not seg_a:
                raise ValueError(f"{path}: line {line_no}: empty sentence")
            seg_b = tuple(row[1].split()) if schema == "pair" else None
            if schema == "pair" and not seg_b:
                raise ValueError(f"{path}: line {line_no}: empty second sentence")
            examples.append(Example(seg_a, seg_b, label))
    return examples


def save_tsv(examples: list[Example], path) -> None:
    """Inverse of :func:`load_tsv`, without a header row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, delimiter="\t", lineterminator="\n")
        for ex in examples:
            row = [" ".join(ex.segment_a)]
            if ex.segment_b is not None:
                row.append(" ".join(ex.segment_b))
            row.append(str(ex.label))
            writer.writerow(row)


# ---------------------------------------------------------------------------
# synthetic task generation


def _parity_label(tokens: tuple[str, ...]) -> int:
    return tokens.count("1") % 2


def _majority_label(tokens: tuple[str, ...]) -> int:
    counts = [0, 0]
    for tok in tokens:
        counts[int(tok) % 2] += 1
    return 1 if counts[1] > counts[0] else 0


def _example_key(ex: Example) -> str:
    text = " ".join(ex.segment_a)
    if ex.segment_b is not None:
        text += "\t" + " ".join(ex.segment_b)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _draw_tokens(rng: np.random.Generator, spec: SyntheticTaskSpec) -> tuple[str, ...]:
    return tuple(str(t) for t in rng.integers(0, spec.vocab_size, size=spec.seq_len))


def _draw_example(rng: np.random.Generator, spec: SyntheticTaskSpec) -> Example:
    if spec.kind == "parity":
        a = _draw_tokens(rng, spec)
        return Example(a, None, _parity_label(a))
    if spec.kind == "majority":
        a = _draw_tokens(rng, spec)
        return Example(a, None, _majority_label(a))
    # pattern-pair: draw the intended label first so generation stays balanced
    a = _draw_tokens(rng, spec)
    if rng.random() < 0.5:
        b = tuple(str(t) for t in rng.permutation(list(a)))
        return Example(a, b, 1)
    while True:
        b = _draw_tokens(rng, spec)
        if sorted(b) != sorted(a):
            return Example(a, b, 0)


def synthetic_generate(spec: SyntheticTaskSpec):
    """Deterministic train/dev/test splits (80/10/10).

    Examples are deduplicated on their token content, so no sequence occurs
    in two splits, and each label bucket is filled to exactly half the
    requested count before splitting, so every split is label-balanced.
    """
    rng = np.random.default_rng(spec.seed)
    per_label = [spec.count // 2, spec.count - spec.count // 2]
    buckets: list[list[Example]] = [[], []]
    seen: set[str] = set()
    attempts = 0
    limit = spec.count * 1000
    while len(buckets[0]) < per_label[0] or len(buckets[1]) < per_label[1]:
        attempts += 1
        if attempts > limit:
            raise ValueError(
                f"could not generate {spec.count} distinct balanced examples for "
                f"{spec.kind} with vocab_size={spec.vocab_size}, seq_len={spec.seq_len}")
        ex = _draw_example(rng, spec)
        if len(buckets[ex.label]) >= per_label[ex.label]:
            continue
        key = _example_key(ex)
        if key in seen:
            continue
        seen.add(key)
        buckets[ex.label].append(ex)

    splits: list[list[Example]] = [[], [], []]
    for bucket in buckets:
        n = len(bucket)
        n_train = int(n * 0.8)
        n_dev = int(n * 0.1)
        splits[0] += bucket[:n_train]
        splits[1] += bucket[n_train:n_train + n_dev]
        splits[2] += bucket[n_train + n_dev:]
    for part in splits:
        order = rng.permutation(len(part))
        part[:] = [part[i] for i in order]
    return splits[0], splits[1], splits[2]


# ---------------------------------------------------------------------------
# batching


def batch_iter(dataset: EncodedDataset, batch_size: int, seed: int = 0,
               shuffle: bool = False, epoch: int = 0) -> Iterator[Batch]:
    """Yield batches, the last one possibly partial.

    With ``shuffle`` the permutation is a pure function of (seed, epoch),
    so iteration order is reproducible run to run.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be at least 1, got {batch_size}")
    n = len(dataset)
    if shuffle:
        order = np.random.default_rng([seed, epoch]).permutation(n)
    else:
        order = np.arange(n)
    for start in range(0, n, batch_size):
        yield dataset.subset(order[start:start + batch_size])
