"""Tokenization, TSV ingestion, synthetic task generation and batching."""

import logging

import numpy as np
import pytest

from patientkd.data import (
    CLS_ID,
    PAD_ID,
    SEP_ID,
    UNK_ID,
    Example,
    SyntheticTaskSpec,
    Vocabulary,
    batch_iter,
    build_vocab,
    decode,
    encode,
    encode_dataset,
    load_tsv,
    save_tsv,
    synthetic_generate,
)


@pytest.fixture
def vocab():
    return Vocabulary(["[PAD]", "[UNK]", "[CLS]", "[SEP]", "a", "b", "c"])


class TestEncode:
    def test_single_segment_layout(self, vocab):
        ids, seg, mask = encode(vocab, Example(("a", "b"), None, 0), max_seq_len=6)
        assert list(ids) == [CLS_ID, 4, 5, SEP_ID, PAD_ID, PAD_ID]
        assert list(mask) == [1, 1, 1, 1, 0, 0]
        assert list(seg) == [0, 0, 0, 0, 0, 0]

    def test_pair_segment_ids(self, vocab):
        ids, seg, mask = encode(vocab, Example(("a",), ("b", "c"), 1), max_seq_len=8)
        assert list(ids) == [CLS_ID, 4, SEP_ID, 5, 6, SEP_ID, PAD_ID, PAD_ID]
        assert list(seg) == [0, 0, 0, 1, 1, 1, 0, 0]
        assert list(mask) == [1, 1, 1, 1, 1, 1, 0, 0]

    def test_unknown_token_maps_to_unk(self, vocab):
        ids, _, _ = encode(vocab, Example(("zzz",), None, 0), max_seq_len=4)
        assert ids[1] == UNK_ID

    def test_truncation_drops_tails_not_specials(self, vocab, caplog):
        with caplog.at_level(logging.WARNING):
            ids, _, mask = encode(vocab, Example(("a", "b", "c", "a", "b"), None, 0),
                                  max_seq_len=5)
        assert list(ids) == [CLS_ID, 4, 5, 6, SEP_ID]
        assert mask.sum() == 5
        assert "truncated" in caplog.text

    def test_pair_truncation_trims_longest_segment_first(self, vocab):
        ids, seg, _ = encode(vocab, Example(("a",), ("b", "c", "b", "c"), 0), max_seq_len=6)
        # budget 3 for tokens: a | b c -> [CLS] a [SEP] b c [SEP]
        assert list(ids) == [CLS_ID, 4, SEP_ID, 5, 6, SEP_ID]

    def test_empty_example_rejected(self, vocab):
        with pytest.raises(ValueError, match="empty"):
            encode(vocab, Example((), None, 0), max_seq_len=4)

    def test_round_trip_in_vocab_tokens(self, vocab):
        ex = Example(("a", "c", "b"), None, 0)
        ids, _, _ = encode(vocab, ex, max_seq_len=8)
        assert decode(vocab, ids) == ["[CLS]", "a", "c", "b", "[SEP]"]

    def test_mask_marks_exactly_non_pad(self, vocab):
        ids, _, mask = encode(vocab, Example(("a", "b", "c"), None, 0), max_seq_len=9)
        np.testing.assert_array_equal(mask, (ids != PAD_ID).astype(float))


class TestVocabulary:
    def test_reserved_tokens_required(self):
        with pytest.raises(ValueError, match="reserved"):
            Vocabulary(["a", "b"])

    def test_build_from_examples_sorted_dense(self):
        examples = [Example(("cc", "aa"), ("bb",), 0)]
        vocab = build_vocab(examples)
        assert vocab.to_list() == ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "aa", "bb", "cc"]
        assert [vocab.id_of(t) for t in vocab.to_list()] == list(range(7))


class TestLoadTsv:
    def test_valid_file_preserves_order(self, tmp_path):
        path = tmp_path / "data.tsv"
        path.write_text("a b\t1\nc d\t0\n", encoding="utf-8")
        examples = load_tsv(path, "single")
        assert examples == [Example(("a", "b"), None, 1), Example(("c", "d"), None, 0)]

    def test_pair_schema(self, tmp_path):
        path = tmp_path / "data.tsv"
        path.write_text("a\tb c\t1\n", encoding="utf-8")
        assert load_tsv(path, "pair") == [Example(("a",), ("b", "c"), 1)]

    def test_missing_column_names_line(self, tmp_path):
        path = tmp_path / "data.tsv"
        path.write_text("a b\t1\nc d\n", encoding="utf-8")
        with pytest.raises(ValueError, match="line 2"):
            load_tsv(path, "single")

    def test_non_integer_label_names_line(self, tmp_path):
        path = tmp_path / "data.tsv"
        path.write_text("a\t1\nb\tx\n", encoding="utf-8")
        with pytest.raises(ValueError, match="line 2"):
            load_tsv(path, "single")

    def test_header_detected_when_first_label_non_numeric(self, tmp_path):
        path = tmp_path / "data.tsv"
        path.write_text("sentence\tlabel\na b\t1\n", encoding="utf-8")
        examples = load_tsv(path, "single")
        assert examples == [Example(("a", "b"), None, 1)]

    def test_unknown_schema(self, tmp_path):
        with pytest.raises(ValueError, match="schema"):
            load_tsv(tmp_path / "x.tsv", "triple")

    def test_save_load_round_trip(self, tmp_path):
        examples = [Example(("a", "b"), ("c",), 1), Example(("d",), ("e", "f"), 0)]
        save_tsv(examples, tmp_path / "out.tsv")
        assert load_tsv(tmp_path / "out.tsv", "pair") == examples


class TestSynthetic:
    def test_parity_labels_recomputable(self):
        spec = SyntheticTaskSpec(kind="parity", vocab_size=8, seq_len=12, count=300, seed=3)
        for split in synthetic_generate(spec):
            for ex in split:
                assert ex.label == ex.segment_a.count("1") % 2

    def test_majority_labels_recomputable(self):
        spec = SyntheticTaskSpec(kind="majority", vocab_size=4, seq_len=9, count=300, seed=4)
        for split in synthetic_generate(spec):
            for ex in split:
                ones = sum(1 for t in ex.segment_a if int(t) % 2 == 1)
                zeros = len(ex.segment_a) - ones
                assert ex.label == (1 if ones > zeros else 0)

    def test_pattern_pair_labels_recomputable(self):
        spec = SyntheticTaskSpec(kind="pattern-pair", vocab_size=6, seq_len=8, count=300, seed=5)
        for split in synthetic_generate(spec):
            for ex in split:
                assert ex.label == (1 if sorted(ex.segment_b) == sorted(ex.segment_a) else 0)

    def test_deterministic_per_seed(self):
        spec = SyntheticTaskSpec(kind="parity", vocab_size=8, seq_len=10, count=200, seed=9)
        assert synthetic_generate(spec) == synthetic_generate(spec)

    def test_different_seeds_differ(self):
        a = synthetic_generate(SyntheticTaskSpec("parity", 8, 10, 200, seed=1))
        b = synthetic_generate(SyntheticTaskSpec("parity", 8, 10, 200, seed=2))
        assert a != b

    def test_split_sizes_and_balance(self):
        spec = SyntheticTaskSpec(kind="majority", vocab_size=4, seq_len=11, count=1000, seed=0)
        train, dev, test = synthetic_generate(spec)
        assert (len(train), len(dev), len(test)) == (800, 100, 100)
        for split in (train, dev, test):
            share = sum(ex.label for ex in split) / len(split)
            assert abs(share - 0.5) <= 0.05

    def test_splits_disjoint_by_content(self):
        spec = SyntheticTaskSpec(kind="parity", vocab_size=8, seq_len=10, count=600, seed=2)
        train, dev, test = synthetic_generate(spec)
        seen = [frozenset((" ".join(ex.segment_a)) for ex in split)
                for split in (train, dev, test)]
        assert not (seen[0] & seen[1]) and not (seen[0] & seen[2]) and not (seen[1] & seen[2])

    def test_degenerate_majority_all_identical(self):
        # all-"3" sequence: class of token 3 is 1, so the label must be 1
        from patientkd.data import _majority_label
        assert _majority_label(("3",) * 7) == 1
        assert _majority_label(("2",) * 7) == 0

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="kind"):
            SyntheticTaskSpec(kind="sorting", vocab_size=4, seq_len=8, count=100, seed=0)


class TestBatchIter:
    def make_dataset(self, n=10, seq=5):
        vocab = Vocabulary(["[PAD]", "[UNK]", "[CLS]", "[SEP]", "t"])
        examples = [Example(("t",) * (1 + i % 3), None, i % 2) for i in range(n)]
        return encode_dataset(vocab, examples, seq)

    def test_batch_sizes_with_partial_tail(self):
        ds = self.make_dataset(10)
        sizes = [len(b) for b in batch_iter(ds, 4)]
        assert sizes == [4, 4, 2]

    def test_unshuffled_preserves_order(self):
        ds = self.make_dataset(7)
        indices = np.concatenate([b.indices for b in batch_iter(ds, 3, shuffle=False)])
        np.testing.assert_array_equal(indices, np.arange(7))

    def test_same_seed_same_permutation(self):
        ds = self.make_dataset(20)
        a = np.concatenate([b.indices for b in batch_iter(ds, 6, seed=5, shuffle=True)])
        b = np.concatenate([b.indices for b in batch_iter(ds, 6, seed=5, shuffle=True)])
        np.testing.assert_array_equal(a, b)
        assert sorted(a) == list(range(20))

    def test_epochs_permute_differently(self):
        ds = self.make_dataset(20)
        a = np.concatenate([b.indices for b in batch_iter(ds, 20, seed=5, shuffle=True, epoch=0)])
        b = np.concatenate([b.indices for b in batch_iter(ds, 20, seed=5, shuffle=True, epoch=1)])
        assert (a != b).any()

    def test_rejects_bad_batch_size(self):
        with pytest.raises(ValueError, match="batch_size"):
            list(batch_iter(self.make_dataset(4), 0))
