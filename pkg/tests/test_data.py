import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hdpl.data import (
    BYTE_VOCAB,
    Corpus,
    CorpusError,
    detokenize,
    load_corpus,
    next_batch,
    sequential_blocks,
    split_corpus,
    tokenize_bytes,
)
from hdpl.rng import RngState


def test_tokenize_ascii():
    assert tokenize_bytes(b"ab").tolist() == [97, 98]
    assert tokenize_bytes(b"").size == 0


@given(st.binary(max_size=200))
def test_roundtrip(data):
    ids = tokenize_bytes(data)
    assert ids.size == 0 or ids.max() < BYTE_VOCAB
    assert detokenize(ids) == data


def test_load_concatenates_with_manifest(tmp_path):
    a, b = tmp_path / "a.txt", tmp_path / "b.bin"
    a.write_bytes(b"hello ")
    b.write_bytes(bytes([0, 255]))
    corpus = load_corpus([a, b])
    assert detokenize(corpus.tokens) == b"hello \x00\xff"
    assert corpus.sources == [(str(a), 0, 6), (str(b), 6, 2)]
    assert corpus.vocab_size == 256


def test_missing_file(tmp_path):
    with pytest.raises(OSError):
        load_corpus([tmp_path / "nope.txt"])


class TestSplit:
    def test_sizes(self):
        train, val = split_corpus(Corpus(np.arange(1000) % 256), 0.1, 8)
        assert len(train) == 900 and len(val) == 100
        assert val.start == 900
        assert np.array_equal(np.concatenate([train.tokens, val.tokens]), np.arange(1000) % 256)

    def test_deterministic(self):
        c = Corpus(np.random.default_rng(0).integers(0, 256, 500))
        (t1, v1), (t2, v2) = split_corpus(c, 0.3, 4), split_corpus(c, 0.3, 4)
        assert np.array_equal(t1.tokens, t2.tokens) and np.array_equal(v1.tokens, v2.tokens)

    def test_minimal_split_yields_one_block_each(self):
        seq_len = 8
        train, val = split_corpus(Corpus(np.arange(2 * (seq_len + 1))), 0.5, seq_len)
        assert len(list(sequential_blocks(train, 4, seq_len))) == 1
        assert len(list(sequential_blocks(val, 4, seq_len))) == 1

    def test_too_small(self):
        with pytest.raises(CorpusError):
            split_corpus(Corpus(np.arange(17)), 0.5, 8)

    @pytest.mark.parametrize("frac", [0.0, 1.0, -0.1])
    def test_bad_fraction(self, frac):
        with pytest.raises(ValueError):
            split_corpus(Corpus(np.arange(100)), frac, 4)


class TestBatches:
    def test_forced_offset(self):
        b = next_batch(Corpus(np.arange(5)), 1, 2, RngState(), offsets=[0])
        assert b.inputs.tolist() == [[0, 1]] and b.targets.tolist() == [[1, 2]]

    def test_wraps_at_end(self):
        b = next_batch(Corpus(np.arange(5)), 1, 3, RngState(), offsets=[3])
        assert b.inputs.tolist() == [[3, 4, 0]] and b.targets.tolist() == [[4, 0, 1]]

    def test_seeded(self):
        c = Corpus(np.random.default_rng(0).integers(0, 256, 300))
        a = [next_batch(c, 4, 8, RngState(7, s)).inputs for s in range(5)]
        b = [next_batch(c, 4, 8, RngState(7, s)).inputs for s in range(5)]
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        assert not np.array_equal(a[0], a[1])

    @settings(max_examples=30)
    @given(seed=st.integers(0, 2**32), n=st.integers(10, 80), seq_len=st.integers(1, 9))
    def test_shift_property(self, seed, n, seq_len):
        tokens = np.random.default_rng(seed).integers(0, 256, n)
        b = next_batch(Corpus(tokens), 3, seq_len, RngState(seed))
        for row, o in enumerate(b.offsets):
            for t in range(seq_len):
                assert b.inputs[row, t] == tokens[(o + t) % n]
                assert b.targets[row, t] == tokens[(o + t + 1) % n]

    def test_offset_coverage(self):
        c = Corpus(np.zeros(1000, dtype=np.int64))
        seen = np.concatenate([next_batch(c, 100, 4, RngState(1, s)).offsets for s in range(100)])
        assert seen.size == 10_000
        assert np.unique(seen).size == 1000

    def test_too_short(self):
        with pytest.raises(CorpusError):
            next_batch(Corpus(np.arange(3)), 1, 3, RngState())

    def test_train_batches_never_touch_validation(self):
        train, val = split_corpus(Corpus(np.arange(400)), 0.25, 16)
        for s in range(50):
            b = next_batch(train, 8, 16, RngState(0, s))
            assert b.inputs.max() < val.start and b.targets.max() < val.start

    def test_sequential_blocks_cover_without_overlap(self):
        c = Corpus(np.arange(41))
        batches = list(sequential_blocks(c, 2, 8))
        rows = np.concatenate([b.inputs for b in batches])
        assert rows.shape == (5, 8)
        assert np.array_equal(rows.ravel(), np.arange(40))
        assert len(list(sequential_blocks(c, 2, 8, max_batches=1))) == 1
