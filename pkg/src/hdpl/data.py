"""Byte-level corpus loading, splitting and batching."""

from __future__ import annotations

import math
import sysconfig
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import DATA_STREAM, RngState

BYTE_VOCAB = 256


class CorpusError(ValueError):
    pass


@dataclass
class Corpus:
    tokens: np.ndarray  # int64 ids
    vocab_size: int = BYTE_VOCAB
    sources: list[tuple[str, int, int]] = field(default_factory=list)  # (path, start, length)
    start: int = 0  # offset of tokens[0] in the unsplit stream

    def __len__(self) -> int:
        return int(self.tokens.shape[0])


@dataclass
class Batch:
    inputs: np.ndarray  # [B, L]
    targets: np.ndarray  # [B, L]
    offsets: np.ndarray  # [B]


def tokenize_bytes(data: bytes) -> np.ndarray:
    return np.frombuffer(bytes(data), dtype=np.uint8).astype(np.int64)


def detokenize(ids) -> bytes:
    return np.asarray(ids, dtype=np.uint8).tobytes()


def load_corpus(paths) -> Corpus:
    chunks, sources, pos = [], [], 0
    for path in paths:
        raw = Path(path).read_bytes()
        chunks.append(tokenize_bytes(raw))
        sources.append((str(path), pos, len(raw)))
        pos += len(raw)
    tokens = np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.int64)
    return Corpus(tokens=tokens, sources=sources)


def split_corpus(corpus: Corpus, val_fraction: float, seq_len: int) -> tuple[Corpus, Corpus]:
    """Last ``ceil(val_fraction * n)`` tokens go to validation."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    n = len(corpus)
    n_val = math.ceil(val_fraction * n)
    n_train = n - n_val
    if min(n_train, n_val) < seq_len + 1:
        raise CorpusError(
            f"corpus of {n} tokens too small: train={n_train}, val={n_val}, each needs >= {seq_len + 1}"
        )
    train = Corpus(corpus.tokens[:n_train], corpus.vocab_size, corpus.sources, corpus.start)
    val = Corpus(corpus.tokens[n_train:], corpus.vocab_size, corpus.sources, corpus.start + n_train)
    return train, val


def next_batch(corpus: Corpus, batch_size: int, seq_len: int, rng: RngState, offsets=None) -> Batch:
    """Rows ``tokens[o : o+L]`` with targets shifted by one; indices wrap."""
    n = len(corpus)
    if n < seq_len + 1:
        raise CorpusError(f"corpus of {n} tokens shorter than one block of {seq_len + 1}")
    if offsets is None:
        offsets = rng.integers(DATA_STREAM, batch_size, n)
    offsets = np.asarray(offsets, dtype=np.int64)
    idx = (offsets[:, None] + np.arange(seq_len + 1)[None, :]) % n
    block = corpus.tokens[idx]
    return Batch(inputs=block[:, :-1], targets=block[:, 1:], offsets=offsets)


def sequential_blocks(corpus: Corpus, batch_size: int, seq_len: int, max_batches: int | None = None):
    """Non-overlapping validation batches, in order, without wrap-around."""
    n_blocks = (len(corpus) - 1) // seq_len
    starts = np.arange(n_blocks) * seq_len
    count = 0
    for i in range(0, n_blocks, batch_size):
        if max_batches is not None and count >= max_batches:
            break
        offs = starts[i : i + batch_size]
        idx = offs[:, None] + np.arange(seq_len + 1)[None, :]
        block = corpus.tokens[idx]
        yield Batch(inputs=block[:, :-1], targets=block[:, 1:], offsets=offs)
        count += 1


def build_stdlib_corpus(target_bytes: int, root: str | Path | None = None) -> bytes:
    """First ``target_bytes`` of the local standard library's ``*.py`` sources.

    Files are taken in sorted path order, so the result only depends on the
    Python build.
    """
    root = Path(root) if root is not None else Path(sysconfig.get_paths()["stdlib"])
    parts, total = [], 0
    for path in sorted(root.rglob("*.py")):
        if "site-packages" in path.parts or "dist-packages" in path.parts:
            continue
        try:
            data = path.read_bytes()
        except OSError:
            continue
        parts.append(data)
        total += len(data) + 1
        if total >= target_bytes:
            break
    blob = b"\n".join(parts)
    if len(blob) < target_bytes:
        raise CorpusError(f"only {len(blob)} bytes of sources under {root}, wanted {target_bytes}")
    return blob[:target_bytes]
