"""Vocabulary construction and skip-gram word embeddings.

The embedding table is trained once on the caption corpus with skip-gram
plus negative sampling; the decoder later regresses onto its rows and maps
regressed vectors back to words by nearest-neighbor lookup.
"""

from __future__ import annotations

import struct
import zlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

START = "<start>"
END = "<end>"
UNK = "<unk>"
RESERVED = (START, END, UNK)

_MAGIC = b"GEMB"
_VERSION = 1


class EmbeddingError(Exception):
    pass


@dataclass
class Vocabulary:
    """Bijective token <-> index mapping with reserved control tokens."""

    index_to_token: list[str]
    token_to_index: dict[str, int] = field(init=False)
    min_count: int = 1

    def __post_init__(self):
        self.token_to_index = {t: i for i, t in enumerate(self.index_to_token)}
        if len(self.token_to_index) != len(self.index_to_token):
            raise EmbeddingError("duplicate tokens in vocabulary")
        for i, tok in enumerate(RESERVED):
            if self.index_to_token[i] != tok:
                raise EmbeddingError(f"reserved token {tok} must sit at index {i}")

    def __len__(self):
        return len(self.index_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_index

    def encode(self, token: str) -> int:
        return self.token_to_index.get(token, self.token_to_index[UNK])

    def decode(self, index: int) -> str:
        return self.index_to_token[index]

    def encode_sequence(self, tokens: list[str]) -> list[int]:
        return [self.encode(t) for t in tokens]

    def content_hash(self) -> int:
        """Stable hash of the token list, for checkpoint compatibility checks."""
        return zlib.crc32("\x00".join(self.index_to_token).encode("utf-8"))


def build_vocab(corpus: list[list[str]], min_count: int = 1) -> Vocabulary:
    """Build a vocabulary from tokenized sentences.

    Tokens seen fewer than ``min_count`` times collapse to <unk>. Reserved
    tokens always occupy indices 0..2.
    """
    if not corpus:
        raise EmbeddingError("empty corpus")
    counts = Counter()
    for sentence in corpus:
        counts.update(sentence)
    kept = sorted(t for t, c in counts.items()
                  if c >= min_count and t not in RESERVED)
    return Vocabulary(list(RESERVED) + kept, min_count=min_count)


def skipgram_pairs(tokens: list, window: int) -> list[tuple]:
    """All (center, context) pairs within the window, clipped at boundaries."""
    if window < 1:
        raise ValueError("window must be >= 1")
    pairs = []
    n = len(tokens)
    for i in range(n):
        for j in range(max(0, i - window), min(n, i + window + 1)):
            if j != i:
                pairs.append((tokens[i], tokens[j]))
    return pairs


@dataclass
class EmbeddingTable:
    """|V| x d matrix of word vectors plus the vocabulary indexing it."""

    vocab: Vocabulary
    vectors: np.ndarray

    def __post_init__(self):
        if self.vectors.shape[0] != len(self.vocab):
            raise EmbeddingError("row count does not match vocabulary size")
        if not np.all(np.isfinite(self.vectors)):
            raise EmbeddingError("non-finite embedding values")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def lookup(self, token: str) -> np.ndarray:
        return self.vectors[self.vocab.encode(token)]

    def save(self, path) -> None:
        """Binary layout: magic, version, |V|, d, token list, f32 rows."""
        path = Path(path)
        tokens_blob = b"\x00".join(t.encode("utf-8") for t in self.vocab.index_to_token)
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<III", _VERSION, len(self.vocab), self.dim))
            fh.write(struct.pack("<I", len(tokens_blob)))
            fh.write(tokens_blob)
            fh.write(self.vectors.astype("<f4").tobytes())
        sidecar = path.with_suffix(path.suffix + ".txt")
        with open(sidecar, "w", encoding="utf-8") as fh:
            for tok, row in zip(self.vocab.index_to_token, self.vectors):
                fh.write(tok + " " + " ".join(f"{v:.6g}" for v in row) + "\n")

    @classmethod
    def load(cls, path) -> "EmbeddingTable":
        with open(path, "rb") as fh:
            if fh.read(4) != _MAGIC:
                raise EmbeddingError("bad magic in embedding file")
            version, nv, d = struct.unpack("<III", fh.read(12))
            if version != _VERSION:
                raise EmbeddingError(f"unsupported embedding file version {version}")
            blob_len, = struct.unpack("<I", fh.read(4))
            tokens = fh.read(blob_len).decode("utf-8").split("\x00")
            if len(tokens) != nv:
                raise EmbeddingError("token list length disagrees with header")
            payload = fh.read(nv * d * 4)
            if len(payload) != nv * d * 4:
                raise EmbeddingError("truncated embedding payload")
            vectors = np.frombuffer(payload, dtype="<f4").reshape(nv, d).astype(np.float64)
        return cls(Vocabulary(tokens), vectors)


def nearest_word(v: np.ndarray, table: EmbeddingTable, metric: str = "l2") -> str:
    """Token whose embedding row is closest to v; ties break to lowest index."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (table.dim,):
        raise EmbeddingError(f"query dimension {v.shape} does not match table dim {table.dim}")
    if metric == "l2":
        d = ((table.vectors - v) ** 2).sum(axis=1)
        idx = int(np.argmin(d))
    elif metric == "cosine":
        norms = np.linalg.norm(table.vectors, axis=1) * max(np.linalg.norm(v), 1e-12)
        sims = table.vectors @ v / np.maximum(norms, 1e-12)
        idx = int(np.argmax(sims))
    else:
        raise ValueError(f"unknown metric {metric!r}")
    return table.vocab.decode(idx)


def train_skipgram(corpus: list[list[str]], vocab: Vocabulary, d: int = 64,
                   window: int = 2, epochs: int = 5, negatives: int = 5,
                   lr: float = 0.025, seed: int = 0) -> EmbeddingTable:
    """Skip-gram with negative sampling; returns the input matrix as the table.

    Sentences get <start>/<end> wrapped before pair extraction so both
    control tokens receive trained vectors.
    """
    if d < 2:
        raise ValueError("embedding dimension must be >= 2")
    rng = np.random.default_rng(seed)
    nv = len(vocab)

    encoded = [[vocab.token_to_index[START]] + vocab.encode_sequence(s)
               + [vocab.token_to_index[END]] for s in corpus]
    pairs = []
    for sent in encoded:
        pairs.extend(skipgram_pairs(sent, window))
    if not pairs:
        raise EmbeddingError("no training pairs (corpus too short for the window)")
    pairs = np.asarray(pairs, dtype=np.int64)

    # unigram^0.75 negative-sampling distribution
    freq = np.bincount(np.concatenate(encoded), minlength=nv).astype(np.float64)
    noise = freq ** 0.75
    noise /= noise.sum()

    w_in = (rng.random((nv, d)) - 0.5) / d
    w_out = np.zeros((nv, d))

    losses = []
    for _ in range(epochs):
        order = rng.permutation(len(pairs))
        epoch_loss = 0.0
        for center, context in pairs[order]:
            neg = rng.choice(nv, size=negatives, p=noise)
            targets = np.concatenate(([context], neg))
            labels = np.zeros(negatives + 1)
            labels[0] = 1.0
            h = w_in[center]
            scores = w_out[targets] @ h
            p = 1.0 / (1.0 + np.exp(-scores))
            epoch_loss += -np.log(np.clip(np.where(labels == 1, p, 1 - p), 1e-12, None)).sum()
            err = p - labels
            grad_h = err @ w_out[targets]
            w_out[targets] -= lr * np.outer(err, h)
            w_in[center] -= lr * grad_h
        losses.append(epoch_loss / len(pairs))

    table = EmbeddingTable(vocab, w_in)
    table.training_losses = losses
    return table
