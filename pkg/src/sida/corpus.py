"""Synthetic labeled corpus with planted token-class structure.

The vocabulary is partitioned into per-class token pools (token id mod
num_classes). Each sequence gets a dominant latent class; each position
draws a latent (the dominant class with probability class_mix, else
uniform), then draws its token from the latent's pool with probability beta
("planting strength") or from the whole vocabulary otherwise. Token draws
are Zipf-ish: probability proportional to 1/rank^zipf_a within the pool.
The label is the majority latent class.

At beta=1 a token id fully determines its latent class; at beta=0 tokens
carry no information about latents, so labels are noise with respect to the
token stream (the negative control for predictor hit rates).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from .errors import ContractError
from .moe import SequenceBatch
from .numkit import Rng


@dataclass
class CorpusSpec:
    vocab_size: int = 512
    num_sequences: int = 2000
    min_len: int = 8
    max_len: int = 16
    num_classes: int = 4
    beta: float = 0.9
    seed: int = 0
    zipf_a: float = 1.1
    class_mix: float = 0.75

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ContractError("beta must lie in [0, 1]")
        if self.min_len < 1 or self.max_len < self.min_len:
            raise ContractError("invalid length range")
        if self.vocab_size < self.num_classes:
            raise ContractError("vocab smaller than class count")


@dataclass
class Corpus:
    spec: CorpusSpec
    sequences: list[np.ndarray]
    labels: list[int]

    def __len__(self) -> int:
        return len(self.sequences)

    def __iter__(self):
        return iter(zip(self.sequences, self.labels))

    def items(self) -> list[tuple[np.ndarray, int]]:
        return list(zip(self.sequences, self.labels))

    def batches(self, batch_size: int = 1, start_id: int = 0,
                max_batches: int | None = None) -> list[SequenceBatch]:
        out = []
        for bi, start in enumerate(range(0, len(self.sequences), batch_size)):
            if max_batches is not None and bi >= max_batches:
                break
            out.append(
                SequenceBatch(
                    batch_id=start_id + bi,
                    sequences=self.sequences[start : start + batch_size],
                    labels=self.labels[start : start + batch_size],
                )
            )
        return out

    def content_bytes(self) -> bytes:
        parts = [np.concatenate(self.sequences).astype(np.int64).tobytes()]
        parts.append(np.asarray([len(s) for s in self.sequences], dtype=np.int64).tobytes())
        parts.append(np.asarray(self.labels, dtype=np.int64).tobytes())
        return b"".join(parts)


def _zipf_weights(n: int, a: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1, dtype=np.float64) ** a
    return w / w.sum()


def generate_corpus(spec: CorpusSpec) -> Corpus:
    """Deterministically generate the corpus described by (spec, seed)."""
    rng = Rng(spec.seed)
    pools = [
        np.array([v for v in range(spec.vocab_size) if v % spec.num_classes == c])
        for c in range(spec.num_classes)
    ]
    pool_weights = [_zipf_weights(len(p), spec.zipf_a) for p in pools]
    vocab_weights = _zipf_weights(spec.vocab_size, spec.zipf_a)

    sequences, labels = [], []
    for _ in range(spec.num_sequences):
        t_len = int(rng.integers(spec.min_len, spec.max_len + 1))
        dominant = int(rng.integers(0, spec.num_classes))
        mix = rng.random(t_len)
        latents = np.where(
            mix < spec.class_mix,
            dominant,
            rng.integers(0, spec.num_classes, size=t_len),
        )
        planted = rng.random(t_len) < spec.beta
        tokens = np.empty(t_len, dtype=np.int64)
        for pos in range(t_len):
            if planted[pos]:
                c = int(latents[pos])
                tokens[pos] = rng.choice(pools[c], p=pool_weights[c])
            else:
                tokens[pos] = rng.choice(spec.vocab_size, p=vocab_weights)
        counts = np.bincount(latents, minlength=spec.num_classes)
        labels.append(int(np.argmax(counts)))
        sequences.append(tokens)
    return Corpus(spec=spec, sequences=sequences, labels=labels)


def save_corpus(corpus: Corpus, path) -> None:
    flat = np.concatenate(corpus.sequences).astype(np.int64)
    lengths = np.asarray([len(s) for s in corpus.sequences], dtype=np.int64)
    np.savez(
        path,
        tokens=flat,
        lengths=lengths,
        labels=np.asarray(corpus.labels, dtype=np.int64),
        spec=np.frombuffer(json.dumps(asdict(corpus.spec)).encode(), dtype=np.uint8),
    )


def load_corpus(path) -> Corpus:
    data = np.load(path)
    spec = CorpusSpec(**json.loads(bytes(data["spec"]).decode()))
    lengths = data["lengths"]
    offsets = np.cumsum(np.concatenate([[0], lengths]))
    sequences = [
        data["tokens"][offsets[i] : offsets[i + 1]].copy() for i in range(len(lengths))
    ]
    return Corpus(spec=spec, sequences=sequences, labels=[int(x) for x in data["labels"]])
