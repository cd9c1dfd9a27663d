"""Phoneme-level InfoNCE between query-audio phonemes and their text (or
enrollment-audio) counterparts, with every other phoneme in the batch
acting as a negative."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import AlignmentError, ContractError, ParameterError
from .numerics import Tensor, as_tensor, concat, cosine_matrix, log_softmax_rows, mul, neg, sum_


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.07
    eps: float = 1e-8

    def __post_init__(self):
        if not self.temperature > 0:
            raise ParameterError(f"temperature must be > 0, got {self.temperature}")
        if not self.eps > 0:
            raise ParameterError("eps must be > 0")


@dataclass
class PhonemeBatch:
    anchors: Tensor
    keys: Tensor
    phoneme_ids: tuple
    pair_index: tuple

    def __post_init__(self):
        if self.anchors.shape != self.keys.shape:
            raise ContractError(f"anchors {self.anchors.shape} vs keys {self.keys.shape}")

    @property
    def n(self) -> int:
        return self.anchors.shape[0]


def collect_phoneme_batch(queries: Sequence, keys: Sequence) -> PhonemeBatch:
    """Concatenate per-pair phoneme rows in batch order, then phoneme order.

    ``queries`` are pooled query sequences; ``keys`` are text encodings or
    pooled enrollment sequences of the same length. Items may be
    PooledSequence/EncodedSequence objects or bare ``(T, d)`` tensors.
    """
    if len(queries) != len(keys) or not queries:
        raise ContractError("need matching, non-empty lists of queries and keys")
    anchors, ks, ids, owner = [], [], [], []
    for i, (q, k) in enumerate(zip(queries, keys)):
        qe = as_tensor(getattr(q, "embeddings", q))
        ke = as_tensor(getattr(k, "embeddings", k))
        if qe.shape[0] != ke.shape[0]:
            raise AlignmentError(f"pair {i}: {qe.shape[0]} query phonemes vs {ke.shape[0]} key rows")
        anchors.append(qe)
        ks.append(ke)
        pid = getattr(q, "phoneme_ids", None) or (-1,) * qe.shape[0]
        ids.extend(pid)
        owner.extend([i] * qe.shape[0])
    return PhonemeBatch(concat(anchors, 0), concat(ks, 0), tuple(ids), tuple(owner))


def info_nce(batch: PhonemeBatch, cfg: ContrastiveConfig = ContrastiveConfig(), reduction: str = "sum") -> Tensor:
    """-sum_i log softmax_j(sim(a_i, k_j) / tau)[i]; the denominator includes j = i."""
    if batch.n < 1:
        raise ContractError("info_nce needs at least one phoneme pair")
    sims = cosine_matrix(batch.anchors, batch.keys, cfg.eps)
    logp = log_softmax_rows(sims, cfg.temperature)
    loss = neg(sum_(mul(logp, Tensor(np.eye(batch.n)))))
    if reduction == "mean":
        return loss * (1.0 / batch.n)
    if reduction != "sum":
        raise ParameterError(f"unknown reduction {reduction!r}")
    return loss
