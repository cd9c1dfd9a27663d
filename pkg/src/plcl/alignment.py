"""Forced-alignment pooling: one embedding per phoneme, the mean of the
frames its span covers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import check_spans
from .errors import AlignmentError
from .numerics import Tensor, as_tensor, matmul


@dataclass
class PooledSequence:
    embeddings: Tensor
    phoneme_ids: tuple

    @property
    def length(self) -> int:
        return len(self.phoneme_ids)


def pooling_matrix(spans: Sequence[tuple], n_rows: int | None = None, n_cols: int | None = None) -> np.ndarray:
    """``(n_rows, n_cols)`` averaging matrix: row i holds ``1/len`` over span i."""
    n_rows = len(spans) if n_rows is None else n_rows
    n_cols = spans[-1][1] if n_cols is None else n_cols
    P = np.zeros((n_rows, n_cols))
    for i, (s, e) in enumerate(spans):
        P[i, s:e] = 1.0 / (e - s)
    return P


def batch_pooling_matrix(span_lists: Sequence[Sequence[tuple]], n_rows: int, n_cols: int) -> np.ndarray:
    return np.stack([pooling_matrix(s, n_rows, n_cols) for s in span_lists])


def pool_by_alignment(e, spans: Sequence[tuple], phoneme_ids: Sequence[int]) -> PooledSequence:
    """Average the rows of ``e`` (``T x d``, or an EncodedSequence) inside
    each span. Spans must partition the rows exactly."""
    emb = as_tensor(getattr(e, "embeddings", e))
    spans = [tuple(s) for s in spans]
    if len(spans) != len(phoneme_ids):
        raise AlignmentError(f"{len(spans)} spans for {len(phoneme_ids)} phonemes")
    check_spans(spans, emb.shape[0])
    pooled = matmul(Tensor(pooling_matrix(spans)), emb)
    return PooledSequence(pooled, tuple(int(p) for p in phoneme_ids))
