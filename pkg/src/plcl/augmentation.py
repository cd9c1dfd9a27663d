"""Hard-negative construction by phoneme edits, three-way labels, and
rebalancing toward keywords the model gets wrong."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import (
    AUGMENTED,
    EASY,
    HARD,
    NATURAL_NEGATIVE,
    NEGATIVE,
    POSITIVE,
    PairExample,
    PhonemeInventory,
    SynthParams,
    levenshtein,
    speak,
)
from .errors import AugmentationError, ContractError, SamplingError
from .memory_bank import MemoryBank
from .rng import as_rng

INSERT, REPLACE, DELETE = "insert", "replace", "delete"
TRI_CLASS = {POSITIVE: 0, EASY: 1, HARD: 2}


@dataclass(frozen=True)
class EditPlan:
    op: str
    position: int
    phoneme_id: int | None = None

    def apply(self, seq: list) -> list:
        seq = list(seq)
        if self.op == INSERT:
            seq.insert(self.position, self.phoneme_id)
        elif self.op == REPLACE:
            if seq[self.position] == self.phoneme_id:
                raise ContractError("replace would re-insert the phoneme it removes")
            seq[self.position] = self.phoneme_id
        elif self.op == DELETE:
            if len(seq) <= 1:
                raise ContractError("cannot delete from a length-1 sequence")
            del seq[self.position]
        else:
            raise ContractError(f"unknown edit op {self.op!r}")
        return seq


def plan_edit(seq: Sequence[int], bank: MemoryBank, rng, min_len: int = 1) -> EditPlan:
    """Draw one feasible edit; new phonemes come from the bank."""
    ops = [INSERT, REPLACE]
    if len(seq) > min_len:
        ops.append(DELETE)
    op = ops[int(rng.integers(len(ops)))]
    if op == DELETE:
        return EditPlan(DELETE, int(rng.integers(len(seq))))
    if op == INSERT:
        pos = int(rng.integers(len(seq) + 1))
        (pid, _), = bank.sample(1, (), seed=rng)
        return EditPlan(INSERT, pos, pid)
    pos = int(rng.integers(len(seq)))
    (pid, _), = bank.sample(1, (seq[pos],), seed=rng)
    return EditPlan(REPLACE, pos, pid)


def draw_n_edits(rng, p_single: float = 0.7) -> int:
    return 1 if rng.random() < p_single else 2


def make_hard_negative(
    positive: PairExample,
    n_edits: int,
    bank: MemoryBank,
    seed,
    inventory: PhonemeInventory,
    synth: SynthParams = SynthParams(),
    vocabulary: Sequence[Sequence[int]] = (),
    max_retries: int = 20,
) -> PairExample:
    """Edit the enrollment keyword of a positive pair ``n_edits`` times and
    re-synthesize its enrollment audio. The result never equals its source
    or any keyword in ``vocabulary``."""
    if positive.match_label != POSITIVE:
        raise ContractError("hard negatives are built from positive pairs")
    if n_edits < 1:
        raise ContractError("n_edits must be >= 1")
    rng = as_rng(seed)
    source = list(positive.enroll_keyword)
    banned = {tuple(v) for v in vocabulary}
    banned.add(tuple(source))
    for _ in range(max_retries):
        seq = list(source)
        try:
            for _ in range(n_edits):
                seq = plan_edit(seq, bank, rng).apply(seq)
        except SamplingError as exc:
            raise AugmentationError(f"memory bank cannot supply phonemes: {exc}") from None
        cand = tuple(seq)
        if cand in banned:
            continue
        dist = levenshtein(source, cand)
        if not 1 <= dist <= n_edits:
            continue
        audio = speak(inventory, cand, synth, rng)
        return PairExample(positive.query, cand, audio, NEGATIVE, AUGMENTED, HARD)
    raise AugmentationError(f"no valid {n_edits}-edit negative for {tuple(source)} in {max_retries} tries")


def label_tri_class(pair: PairExample) -> int:
    """0 positive, 1 easy natural negative, 2 hard negative (natural or augmented)."""
    if pair.match_label == POSITIVE:
        return 0
    if pair.tri_label == AUGMENTED or pair.difficulty == HARD:
        return 2
    return 1


def nearest_neighbours(word: tuple, vocab: Sequence[tuple]) -> list[tuple]:
    best, out = None, []
    for v in vocab:
        if v == word:
            continue
        d = levenshtein(word, v)
        if best is None or d < best:
            best, out = d, [v]
        elif d == best:
            out.append(v)
    return out


def rebalance_pairs(
    pairs: Sequence[PairExample],
    per_keyword_error: dict,
    boost_factor: float,
    seed,
    hard_threshold: int = 2,
) -> list[PairExample]:
    """Append extra negative pairings for keywords with above-median error.

    A boosted keyword ``w`` with error ``e`` that heads ``n`` pairs as the
    query gets ``ceil(boost_factor * e * n)`` extra pairs, each pairing an
    existing utterance of ``w`` with an existing enrollment of one of its
    nearest-Levenshtein neighbours.
    """
    pairs = list(pairs)
    if boost_factor <= 0 or not per_keyword_error:
        return pairs
    for w, e in per_keyword_error.items():
        if not 0.0 <= e <= 1.0:
            raise ContractError(f"error rate for {w} outside [0, 1]: {e}")
    median = float(np.median(list(per_keyword_error.values())))
    boosted = sorted(w for w, e in per_keyword_error.items() if e > median)
    if not boosted:
        return pairs
    queries = defaultdict(list)
    enrollments = defaultdict(list)
    for p in pairs:
        queries[p.keyword].append(p.query)
        if p.enroll_text is not None and p.enroll_audio is not None and p.enroll_audio.phonemes == p.enroll_text:
            enrollments[p.enroll_text].append(p.enroll_audio)
    vocab = sorted(set(queries) | set(enrollments))
    rng = as_rng(seed)
    extra = []
    for w in boosted:
        w = tuple(w)
        n = len(queries.get(w, ()))
        k = math.ceil(boost_factor * per_keyword_error[w] * n)
        neigh = [v for v in nearest_neighbours(w, vocab) if enrollments.get(v)]
        if k == 0 or not neigh:
            continue
        for i in range(k):
            v = neigh[i % len(neigh)]
            q = queries[w][int(rng.integers(len(queries[w])))]
            a = enrollments[v][int(rng.integers(len(enrollments[v])))]
            diff = HARD if levenshtein(w, v) <= hard_threshold else EASY
            extra.append(PairExample(q, v, a, NEGATIVE, NATURAL_NEGATIVE, diff))
    return pairs + extra
