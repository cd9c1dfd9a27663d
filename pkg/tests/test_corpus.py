import itertools
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plcl.corpus import (
    EASY,
    HARD,
    NEGATIVE,
    POSITIVE,
    PairExample,
    SynthParams,
    Utterance,
    build_pairs,
    generate_inventory,
    generate_vocab,
    levenshtein,
    load_dataset,
    load_dataset_full,
    save_dataset,
    synthesize_utterance,
)
from plcl.errors import AlignmentError, ContractError, GenerationError, ParseError, VocabularyError


def dp_table_distance(a, b):
    """Full-table Wagner-Fischer; independent of the two-row kernel."""
    m, n = len(a), len(b)
    t = [[0] * (n + 1) for _ in range(m + 1)]
    for i in range(m + 1):
        t[i][0] = i
    for j in range(n + 1):
        t[0][j] = j
    for i in range(1, m + 1):
        for j in range(1, n + 1):
            t[i][j] = min(t[i - 1][j] + 1, t[i][j - 1] + 1, t[i - 1][j - 1] + (a[i - 1] != b[j - 1]))
    return t[m][n]


@pytest.fixture(scope="module")
def inv():
    return generate_inventory(40, 16, 2.0, seed=3)


class TestInventory:
    def test_two_prototypes(self):
        inv = generate_inventory(2, 8, 1.0, seed=0)
        assert np.linalg.norm(inv.prototypes[0] - inv.prototypes[1]) >= 1.0

    def test_deterministic(self):
        assert generate_inventory(40, 16, 2.0, seed=11) == generate_inventory(40, 16, 2.0, seed=11)

    def test_all_pairs_separated(self, inv):
        d = [np.linalg.norm(inv.prototypes[i] - inv.prototypes[j]) for i, j in itertools.combinations(range(40), 2)]
        assert len(d) == 780
        assert min(d) >= 2.0
        assert len(set(inv.labels)) == 40

    def test_infeasible(self):
        with pytest.raises(GenerationError):
            generate_inventory(40, 2, 50.0, seed=0, max_scale=2.0)

    def test_small_k(self):
        with pytest.raises(ContractError):
            generate_inventory(1, 8)


class TestSynthesis:
    def test_noiseless_frames_equal_prototypes(self, inv):
        u = synthesize_utterance(inv, [3, 1, 4], 1, 1, 0.0, None, seed=0)
        assert np.array_equal(u.frames, inv.prototypes[[3, 1, 4]])

    def test_forced_durations(self, inv):
        u = synthesize_utterance(inv, [0, 1, 2], 2, 2, 0.3, None, seed=0)
        assert u.n_frames == 6 and u.spans == ((0, 2), (2, 4), (4, 6))

    def test_deterministic(self, inv):
        a = synthesize_utterance(inv, [5, 6, 7], 2, 4, 0.3, np.ones(16), seed=9)
        b = synthesize_utterance(inv, [5, 6, 7], 2, 4, 0.3, np.ones(16), seed=9)
        assert a == b and a.frames.tobytes() == b.frames.tobytes()

    def test_empty(self, inv):
        with pytest.raises(ContractError):
            synthesize_utterance(inv, [], 1, 2, 0.1, None, seed=0)

    def test_bad_id(self, inv):
        with pytest.raises(VocabularyError):
            synthesize_utterance(inv, [40], 1, 2, 0.1, None, seed=0)

    @given(st.lists(st.integers(0, 39), min_size=1, max_size=10), st.integers(1, 3), st.integers(0, 3), st.integers(0, 99))
    @settings(max_examples=40, deadline=None)
    def test_spans_partition(self, phonemes, dmin, extra, seed):
        inv = generate_inventory(40, 4, 0.5, seed=1)
        u = synthesize_utterance(inv, phonemes, dmin, dmin + extra, 0.2, None, seed=seed)
        assert u.spans[0][0] == 0 and u.spans[-1][1] == u.n_frames
        assert all(e > s for s, e in u.spans)
        assert all(a[1] == b[0] for a, b in zip(u.spans, u.spans[1:]))

    def test_rejects_bad_spans(self):
        with pytest.raises(AlignmentError, match="gap"):
            Utterance((1, 2), np.zeros((4, 2)), ((0, 1), (2, 4)))
        with pytest.raises(AlignmentError, match="overlap"):
            Utterance((1, 2), np.zeros((4, 2)), ((0, 2), (1, 4)))


class TestLevenshtein:
    def test_identity(self):
        assert levenshtein([1, 2, 3], [1, 2, 3]) == 0

    def test_substitution(self):
        assert levenshtein([1, 2, 3], [1, 9, 3]) == 1

    def test_kitten_sitting(self):
        kitten = [ord(c) for c in "kitten"]
        sitting = [ord(c) for c in "sitting"]
        assert dp_table_distance(kitten, sitting) == 3
        assert levenshtein(kitten, sitting) == 3

    def test_empty(self):
        assert levenshtein([], [4, 5]) == 2 and levenshtein([], []) == 0

    seq = st.lists(st.integers(0, 4), max_size=6)

    @given(seq, seq, seq)
    @settings(max_examples=300, deadline=None)
    def test_metric_axioms(self, a, b, c):
        dab = levenshtein(a, b)
        assert dab == dp_table_distance(a, b)
        assert dab >= 0
        assert (dab == 0) == (a == b)
        assert dab == levenshtein(b, a)
        assert levenshtein(a, c) <= dab + levenshtein(b, c)


class TestPairs:
    def test_vocab_families(self):
        fams = generate_vocab(60, 40, seed=7)
        words = [w for f in fams for w in f]
        assert len(words) == 60 and len(set(words)) == 60
        assert all(3 <= len(w) <= 8 for w in words)
        for f in fams:
            assert all(levenshtein(f[0], w) <= 2 * (len(f) - 1) for w in f)

    def test_close_vocab_all_hard(self, inv):
        vocab = [(1, 2, 3), (1, 2, 4)]
        pairs = build_pairs(vocab, inv, {POSITIVE: 2, HARD: 4, EASY: 0}, hard_threshold=2, seed=0)
        assert all(p.difficulty == HARD for p in pairs if p.match_label == NEGATIVE)
        with pytest.raises(GenerationError, match="supports 0"):
            build_pairs(vocab, inv, {EASY: 1}, hard_threshold=2, seed=0)

    def test_positive_is_self_pair(self, inv):
        vocab = [(1, 2, 3), (7, 8, 9, 10)]
        for p in build_pairs(vocab, inv, {POSITIVE: 6}, seed=1):
            assert p.match_label == POSITIVE
            assert p.query.phonemes == p.enroll_text == p.enroll_audio.phonemes

    def test_counts_and_labels(self, inv):
        vocab = [w for f in generate_vocab(20, 40, seed=2) for w in f]
        pairs = build_pairs(vocab, inv, {POSITIVE: 30, HARD: 20, EASY: 25}, hard_threshold=2, seed=4)
        cnt = Counter(p.difficulty if p.match_label == NEGATIVE else POSITIVE for p in pairs)
        assert cnt == {POSITIVE: 30, HARD: 20, EASY: 25}
        for p in pairs:
            assert p.enroll_text is not None and p.enroll_audio is not None
            if p.match_label == NEGATIVE:
                d = levenshtein(p.keyword, p.enroll_text)
                assert (d <= 2) == (p.difficulty == HARD)

    def test_pure_function_of_seed(self, inv):
        vocab = [w for f in generate_vocab(12, 40, seed=2) for w in f]
        a = build_pairs(vocab, inv, {POSITIVE: 5, HARD: 5, EASY: 5}, seed=8)
        b = build_pairs(vocab, inv, {POSITIVE: 5, HARD: 5, EASY: 5}, seed=8)
        assert a == b

    def test_pair_invariants(self, inv):
        u = synthesize_utterance(inv, [1, 2], 1, 1, 0.0, None, seed=0)
        with pytest.raises(ContractError):
            PairExample(u, None, None, POSITIVE, POSITIVE)
        with pytest.raises(ContractError):
            PairExample(u, (1, 2), None, POSITIVE, "natural_negative")
        with pytest.raises(ContractError):
            PairExample(u, (1, 2), None, POSITIVE, POSITIVE, HARD)


class TestDatasetFile:
    def test_empty_round_trip(self, tmp_path):
        save_dataset([], tmp_path / "e.jsonl")
        assert load_dataset(tmp_path / "e.jsonl") == []

    def test_mixed_round_trip(self, inv, tmp_path):
        vocab = [w for f in generate_vocab(16, 40, seed=5) for w in f]
        pairs = build_pairs(vocab, inv, {POSITIVE: 34, HARD: 33, EASY: 33}, seed=6, synth=SynthParams())
        pairs[0].enroll_audio = None
        pairs[1].enroll_text = None
        save_dataset(pairs, tmp_path / "d.jsonl", inventory=inv)
        ds = load_dataset_full(tmp_path / "d.jsonl")
        assert ds.inventory == inv
        assert len(ds.pairs) == 100
        for a, b in zip(pairs, ds.pairs):
            assert a == b
            assert a.query.frames.tobytes() == b.query.frames.tobytes()

    def test_truncated(self, inv, tmp_path):
        vocab = [(1, 2, 3), (4, 5, 6, 7)]
        pairs = build_pairs(vocab, inv, {POSITIVE: 3, EASY: 2}, seed=0)
        path = tmp_path / "t.jsonl"
        save_dataset(pairs, path, inventory=inv)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 40])
        with pytest.raises(ParseError, match="record"):
            load_dataset(path)
        lines = raw.decode().split("\n")
        path.write_text("\n".join(lines[:3]) + "\n")
        with pytest.raises(ParseError, match="announces"):
            load_dataset(path)
