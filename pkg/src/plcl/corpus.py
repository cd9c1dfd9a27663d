"""Synthetic phoneme corpus.

Stands in for recorded keyword audio, its forced alignment, and G2P text.
Each phoneme owns a prototype frame vector; an utterance is a run of noisy
copies of its phonemes' prototypes, so the frame span of every phoneme is
known exactly.
"""

from __future__ import annotations

import base64
import hashlib
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numba
import numpy as np

from .errors import AlignmentError, ContractError, GenerationError, ParseError, VocabularyError
from .rng import as_rng, make_rng

POSITIVE = "positive"
NEGATIVE = "negative"
NATURAL_NEGATIVE = "natural_negative"
AUGMENTED = "augmented_hard_negative"
EASY = "easy"
HARD = "hard"

MATCH_LABELS = (POSITIVE, NEGATIVE)
TRI_LABELS = (POSITIVE, NATURAL_NEGATIVE, AUGMENTED)
DIFFICULTIES = (EASY, HARD)

DATASET_FORMAT = "plcl-pairs"
DATASET_VERSION = 1


# -- inventory -------------------------------------------------------------------
@dataclass
class PhonemeInventory:
    prototypes: np.ndarray
    labels: tuple

    def __post_init__(self):
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)
        self.labels = tuple(self.labels)
        if self.prototypes.ndim != 2 or len(self.labels) != self.prototypes.shape[0]:
            raise ContractError("inventory needs one label per prototype row")
        if len(set(self.labels)) != len(self.labels):
            raise ContractError("inventory labels must be unique")

    @property
    def size(self) -> int:
        return self.prototypes.shape[0]

    @property
    def d_in(self) -> int:
        return self.prototypes.shape[1]

    def min_distance(self) -> float:
        return float(_pairwise_min(self.prototypes))

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(self.prototypes.astype("<f8").tobytes())
        h.update("\x1f".join(self.labels).encode())
        return h.hexdigest()[:16]

    def __eq__(self, other):
        return (
            isinstance(other, PhonemeInventory)
            and self.labels == other.labels
            and np.array_equal(self.prototypes, other.prototypes)
        )


def _pairwise_min(x: np.ndarray) -> float:
    sq = (x * x).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2 * x @ x.T
    np.fill_diagonal(d2, np.inf)
    return float(np.sqrt(max(d2.min(), 0.0)))


def generate_inventory(
    K: int, d_in: int, separation: float = 2.0, seed=0, max_retries: int = 20, max_scale: float = 4.0
) -> PhonemeInventory:
    """Sample ``K`` Gaussian prototypes, rescaling so every pair sits at least
    ``separation`` apart. Draws needing more than ``max_scale`` are retried."""
    if K < 2 or d_in < 2:
        raise ContractError(f"need K >= 2 and d_in >= 2, got K={K}, d_in={d_in}")
    rng = as_rng(seed)
    for _ in range(max_retries):
        protos = rng.normal(size=(K, d_in))
        dmin = _pairwise_min(protos)
        if dmin >= separation:
            break
        if dmin > 0 and separation / dmin <= max_scale:
            # guard against the rescaled minimum rounding just below the target
            protos = protos * (separation / dmin) * (1 + 1e-12)
            break
    else:
        raise GenerationError(
            f"could not place {K} prototypes in {d_in} dims with separation {separation}"
            f" after {max_retries} retries"
        )
    labels = tuple(f"p{k:02d}" for k in range(K))
    return PhonemeInventory(protos, labels)


# -- utterances -------------------------------------------------------------------
def check_spans(spans: Sequence[tuple], n_frames: int) -> None:
    """Raise AlignmentError unless ``spans`` partition ``[0, n_frames)``."""
    cursor = 0
    for i, (start, end) in enumerate(spans):
        if start != cursor:
            kind = "gap" if start > cursor else "overlap"
            raise AlignmentError(f"span {i} [{start},{end}) leaves a {kind} at frame {cursor}")
        if end <= start:
            raise AlignmentError(f"span {i} [{start},{end}) is empty")
        cursor = end
    if cursor != n_frames:
        raise AlignmentError(f"spans end at frame {cursor}, utterance has {n_frames} frames")


@dataclass(eq=False)
class Utterance:
    phonemes: tuple
    frames: np.ndarray
    spans: tuple

    def __post_init__(self):
        self.phonemes = tuple(int(p) for p in self.phonemes)
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.spans = tuple((int(s), int(e)) for s, e in self.spans)
        if not self.phonemes:
            raise ContractError("utterance needs at least one phoneme")
        if len(self.spans) != len(self.phonemes):
            raise AlignmentError(f"{len(self.spans)} spans for {len(self.phonemes)} phonemes")
        check_spans(self.spans, self.frames.shape[0])

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    def __eq__(self, other):
        return (
            isinstance(other, Utterance)
            and self.phonemes == other.phonemes
            and self.spans == other.spans
            and self.frames.shape == other.frames.shape
            and self.frames.tobytes() == other.frames.tobytes()
        )


@dataclass(frozen=True)
class SynthParams:
    dur_min: int = 2
    dur_max: int = 4
    noise_sigma: float = 0.3
    speaker_sigma: float = 0.3


def synthesize_utterance(
    inv: PhonemeInventory,
    phonemes: Sequence[int],
    dur_min: int,
    dur_max: int,
    noise_sigma: float,
    speaker_offset=None,
    seed=0,
) -> Utterance:
    if len(phonemes) == 0:
        raise ContractError("cannot synthesize an empty phoneme sequence")
    if not 1 <= dur_min <= dur_max:
        raise ContractError(f"need 1 <= dur_min <= dur_max, got {dur_min}, {dur_max}")
    bad = [p for p in phonemes if not 0 <= p < inv.size]
    if bad:
        raise VocabularyError(f"phoneme ids {bad} outside inventory of size {inv.size}")
    rng = as_rng(seed)
    offset = np.zeros(inv.d_in) if speaker_offset is None else np.asarray(speaker_offset, float)
    durs = rng.integers(dur_min, dur_max + 1, size=len(phonemes))
    rows, spans, cursor = [], [], 0
    for p, d in zip(phonemes, durs):
        rows.append(np.repeat(inv.prototypes[p][None], d, axis=0))
        spans.append((cursor, cursor + int(d)))
        cursor += int(d)
    frames = np.concatenate(rows, axis=0) + offset
    if noise_sigma > 0:
        frames = frames + rng.normal(scale=noise_sigma, size=frames.shape)
    return Utterance(tuple(phonemes), frames, tuple(spans))


def speak(inv: PhonemeInventory, phonemes: Sequence[int], synth: SynthParams, rng) -> Utterance:
    """Synthesize with a freshly drawn speaker offset."""
    offset = rng.normal(scale=synth.speaker_sigma, size=inv.d_in) if synth.speaker_sigma > 0 else None
    return synthesize_utterance(
        inv, phonemes, synth.dur_min, synth.dur_max, synth.noise_sigma, offset, seed=rng
    )


# -- edit distance ----------------------------------------------------------------
@numba.njit(cache=True)
def edit_distance_into(a, la, b, lb, prev, cur):
    """Two-row DP over ``a[:la]`` and ``b[:lb]`` using caller scratch rows
    of length >= ``lb + 1``."""
    for j in range(lb + 1):
        prev[j] = j
    for i in range(1, la + 1):
        cur[0] = i
        x = a[i - 1]
        for j in range(1, lb + 1):
            best = prev[j - 1] + (x != b[j - 1])
            alt = prev[j] + 1
            if alt < best:
                best = alt
            alt = cur[j - 1] + 1
            if alt < best:
                best = alt
            cur[j] = best
        prev, cur = cur, prev
    return prev[lb]


def levenshtein(a: Sequence, b: Sequence) -> int:
    """Unit-cost insert/delete/substitute distance between id sequences."""
    a = np.asarray(a, dtype=np.int64).reshape(-1)
    b = np.asarray(b, dtype=np.int64).reshape(-1)
    prev = np.empty(len(b) + 1, dtype=np.int64)
    cur = np.empty(len(b) + 1, dtype=np.int64)
    return int(edit_distance_into(a, len(a), b, len(b), prev, cur))


# -- pairs ------------------------------------------------------------------------
@dataclass(eq=False)
class PairExample:
    query: Utterance
    enroll_text: tuple | None
    enroll_audio: Utterance | None
    match_label: str
    tri_label: str
    difficulty: str | None = None

    def __post_init__(self):
        if self.enroll_text is not None:
            self.enroll_text = tuple(int(p) for p in self.enroll_text)
        if self.enroll_text is None and self.enroll_audio is None:
            raise ContractError("pair needs enrollment text, enrollment audio, or both")
        if self.match_label not in MATCH_LABELS or self.tri_label not in TRI_LABELS:
            raise ContractError(f"bad labels {self.match_label!r}/{self.tri_label!r}")
        if (self.match_label == POSITIVE) != (self.tri_label == POSITIVE):
            raise ContractError("match_label and tri_label disagree")
        if self.match_label == POSITIVE and self.difficulty is not None:
            raise ContractError("difficulty is defined only for negatives")
        if self.match_label == NEGATIVE and self.difficulty not in DIFFICULTIES:
            raise ContractError(f"negative pair needs difficulty easy/hard, got {self.difficulty!r}")

    @property
    def keyword(self) -> tuple:
        return self.query.phonemes

    @property
    def enroll_keyword(self) -> tuple:
        return self.enroll_text if self.enroll_text is not None else self.enroll_audio.phonemes

    @property
    def label(self) -> int:
        return 1 if self.match_label == POSITIVE else 0

    def __eq__(self, other):
        return (
            isinstance(other, PairExample)
            and self.query == other.query
            and self.enroll_text == other.enroll_text
            and self.enroll_audio == other.enroll_audio
            and self.match_label == other.match_label
            and self.tri_label == other.tri_label
            and self.difficulty == other.difficulty
        )


def generate_vocab(
    n_keywords: int,
    K: int,
    min_len: int = 3,
    max_len: int = 8,
    family_size: int = 4,
    seed=0,
) -> list[list[tuple]]:
    """Keyword families: a random root plus variants one or two edits away.

    Families give every split its own confusable neighbours, which is what
    makes hard negatives available on held-out keywords.
    """
    if n_keywords < 2 or family_size < 1:
        raise ContractError("need at least 2 keywords and family_size >= 1")
    rng = as_rng(seed)
    seen: set = set()
    families: list[list[tuple]] = []
    total = 0
    attempts = 0
    while total < n_keywords:
        attempts += 1
        if attempts > 100 * n_keywords:
            raise GenerationError(f"could not draw {n_keywords} distinct keywords")
        root = tuple(int(p) for p in rng.integers(0, K, size=rng.integers(min_len, max_len + 1)))
        if root in seen:
            continue
        fam = [root]
        want = min(family_size, n_keywords - total)
        tries = 0
        while len(fam) < want and tries < 200:
            tries += 1
            word = list(fam[int(rng.integers(len(fam)))])
            for _ in range(int(rng.integers(1, 3))):
                op = int(rng.integers(3))
                if op == 0 and len(word) < max_len:
                    word.insert(int(rng.integers(len(word) + 1)), int(rng.integers(K)))
                elif op == 1 and len(word) > min_len:
                    del word[int(rng.integers(len(word)))]
                else:
                    pos = int(rng.integers(len(word)))
                    word[pos] = (word[pos] + 1 + int(rng.integers(K - 1))) % K
            cand = tuple(word)
            if cand not in seen and cand not in fam and min_len <= len(cand) <= max_len:
                fam.append(cand)
        if len(fam) < want:
            continue
        seen.update(fam)
        families.append(fam)
        total += len(fam)
    return families


def build_pairs(
    vocab: Sequence[Sequence[int]],
    inv: PhonemeInventory,
    counts: dict,
    hard_threshold: int = 2,
    seed=0,
    synth: SynthParams = SynthParams(),
    max_reuse: int = 10,
) -> list[PairExample]:
    """Positive, easy-negative and hard-negative pairs over ``vocab``.

    ``counts`` maps ``positive``/``easy``/``hard`` to the number of pairs.
    Each ordered keyword pair may be drawn at most ``max_reuse`` times per
    negative class, each time with fresh utterances.
    """
    vocab = [tuple(int(p) for p in w) for w in vocab]
    if len(vocab) < 2:
        raise ContractError("build_pairs needs at least 2 keywords")
    if hard_threshold < 1:
        raise ContractError("hard_threshold must be >= 1")
    n_pos = int(counts.get(POSITIVE, 0))
    n_easy = int(counts.get(EASY, 0))
    n_hard = int(counts.get(HARD, 0))
    hard_pairs, easy_pairs = [], []
    for i, j in itertools.permutations(range(len(vocab)), 2):
        if vocab[i] == vocab[j]:
            continue
        (hard_pairs if levenshtein(vocab[i], vocab[j]) <= hard_threshold else easy_pairs).append((i, j))
    for name, want, pool in ((HARD, n_hard, hard_pairs), (EASY, n_easy, easy_pairs)):
        if want > len(pool) * max_reuse:
            raise GenerationError(
                f"requested {want} {name} negatives; vocabulary supports {len(pool) * max_reuse}"
                f" ({len(pool)} keyword pairs x {max_reuse} reuses)"
            )
    rng = as_rng(seed)
    plan = [(POSITIVE, None)] * n_pos + [(HARD, p) for p in _draw(rng, hard_pairs, n_hard, max_reuse)]
    plan += [(EASY, p) for p in _draw(rng, easy_pairs, n_easy, max_reuse)]
    out = []
    for kind, ij in plan:
        r = make_rng(int(rng.integers(2**31)), "pair")
        if kind == POSITIVE:
            w = vocab[int(rng.integers(len(vocab)))]
            out.append(PairExample(speak(inv, w, synth, r), w, speak(inv, w, synth, r), POSITIVE, POSITIVE))
        else:
            q, e = vocab[ij[0]], vocab[ij[1]]
            out.append(
                PairExample(speak(inv, q, synth, r), e, speak(inv, e, synth, r), NEGATIVE, NATURAL_NEGATIVE, kind)
            )
    order = rng.permutation(len(out))
    return [out[i] for i in order]


def _draw(rng, pool, n, max_reuse):
    if n == 0:
        return []
    reps = -(-n // len(pool))
    if reps > max_reuse:
        raise GenerationError(f"{n} draws exceed {len(pool)} pairs x {max_reuse} reuses")
    seq = []
    for _ in range(reps):
        seq.extend(pool[i] for i in rng.permutation(len(pool)))
    return seq[:n]


# -- serialisation --------------------------------------------------------------
def encode_array(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def decode_array(text: str, shape) -> np.ndarray:
    raw = base64.b64decode(text.encode("ascii"), validate=True)
    arr = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    return arr.reshape(shape)


def utterance_to_dict(u: Utterance) -> dict:
    return {
        "phonemes": list(u.phonemes),
        "shape": list(u.frames.shape),
        "frames": encode_array(u.frames),
        "spans": [list(s) for s in u.spans],
    }


def utterance_from_dict(d: dict) -> Utterance:
    return Utterance(tuple(d["phonemes"]), decode_array(d["frames"], d["shape"]), tuple(map(tuple, d["spans"])))


def pair_to_dict(p: PairExample) -> dict:
    return {
        "type": "pair",
        "query": utterance_to_dict(p.query),
        "enroll_text": None if p.enroll_text is None else list(p.enroll_text),
        "enroll_audio": None if p.enroll_audio is None else utterance_to_dict(p.enroll_audio),
        "match_label": p.match_label,
        "tri_label": p.tri_label,
        "difficulty": p.difficulty,
    }


def pair_from_dict(d: dict) -> PairExample:
    return PairExample(
        utterance_from_dict(d["query"]),
        None if d["enroll_text"] is None else tuple(d["enroll_text"]),
        None if d["enroll_audio"] is None else utterance_from_dict(d["enroll_audio"]),
        d["match_label"],
        d["tri_label"],
        d["difficulty"],
    )


@dataclass
class Dataset:
    pairs: list
    inventory: PhonemeInventory | None = None
    meta: dict = field(default_factory=dict)

    @property
    def inventory_checksum(self) -> str | None:
        return None if self.inventory is None else self.inventory.checksum()


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_dataset(pairs: Iterable[PairExample], path, inventory: PhonemeInventory | None = None, meta=None) -> None:
    """Write a header record followed by one JSON record per pair."""
    pairs = list(pairs)
    header = {
        "type": "header",
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "K": None if inventory is None else inventory.size,
        "d_in": None if inventory is None else inventory.d_in,
        "inventory_checksum": None if inventory is None else inventory.checksum(),
        "n_records": len(pairs),
        "meta": meta or {},
    }
    if inventory is not None:
        header["inventory"] = {
            "labels": list(inventory.labels),
            "shape": list(inventory.prototypes.shape),
            "prototypes": encode_array(inventory.prototypes),
        }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_dumps(header) + "\n")
        for p in pairs:
            fh.write(_dumps(pair_to_dict(p)) + "\n")


def load_dataset_full(path) -> Dataset:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    else:
        raise ParseError(f"{path}: record {len(lines) - 1} is truncated (no trailing newline)")
    if not lines:
        raise ParseError(f"{path}: missing header record")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line 1 (header): {exc}") from None
    if header.get("type") != "header" or header.get("format") != DATASET_FORMAT:
        raise ParseError(f"{path}: line 1 is not a {DATASET_FORMAT} header")
    if header.get("version") != DATASET_VERSION:
        raise ParseError(f"{path}: unsupported format version {header.get('version')}")
    inventory = None
    if header.get("inventory"):
        inv = header["inventory"]
        inventory = PhonemeInventory(decode_array(inv["prototypes"], inv["shape"]), inv["labels"])
        if inventory.checksum() != header["inventory_checksum"]:
            raise ParseError(f"{path}: inventory checksum mismatch")
    pairs = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
            if rec.get("type") != "pair":
                raise ValueError(f"unexpected record type {rec.get('type')!r}")
            pairs.append(pair_from_dict(rec))
        except (ValueError, KeyError, TypeError, ContractError, AlignmentError) as exc:
            raise ParseError(f"{path}: line {lineno} (record {lineno - 2}): {exc}") from None
    if len(pairs) != header["n_records"]:
        raise ParseError(f"{path}: header announces {header['n_records']} records, found {len(pairs)}")
    return Dataset(pairs, inventory, header.get("meta", {}))


def load_dataset(path) -> list[PairExample]:
    return load_dataset_full(path).pairs


def save_utterance(u: Utterance, path) -> None:
    Path(path).write_text(_dumps({"type": "utterance", **utterance_to_dict(u)}) + "\n", encoding="utf-8")


def load_utterance(path) -> Utterance:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        return utterance_from_dict(d)
    except (ValueError, KeyError, TypeError) as exc:
        raise ParseError(f"{path}: not an utterance file: {exc}") from None
