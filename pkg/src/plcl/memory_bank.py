"""Per-phoneme embedding memory with momentum (moving-average) updates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ParameterError, SamplingError, VocabularyError
from .rng import as_rng

SNAPSHOT_VERSION = 1


@dataclass
class MemoryBank:
    entries: np.ndarray
    alpha: float = 0.8
    initialized: np.ndarray = None
    update_count: np.ndarray = None

    def __post_init__(self):
        self.entries = np.array(self.entries, dtype=np.float64)
        K = self.entries.shape[0]
        if not 0.0 < self.alpha < 1.0:
            raise ParameterError(f"alpha must lie strictly in (0, 1), got {self.alpha}")
        if self.initialized is None:
            self.initialized = np.zeros(K, dtype=bool)
        if self.update_count is None:
            self.update_count = np.zeros(K, dtype=np.int64)
        self.initialized = np.array(self.initialized, dtype=bool)
        self.update_count = np.array(self.update_count, dtype=np.int64)

    @classmethod
    def empty(cls, K: int, d: int, alpha: float = 0.8) -> "MemoryBank":
        return cls(np.zeros((K, d)), alpha)

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    def eligible(self, exclude_ids=()) -> np.ndarray:
        mask = self.initialized.copy()
        ex = [int(k) for k in exclude_ids if 0 <= int(k) < self.size]
        mask[ex] = False
        return np.flatnonzero(mask)

    def update(self, k: int, p_new, quality: float = 1.0, quality_threshold: float = 0.0) -> bool:
        """``p_k <- alpha * p_k + (1 - alpha) * p_new`` when ``quality`` clears
        the threshold; the first applied update initialises the row. Returns
        whether the update was applied."""
        k = int(k)
        if not 0 <= k < self.size:
            raise VocabularyError(f"phoneme id {k} outside bank of size {self.size}")
        p_new = np.asarray(p_new, dtype=np.float64)
        if p_new.shape != (self.dim,) or not np.all(np.isfinite(p_new)):
            raise ParameterError(f"bank update needs a finite vector of length {self.dim}")
        if quality < quality_threshold:
            return False
        if self.initialized[k]:
            self.entries[k] = self.alpha * self.entries[k] + (1.0 - self.alpha) * p_new
        else:
            self.entries[k] = p_new
            self.initialized[k] = True
        self.update_count[k] += 1
        return True

    def sample(self, count: int, exclude_ids=(), seed=0) -> list[tuple[int, np.ndarray]]:
        """Uniform draw without replacement among initialised, non-excluded rows."""
        pool = self.eligible(exclude_ids)
        if count > len(pool):
            raise SamplingError(f"asked for {count} bank rows, only {len(pool)} eligible")
        if count <= 0:
            return []
        rng = as_rng(seed)
        picks = pool[rng.permutation(len(pool))[:count]]
        return [(int(k), self.entries[k].copy()) for k in picks]

    def snapshot(self) -> dict:
        return {
            "version": SNAPSHOT_VERSION,
            "alpha": self.alpha,
            "entries": self.entries.copy(),
            "initialized": self.initialized.copy(),
            "update_count": self.update_count.copy(),
        }

    @classmethod
    def restore(cls, snap: dict) -> "MemoryBank":
        if snap.get("version") != SNAPSHOT_VERSION:
            raise FormatError(f"bank snapshot version {snap.get('version')} != {SNAPSHOT_VERSION}")
        return cls(snap["entries"], snap["alpha"], snap["initialized"], snap["update_count"])

    def __eq__(self, other):
        return (
            isinstance(other, MemoryBank)
            and self.alpha == other.alpha
            and self.entries.tobytes() == other.entries.tobytes()
            and np.array_equal(self.initialized, other.initialized)
            and np.array_equal(self.update_count, other.update_count)
        )
