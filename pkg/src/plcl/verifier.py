"""Matching heads, fusion, and the composite training objective.

The text-enrollment head scores a (text rows + injected memory rows) x
query-frame cosine matrix with self-attention and a GRU over its rows. The
audio-enrollment head max-pools an enrollment x query cosine matrix along
the query axis and uses that vector to attend over the query frames. When
both enrollments are present the two heads' final GRU states are
concatenated and scored by one more linear layer.

Everything runs on padded batches; single-example helpers wrap them with
``B = 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from .alignment import batch_pooling_matrix
from .contrastive import ContrastiveConfig, PhonemeBatch, info_nce
from .corpus import HARD, POSITIVE, PairExample, Utterance
from .encoders import ENROLL_AUDIO, QUERY_AUDIO, TEXT, EncoderConfig, Encoders, init_gru, init_weight, init_zeros
from .errors import ConfigError, ContractError, ShapeError
from .memory_bank import MemoryBank
from .numerics import (
    GRUParams,
    Tensor,
    add,
    as_tensor,
    clip,
    concat,
    cosine_matrix,
    getitem,
    gru_sequence,
    linear,
    log,
    log_softmax_rows,
    matmul,
    max_,
    mul,
    neg,
    no_grad,
    power,
    sigmoid,
    softmax_rows,
    stack,
    sub,
    sum_,
    swap_last,
)
from .rng import make_rng

_BIG = 1e4
TEXT_FEATURES = 9
AUDIO_FEATURES = 7


@dataclass(frozen=True)
class ModelConfig:
    d_in: int = 16
    K: int = 40
    d_model: int = 48
    d_proj: int = 32
    d_head: int = 24
    activation: str = "tanh"
    share_audio_encoder: bool = True
    temperature: float = 0.15
    cos_eps: float = 1e-8
    inject_count: int = 4
    focal_gamma: float = 2.0
    focal_weight: float = 0.25
    position_sharpness: float = 10.0
    gru_update_bias: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.d_head < 1:
            raise ConfigError("d_head must be positive")
        if self.inject_count < 0:
            raise ConfigError("inject_count must be >= 0")
        if self.focal_gamma < 0:
            raise ConfigError("focal_gamma must be >= 0")
        if not self.temperature > 0:
            raise ConfigError("temperature must be > 0")
        self.encoder_config()

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            self.d_in, self.d_model, self.d_proj, self.K, self.activation, self.share_audio_encoder, self.seed,
            self.gru_update_bias,
        )

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# -- small value types ------------------------------------------------------------
@dataclass
class SimilarityMatrix:
    values: Tensor
    row_origin: str
    col_origin: str
    n_injected: int = 0


@dataclass
class HeadOutput:
    feature: Tensor
    score: Tensor
    logit: Tensor
    tri_logits: Tensor | None = None
    weights: Tensor | None = None
    pooled: Tensor | None = None


@dataclass
class LossBundle:
    l_uat: Tensor
    l_uat3: Tensor
    l_clat: Tensor
    l_uaa: Tensor
    l_claa: Tensor
    l_uata: Tensor
    l_at: Tensor = None
    l_aa: Tensor = None
    total: Tensor = None

    COMPONENTS = ("l_uat", "l_uat3", "l_clat", "l_uaa", "l_claa", "l_uata")

    def as_floats(self) -> dict:
        names = self.COMPONENTS + ("l_at", "l_aa", "total")
        return {n: float(getattr(self, n).data) for n in names}


def zero() -> Tensor:
    return Tensor(0.0)


# -- losses -------------------------------------------------------------------------
def bce(score, label, clamp: float = 1e-7) -> Tensor:
    """Mean binary cross-entropy of probabilities ``score`` against 0/1 labels."""
    s = clip(as_tensor(score), clamp, 1.0 - clamp)
    y = np.asarray(label, dtype=np.float64)
    per = neg(add(mul(Tensor(y), log(s)), mul(Tensor(1.0 - y), log(sub(1.0, s)))))
    return per.mean()


def focal_loss(score, label, gamma: float = 2.0, weight: float = 0.25, clamp: float = 1e-7) -> Tensor:
    """Mean of ``-weight * (1 - p_t)^gamma * log p_t``."""
    if gamma < 0:
        raise ContractError("focal gamma must be >= 0")
    s = as_tensor(score)
    y = np.asarray(label, dtype=np.float64)
    p_t = add(mul(Tensor(y), s), mul(Tensor(1.0 - y), sub(1.0, s)))
    p_t = clip(p_t, clamp, 1.0 - clamp)
    mod = power(sub(1.0, p_t), gamma) if gamma != 0 else Tensor(np.ones(p_t.shape))
    return mul(mul(mod, log(p_t)), -weight).mean()


def three_class_ce(logits, labels) -> Tensor:
    """Mean softmax cross-entropy; ``logits`` is ``(3,)`` or ``(B, 3)``."""
    logits = as_tensor(logits)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    return neg(sum_(mul(log_softmax_rows(logits), Tensor(onehot)))) * (1.0 / len(labels))


def total_loss(
    l_uat=None, l_uat3=None, l_clat=None, l_uaa=None, l_claa=None, l_uata=None
) -> LossBundle:
    parts = [x if x is not None else zero() for x in (l_uat, l_uat3, l_clat, l_uaa, l_claa, l_uata)]
    b = LossBundle(*[as_tensor(p) for p in parts])
    b.l_at = b.l_uat + b.l_uat3 + b.l_clat
    b.l_aa = b.l_uaa + b.l_claa
    b.total = b.l_at + b.l_aa + b.l_uata
    return b


# -- batching -------------------------------------------------------------------------
def _pad_frames(utts: Sequence[Utterance]):
    T = max(u.n_frames for u in utts)
    d = utts[0].frames.shape[1]
    frames = np.zeros((len(utts), T, d))
    mask = np.zeros((len(utts), T))
    for i, u in enumerate(utts):
        frames[i, : u.n_frames] = u.frames
        mask[i, : u.n_frames] = 1.0
    return frames, mask


def _pad_ids(seqs: Sequence[Sequence[int]]):
    L = max(len(s) for s in seqs)
    ids = np.zeros((len(seqs), L), dtype=np.int64)
    mask = np.zeros((len(seqs), L))
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = 1.0
    return ids, mask


@dataclass
class Batch:
    pairs: list
    q_frames: np.ndarray
    q_mask: np.ndarray
    q_pool: np.ndarray
    q_ph_mask: np.ndarray
    text_ids: np.ndarray | None
    t_mask: np.ndarray | None
    a_frames: np.ndarray | None
    a_mask: np.ndarray | None
    a_pool: np.ndarray | None
    labels: np.ndarray
    tri: np.ndarray

    @property
    def size(self) -> int:
        return len(self.pairs)

    @classmethod
    def from_pairs(
        cls, pairs: Sequence[PairExample], use_text: bool = True, use_audio: bool = True, alignment: bool = True
    ) -> "Batch":
        """Pad ``pairs`` into arrays. ``alignment=False`` skips the span-based
        pooling matrices, which only training losses need."""
        from .augmentation import label_tri_class

        pairs = list(pairs)
        if not pairs:
            raise ContractError("empty batch")
        if not (use_text or use_audio):
            raise ContractError("at least one enrollment modality is required")
        q_frames, q_mask = _pad_frames([p.query for p in pairs])
        Lq = max(len(p.query.phonemes) for p in pairs)
        q_pool = batch_pooling_matrix([p.query.spans for p in pairs], Lq, q_frames.shape[1]) if alignment else None
        q_ph_mask = _pad_ids([p.query.phonemes for p in pairs])[1]
        text_ids = t_mask = a_frames = a_mask = a_pool = None
        if use_text:
            if any(p.enroll_text is None for p in pairs):
                raise ContractError("text enrollment requested but a pair has none")
            text_ids, t_mask = _pad_ids([p.enroll_text for p in pairs])
        if use_audio:
            if any(p.enroll_audio is None for p in pairs):
                raise ContractError("audio enrollment requested but a pair has none")
            a_frames, a_mask = _pad_frames([p.enroll_audio for p in pairs])
            La = max(len(p.enroll_audio.phonemes) for p in pairs)
            if alignment:
                a_pool = batch_pooling_matrix([p.enroll_audio.spans for p in pairs], La, a_frames.shape[1])
        labels = np.array([p.label for p in pairs], dtype=np.float64)
        tri = np.array([label_tri_class(p) for p in pairs], dtype=np.int64)
        return cls(pairs, q_frames, q_mask, q_pool, q_ph_mask, text_ids, t_mask, a_frames, a_mask, a_pool, labels, tri)


@dataclass
class ForwardOutput:
    q_proj: Tensor
    q_pooled: Tensor
    t_proj: Tensor | None = None
    a_proj: Tensor | None = None
    a_pooled: Tensor | None = None
    text: HeadOutput | None = None
    audio: HeadOutput | None = None
    fused_score: Tensor | None = None
    m_at: Tensor | None = None
    m_at_rows: np.ndarray | None = None
    m_aa: Tensor | None = None
    injected_ids: list = field(default_factory=list)
    encoder_calls: dict = field(default_factory=dict)

    def scores(self, mode: str) -> np.ndarray:
        if mode == "text":
            return self.text.score.data.copy()
        if mode == "audio":
            return self.audio.score.data.copy()
        if mode == "both":
            return self.fused_score.data.copy()
        raise ContractError(f"unknown enrollment mode {mode!r}")


# -- masked helpers -----------------------------------------------------------------
def _masked_max(x: Tensor, mask: np.ndarray, axis: int) -> Tensor:
    """Max over ``axis`` ignoring entries where ``mask`` is 0."""
    return max_(sub(x, Tensor((1.0 - mask) * _BIG)), axis=axis)


def _broadcast_rows(v: Tensor, n_rows: int) -> Tensor:
    return mul(v.reshape(v.shape[0], 1), Tensor(np.ones((1, n_rows))))


def _column_coverage(m: Tensor, row_mask: np.ndarray, col_mask: np.ndarray, n_cols: np.ndarray):
    """Mean and min over valid query frames of the best row similarity."""
    colmax = _masked_max(m, row_mask[:, :, None] * np.ones_like(m.data), axis=1)
    cov_mean = sum_(mul(colmax, Tensor(col_mask)), axis=-1) / Tensor(n_cols)
    cov_min = neg(_masked_max(neg(colmax), col_mask, axis=-1))
    return cov_mean, cov_min


def _soft_position(m: Tensor, col_mask: np.ndarray, n_cols: np.ndarray, sharpness: float) -> Tensor:
    """Expected relative query position under ``softmax(sharpness * row)``."""
    B, _, C = m.shape
    pos = (np.arange(C)[None, :] + 0.5) / n_cols[:, None]
    w = softmax_rows(m, temperature=1.0 / sharpness, mask=col_mask[:, None, :].astype(bool))
    return sum_(mul(w, Tensor(pos[:, None, :])), axis=-1)


# -- model ----------------------------------------------------------------------------
class PLCLModel:
    """Encoders, projections, both matching heads and the fusion layer."""

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        self.cfg = cfg
        self.encoders = Encoders(cfg.encoder_config())
        rng = make_rng(cfg.seed, "heads")
        dh = cfg.d_head
        p = dict(self.encoders.params)
        for name, n_feat in (("text_head", TEXT_FEATURES), ("audio_head", AUDIO_FEATURES)):
            g = init_gru(rng, n_feat, dh, f"{name}.gru")
            p[f"{name}.gru.W"], p[f"{name}.gru.U"], p[f"{name}.gru.b"] = g.W, g.U, g.b
            p[f"{name}.fc.W"] = init_weight(rng, dh, 1, f"{name}.fc.W")
            p[f"{name}.fc.b"] = init_zeros((1,), f"{name}.fc.b")
        p["text_head.tri.W"] = init_weight(rng, dh, 3, "text_head.tri.W")
        p["text_head.tri.b"] = init_zeros((3,), "text_head.tri.b")
        p["fuse.W"] = init_weight(rng, 2 * dh, 1, "fuse.W")
        p["fuse.b"] = init_zeros((1,), "fuse.b")
        self.params = p
        self.encoder_calls = {QUERY_AUDIO: 0, ENROLL_AUDIO: 0, TEXT: 0}

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def _gru(self, prefix: str) -> GRUParams:
        p = self.params
        return GRUParams(p[f"{prefix}.W"], p[f"{prefix}.U"], p[f"{prefix}.b"])

    # -- encoders ---------------------------------------------------------------
    def encode_query(self, frames, mask) -> Tensor:
        self.encoder_calls[QUERY_AUDIO] += 1
        e = self.encoders.encode_audio_batch(frames, mask, QUERY_AUDIO)
        return self.encoders.project_batch(e, QUERY_AUDIO)

    def encode_enroll_audio(self, frames, mask) -> Tensor:
        self.encoder_calls[ENROLL_AUDIO] += 1
        e = self.encoders.encode_audio_batch(frames, mask, ENROLL_AUDIO)
        return self.encoders.project_batch(e, ENROLL_AUDIO)

    def encode_text(self, ids, mask) -> Tensor:
        self.encoder_calls[TEXT] += 1
        e = self.encoders.encode_text_batch(ids, mask)
        return self.encoders.project_batch(e, TEXT)

    # -- matrices ---------------------------------------------------------------
    def text_matrix(self, t_proj, t_mask, q_proj, q_mask, inj_vectors=None, inj_mask=None):
        """Stack text rows, then injected bank rows, per example; pad the rest.

        Returns ``(M, row_mask, injected_flag)`` with M of shape
        ``(B, Lt + n_inj, Tq)`` and zeros at every padded entry.
        """
        eps = self.cfg.cos_eps
        m_text = cosine_matrix(t_proj, q_proj, eps)
        B, Lt, Tq = m_text.shape
        n_inj = 0 if inj_vectors is None else inj_vectors.shape[1]
        R = Lt + n_inj
        t_len = t_mask.sum(axis=1).astype(int)
        place_t = np.zeros((B, R, Lt))
        row_mask = np.zeros((B, R))
        injected = np.zeros((B, R))
        for b in range(B):
            place_t[b, np.arange(t_len[b]), np.arange(t_len[b])] = 1.0
            row_mask[b, : t_len[b]] = 1.0
        m = matmul(Tensor(place_t), m_text)
        if n_inj:
            m_inj = cosine_matrix(inj_vectors, q_proj, eps)
            place_i = np.zeros((B, R, n_inj))
            for b in range(B):
                k = int(inj_mask[b].sum())
                rows = t_len[b] + np.arange(k)
                place_i[b, rows, np.arange(k)] = 1.0
                row_mask[b, rows] = 1.0
                injected[b, rows] = 1.0
            m = add(m, matmul(Tensor(place_i), m_inj))
        m = mul(m, Tensor(row_mask[:, :, None] * q_mask[:, None, :]))
        return m, row_mask, injected

    def audio_matrix(self, a_proj, a_mask, q_proj, q_mask):
        m = cosine_matrix(a_proj, q_proj, self.cfg.cos_eps)
        return mul(m, Tensor(a_mask[:, :, None] * q_mask[:, None, :]))

    # -- heads ------------------------------------------------------------------
    def text_head(self, m: Tensor, row_mask, col_mask, injected) -> HeadOutput:
        """Self-attention over the rows of the similarity matrix, then a GRU
        across rows on per-row match statistics."""
        B, R, C = m.shape
        n_cols = col_mask.sum(axis=1)
        text_rows = row_mask * (1.0 - injected)
        n_text = text_rows.sum(axis=1)
        logits = mul(matmul(m, swap_last(m)), Tensor(1.0 / np.sqrt(n_cols)[:, None, None]))
        w = softmax_rows(logits, 1.0, mask=row_mask[:, None, :].astype(bool))
        e = matmul(w, m)
        colm = col_mask[:, None, :] * np.ones((1, R, 1))
        inv_cols = Tensor(1.0 / n_cols[:, None])
        cov_mean, cov_min = _column_coverage(m, text_rows, col_mask, n_cols)
        row_pos = (np.arange(R)[None, :] + 0.5) / n_text[:, None] * text_rows
        feats = [
            _masked_max(m, colm, axis=-1),
            mul(sum_(m, axis=-1), inv_cols),
            _masked_max(e, colm, axis=-1),
            mul(sum_(e, axis=-1), inv_cols),
            _soft_position(m, col_mask, n_cols, self.cfg.position_sharpness),
            Tensor(row_pos),
            Tensor(injected),
            _broadcast_rows(cov_mean, R),
            _broadcast_rows(cov_min, R),
        ]
        x = stack(feats, axis=-1)
        h = gru_sequence(x, self._gru("text_head.gru"), mask=row_mask, return_all=False)
        p = self.params
        logit = linear(h, p["text_head.fc.W"], p["text_head.fc.b"]).reshape(B)
        tri = linear(h, p["text_head.tri.W"], p["text_head.tri.b"])
        return HeadOutput(h, sigmoid(logit), logit, tri, w)

    def audio_head(self, m: Tensor, row_mask, col_mask) -> HeadOutput:
        """Row maxima of the enrollment x query matrix attend over the query
        frames (columns); a GRU then runs over enrollment frames."""
        B, R, C = m.shape
        n_cols = col_mask.sum(axis=1)
        n_rows = row_mask.sum(axis=1)
        colm = col_mask[:, None, :] * np.ones((1, R, 1))
        m_qa = mul(_masked_max(m, colm, axis=-1), Tensor(row_mask))
        q = m_qa.reshape(B, 1, R)
        keys = swap_last(m)
        logits = mul(matmul(q, swap_last(keys)), Tensor(1.0 / np.sqrt(n_rows)[:, None, None]))
        w = softmax_rows(logits, 1.0, mask=col_mask[:, None, :].astype(bool))
        e = matmul(w, keys).reshape(B, R)
        cov_mean, cov_min = _column_coverage(m, row_mask, col_mask, n_cols)
        row_pos = (np.arange(R)[None, :] + 0.5) / n_rows[:, None] * row_mask
        feats = [
            e,
            m_qa,
            mul(sum_(m, axis=-1), Tensor(1.0 / n_cols[:, None])),
            _soft_position(m, col_mask, n_cols, self.cfg.position_sharpness),
            Tensor(row_pos),
            _broadcast_rows(cov_mean, R),
            _broadcast_rows(cov_min, R),
        ]
        x = stack(feats, axis=-1)
        h = gru_sequence(x, self._gru("audio_head.gru"), mask=row_mask, return_all=False)
        p = self.params
        logit = linear(h, p["audio_head.fc.W"], p["audio_head.fc.b"]).reshape(B)
        return HeadOutput(h, sigmoid(logit), logit, None, w, m_qa)

    def fuse(self, text_feature: Tensor | None, audio_feature: Tensor | None) -> Tensor:
        if text_feature is None or audio_feature is None:
            raise ContractError("fusion needs both the text and the audio feature")
        p = self.params
        logit = linear(concat([text_feature, audio_feature], axis=-1), p["fuse.W"], p["fuse.b"])
        return sigmoid(logit.reshape(logit.shape[0]))

    # -- full forward -------------------------------------------------------------
    def injection(self, exclude: Sequence[Sequence[int]], bank: MemoryBank | None, seed_for) -> tuple:
        """Bank vectors to append below each example's text rows.

        ``seed_for(i)`` gives the sampling stream for example ``i``. Each
        example draws ``min(inject_count, eligible)`` rows, excluding the
        phonemes of its own enrollment text (``exclude[i]``).
        """
        n = self.cfg.inject_count
        if bank is None or n == 0:
            return None, None, []
        B = len(exclude)
        vecs = np.zeros((B, n, self.cfg.d_proj))
        mask = np.zeros((B, n))
        ids = []
        for i, ex in enumerate(exclude):
            k = min(n, len(bank.eligible(ex)))
            drawn = bank.sample(k, ex, seed=seed_for(i))
            ids.append([pid for pid, _ in drawn])
            for j, (_, v) in enumerate(drawn):
                vecs[i, j] = v
                mask[i, j] = 1.0
        if not mask.any():
            return None, None, ids
        return Tensor(vecs), mask, ids

    def forward(self, batch: Batch, bank: MemoryBank | None = None, seed_for=None) -> ForwardOutput:
        q_proj = self.encode_query(batch.q_frames, batch.q_mask)
        t_proj = a_proj = None
        if batch.text_ids is not None:
            t_proj = self.encode_text(batch.text_ids, batch.t_mask)
        if batch.a_frames is not None:
            a_proj = self.encode_enroll_audio(batch.a_frames, batch.a_mask)
        exclude = [p.enroll_text for p in batch.pairs] if t_proj is not None else None
        out = self.score_projections(
            q_proj, batch.q_mask, t_proj, batch.t_mask, a_proj, batch.a_mask, bank, seed_for, exclude
        )
        if batch.q_pool is not None:
            out.q_pooled = matmul(Tensor(batch.q_pool), q_proj)
        if a_proj is not None and batch.a_pool is not None:
            out.a_pooled = matmul(Tensor(batch.a_pool), a_proj)
        return out

    def score_projections(
        self, q_proj, q_mask, t_proj=None, t_mask=None, a_proj=None, a_mask=None, bank=None, seed_for=None, exclude=None
    ) -> ForwardOutput:
        """Run whichever heads the supplied enrollment projections allow."""
        out = ForwardOutput(q_proj, None)
        if t_proj is not None:
            if seed_for is None:
                seed_for = lambda i: make_rng(self.cfg.seed, "inject", i)
            inj, inj_mask, ids = self.injection(exclude, bank, seed_for)
            m, row_mask, injected = self.text_matrix(t_proj, t_mask, q_proj, q_mask, inj, inj_mask)
            out.t_proj, out.m_at, out.m_at_rows, out.injected_ids = t_proj, m, row_mask, ids
            out.text = self.text_head(m, row_mask, q_mask, injected)
        if a_proj is not None:
            out.a_proj = a_proj
            out.m_aa = self.audio_matrix(a_proj, a_mask, q_proj, q_mask)
            out.audio = self.audio_head(out.m_aa, a_mask, q_mask)
        if out.text is not None and out.audio is not None:
            out.fused_score = self.fuse(out.text.feature, out.audio.feature)
        return out


# -- objective -------------------------------------------------------------------------
@dataclass(frozen=True)
class LossToggles:
    clat: bool = True
    claa: bool = True
    uat3: bool = True
    uat: bool = True
    uaa: bool = True
    uata: bool = True
    enrollment_text_rows: bool = True


def _rows(pairs, which: str, positives_only: bool):
    bi, ti, ids = [], [], []
    for b, p in enumerate(pairs):
        if positives_only and p.match_label != POSITIVE:
            continue
        seq = p.query.phonemes if which == "query" else p.enroll_text
        for t, pid in enumerate(seq):
            bi.append(b)
            ti.append(t)
            ids.append(pid)
    return (np.array(bi, dtype=np.int64), np.array(ti, dtype=np.int64)), ids


def phoneme_batch(batch: Batch, anchors: Tensor, keys: Tensor) -> PhonemeBatch | None:
    """Positive pairs only: row (b, t) of the pooled query against row (b, t)
    of the keys, in batch order then phoneme order."""
    idx, ids = _rows(batch.pairs, "query", True)
    if not ids:
        return None
    return PhonemeBatch(getitem(anchors, idx), getitem(keys, idx), tuple(ids), tuple(idx[0]))


def audio_text_batch(batch: Batch, out: "ForwardOutput", enrollment_rows: bool) -> PhonemeBatch | None:
    """Audio-text phoneme correspondences: the pooled query against the text
    of every positive pair, plus (optionally) the pooled enrollment audio
    against its own text for every pair, since the two always match."""
    idx, ids = _rows(batch.pairs, "query", True)
    anchors, keys = [], []
    if ids:
        anchors.append(getitem(out.q_pooled, idx))
        keys.append(getitem(out.t_proj, idx))
    owner = list(idx[0])
    if enrollment_rows and out.a_pooled is not None:
        eidx, eids = _rows(batch.pairs, "enroll", False)
        anchors.append(getitem(out.a_pooled, eidx))
        keys.append(getitem(out.t_proj, eidx))
        ids = ids + eids
        owner += list(eidx[0])
    if not ids:
        return None
    a = anchors[0] if len(anchors) == 1 else concat(anchors, axis=0)
    k = keys[0] if len(keys) == 1 else concat(keys, axis=0)
    return PhonemeBatch(a, k, tuple(ids), tuple(owner))


def compute_losses(model: PLCLModel, batch: Batch, out: ForwardOutput, toggles: LossToggles = LossToggles()) -> LossBundle:
    cfg = model.cfg
    ccfg = ContrastiveConfig(cfg.temperature, cfg.cos_eps)
    y = batch.labels
    parts = {}
    if toggles.uat:
        parts["l_uat"] = bce(out.text.score, y)
    if toggles.uat3:
        parts["l_uat3"] = three_class_ce(out.text.tri_logits, batch.tri)
    if toggles.clat:
        pb = audio_text_batch(batch, out, toggles.enrollment_text_rows)
        if pb is not None:
            parts["l_clat"] = info_nce(pb, ccfg, reduction="mean")
    if toggles.uaa:
        parts["l_uaa"] = focal_loss(out.audio.score, y, cfg.focal_gamma, cfg.focal_weight)
    if toggles.claa:
        pb = phoneme_batch(batch, out.q_pooled, out.a_pooled)
        if pb is not None:
            parts["l_claa"] = info_nce(pb, ccfg, reduction="mean")
    if toggles.uata:
        parts["l_uata"] = bce(out.fused_score, y)
    return total_loss(**parts)


# -- single-example API ------------------------------------------------------------------
def similarity_matrix(rows, cols, eps: float = 1e-8) -> SimilarityMatrix:
    r = getattr(rows, "embeddings", rows)
    c = getattr(cols, "embeddings", cols)
    r, c = as_tensor(r), as_tensor(c)
    if r.shape[-1] != c.shape[-1]:
        raise ShapeError(f"similarity_matrix: row width {r.shape[-1]} vs column width {c.shape[-1]}")
    return SimilarityMatrix(
        cosine_matrix(r, c, eps), getattr(rows, "origin", "rows"), getattr(cols, "origin", "cols")
    )


def inject_memory_rows(m: SimilarityMatrix, bank: MemoryBank, count: int, query, seed, exclude_ids=(), eps: float = 1e-8):
    """Append one row per sampled bank vector: its cosine against every query frame."""
    if count == 0:
        return m
    drawn = bank.sample(count, exclude_ids, seed=seed)
    q = as_tensor(getattr(query, "embeddings", query))
    vecs = Tensor(np.stack([v for _, v in drawn]))
    rows = cosine_matrix(vecs, q, eps)
    return SimilarityMatrix(concat([m.values, rows], axis=0), m.row_origin, m.col_origin, m.n_injected + count)


def text_head(m: SimilarityMatrix, model: PLCLModel) -> HeadOutput:
    v = as_tensor(m.values)
    R, C = v.shape
    injected = np.zeros((1, R))
    if m.n_injected:
        injected[0, R - m.n_injected :] = 1.0
    return model.text_head(v.reshape(1, R, C), np.ones((1, R)), np.ones((1, C)), injected)


def audio_head(m: SimilarityMatrix, model: PLCLModel) -> HeadOutput:
    v = as_tensor(m.values)
    R, C = v.shape
    return model.audio_head(v.reshape(1, R, C), np.ones((1, R)), np.ones((1, C)))


def fuse(text_feature, audio_feature, model: PLCLModel) -> Tensor:
    return model.fuse(text_feature, audio_feature)


def resolve_mode(has_text: bool, has_audio: bool, masked=()) -> str:
    """Enrollment mode after dropping the ``masked`` modalities."""
    has_text = has_text and "text" not in masked
    has_audio = has_audio and "audio" not in masked
    if not (has_text or has_audio):
        raise ContractError("inference needs enrollment text, enrollment audio, or both")
    return "both" if has_text and has_audio else ("text" if has_text else "audio")


def infer_batch(
    model: PLCLModel, pairs: Sequence[PairExample], mode: str, bank=None, seed_for=None, masked=()
) -> np.ndarray:
    """Scores for ``pairs`` using only the modalities ``mode`` allows, minus
    any listed in ``masked``. No alignment spans are read."""
    if mode not in ("text", "audio", "both"):
        raise ContractError(f"unknown enrollment mode {mode!r}")
    mode = resolve_mode(mode in ("text", "both"), mode in ("audio", "both"), masked)
    use_text = mode in ("text", "both")
    use_audio = mode in ("audio", "both")
    with no_grad():
        out = model.forward(Batch.from_pairs(pairs, use_text, use_audio, alignment=False), bank, seed_for)
    return out.scores(mode)


def infer(
    query: Utterance, enroll_text=None, enroll_audio=None, model: PLCLModel = None, bank=None, seed=0, masked=()
) -> float:
    """Route to the text head, the audio head, or fusion depending on which
    enrollments are present (and not masked)."""
    from .corpus import NATURAL_NEGATIVE, NEGATIVE

    mode = resolve_mode(enroll_text is not None, enroll_audio is not None, masked)
    pair = PairExample(query, enroll_text, enroll_audio, NEGATIVE, NATURAL_NEGATIVE, HARD)
    return float(infer_batch(model, [pair], mode, bank, lambda i: make_rng(seed, "inject", i))[0])
