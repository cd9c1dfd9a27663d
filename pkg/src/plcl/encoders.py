"""Trainable audio/text encoders and the per-modality projections into the
shared embedding space."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError, VocabularyError
from .numerics import (
    GRUParams,
    Tensor,
    embedding,
    gru_sequence,
    layer_norm,
    leaky_relu,
    linear,
    relu,
    tanh,
)
from .rng import make_rng

QUERY_AUDIO = "query_audio"
ENROLL_AUDIO = "enroll_audio"
TEXT = "text"

ACTIVATIONS = {"tanh": tanh, "relu": relu, "leaky_relu": leaky_relu}


@dataclass(frozen=True)
class EncoderConfig:
    d_in: int = 16
    d_model: int = 48
    d_proj: int = 32
    text_vocab: int = 40
    activation: str = "tanh"
    share_audio_encoder: bool = True
    seed: int = 0
    gru_update_bias: float = 0.0

    def __post_init__(self):
        for name in ("d_in", "d_model", "d_proj", "text_vocab"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.d_proj > self.d_model:
            raise ConfigError(f"d_proj ({self.d_proj}) must not exceed d_model ({self.d_model})")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}; choose from {sorted(ACTIVATIONS)}")


@dataclass
class EncodedSequence:
    embeddings: Tensor
    origin: str

    @property
    def length(self) -> int:
        return self.embeddings.shape[-2]

    @property
    def width(self) -> int:
        return self.embeddings.shape[-1]


def init_weight(rng, fan_in: int, fan_out: int, name: str) -> Tensor:
    w = rng.normal(scale=1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
    return Tensor(w, requires_grad=True, name=name)


def init_zeros(shape, name: str) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def init_gru(rng, d_in: int, hidden: int, prefix: str, update_bias: float = 0.0) -> GRUParams:
    """A positive ``update_bias`` starts the update gate open, so each state
    begins close to its input-driven candidate rather than its history."""
    b = init_zeros((3 * hidden,), f"{prefix}.b")
    b.data[:hidden] = update_bias
    return GRUParams(
        init_weight(rng, d_in, 3 * hidden, f"{prefix}.W"),
        init_weight(rng, hidden, 3 * hidden, f"{prefix}.U"),
        b,
    )


class Encoders:
    """Parameters and forward passes for the three encoders plus projections.

    Audio inputs are padded batches ``(B, T, d_in)`` with a ``(B, T)`` 0/1
    mask; text inputs are padded id arrays ``(B, T)``.
    """

    def __init__(self, cfg: EncoderConfig):
        self.cfg = cfg
        rng = make_rng(cfg.seed, "encoders")
        d_in, dm, dp = cfg.d_in, cfg.d_model, cfg.d_proj
        p = {}
        audio_roles = ["audio"] if cfg.share_audio_encoder else ["qaudio", "eaudio"]
        for role in audio_roles:
            p[f"{role}.fc.W"] = init_weight(rng, d_in, dm, f"{role}.fc.W")
            p[f"{role}.fc.b"] = init_zeros((dm,), f"{role}.fc.b")
            g = init_gru(rng, dm, dm, f"{role}.gru", cfg.gru_update_bias)
            p[f"{role}.gru.W"], p[f"{role}.gru.U"], p[f"{role}.gru.b"] = g.W, g.U, g.b
        p["text.emb"] = Tensor(rng.normal(scale=1.0, size=(cfg.text_vocab, dm)), requires_grad=True, name="text.emb")
        g = init_gru(rng, dm, dm, "text.gru", cfg.gru_update_bias)
        p["text.gru.W"], p["text.gru.U"], p["text.gru.b"] = g.W, g.U, g.b
        for mod in ("audio", "text"):
            p[f"proj.{mod}.ln.g"] = Tensor(np.ones(dm), requires_grad=True, name=f"proj.{mod}.ln.g")
            p[f"proj.{mod}.ln.b"] = init_zeros((dm,), f"proj.{mod}.ln.b")
            p[f"proj.{mod}.W"] = init_weight(rng, dm, dp, f"proj.{mod}.W")
            p[f"proj.{mod}.b"] = init_zeros((dp,), f"proj.{mod}.b")
        self.params = p
        self.act = ACTIVATIONS[cfg.activation]

    def _audio_role(self, origin: str) -> str:
        if self.cfg.share_audio_encoder:
            return "audio"
        return "qaudio" if origin == QUERY_AUDIO else "eaudio"

    def _gru(self, prefix: str) -> GRUParams:
        p = self.params
        return GRUParams(p[f"{prefix}.W"], p[f"{prefix}.U"], p[f"{prefix}.b"])

    # -- batched ------------------------------------------------------------
    def encode_audio_batch(self, frames: np.ndarray, mask: np.ndarray, origin: str = QUERY_AUDIO) -> Tensor:
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 3 or frames.shape[-1] != self.cfg.d_in:
            raise ShapeError(f"audio frames {frames.shape} do not match d_in={self.cfg.d_in}")
        role = self._audio_role(origin)
        p = self.params
        x = tanh(linear(Tensor(frames), p[f"{role}.fc.W"], p[f"{role}.fc.b"]))
        return gru_sequence(x, self._gru(f"{role}.gru"), mask=mask)

    def encode_text_batch(self, ids: np.ndarray, mask: np.ndarray) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.text_vocab):
            raise VocabularyError(f"text ids must lie in [0, {self.cfg.text_vocab})")
        x = embedding(self.params["text.emb"], ids)
        return gru_sequence(x, self._gru("text.gru"), mask=mask)

    def project_batch(self, e: Tensor, modality: str) -> Tensor:
        mod = "text" if modality == TEXT else "audio"
        p = self.params
        h = layer_norm(e, p[f"proj.{mod}.ln.g"], p[f"proj.{mod}.ln.b"])
        return self.act(linear(h, p[f"proj.{mod}.W"], p[f"proj.{mod}.b"]))

    # -- single sequence ------------------------------------------------------
    def encode_audio(self, frames, origin: str = QUERY_AUDIO) -> EncodedSequence:
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise ShapeError(f"expected a (T, d_in) frame matrix, got {frames.shape}")
        out = self.encode_audio_batch(frames[None], np.ones((1, frames.shape[0])), origin)
        return EncodedSequence(out[0], origin)

    def encode_text(self, phonemes) -> EncodedSequence:
        ids = np.asarray(phonemes, dtype=np.int64).reshape(1, -1)
        if ids.shape[1] < 1:
            raise ShapeError("empty phoneme sequence")
        out = self.encode_text_batch(ids, np.ones(ids.shape))
        return EncodedSequence(out[0], TEXT)

    def project(self, e: EncodedSequence) -> EncodedSequence:
        return EncodedSequence(self.project_batch(e.embeddings, e.origin), e.origin)
