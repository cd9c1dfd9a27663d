"""Neural-network primitives built on :mod:`plcl.numerics.tensor`.

The heavier primitives (softmax, layer norm, row normalisation, GRU step)
are fused: one graph node with a hand-written backward. All of them are
covered by finite-difference checks in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ParameterError, ShapeError
from .tensor import (
    Tensor,
    _make,
    _sigmoid,
    _unbroadcast,
    add,
    as_tensor,
    getitem,
    matmul,
    mul,
    stack,
    sum_,
    swap_last,
)


# -- normalisers ---------------------------------------------------------------
def softmax_rows(x, temperature: float = 1.0, mask=None) -> Tensor:
    """Softmax over the last axis of ``x / temperature``.

    ``mask`` (broadcastable boolean, True = keep) excludes entries; masked
    entries get probability exactly 0. A fully masked row yields zeros.
    """
    if not temperature > 0:
        raise ParameterError(f"softmax temperature must be > 0, got {temperature}")
    x = as_tensor(x)
    z = x.data / temperature
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        z = np.where(mask, z, -np.inf)
    zmax = np.max(z, axis=-1, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.exp(z - zmax)
    denom = e.sum(axis=-1, keepdims=True)
    out = e / np.where(denom > 0, denom, 1.0)

    def backward(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner) / temperature,)

    return _make(out, (x,), backward)


def log_softmax_rows(x, temperature: float = 1.0) -> Tensor:
    if not temperature > 0:
        raise ParameterError(f"softmax temperature must be > 0, got {temperature}")
    x = as_tensor(x)
    z = x.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return ((g - p * g.sum(axis=-1, keepdims=True)) / temperature,)

    return _make(out, (x,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then ``gain*x + bias``."""
    if not eps > 0:
        raise ParameterError("layer_norm eps must be > 0")
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: last axis {d} vs gain {gain.shape}, bias {bias.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx_hat = g * gain.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        red = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _make(out, (x, gain, bias), backward)


def normalize_rows(x, eps: float = 1e-8) -> Tensor:
    """``x / max(||x||, eps)`` along the last axis."""
    x = as_tensor(x)
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=-1, keepdims=True))
    big = norm > eps
    denom = np.where(big, norm, eps)
    y = xd / denom

    def backward(g):
        proj = (y * g).sum(axis=-1, keepdims=True)
        return (np.where(big, g - y * proj, g) / denom,)

    return _make(y, (x,), backward)


def cosine_similarity(a, b, eps: float = 1e-8) -> Tensor:
    """Cosine of two vectors (or row-wise along the last axis)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"cosine_similarity: {a.shape} vs {b.shape}")
    return sum_(mul(normalize_rows(a, eps), normalize_rows(b, eps)), axis=-1)


def cosine_matrix(rows, cols, eps: float = 1e-8) -> Tensor:
    """All-pairs cosine similarity between rows of ``rows`` and rows of ``cols``.

    Works on ``(R, d) x (C, d)`` and batched ``(B, R, d) x (B, C, d)``.
    """
    rows, cols = as_tensor(rows), as_tensor(cols)
    if rows.shape[-1] != cols.shape[-1]:
        raise ShapeError(f"cosine_matrix: width {rows.shape[-1]} vs {cols.shape[-1]}")
    return matmul(normalize_rows(rows, eps), swap_last(normalize_rows(cols, eps)))


# -- attention -------------------------------------------------------------------
def attention(q, k, v, key_mask=None, return_weights: bool = False):
    """Scaled dot-product attention ``softmax(q k^T / sqrt(d)) v``.

    ``key_mask`` is boolean, broadcastable to ``(..., 1, n)``; False keys
    receive zero weight.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention: query width {q.shape[-1]} != key width {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: {k.shape[-2]} keys vs {v.shape[-2]} values")
    d = q.shape[-1]
    logits = matmul(q, swap_last(k))
    mask = None
    if key_mask is not None:
        mask = np.expand_dims(np.asarray(key_mask, dtype=bool), -2)
    w = softmax_rows(logits, temperature=float(np.sqrt(d)), mask=mask)
    out = matmul(w, v)
    return (out, w) if return_weights else out


# -- recurrent -------------------------------------------------------------------
@dataclass
class GRUParams:
    """Weights of one GRU cell, gates packed as ``[update, reset, candidate]``."""

    W: Tensor  # (d_in, 3h)
    U: Tensor  # (h, 3h)
    b: Tensor  # (3h,)

    @property
    def hidden(self) -> int:
        return self.U.shape[0]

    @property
    def d_in(self) -> int:
        return self.W.shape[0]


def gru_step(x, h, params: GRUParams, mask=None) -> Tensor:
    """One GRU update.

    z = sigmoid(x Wz + h Uz + bz)
    r = sigmoid(x Wr + h Ur + br)
    c = tanh(x Wc + (r*h) Uc + bc)
    h' = (1 - z) * h + z * c

    ``mask`` (shape ``(B,)`` or ``(B, 1)``, 0/1) freezes rows where it is 0,
    which is how padded steps carry the state through.
    """
    x, h = as_tensor(x), as_tensor(h)
    W, U, b = params.W, params.U, params.b
    n = U.shape[0]
    if W.shape[1] != 3 * n or U.shape != (n, 3 * n) or b.shape != (3 * n,):
        raise ShapeError(f"gru_step: inconsistent params W{W.shape} U{U.shape} b{b.shape}")
    if x.shape[-1] != W.shape[0] or h.shape[-1] != n:
        raise ShapeError(f"gru_step: x{x.shape} / h{h.shape} vs W{W.shape} U{U.shape}")
    xd, hd = x.data, h.data
    Wd, Ud = W.data, U.data
    a = xd @ Wd + b.data
    uzr = hd @ Ud[:, : 2 * n]
    z = _sigmoid(a[..., :n] + uzr[..., :n])
    r = _sigmoid(a[..., n : 2 * n] + uzr[..., n:])
    rh = r * hd
    c = np.tanh(a[..., 2 * n :] + rh @ Ud[:, 2 * n :])
    if mask is None:
        m = 1.0
    else:
        m = np.asarray(mask, dtype=np.float64).reshape(hd.shape[:-1] + (1,))
    mz = m * z
    out = hd + mz * (c - hd)

    def backward(g):
        g_c = g * mz
        g_z = g * m * (c - hd)
        g_h = g * (1.0 - mz)
        g_an = g_c * (1.0 - c * c)
        g_rh = g_an @ Ud[:, 2 * n :].T
        g_r = g_rh * hd
        g_h = g_h + g_rh * r
        g_az = g_z * z * (1.0 - z)
        g_ar = g_r * r * (1.0 - r)
        g_zr = np.concatenate([g_az, g_ar], axis=-1)
        g_h = g_h + g_zr @ Ud[:, : 2 * n].T
        g_a = np.concatenate([g_zr, g_an], axis=-1)
        x2 = xd.reshape(-1, xd.shape[-1])
        h2 = hd.reshape(-1, n)
        ga2 = g_a.reshape(-1, 3 * n)
        g_W = x2.T @ ga2
        g_U = np.concatenate(
            [h2.T @ g_zr.reshape(-1, 2 * n), rh.reshape(-1, n).T @ g_an.reshape(-1, n)], axis=1
        )
        g_b = ga2.sum(axis=0)
        g_x = g_a @ Wd.T
        return (
            _unbroadcast(g_x, xd.shape),
            _unbroadcast(g_h, hd.shape),
            g_W,
            g_U,
            g_b,
        )

    return _make(out, (x, h, W, U, b), backward)


def gru_sequence(xs, params: GRUParams, mask=None, h0=None, return_all: bool = True):
    """Run a GRU over axis 1 of ``xs`` (shape ``(B, T, d_in)``).

    Returns the stacked hidden states ``(B, T, h)`` (or only the final state
    when ``return_all`` is False). With a ``(B, T)`` mask, the final state is
    the state after each row's last valid step.
    """
    xs = as_tensor(xs)
    B, T = xs.shape[0], xs.shape[1]
    h = h0 if h0 is not None else Tensor(np.zeros((B, params.hidden)))
    states = []
    for t in range(T):
        mt = None if mask is None else mask[:, t]
        h = gru_step(getitem(xs, (slice(None), t)), h, params, mask=mt)
        states.append(h)
    if not return_all:
        return h
    return stack(states, axis=1)


# -- layers / optimisation -----------------------------------------------------------
def linear(x, weight, bias=None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def sgd_update(params, lr: float) -> None:
    """In-place ``w <- w - lr * g`` for every parameter holding a gradient."""
    for p in params:
        if p.grad is not None:
            p.data = p.data - lr * p.grad
