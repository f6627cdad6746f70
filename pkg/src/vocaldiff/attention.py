"""Windowed local attention, rotary global attention, and their
timestep-weighted combination.

The combination weight tracks the cumulative signal level of the diffusion
process: at t = 0 (clean signal) the block attends globally; as t grows and
the signal degrades, weight shifts onto the local windowed branch.  Local
q/k/v come from kernel-3 convolutions, global q/k/v from pointwise linear
projections with rotary position embeddings on q and k.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, fields

import numpy as np

from .errors import ConfigurationError, DimensionError
from .schedule import Schedule, mix_weight
from .tensor import (Tensor, _apply, add, concat, conv1d, matmul, mul,
                     narrow, permute, reshape, transpose)


@dataclass(frozen=True)
class AttentionConfig:
    heads: int = 8
    head_dim: int = 64
    window: int = 16

    def __post_init__(self):
        if self.heads < 1 or self.head_dim < 1 or self.window < 1:
            raise ConfigurationError(
                f"heads/head_dim/window must be >= 1, got "
                f"{self.heads}/{self.head_dim}/{self.window}"
            )
        if self.head_dim % 2 != 0:
            raise ConfigurationError(
                f"head_dim must be even for rotary pairing, got {self.head_dim}"
            )

    @property
    def model_dim(self) -> int:
        return self.heads * self.head_dim


ROPE_BASE = 10000.0


@functools.lru_cache(maxsize=8)
def _rope_tables(length: int, d: int):
    """Rotation tables for the default 0..L-1 positions, cached because the
    trig evaluation otherwise dominates small-L attention calls."""
    theta = ROPE_BASE ** (-2.0 * np.arange(d // 2) / d)
    angle = np.arange(length, dtype=np.float64)[:, None] * theta[None, :]
    return np.cos(angle), np.sin(angle)


@functools.lru_cache(maxsize=16)
def _rope_complex_table(length: int, d: int, ctype):
    cos64, sin64 = _rope_tables(length, d)
    return (cos64 + 1j * sin64).astype(ctype)


def rope_rotate(x: Tensor, positions=None) -> Tensor:
    """Rotate consecutive coordinate pairs of x[..., L, d] by position-scaled
    angles.

    Pair k of row i is rotated by positions[i] * base^(-2k/d); positions
    defaults to 0..L-1.  Leading axes batch independent sequences sharing the
    same positions.  Norms are preserved per pair, and rotated dot products
    depend only on position differences.  The rotation is linear, so the
    backward pass is the same rotation by the negated angles.
    """
    if x.data.ndim < 2:
        raise DimensionError(f"rope_rotate expects (..., L, d), got {x.shape}")
    length, d = x.shape[-2], x.shape[-1]
    if d % 2 != 0:
        raise ConfigurationError(f"rope_rotate needs even d, got {d}")
    if positions is None:
        cos64, sin64 = _rope_tables(length, d)
    else:
        positions = np.asarray(positions, dtype=np.float64)
        if positions.shape != (length,):
            raise DimensionError(
                f"positions shape {positions.shape} != ({length},)"
            )
        theta = ROPE_BASE ** (-2.0 * np.arange(d // 2) / d)
        angle = positions[:, None] * theta[None, :]
        cos64, sin64 = np.cos(angle), np.sin(angle)

    xd = x.data
    if xd.flags.c_contiguous and xd.dtype in (np.float32, np.float64):
        # each (even, odd) pair viewed as one complex number turns the
        # rotation into a single vectorized multiply
        ctype = np.complex64 if xd.dtype == np.float32 else np.complex128
        if positions is None:
            w = _rope_complex_table(length, d, ctype)
        else:
            w = (cos64 + 1j * sin64).astype(ctype)
        out = (xd.view(ctype) * w).view(xd.dtype)
        wc = np.conj(w)

        def bwd(g):
            gc = np.ascontiguousarray(g).view(ctype)
            return ((gc * wc).view(xd.dtype),)

        return _apply(out, (x,), bwd)

    cos = cos64.astype(xd.dtype, copy=False)
    sin = sin64.astype(xd.dtype, copy=False)
    even = xd[..., 0::2]
    odd = xd[..., 1::2]
    out = np.empty_like(xd)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos

    def bwd(g):
        ge = g[..., 0::2]
        go = g[..., 1::2]
        dx = np.empty_like(g)
        dx[..., 0::2] = ge * cos + go * sin
        dx[..., 1::2] = go * cos - ge * sin
        return (dx,)

    return _apply(out, (x,), bwd)


def local_attention(q: Tensor, k: Tensor, v: Tensor, window: int) -> Tensor:
    """Scaled dot-product attention restricted to a sliding window.

    Position i attends to positions j with i - ceil(w/2) < j <= i + floor(w/2),
    truncated at the sequence edges.  Work and memory are O(L * window * d):
    keys/values are gathered per window offset rather than materializing the
    full L x L score matrix.
    """
    if window < 1:
        raise ConfigurationError(f"window must be >= 1, got {window}")
    if q.data.ndim != 2 or q.shape != k.shape or q.shape != v.shape:
        raise DimensionError(
            f"local_attention needs equal (L, d) inputs, got "
            f"{q.shape}/{k.shape}/{v.shape}"
        )
    length, d = q.shape
    first = -(math.ceil(window / 2) - 1)
    offsets = np.arange(first, first + window)
    idx = np.arange(length)[:, None] + offsets[None, :]
    valid = (idx >= 0) & (idx < length)
    idxc = np.clip(idx, 0, length - 1)
    scale = 1.0 / math.sqrt(d)
    qd, kd, vd = q.data, k.data, v.data
    kg = kd[idxc]
    vg = vd[idxc]
    scores = np.einsum("ld,lwd->lw", qd, kg, optimize=True) * scale
    scores = np.where(valid, scores, -np.inf)
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    attn = e / e.sum(axis=1, keepdims=True)
    out = np.einsum("lw,lwd->ld", attn, vg, optimize=True)

    def bwd(g):
        dattn = np.einsum("ld,lwd->lw", g, vg, optimize=True)
        dv = np.zeros_like(vd)
        np.add.at(dv, idxc, attn[:, :, None] * g[:, None, :])
        ds = attn * (dattn - np.sum(dattn * attn, axis=1, keepdims=True))
        ds *= scale
        dq = np.einsum("lw,lwd->ld", ds, kg, optimize=True)
        dk = np.zeros_like(kd)
        np.add.at(dk, idxc, ds[:, :, None] * qd[:, None, :])
        return dq, dk, dv

    return _apply(out, (q, k, v), bwd)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor,
                         scale: float) -> Tensor:
    """softmax(scale * q @ k^T) @ v as one fused op.

    Inputs are (..., L, d) with identical shapes; leading axes batch
    independent attention problems, one per head.  Scores and attention
    weights share a single (..., L, L) buffer so the call allocates two
    large temporaries instead of five, which matters once L*L spills out
    of cache.  The backward pass is the closed form of the whole chain.
    """
    if q.shape != k.shape or q.shape != v.shape or q.data.ndim < 2:
        raise DimensionError(
            f"scaled_dot_attention needs equal (..., L, d) inputs, got "
            f"{q.shape}/{k.shape}/{v.shape}"
        )
    qs = q.data * scale
    kd, vd = k.data, v.data
    scores = np.matmul(qs, kd.swapaxes(-1, -2))
    scores -= scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    denom = np.sum(scores, axis=-1, keepdims=True, dtype=np.float64)
    scores /= denom.astype(scores.dtype)
    att = scores
    out = np.matmul(att, vd)

    def bwd(g):
        dv = np.matmul(att.swapaxes(-1, -2), g)
        datt = np.matmul(g, vd.swapaxes(-1, -2))
        datt -= np.sum(datt * att, axis=-1, keepdims=True)
        datt *= att
        dq = np.matmul(datt, kd) * scale
        dk = np.matmul(datt.swapaxes(-1, -2), qs)
        return dq, dk, dv

    return _apply(out, (q, k, v), bwd)


def global_attention(q: Tensor, k: Tensor, v: Tensor,
                     positions=None) -> Tensor:
    """Full-length scaled dot-product attention with rotary q/k encoding.

    Accepts (L, d) or (heads, L, d); heads run as one batched call and
    share the position ladder.  v is left unrotated.  positions defaults
    to 0..L-1; a caller can zero it to recover plain attention.
    """
    if q.data.ndim < 2 or q.shape != k.shape or q.shape != v.shape:
        raise DimensionError(
            f"global_attention needs equal (..., L, d) inputs, got "
            f"{q.shape}/{k.shape}/{v.shape}"
        )
    d = q.shape[-1]
    if d % 2 != 0:
        raise ConfigurationError(f"global_attention needs even d, got {d}")
    qr = rope_rotate(q, positions)
    kr = rope_rotate(k, positions)
    return scaled_dot_attention(qr, kr, v, 1.0 / math.sqrt(d))


# parameter field names, in construction order
_ATTN_FIELDS = (
    "local_q_w", "local_q_b", "local_k_w", "local_k_b",
    "local_v_w", "local_v_b",
    "global_q_w", "global_q_b", "global_k_w", "global_k_b",
    "global_v_w", "global_v_b",
    "out_w", "out_b",
)


@dataclass
class AttentionParams:
    """Projection weights for one soft-alignment block.

    Local projections are kernel-3 convolutions over (model_dim, L); global
    projections and the output projection are pointwise linear maps stored
    as (in, out) matrices.
    """

    local_q_w: Tensor
    local_q_b: Tensor
    local_k_w: Tensor
    local_k_b: Tensor
    local_v_w: Tensor
    local_v_b: Tensor
    global_q_w: Tensor
    global_q_b: Tensor
    global_k_w: Tensor
    global_k_b: Tensor
    global_v_w: Tensor
    global_v_b: Tensor
    out_w: Tensor
    out_b: Tensor

    @classmethod
    def from_map(cls, tensors: dict, prefix: str) -> "AttentionParams":
        return cls(**{name: tensors[prefix + name] for name in _ATTN_FIELDS})

    def to_map(self, prefix: str) -> dict:
        return {prefix + f.name: getattr(self, f.name) for f in fields(self)}


def init_attention_params(cfg: AttentionConfig, rng: np.random.Generator,
                          dtype=np.float32) -> AttentionParams:
    """Uniform fan-in init for projections, zero biases."""
    m = cfg.model_dim

    def conv_w():
        bound = 1.0 / math.sqrt(m * 3)
        return Tensor(rng.uniform(-bound, bound, (m, m, 3)).astype(dtype))

    def lin_w():
        bound = 1.0 / math.sqrt(m)
        return Tensor(rng.uniform(-bound, bound, (m, m)).astype(dtype))

    def bias():
        return Tensor(np.zeros(m, dtype=dtype))

    return AttentionParams(
        local_q_w=conv_w(), local_q_b=bias(),
        local_k_w=conv_w(), local_k_b=bias(),
        local_v_w=conv_w(), local_v_b=bias(),
        global_q_w=lin_w(), global_q_b=bias(),
        global_k_w=lin_w(), global_k_b=bias(),
        global_v_w=lin_w(), global_v_b=bias(),
        out_w=lin_w(), out_b=bias(),
    )


def _heads(x: Tensor, heads: int, head_dim: int):
    return [narrow(x, 1, h * head_dim, head_dim) for h in range(heads)]


def soft_align_attention(x: Tensor, t: int, cfg: AttentionConfig,
                         params: AttentionParams, sched: Schedule) -> Tensor:
    """Mix global and local attention by the signal level at timestep t.

    Per head, context = g * global + (1 - g) * local with g = sqrt(abar_t);
    heads are concatenated, projected, and added back onto x residually.
    Input and output are (model_dim, L).
    """
    if x.data.ndim != 2 or x.shape[0] != cfg.model_dim:
        raise ConfigurationError(
            f"input channels {x.shape} incompatible with model_dim "
            f"{cfg.model_dim}"
        )
    g, l = mix_weight(t, sched)

    # (L, model_dim) layouts for per-head slicing
    lq = transpose(conv1d(x, params.local_q_w, params.local_q_b, padding=1))
    lk = transpose(conv1d(x, params.local_k_w, params.local_k_b, padding=1))
    lv = transpose(conv1d(x, params.local_v_w, params.local_v_b, padding=1))
    xt = transpose(x)
    gq = add(matmul(xt, params.global_q_w), params.global_q_b)
    gk = add(matmul(xt, params.global_k_w), params.global_k_b)
    gv = add(matmul(xt, params.global_v_w), params.global_v_b)

    length = x.shape[1]

    def split_heads(m):
        # (L, heads*head_dim) -> (heads, L, head_dim)
        return permute(reshape(m, (length, cfg.heads, cfg.head_dim)),
                       (1, 0, 2))

    global_ctx = global_attention(split_heads(gq), split_heads(gk),
                                  split_heads(gv))
    global_flat = reshape(permute(global_ctx, (1, 0, 2)),
                          (length, cfg.model_dim))

    local_ctxs = [local_attention(cq, ck, cv, cfg.window)
                  for cq, ck, cv in zip(_heads(lq, cfg.heads, cfg.head_dim),
                                        _heads(lk, cfg.heads, cfg.head_dim),
                                        _heads(lv, cfg.heads, cfg.head_dim))]
    local_flat = concat(local_ctxs, axis=1)

    mixed = add(mul(global_flat, g), mul(local_flat, l))
    projected = add(matmul(mixed, params.out_w), params.out_b)
    return add(x, transpose(projected))
