"""Hyperformer block: rotary hyper-attention with log-bucketed relative-position bias,
outer-product-mean pair update at block start, query conditioning (encoder only),
column attention over MSA rows, and transitions.

Row layout convention: sequence activations are ``R x L x c_s`` where the first
``n_ctx`` rows are context rows (row 0 is the query) and the rest are target
rows. Context rows never see target rows: column attention lets a context row
attend to context rows only and a target row to context rows plus itself, and
the outer-product mean averages over context rows. Target rows are therefore
conditionally independent given the context.
"""
from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from . import tensor as T
from .nn import ParamBuilder, Scope, linear, norm
from .tensor import Tensor

_MASKED = -1e9


# -- relative positions -----------------------------------------------------
def relpos_bucket(i: int, j: int, num_buckets: int = 32, max_distance: int = 128) -> int:
    """Signed log-bucket of the offset ``i - j``.

    Half the buckets serve ``i >= j`` (ids ``0 .. nb/2-1``), half ``i < j``
    (ids ``nb/2 .. nb-1``). Offsets below ``nb/4`` get their own bucket; larger
    ones are log-spaced up to ``max_distance`` and clamped beyond it.
    """
    if num_buckets % 2 or num_buckets < 4:
        raise ValueError("num_buckets must be even and >= 4")
    if max_distance < num_buckets:
        raise ValueError("max_distance must be >= num_buckets")
    n = i - j
    half = num_buckets // 2
    ret = half if n < 0 else 0
    n = abs(n)
    exact = half // 2
    if n < exact:
        return ret + n
    large = exact + int(math.log(n / exact) / math.log(max_distance / exact) * (half - exact))
    return ret + min(large, half - 1)


@lru_cache(maxsize=64)
def relpos_bucket_matrix(length: int, num_buckets: int = 32, max_distance: int = 128) -> np.ndarray:
    if num_buckets % 2 or num_buckets < 4:
        raise ValueError("num_buckets must be even and >= 4")
    if max_distance < num_buckets:
        raise ValueError("max_distance must be >= num_buckets")
    pos = np.arange(length)
    n = pos[:, None] - pos[None, :]
    half = num_buckets // 2
    ret = np.where(n < 0, half, 0)
    n = np.abs(n)
    exact = half // 2
    with np.errstate(divide="ignore"):
        scaled = np.log(np.maximum(n, 1) / exact) / math.log(max_distance / exact) * (half - exact)
    large = np.minimum(exact + scaled.astype(np.int64), half - 1)
    out = ret + np.where(n < exact, n, large)
    out.setflags(write=False)
    return out


# -- rotary embedding ---------------------------------------------------------
def rope_angles(positions, dim: int, base: float = 10000.0) -> np.ndarray:
    if dim % 2:
        raise ValueError("rotary embedding needs an even dimension")
    inv_freq = base ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    return np.asarray(positions, dtype=np.float64)[..., None] * inv_freq


def rope_apply(v, position: int, base: float = 10000.0) -> np.ndarray:
    """Rotate consecutive pairs ``(v[2t], v[2t+1])`` by ``position * base**(-2t/dim)``."""
    v = np.asarray(v, dtype=np.float64)
    ang = rope_angles(position, v.shape[-1], base)
    c, s = np.cos(ang), np.sin(ang)
    ve, vo = v[..., 0::2], v[..., 1::2]
    out = np.empty_like(v)
    out[..., 0::2] = ve * c - vo * s
    out[..., 1::2] = ve * s + vo * c
    return out


def rope(x: Tensor, positions, base: float = 10000.0) -> Tensor:
    """Differentiable rotary embedding over the last axis of ``x`` (..., L, d)."""
    ang = rope_angles(positions, x.shape[-1], base)
    c = np.cos(ang).astype(x.dtype)
    s = np.sin(ang).astype(x.dtype)
    xe = x[..., 0::2]
    xo = x[..., 1::2]
    out = T.stack([xe * c - xo * s, xe * s + xo * c], axis=-1)
    return T.reshape(out, x.shape)


def hyper_attention(q: Tensor, k: Tensor, v: Tensor, bias=None, positions=None,
                    base: float = 10000.0, use_rope: bool = True) -> Tensor:
    """softmax_j((rope(q_i) . rope(k_j)) / sqrt(d) + b_ij) applied to v.

    ``q, k, v`` are (..., L, d); ``bias`` broadcasts against (..., L, L). With
    ``use_rope=False`` this is ordinary biased dot-product attention.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ValueError(f"shape mismatch: q{q.shape} k{k.shape} v{v.shape}")
    d = q.shape[-1]
    if use_rope:
        if positions is None:
            positions = np.arange(q.shape[-2])
        q = rope(q, positions, base)
        k = rope(k, positions, base)
    logits = (q @ T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(d))
    if bias is not None:
        logits = logits + bias
    return T.softmax(logits, axis=-1) @ v


# -- sublayers ----------------------------------------------------------------
def _heads(x: Tensor, heads: int) -> Tensor:
    # (..., L, H*d) -> (..., H, L, d)
    *lead, L, hd = x.shape
    x = T.reshape(x, (*lead, L, heads, hd // heads))
    nd = x.ndim
    return T.swapaxes(x, nd - 3, nd - 2)


def _merge(x: Tensor) -> Tensor:
    # (..., H, L, d) -> (..., L, H*d)
    nd = x.ndim
    x = T.swapaxes(x, nd - 3, nd - 2)
    *lead, L, H, d = x.shape
    return T.reshape(x, (*lead, L, H * d))


def row_attention(x: Tensor, pair: Tensor, P: Scope, cfg) -> Tensor:
    """Per-row hyper-attention over positions, biased by relpos buckets and the pair representation."""
    L = x.shape[1]
    H = cfg.heads
    buckets = relpos_bucket_matrix(L, cfg.num_buckets, cfg.max_distance)
    bias = T.gather(P["relpos"], buckets, axis=0)                  # L x L x H
    bias = bias + linear(norm(pair, P, "pair_ln"), P, "pair_bias")  # L x L x H
    bias = T.transpose(bias, (2, 0, 1))                              # H x L x L
    q = _heads(linear(x, P, "q"), H)
    k = _heads(linear(x, P, "k"), H)
    v = _heads(linear(x, P, "v"), H)
    out = hyper_attention(q, k, v, bias, np.arange(L), cfg.rope_base, cfg.use_rope)
    return linear(_merge(out), P, "out")


def column_attention(x: Tensor, n_ctx: int, P: Scope, cfg) -> Tensor:
    """Attention across MSA rows at each position; context rows see context only,
    target rows see the context plus themselves."""
    H = cfg.heads
    R = x.shape[0]
    xt = T.transpose(x, (1, 0, 2))                  # L x R x c
    q = _heads(linear(xt, P, "q"), H)               # L x H x R x d
    k = _heads(linear(xt, P, "k"), H)
    v = _heads(linear(xt, P, "v"), H)
    d = q.shape[-1]
    scale = 1.0 / math.sqrt(d)
    k_ctx = k[:, :, :n_ctx]
    v_ctx = v[:, :, :n_ctx]
    logits_ctx = (q @ T.swapaxes(k_ctx, -1, -2)) * scale         # L x H x R x C
    logits_self = T.sum_(q * k, axis=-1, keepdims=True) * scale  # L x H x R x 1
    self_mask = np.where(np.arange(R) < n_ctx, _MASKED, 0.0).astype(x.dtype)[:, None]
    w = T.softmax(T.concat([logits_ctx, logits_self + self_mask], axis=-1), axis=-1)
    out = w[..., :n_ctx] @ v_ctx + w[..., n_ctx:] * v
    out = T.transpose(_merge(out), (1, 0, 2))                    # R x L x H*d
    return linear(out, P, "out")


def outer_product_mean(x: Tensor, n_ctx: int, P: Scope) -> Tensor:
    """Pair update ``linear(mean_rows(a_i (x) b_j))`` over the context rows of ``x`` (R x L x c)."""
    xc = x[:n_ctx]
    a = linear(xc, P, "a")
    b = linear(xc, P, "b")
    C, L, o = a.shape
    A = T.reshape(a, (C, L * o))
    B = T.reshape(b, (C, L * o))
    m = (T.transpose(A, (1, 0)) @ B) * (1.0 / C)
    m = T.transpose(T.reshape(m, (L, o, L, o)), (0, 2, 1, 3))
    return linear(T.reshape(m, (L, L, o * o)), P, "out")


def query_conditioning(ctx_act: Tensor, query_act: Tensor, P: Scope, mode: str = "encoder") -> Tensor:
    """Gated additive mix: ``row + sigmoid(W_g [ln(row); ln(query)] + b_g) * (query W_m)``."""
    if mode != "encoder":
        raise ValueError("query conditioning exists only in encoder blocks")
    q = T.broadcast_to(query_act, ctx_act.shape)
    gate_in = T.concat([norm(ctx_act, P, "ln_row"), norm(q, P, "ln_query")], axis=-1)
    gate = T.sigmoid(linear(gate_in, P, "gate"))
    return ctx_act + gate * (query_act @ P["mix/w"])


def transition(x: Tensor, P: Scope) -> Tensor:
    return linear(T.gelu(linear(x, P, "w1")), P, "w2")


def hyperformer_block(seq: Tensor, pair: Tensor, P: Scope, cfg, mode: str, n_ctx: int | None = None):
    """One block. The pair is updated by the outer-product mean first; the sequence
    branch (query conditioning, row attention, column attention, transition) and the
    pair transition then both read that updated pair."""
    if seq.ndim != 3 or pair.ndim != 3 or pair.shape[:2] != (seq.shape[1], seq.shape[1]):
        raise ValueError(f"shape mismatch: seq {seq.shape}, pair {pair.shape}")
    if mode not in ("encoder", "decoder"):
        raise ValueError(f"unknown mode {mode!r}")
    if n_ctx is None:
        n_ctx = seq.shape[0]
    pair = pair + outer_product_mean(norm(seq, P, "opm/ln"), n_ctx, P.sub("opm"))
    if mode == "encoder":
        seq = query_conditioning(seq, seq[0:1], P.sub("qc"), mode)
    seq = seq + row_attention(norm(seq, P, "row/ln"), pair, P.sub("row"), cfg)
    seq = seq + column_attention(norm(seq, P, "col/ln"), n_ctx, P.sub("col"), cfg)
    seq = seq + transition(norm(seq, P, "st/ln"), P.sub("st"))
    pair = pair + transition(norm(pair, P, "pt/ln"), P.sub("pt"))
    return seq, pair


def init_block(b: ParamBuilder, prefix: str, cfg, mode: str) -> None:
    cs, cp, H, o = cfg.c_s, cfg.c_p, cfg.heads, cfg.opm_dim
    p = prefix + "/"
    b.norm(p + "opm/ln", cs)
    b.linear(p + "opm/a", cs, o)
    b.linear(p + "opm/b", cs, o)
    b.linear(p + "opm/out", o * o, cp, final=True)
    if mode == "encoder":
        b.norm(p + "qc/ln_row", cs)
        b.norm(p + "qc/ln_query", cs)
        b.linear(p + "qc/gate", 2 * cs, cs)
        b.linear(p + "qc/mix", cs, cs, bias=False, final=True)
    b.norm(p + "row/ln", cs)
    b.table(p + "row/relpos", (cfg.num_buckets, H), scale=0.1)
    b.norm(p + "row/pair_ln", cp)
    b.linear(p + "row/pair_bias", cp, H, bias=False)
    for name in ("q", "k", "v"):
        b.linear(p + "row/" + name, cs, cs, bias=False)
        b.linear(p + "col/" + name, cs, cs, bias=False)
    b.linear(p + "row/out", cs, cs, final=True)
    b.norm(p + "col/ln", cs)
    b.linear(p + "col/out", cs, cs, final=True)
    b.norm(p + "st/ln", cs)
    b.linear(p + "st/w1", cs, cfg.transition_factor * cs)
    b.linear(p + "st/w2", cfg.transition_factor * cs, cs, final=True)
    b.norm(p + "pt/ln", cp)
    b.linear(p + "pt/w1", cp, cfg.transition_factor * cp)
    b.linear(p + "pt/w2", cfg.transition_factor * cp, cp, final=True)
