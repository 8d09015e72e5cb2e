"""Forward pass: prefill with attention capture, cached single-step decode.

Architecture: pre-RMSNorm, rotary positions, grouped KV heads, gated MLP,
tied embedding/output head over the real vocabulary only. One sequence at a
time; no batch dimension.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kernels import (
    apply_rope,
    rms_norm_rows,
    rope_tables,
    silu,
    softmax_rows,
)
from .model import Weights
from .sequences import TokenSequence

RMS_EPS = 1e-5


@dataclass
class KVCache:
    """Per-(layer, kv_head) keys and values with surviving absolute positions.

    Keys are stored rotary-encoded at their original positions and are never
    re-encoded; eviction only removes rows. `next_position` is the absolute
    position the next decoded token will occupy.
    """

    n_layers: int
    n_kv_heads: int
    head_dim: int
    keys: list  # [layer][kv_head] -> (t, head_dim) float32
    values: list
    positions: list  # [layer][kv_head] -> (t,) int64
    next_position: int

    def max_position(self) -> int:
        m = -1
        for layer in self.positions:
            for pos in layer:
                if len(pos):
                    m = max(m, int(pos[-1]))
        return m

    def rows_per_head(self) -> np.ndarray:
        return np.array(
            [[len(p) for p in layer] for layer in self.positions], dtype=np.int64
        )

    def clone(self) -> "KVCache":
        return KVCache(
            n_layers=self.n_layers,
            n_kv_heads=self.n_kv_heads,
            head_dim=self.head_dim,
            keys=[[k.copy() for k in layer] for layer in self.keys],
            values=[[v.copy() for v in layer] for layer in self.values],
            positions=[[p.copy() for p in layer] for layer in self.positions],
            next_position=self.next_position,
        )


@dataclass
class AttentionRecord:
    """Post-softmax attention from prefill: (n_layers, n_heads, T, T) float32.

    Rows/columns are ordered by absolute position; rows are causal and sum
    to one. `roles` mirrors the input sequence's role tags.
    """

    probs: np.ndarray
    positions: np.ndarray
    roles: np.ndarray

    @property
    def n_layers(self) -> int:
        return self.probs.shape[0]

    @property
    def n_heads(self) -> int:
        return self.probs.shape[1]


@dataclass
class LayerTrace:
    x_in: np.ndarray
    inv1: np.ndarray
    a: np.ndarray
    q_rot: np.ndarray
    k_rot: np.ndarray
    v: np.ndarray
    probs: np.ndarray  # (H, T, T)
    o: np.ndarray  # (T, H, head_dim)
    x_mid: np.ndarray
    inv2: np.ndarray
    b: np.ndarray
    gate: np.ndarray
    up: np.ndarray


@dataclass
class ForwardTrace:
    """Every intermediate needed by the hand-written backward pass."""

    ids: np.ndarray
    positions: np.ndarray
    dtype: object
    layers: list[LayerTrace] = field(default_factory=list)
    x_last: np.ndarray = None
    invf: np.ndarray = None
    f: np.ndarray = None
    logits: np.ndarray = None


@dataclass
class PrefillResult:
    cache: KVCache | None
    record: AttentionRecord | None
    logits: np.ndarray  # (T, vocab_size), forward dtype

    @property
    def last_logits(self) -> np.ndarray:
        return self.logits[-1]


def _validate_ids(weights: Weights, ids: np.ndarray):
    if (ids < 0).any() or (ids >= weights.config.full_vocab).any():
        raise ValueError("unknown token id")


def forward_trace(
    weights: Weights, ids, positions=None, dtype=np.float32
) -> ForwardTrace:
    """Full forward keeping all intermediates. Used for training passes."""
    _, _, _, trace = _forward(
        weights, ids, positions, dtype, want_cache=False, keep_trace=True
    )
    return trace


def prefill(
    weights: Weights,
    seq: TokenSequence,
    capture_attn: bool = False,
    dtype=np.float32,
) -> PrefillResult:
    """Process a whole sequence, populating the cache.

    Returns per-position logits over the real vocabulary; the last row is
    the next-token distribution. With `capture_attn` the full causal
    attention of every layer/head is recorded.
    """
    cfg = weights.config
    if len(seq) > cfg.max_seq:
        raise ValueError("sequence exceeds max_seq")
    logits, cache, record_probs, _ = _forward(
        weights, seq.ids, None, dtype, want_cache=True, keep_trace=False,
        capture_attn=capture_attn,
    )
    record = None
    if capture_attn:
        record = AttentionRecord(
            probs=record_probs,
            positions=np.arange(len(seq), dtype=np.int64),
            roles=seq.roles.copy(),
        )
    return PrefillResult(cache=cache, record=record, logits=logits)


def _forward(
    weights: Weights,
    ids,
    positions,
    dtype,
    want_cache: bool,
    keep_trace: bool,
    capture_attn: bool = False,
):
    cfg = weights.config
    ids = np.asarray(ids, dtype=np.int64)
    _validate_ids(weights, ids)
    T = len(ids)
    if positions is None:
        positions = np.arange(T, dtype=np.int64)
    H, G, hd = cfg.n_heads, cfg.n_kv_heads, cfg.head_dim
    head_to_group = np.repeat(np.arange(G), cfg.group_size)
    scale = np.asarray(1.0 / np.sqrt(hd), dtype=dtype)
    causal = np.tril(np.ones((T, T), dtype=bool))
    cos, sin = rope_tables(positions, hd, cfg.rope_theta, dtype)

    x = weights.embedding.astype(dtype, copy=False)[ids]
    trace = ForwardTrace(ids=ids, positions=positions, dtype=dtype) if keep_trace else None
    cache = None
    if want_cache:
        cache = KVCache(
            n_layers=cfg.n_layers,
            n_kv_heads=G,
            head_dim=hd,
            keys=[],
            values=[],
            positions=[],
            next_position=T,
        )
    record_probs = (
        np.empty((cfg.n_layers, H, T, T), dtype=np.float32) if capture_attn else None
    )

    for li, lw in enumerate(weights.layers):
        a, inv1 = rms_norm_rows(x, lw.g_attn.astype(dtype, copy=False), RMS_EPS)
        q = (a @ lw.wq.astype(dtype, copy=False)).reshape(T, H, hd)
        k = (a @ lw.wk.astype(dtype, copy=False)).reshape(T, G, hd)
        v = (a @ lw.wv.astype(dtype, copy=False)).reshape(T, G, hd)
        q_rot = apply_rope(q, cos, sin)
        k_rot = apply_rope(k, cos, sin)

        k_rep = k_rot[:, head_to_group]
        v_rep = v[:, head_to_group]
        scores = np.einsum("qhd,khd->hqk", q_rot, k_rep) * scale
        probs = softmax_rows(scores, causal[None, :, :])
        o = np.einsum("hqk,khd->qhd", probs, v_rep)
        attn_out = o.reshape(T, H * hd) @ lw.wo.astype(dtype, copy=False)
        x_mid = x + attn_out

        b, inv2 = rms_norm_rows(x_mid, lw.g_mlp.astype(dtype, copy=False), RMS_EPS)
        gate = b @ lw.w_gate.astype(dtype, copy=False)
        up = b @ lw.w_up.astype(dtype, copy=False)
        act = silu(gate) * up
        x_out = x_mid + act @ lw.w_down.astype(dtype, copy=False)

        if want_cache:
            cache.keys.append([k_rot[:, g].astype(np.float32) for g in range(G)])
            cache.values.append([v[:, g].astype(np.float32) for g in range(G)])
            cache.positions.append([positions.copy() for _ in range(G)])
        if capture_attn:
            record_probs[li] = probs.astype(np.float32)
        if keep_trace:
            trace.layers.append(
                LayerTrace(
                    x_in=x, inv1=inv1, a=a, q_rot=q_rot, k_rot=k_rot, v=v,
                    probs=probs, o=o, x_mid=x_mid, inv2=inv2, b=b, gate=gate, up=up,
                )
            )
        x = x_out

    f, invf = rms_norm_rows(x, weights.g_final.astype(dtype, copy=False), RMS_EPS)
    logits = f @ weights.embedding[: cfg.vocab_size].astype(dtype, copy=False).T
    if keep_trace:
        trace.x_last = x
        trace.invf = invf
        trace.f = f
        trace.logits = logits
    return logits, cache, record_probs, trace


def decode_step(
    weights: Weights, cache: KVCache, token: int, position: int
) -> tuple[np.ndarray, KVCache]:
    """Decode one token at an absolute position, appending its K/V.

    The new token attends over every surviving cache row plus itself.
    """
    cfg = weights.config
    if position <= cache.max_position():
        raise ValueError("decode position conflicts with cached positions")
    if position >= cfg.max_seq:
        raise ValueError("sequence exceeds max_seq")
    if not 0 <= token < cfg.full_vocab:
        raise ValueError("unknown token id")
    H, G, hd = cfg.n_heads, cfg.n_kv_heads, cfg.head_dim
    dtype = np.float32
    scale = np.asarray(1.0 / np.sqrt(hd), dtype=dtype)
    cos, sin = rope_tables(np.array([position]), hd, cfg.rope_theta, dtype)

    x = weights.embedding[token].astype(dtype).reshape(1, -1)
    for li, lw in enumerate(weights.layers):
        a, _ = rms_norm_rows(x, lw.g_attn, RMS_EPS)
        q = apply_rope((a @ lw.wq).reshape(1, H, hd), cos, sin)[0]
        k = apply_rope((a @ lw.wk).reshape(1, G, hd), cos, sin)[0]
        v = (a @ lw.wv).reshape(G, hd)

        o = np.empty((H, hd), dtype=dtype)
        for g in range(G):
            cache.keys[li][g] = np.concatenate([cache.keys[li][g], k[None, g]])
            cache.values[li][g] = np.concatenate([cache.values[li][g], v[None, g]])
            cache.positions[li][g] = np.concatenate(
                [cache.positions[li][g], np.array([position], dtype=np.int64)]
            )
        for h in range(H):
            g = h // cfg.group_size
            scores = (cache.keys[li][g] @ q[h]) * scale
            p = softmax_rows(scores[None, :], np.ones((1, len(scores)), dtype=bool))[0]
            o[h] = p @ cache.values[li][g]
        x = x + o.reshape(1, H * hd) @ lw.wo

        b, _ = rms_norm_rows(x, lw.g_mlp, RMS_EPS)
        x = x + (silu(b @ lw.w_gate) * (b @ lw.w_up)) @ lw.w_down

    f, _ = rms_norm_rows(x, weights.g_final, RMS_EPS)
    logits = (f @ weights.embedding[: cfg.vocab_size].T)[0]
    cache.next_position = position + 1
    return logits, cache


def greedy_generate(
    weights: Weights,
    cache: KVCache,
    start_logits: np.ndarray,
    max_new: int,
    stop_id: int | None = None,
) -> np.ndarray:
    """Argmax decoding from `start_logits`; ties break toward the lowest id.

    Emits up to `max_new` tokens, stopping after `stop_id` (which is
    included in the output).
    """
    if max_new < 1:
        raise ValueError("max_new must be >= 1")
    out = []
    logits = start_logits
    for _ in range(max_new):
        tok = int(np.argmax(logits))
        out.append(tok)
        if stop_id is not None and tok == stop_id:
            break
        if len(out) == max_new:
            break
        logits, cache = decode_step(weights, cache, tok, cache.next_position)
    return np.array(out, dtype=np.int64)
