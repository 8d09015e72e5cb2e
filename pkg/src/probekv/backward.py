"""Hand-written reverse-mode pass through the full decoder stack.

One engine serves two losses: next-token cross-entropy enters through
`dlogits`, the attention-map alignment loss enters through `dprobs`
(per-layer, per-head gradients w.r.t. the post-softmax attention rows).
Both may be given at once. Gradients come back for every parameter; callers
harvest the slices they train. Correctness is pinned by central
finite-difference checks in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import ForwardTrace
from .kernels import (
    apply_rope_inverse,
    rms_norm_rows_backward,
    rope_tables,
    silu,
    silu_backward,
)
from .model import Weights


@dataclass
class LayerGrads:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_gate: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray
    g_attn: np.ndarray
    g_mlp: np.ndarray


@dataclass
class ParamGrads:
    embedding: np.ndarray  # (vocab_size + n_soft, d_model)
    layers: list[LayerGrads]
    g_final: np.ndarray

    def named_tensors(self):
        yield "embedding", self.embedding
        for i, lg in enumerate(self.layers):
            for nm in ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down", "g_attn", "g_mlp"):
                yield f"layers.{i}.{nm}", getattr(lg, nm)
        yield "g_final", self.g_final


def backward_pass(
    weights: Weights,
    trace: ForwardTrace,
    dlogits: np.ndarray | None = None,
    dprobs: np.ndarray | None = None,
) -> ParamGrads:
    cfg = weights.config
    dtype = trace.dtype
    ids = trace.ids
    T = len(ids)
    H, G, hd = cfg.n_heads, cfg.n_kv_heads, cfg.head_dim
    gs = cfg.group_size
    head_to_group = np.repeat(np.arange(G), gs)
    scale = np.asarray(1.0 / np.sqrt(hd), dtype=dtype)
    cos, sin = rope_tables(trace.positions, hd, cfg.rope_theta, dtype)

    d_emb = np.zeros((cfg.full_vocab, cfg.d_model), dtype=dtype)
    d_layers = []
    d_g_final = np.zeros_like(weights.g_final, dtype=dtype)

    dx = np.zeros((T, cfg.d_model), dtype=dtype)
    if dlogits is not None:
        emb_vocab = weights.embedding[: cfg.vocab_size].astype(dtype, copy=False)
        df = dlogits @ emb_vocab
        d_emb[: cfg.vocab_size] += dlogits.T @ trace.f
        dxf, dgf = rms_norm_rows_backward(
            df, trace.x_last, trace.invf, weights.g_final.astype(dtype, copy=False)
        )
        dx += dxf
        d_g_final += dgf

    for li in range(cfg.n_layers - 1, -1, -1):
        lw = weights.layers[li]
        tr = trace.layers[li]

        # MLP block: x_out = x_mid + (silu(gate) * up) @ w_down
        w_down = lw.w_down.astype(dtype, copy=False)
        w_gate = lw.w_gate.astype(dtype, copy=False)
        w_up = lw.w_up.astype(dtype, copy=False)
        act = silu(tr.gate) * tr.up
        dact = dx @ w_down.T
        d_w_down = act.T @ dx
        dgate = dact * tr.up * silu_backward(tr.gate)
        dup = dact * silu(tr.gate)
        d_w_gate = tr.b.T @ dgate
        d_w_up = tr.b.T @ dup
        db = dgate @ w_gate.T + dup @ w_up.T
        dxb, d_g_mlp = rms_norm_rows_backward(
            db, tr.x_mid, tr.inv2, lw.g_mlp.astype(dtype, copy=False)
        )
        dx = dx + dxb  # residual passthrough + norm branch

        # Attention block: x_mid = x_in + concat(o) @ wo
        wo = lw.wo.astype(dtype, copy=False)
        do_flat = dx @ wo.T
        d_wo = tr.o.reshape(T, H * hd).T @ dx
        do = do_flat.reshape(T, H, hd)

        v_rep = tr.v[:, head_to_group]
        k_rep = tr.k_rot[:, head_to_group]
        dP = np.einsum("qhd,khd->hqk", do, v_rep)
        if dprobs is not None:
            dP = dP + dprobs[li]
        dv_rep = np.einsum("hqk,qhd->khd", tr.probs, do)
        dv = dv_rep.reshape(T, G, gs, hd).sum(axis=2)

        # softmax backward; masked cells have prob 0, so their dS vanishes
        row_dot = np.einsum("hqk,hqk->hq", dP, tr.probs)
        dS = tr.probs * (dP - row_dot[:, :, None])
        dq_rot = np.einsum("hqk,khd->qhd", dS, k_rep) * scale
        dk_rep = np.einsum("hqk,qhd->khd", dS, tr.q_rot) * scale
        dk_rot = dk_rep.reshape(T, G, gs, hd).sum(axis=2)

        dq = apply_rope_inverse(dq_rot, cos, sin).reshape(T, H * hd)
        dk = apply_rope_inverse(dk_rot, cos, sin).reshape(T, G * hd)
        dv_flat = dv.reshape(T, G * hd)

        wq = lw.wq.astype(dtype, copy=False)
        wk = lw.wk.astype(dtype, copy=False)
        wv = lw.wv.astype(dtype, copy=False)
        da = dq @ wq.T + dk @ wk.T + dv_flat @ wv.T
        d_wq = tr.a.T @ dq
        d_wk = tr.a.T @ dk
        d_wv = tr.a.T @ dv_flat
        dxa, d_g_attn = rms_norm_rows_backward(
            da, tr.x_in, tr.inv1, lw.g_attn.astype(dtype, copy=False)
        )
        dx = dx + dxa

        d_layers.append(
            LayerGrads(
                wq=d_wq, wk=d_wk, wv=d_wv, wo=d_wo,
                w_gate=d_w_gate, w_up=d_w_up, w_down=d_w_down,
                g_attn=d_g_attn, g_mlp=d_g_mlp,
            )
        )

    np.add.at(d_emb, ids, dx)
    d_layers.reverse()
    return ParamGrads(embedding=d_emb, layers=d_layers, g_final=d_g_final)
