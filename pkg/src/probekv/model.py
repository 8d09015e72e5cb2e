"""Weight containers and deterministic initialization.

The embedding table has vocab_size + n_soft rows; the trailing rows are the
trainable probe bank. The output head is tied to the first vocab_size
embedding rows, so probe ids can never be emitted.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .tokenizer import BOS_ID


@dataclass
class LayerWeights:
    wq: np.ndarray  # (d_model, n_heads*head_dim)
    wk: np.ndarray  # (d_model, n_kv_heads*head_dim)
    wv: np.ndarray  # (d_model, n_kv_heads*head_dim)
    wo: np.ndarray  # (n_heads*head_dim, d_model)
    w_gate: np.ndarray  # (d_model, mlp_hidden)
    w_up: np.ndarray  # (d_model, mlp_hidden)
    w_down: np.ndarray  # (mlp_hidden, d_model)
    g_attn: np.ndarray  # (d_model,)
    g_mlp: np.ndarray  # (d_model,)


@dataclass
class Weights:
    config: ModelConfig
    embedding: np.ndarray  # (vocab_size + n_soft, d_model) float32
    layers: list[LayerWeights] = field(default_factory=list)
    g_final: np.ndarray = None

    @property
    def soft_bank(self) -> np.ndarray:
        """View of the trainable probe rows (n_soft, d_model)."""
        return self.embedding[self.config.vocab_size :]

    def named_tensors(self):
        """Canonical (name, array) pairs; order is the checkpoint order."""
        yield "embedding", self.embedding
        for i, lw in enumerate(self.layers):
            for nm in ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down", "g_attn", "g_mlp"):
                yield f"layers.{i}.{nm}", getattr(lw, nm)
        yield "g_final", self.g_final


def init_model(config: ModelConfig, seed: int, soft_copy_id: int = BOS_ID) -> Weights:
    """Deterministic scaled-uniform init.

    Embedding rows are U(-a, a) with a = sqrt(3/d_model) so the expected row
    norm is 1; projection matrices use U(+-sqrt(6/(fan_in+fan_out))). Probe
    rows copy the embedding of `soft_copy_id` plus N(0, 0.02^2) noise.
    """
    config.validate()
    if not 0 <= soft_copy_id < config.vocab_size:
        raise ValueError("soft_copy_id must be a real vocabulary id")
    rng = np.random.Generator(np.random.PCG64(seed))
    d = config.d_model

    def uniform(shape, fan_in, fan_out):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-a, a, size=shape).astype(np.float32)

    emb_a = np.sqrt(3.0 / d)
    embedding = rng.uniform(-emb_a, emb_a, size=(config.full_vocab, d)).astype(np.float32)

    layers = []
    kv_dim = config.n_kv_heads * config.head_dim
    for _ in range(config.n_layers):
        layers.append(
            LayerWeights(
                wq=uniform((d, d), d, d),
                wk=uniform((d, kv_dim), d, kv_dim),
                wv=uniform((d, kv_dim), d, kv_dim),
                wo=uniform((d, d), d, d),
                w_gate=uniform((d, config.mlp_hidden), d, config.mlp_hidden),
                w_up=uniform((d, config.mlp_hidden), d, config.mlp_hidden),
                w_down=uniform((config.mlp_hidden, d), config.mlp_hidden, d),
                g_attn=np.ones(d, dtype=np.float32),
                g_mlp=np.ones(d, dtype=np.float32),
            )
        )
    w = Weights(config=config, embedding=embedding, layers=layers, g_final=np.ones(d, dtype=np.float32))
    reset_soft_bank(w, soft_copy_id, sigma=0.02, seed=seed)
    return w


def reset_soft_bank(weights: Weights, token_id: int, sigma: float, seed: int):
    """Re-initialize probe rows from a regular token's embedding plus noise."""
    cfg = weights.config
    if not 0 <= token_id < cfg.vocab_size:
        raise ValueError("token_id must be a real vocabulary id")
    rng = np.random.Generator(np.random.PCG64([seed, 0x50F7]))
    base = weights.embedding[token_id]
    noise = rng.normal(0.0, sigma, size=(cfg.n_soft, cfg.d_model)).astype(np.float32)
    weights.embedding[cfg.vocab_size :] = base[None, :] + noise


def checksum_base(weights: Weights) -> str:
    """SHA-256 over every tensor except the probe rows of the embedding."""
    h = hashlib.sha256()
    for name, arr in weights.named_tensors():
        if name == "embedding":
            arr = arr[: weights.config.vocab_size]
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def clone_weights(weights: Weights) -> Weights:
    layers = [
        LayerWeights(**{k: getattr(lw, k).copy() for k in (
            "wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down", "g_attn", "g_mlp")})
        for lw in weights.layers
    ]
    return Weights(
        config=weights.config,
        embedding=weights.embedding.copy(),
        layers=layers,
        g_final=weights.g_final.copy(),
    )
