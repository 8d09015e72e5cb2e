"""Binary checkpoint format shared by the engine and the trainer.

Layout: magic b"JQCK", little-endian u32 format version, u32 byte length of
a UTF-8 JSON metadata document, the document itself, then raw little-endian
float32 tensor payloads in manifest order. The metadata holds the model
config and a tensor manifest of (name, shape, byte offset into the payload
region). Round trips are bit-exact.

The trained probe rows are stored as their own tensor named "soft_bank";
"embedding" covers only the real vocabulary rows.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .config import ModelConfig
from .model import LayerWeights, Weights

MAGIC = b"JQCK"
VERSION = 1


def _tensor_entries(weights: Weights):
    v = weights.config.vocab_size
    yield "embedding", weights.embedding[:v]
    yield "soft_bank", weights.embedding[v:]
    for name, arr in weights.named_tensors():
        if name != "embedding":
            yield name, arr


def save_checkpoint(path, weights: Weights, extra_meta: dict | None = None):
    entries = list(_tensor_entries(weights))
    manifest = []
    offset = 0
    payloads = []
    for name, arr in entries:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        payloads.append(arr.tobytes())
        offset += len(payloads[-1])
    meta = {
        "config": weights.config.to_dict(),
        "tensors": manifest,
        "extra": extra_meta or {},
    }
    doc = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(doc)))
        fh.write(doc)
        for p in payloads:
            fh.write(p)


def load_checkpoint(path) -> tuple[Weights, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ValueError("not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (doc_len,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(doc_len).decode("utf-8"))
        payload = fh.read()

    config = ModelConfig.from_dict(meta["config"])
    tensors = {}
    for entry in meta["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=start)
        tensors[entry["name"]] = arr.reshape(shape).copy()

    embedding = np.concatenate([tensors["embedding"], tensors["soft_bank"]])
    layers = []
    for i in range(config.n_layers):
        layers.append(
            LayerWeights(
                **{
                    nm: tensors[f"layers.{i}.{nm}"]
                    for nm in ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down", "g_attn", "g_mlp")
                }
            )
        )
    weights = Weights(
        config=config, embedding=embedding, layers=layers, g_final=tensors["g_final"]
    )
    return weights, meta.get("extra", {})
