"""Byte-level tokenizer: ids 0..255 are raw bytes, then BOS and EOS.

Ids below 258 are reserved; anything above belongs to the model's extended
vocabulary (synthetic task symbols, probe tokens) and has no byte rendering.
"""

from __future__ import annotations

import numpy as np

from .sequences import TokenSequence, prompt_sequence

BOS_ID = 256
EOS_ID = 257
N_RESERVED = 258


def byte_tokenize(text: bytes | str, vocab_size: int = 512) -> TokenSequence:
    """Encode a byte string as [BOS, b0, b1, ...]; empty input is [BOS]."""
    if vocab_size < N_RESERVED:
        raise ValueError("vocab_size must be >= 258 to cover bytes plus specials")
    if isinstance(text, str):
        text = text.encode("utf-8")
    ids = np.concatenate(
        [np.array([BOS_ID], dtype=np.int64), np.frombuffer(text, dtype=np.uint8).astype(np.int64)]
    )
    return prompt_sequence(ids)


def byte_detokenize(ids, vocab_size: int = 512) -> bytes:
    """Decode token ids back to bytes; specials and non-byte ids are skipped."""
    ids = np.asarray(ids, dtype=np.int64)
    if (ids < 0).any() or (ids >= vocab_size).any():
        raise ValueError("token id out of range for vocabulary")
    return bytes(int(i) for i in ids if i < 256)
