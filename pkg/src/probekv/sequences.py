"""Token sequences with per-token role tags (prompt / soft probe / response)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ROLE_PROMPT = 0
ROLE_SOFT = 1
ROLE_RESPONSE = 2


@dataclass
class TokenSequence:
    """Token ids plus role tags.

    Roles appear in contiguous blocks, a prompt block optionally followed by
    either a soft-probe block or a response block (never both).
    """

    ids: np.ndarray
    roles: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.roles = np.asarray(self.roles, dtype=np.uint8)
        if self.ids.shape != self.roles.shape or self.ids.ndim != 1:
            raise ValueError("ids and roles must be 1-D arrays of equal length")
        self._check_blocks()

    def _check_blocks(self):
        r = self.roles
        if len(r) == 0:
            raise ValueError("empty sequence")
        changes = np.flatnonzero(np.diff(r.astype(np.int16)) != 0)
        blocks = [r[0]] + [r[i + 1] for i in changes]
        allowed = (
            [ROLE_PROMPT],
            [ROLE_PROMPT, ROLE_SOFT],
            [ROLE_PROMPT, ROLE_RESPONSE],
        )
        if blocks not in [list(a) for a in allowed]:
            raise ValueError("roles must be prompt followed by soft or response")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def prompt_len(self) -> int:
        return int((self.roles == ROLE_PROMPT).sum())

    @property
    def soft_len(self) -> int:
        return int((self.roles == ROLE_SOFT).sum())

    @property
    def response_len(self) -> int:
        return int((self.roles == ROLE_RESPONSE).sum())


def prompt_sequence(ids) -> TokenSequence:
    ids = np.asarray(ids, dtype=np.int64)
    return TokenSequence(ids, np.full(ids.shape, ROLE_PROMPT, dtype=np.uint8))


def with_soft_block(prompt_ids, vocab_size: int, n_soft: int) -> TokenSequence:
    """Prompt followed by the n probe tokens (ids vocab_size..vocab_size+n)."""
    prompt_ids = np.asarray(prompt_ids, dtype=np.int64)
    soft_ids = np.arange(vocab_size, vocab_size + n_soft, dtype=np.int64)
    ids = np.concatenate([prompt_ids, soft_ids])
    roles = np.concatenate(
        [
            np.full(len(prompt_ids), ROLE_PROMPT, dtype=np.uint8),
            np.full(n_soft, ROLE_SOFT, dtype=np.uint8),
        ]
    )
    return TokenSequence(ids, roles)


def with_response(prompt_ids, response_ids) -> TokenSequence:
    prompt_ids = np.asarray(prompt_ids, dtype=np.int64)
    response_ids = np.asarray(response_ids, dtype=np.int64)
    if len(response_ids) == 0:
        raise ValueError("response block must be non-empty")
    ids = np.concatenate([prompt_ids, response_ids])
    roles = np.concatenate(
        [
            np.full(len(prompt_ids), ROLE_PROMPT, dtype=np.uint8),
            np.full(len(response_ids), ROLE_RESPONSE, dtype=np.uint8),
        ]
    )
    return TokenSequence(ids, roles)
