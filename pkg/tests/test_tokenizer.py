import numpy as np
import pytest

from probekv.tokenizer import BOS_ID, byte_detokenize, byte_tokenize


def test_round_trip_simple():
    seq = byte_tokenize(b"hello probe")
    assert seq.ids[0] == BOS_ID
    assert byte_detokenize(seq.ids) == b"hello probe"


def test_empty_string_is_bos_only():
    seq = byte_tokenize(b"")
    assert seq.ids.tolist() == [BOS_ID]
    assert byte_detokenize(seq.ids) == b""


def test_round_trip_fuzz_1000():
    rng = np.random.Generator(np.random.PCG64(123))
    for _ in range(1000):
        n = int(rng.integers(0, 64))
        data = bytes(rng.integers(0, 256, size=n, dtype=np.uint8))
        assert byte_detokenize(byte_tokenize(data).ids) == data


def test_out_of_range_id_raises():
    with pytest.raises(ValueError):
        byte_detokenize(np.array([5, 600]), vocab_size=512)


def test_small_vocab_rejected():
    with pytest.raises(ValueError):
        byte_tokenize(b"x", vocab_size=100)
