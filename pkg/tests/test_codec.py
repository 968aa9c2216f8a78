import base64
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridfl import codec
from hybridfl.errors import SerializationError
from oracles import float32_bytes_reference, sha256_reference, sign_bytes_reference

EMPTY_SHA256 = "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"


def test_pack_signs_all_positive():
    assert codec.pack_signs(np.ones(8)).tolist() == [1] * 8


def test_pack_signs_zero_maps_to_one():
    bits = codec.pack_signs(np.array([-1.0, 0.0, 2.0, -0.5]))
    assert bits.tolist() == [0, 1, 1, 0]


def test_pack_unpack_repack_idempotent():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        v = rng.normal(size=rng.integers(1, 200))
        v[rng.random(v.size) < 0.1] = 0.0
        bits = codec.pack_signs(v)
        assert np.array_equal(codec.pack_signs(codec.unpack_signs(bits)), bits)


def test_base64_length_formula_at_paper_scale():
    dim = 300_000_000
    assert math.ceil(dim / 8) == 37_500_000
    assert codec.base64_chars(dim) == 50_000_000
    # hex baseline for the same bytes
    assert codec.hex_chars_for_bytes(37_500_000) == 75_000_000


def test_base64_24_bits_no_padding():
    text = codec.encode_base64(np.ones(24, dtype=np.uint8))
    assert len(text) == 4 and "=" not in text
    assert text == "////"


def test_base64_matches_reference_packing():
    rng = np.random.default_rng(1)
    v = rng.normal(size=37)
    expected = base64.b64encode(sign_bytes_reference(v)).decode()
    assert codec.encode_base64(codec.pack_signs(v)) == expected


def test_base64_round_trip_1000_random():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        n = int(rng.integers(0, 500))
        bits = rng.integers(0, 2, n).astype(np.uint8)
        text = codec.encode_base64(bits)
        assert len(text) == codec.base64_chars(n)
        assert np.array_equal(codec.decode_base64(text, n), bits)


@settings(max_examples=200)
@given(st.integers(1, 100_000).map(lambda k: 24 * k))
def test_compression_ratio_one_char_per_six_bits(dim):
    assert codec.base64_chars(dim) == dim // 6


def test_decode_rejects_garbage():
    with pytest.raises(SerializationError):
        codec.decode_base64("ab!d", 24)
    with pytest.raises(SerializationError):
        codec.decode_base64("////", 16)  # three bytes for a two-byte dim


def test_decode_rejects_nonzero_padding_bits():
    bits = np.ones(10, dtype=np.uint8)
    raw = bytearray(codec.bits_to_bytes(bits))
    raw[-1] |= 0x01
    with pytest.raises(SerializationError):
        codec.decode_base64(base64.b64encode(bytes(raw)).decode(), 10)


def test_float32_width_and_constant():
    assert len(codec.serialize_float32(np.zeros(17))) == 68
    assert codec.serialize_float32([1.0]) == bytes([0x00, 0x00, 0x80, 0x3F])


def test_float32_matches_struct_reference():
    rng = np.random.default_rng(3)
    v = rng.normal(scale=10, size=300)
    assert codec.serialize_float32(v) == float32_bytes_reference(v)


def test_float32_round_trip_within_quantization():
    rng = np.random.default_rng(4)
    v = rng.normal(scale=5, size=5000) * 10.0 ** rng.integers(-6, 6, 5000)
    back = codec.deserialize_float32(codec.serialize_float32(v))
    rel = np.abs(back - v) / np.abs(v)
    assert np.max(rel) <= 2.0 ** -23
    np.testing.assert_array_equal(back, codec.quantize(v))


def test_float32_rejects_nonfinite():
    with pytest.raises(SerializationError):
        codec.serialize_float32([1.0, np.nan])
    with pytest.raises(SerializationError):
        codec.hash_params(np.array([np.inf]), codec.FLOAT32)


def test_chunk_counts():
    assert codec.chunk_count(50_000_000, 13_300) == 3760
    assert codec.chunk("abc", 10) == ["abc"]
    assert codec.chunk("", 5) == []
    with pytest.raises(ValueError):
        codec.chunk("abc", 0)


@settings(max_examples=300)
@given(st.text(alphabet="abcdef0123456789", max_size=400), st.integers(1, 450))
def test_chunk_reassembly_identity(payload, max_chars):
    pieces = codec.chunk(payload, max_chars)
    assert "".join(pieces) == payload
    assert all(1 <= len(p) <= max_chars for p in pieces)


def test_hash_empty_input_is_published_constant():
    assert codec.sha256_hex(b"") == EMPTY_SHA256
    assert codec.hash_params(np.zeros(0), codec.FLOAT32) == EMPTY_SHA256
    assert sha256_reference(b"") == EMPTY_SHA256


def test_hash_deterministic_and_sensitive_to_one_sign_flip():
    rng = np.random.default_rng(5)
    v = rng.normal(size=1000)
    d1 = codec.hash_params(v, codec.SIGN_BITS)
    assert d1 == codec.hash_params(v.copy(), codec.SIGN_BITS)
    assert d1 == sha256_reference(sign_bytes_reference(v))
    flipped = v.copy()
    flipped[123] = -flipped[123]
    d2 = codec.hash_params(flipped, codec.SIGN_BITS)
    assert d2 != d1
    assert d2 == sha256_reference(sign_bytes_reference(flipped))


def test_float32_digest_matches_reference():
    v = np.random.default_rng(6).normal(size=50)
    assert codec.hash_params(v, codec.FLOAT32) == sha256_reference(float32_bytes_reference(v))
    assert codec.is_digest(codec.hash_params(v, codec.FLOAT32))


@pytest.mark.parametrize("kind", codec.PAYLOAD_KINDS)
@pytest.mark.parametrize("max_chars", [1, 7, 64, 13_300])
def test_hash_independent_of_chunking(kind, max_chars):
    v = np.random.default_rng(7).normal(size=301)
    batches = codec.make_batches("A", 0, v, kind, max_chars)
    text = codec.reassemble(batches)
    assert codec.sha256_hex(codec.text_to_bytes(text, kind, v.size)) == codec.hash_params(v, kind)


@pytest.mark.parametrize("kind", codec.PAYLOAD_KINDS)
def test_decode_payload_round_trip(kind):
    v = np.random.default_rng(8).normal(size=99)
    v[5] = 0.0
    out = codec.decode_payload(codec.encode_payload(v, kind), kind, v.size)
    if kind == codec.FLOAT32:
        np.testing.assert_array_equal(out, codec.quantize(v))
    else:
        np.testing.assert_array_equal(out, np.where(v >= 0, 1.0, -1.0))


def test_payload_char_arithmetic():
    assert codec.payload_chars(10, codec.FLOAT32) == 80
    assert codec.payload_chars(25, codec.SIGN_BITS) == 8


def test_materialized_three_million_case():
    dim = 3_000_000
    bits = np.random.default_rng(9).integers(0, 2, dim).astype(np.uint8)
    text = codec.encode_base64(bits)
    assert len(text) == dim // 6 == 500_000
    assert np.array_equal(codec.decode_base64(text, dim), bits)


def test_reassemble_requires_dense_indices():
    batches = codec.make_batches("A", 0, np.ones(40), codec.FLOAT32, 100)
    with pytest.raises(SerializationError):
        codec.reassemble(batches[1:])
