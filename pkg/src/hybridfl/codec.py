"""Wire formats shared by agents, the private chain, the public contract and the log store.

Two payload kinds exist:

``float32``
    little-endian IEEE-754 float32 per parameter, flat index order, carried
    on the ledger as lowercase hex text (8 chars per parameter).
``sign-bits``
    bit ``i`` is 1 iff ``delta[i] >= 0``; bits are packed MSB-first into
    bytes (zero-padded) and carried as standard padded base64.

The digest of an update is SHA-256 over the canonical *bytes* (float32 bytes
or packed sign bytes), never over the text form or the chunks.
"""
from __future__ import annotations

import base64
import binascii
import hashlib
import math
import re
import string
from dataclasses import dataclass

import numpy as np

from .errors import SerializationError

FLOAT32 = "float32"
SIGN_BITS = "sign-bits"
PAYLOAD_KINDS = (FLOAT32, SIGN_BITS)

DEFAULT_CHUNK_CHARS = 13_300

_HEX = frozenset(string.hexdigits.lower())
_B64 = frozenset(string.ascii_letters + string.digits + "+/=")
_HEX_RE = re.compile(r"[0-9a-f]*")
_B64_RE = re.compile(r"[A-Za-z0-9+/=]*")


@dataclass(frozen=True)
class WireBatch:
    worker_id: str
    epoch: int
    batch_index: int
    payload: str
    kind: str
    batch_count: int
    dim: int
    sample_count: int = 1


def pack_signs(delta):
    """1 for non-negative coordinates, 0 for negative ones."""
    return (np.asarray(delta) >= 0).astype(np.uint8)


def unpack_signs(bits):
    """Bits back to a +1/-1 vector."""
    return np.where(np.asarray(bits, dtype=np.uint8) == 1, 1, -1).astype(np.int8)


def bits_to_bytes(bits):
    return np.packbits(np.asarray(bits, dtype=np.uint8)).tobytes()


def bytes_to_bits(raw, dim):
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8))
    if len(bits) < dim or np.any(bits[dim:]):
        raise SerializationError("sign payload does not match declared dimension")
    return bits[:dim]


def encode_base64(bits):
    return base64.b64encode(bits_to_bytes(bits)).decode("ascii")


def decode_base64(text, dim):
    try:
        raw = base64.b64decode(text, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise SerializationError(f"invalid base64 payload: {exc}") from None
    if len(raw) != math.ceil(dim / 8):
        raise SerializationError(f"expected {math.ceil(dim / 8)} sign bytes, got {len(raw)}")
    return bytes_to_bits(raw, dim)


def base64_chars(dim):
    """Length of the base64 text for ``dim`` sign bits."""
    return 4 * math.ceil(math.ceil(dim / 8) / 3)


def hex_chars_for_bytes(n_bytes):
    return 2 * n_bytes


def serialize_float32(delta):
    arr = np.asarray(delta, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise SerializationError("cannot serialize non-finite parameter values")
    return arr.astype("<f4").tobytes()


def deserialize_float32(raw, dim=None):
    if len(raw) % 4:
        raise SerializationError("float32 payload length is not a multiple of 4")
    if dim is not None and len(raw) != 4 * dim:
        raise SerializationError(f"expected {4 * dim} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype="<f4").astype(np.float64)


def quantize(delta):
    """The float64 values a float32 round trip leaves behind."""
    return np.asarray(delta, dtype=np.float64).astype(np.float32).astype(np.float64)


def canonical_bytes(delta, kind):
    if kind == FLOAT32:
        return serialize_float32(delta)
    if kind == SIGN_BITS:
        return bits_to_bytes(pack_signs(delta))
    raise SerializationError(f"unknown payload kind {kind!r}")


def encode_payload(delta, kind):
    """Ledger text for an update."""
    if kind == FLOAT32:
        return serialize_float32(delta).hex()
    if kind == SIGN_BITS:
        return encode_base64(pack_signs(delta))
    raise SerializationError(f"unknown payload kind {kind!r}")


def payload_chars(dim, kind):
    if kind == FLOAT32:
        return hex_chars_for_bytes(4 * dim)
    if kind == SIGN_BITS:
        return base64_chars(dim)
    raise SerializationError(f"unknown payload kind {kind!r}")


def text_to_bytes(text, kind, dim):
    """Ledger text back to canonical bytes, validating length and alphabet."""
    if len(text) != payload_chars(dim, kind):
        raise SerializationError(f"payload has {len(text)} chars, expected {payload_chars(dim, kind)}")
    if kind == FLOAT32:
        try:
            raw = bytes.fromhex(text)
        except ValueError as exc:
            raise SerializationError(f"invalid hex payload: {exc}") from None
        deserialize_float32(raw, dim)
        return raw
    return bits_to_bytes(decode_base64(text, dim))


def decode_payload(text, kind, dim):
    """Ledger text to a float64 update (signs decode to +/-1)."""
    raw = text_to_bytes(text, kind, dim)
    if kind == FLOAT32:
        return deserialize_float32(raw, dim)
    return unpack_signs(bytes_to_bits(raw, dim)).astype(np.float64)


def valid_chunk_alphabet(text, kind):
    pattern = _HEX_RE if kind == FLOAT32 else _B64_RE
    return pattern.fullmatch(text) is not None


def chunk(payload, max_chars):
    """Split text into pieces of at most ``max_chars``; empty text gives no pieces."""
    if max_chars < 1:
        raise ValueError("max_chars must be >= 1")
    return [payload[i:i + max_chars] for i in range(0, len(payload), max_chars)]


def chunk_count(n_chars, max_chars):
    return -(-n_chars // max_chars)


def make_batches(worker_id, epoch, delta, kind, max_chars=DEFAULT_CHUNK_CHARS, sample_count=1):
    text = encode_payload(delta, kind)
    pieces = chunk(text, max_chars)
    return [
        WireBatch(worker_id, epoch, i, piece, kind, len(pieces), int(np.size(delta)), sample_count)
        for i, piece in enumerate(pieces)
    ]


def reassemble(batches):
    batches = sorted(batches, key=lambda b: b.batch_index)
    if [b.batch_index for b in batches] != list(range(len(batches))):
        raise SerializationError("batch indices are not dense from 0")
    return "".join(b.payload for b in batches)


def sha256_hex(raw):
    return hashlib.sha256(raw).hexdigest()


def hash_params(delta, kind):
    return sha256_hex(canonical_bytes(delta, kind))


def is_digest(text):
    return isinstance(text, str) and len(text) == 64 and all(c in _HEX for c in text)
