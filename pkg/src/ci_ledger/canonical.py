"""Canonical JSON encoding used as the pre-image of every hash."""

import base64
import binascii
import hashlib
import json
from collections.abc import Mapping
from typing import Any


class EncodingError(Exception):
    """Error encoding or decoding a canonical value."""

    pass


class UnsupportedValue(EncodingError):
    """Value cannot be represented in canonical form (floats, foreign types)."""

    pass


def _normalize(value: Any, path: str) -> Any:
    """Convert a structured value into plain JSON types, rejecting floats."""
    if value is None or isinstance(value, (bool, str)):
        return value
    if isinstance(value, int):
        return value
    if isinstance(value, float):
        raise UnsupportedValue(f"float at {path} is not allowed in canonical encoding")
    if isinstance(value, (bytes, bytearray, memoryview)):
        return base64.b64encode(bytes(value)).decode("ascii")
    if isinstance(value, Mapping):
        out = {}
        for key, item in value.items():
            if not isinstance(key, str):
                raise UnsupportedValue(f"non-string map key {key!r} at {path}")
            out[key] = _normalize(item, f"{path}.{key}")
        return out
    if isinstance(value, (list, tuple)):
        return [_normalize(item, f"{path}[{i}]") for i, item in enumerate(value)]
    raise UnsupportedValue(f"unsupported type {type(value).__name__} at {path}")


def canonical_encode(value: Any) -> bytes:
    """Encode a value as canonical UTF-8 JSON.

    Object keys are sorted (code point order, which equals UTF-8 byte order),
    no insignificant whitespace is emitted, integers use their minimal decimal
    form and byte strings become base64 text.

    Args:
        value: Maps with string keys, lists, strings, integers, booleans,
            None and byte strings

    Returns:
        Canonical encoding as bytes

    Raises:
        UnsupportedValue: On floats or any other unsupported type
    """
    normalized = _normalize(value, "$")
    return json.dumps(
        normalized,
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=False,
        allow_nan=False,
    ).encode("utf-8")


def canonical_decode(data: bytes | str) -> Any:
    """Decode canonical JSON. Byte strings come back as their base64 text."""
    if isinstance(data, bytes):
        data = data.decode("utf-8")

    def _no_floats(text: str) -> Any:
        raise UnsupportedValue(f"float literal {text} in canonical input")

    return json.loads(data, parse_float=_no_floats)


def sha256(data: bytes) -> bytes:
    """Raw SHA-256 digest."""
    return hashlib.sha256(data).digest()


def sha256_hex(data: bytes) -> str:
    """Lowercase hex SHA-256 digest."""
    return hashlib.sha256(data).hexdigest()


def canonical_hash(value: Any) -> str:
    """Hex SHA-256 of the canonical encoding of a value."""
    return sha256_hex(canonical_encode(value))


def b64decode(text: str) -> bytes:
    """Strict base64 decoding for fields read back from canonical files."""
    try:
        return base64.b64decode(text.encode("ascii"), validate=True)
    except (binascii.Error, UnicodeEncodeError) as e:
        raise EncodingError(f"invalid base64 value: {text[:16]!r}") from e
