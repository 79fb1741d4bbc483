"""Byte/text encodings shared across the protocol layers."""

from __future__ import annotations

import base64
import hashlib
import json
import re
from typing import Any

import base58

_B64URL_RE = re.compile(r"^[A-Za-z0-9_-]*$")


def canonical_json(value: Any) -> bytes:
    """Sorted-key, minimal-whitespace UTF-8 JSON. Arrays keep their order."""
    return json.dumps(
        value, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False
    ).encode("utf-8")


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def b64url_encode(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode("ascii")


def b64url_decode(text: str) -> bytes:
    """Strict unpadded base64url decode.

    Rejects characters outside the alphabet and non-canonical encodings (unused
    trailing bits set), so that exactly one string maps to each byte string.
    """
    if not _B64URL_RE.match(text) or len(text) % 4 == 1:
        raise ValueError("invalid base64url")
    data = base64.urlsafe_b64decode(text + "=" * (-len(text) % 4))
    if b64url_encode(data) != text:
        raise ValueError("non-canonical base64url")
    return data


# multicodec varint prefixes
MULTICODEC = {
    "Ed25519": bytes([0xED, 0x01]),
    "X25519": bytes([0xEC, 0x01]),
}


def multibase_encode(algorithm: str, public_key: bytes) -> str:
    return "z" + base58.b58encode(MULTICODEC[algorithm] + public_key).decode("ascii")


def multibase_decode(text: str) -> tuple[str, bytes]:
    """Return ``(algorithm, raw public key)`` for a base58btc multikey string."""
    if not text.startswith("z"):
        raise ValueError("expected base58btc multibase (z prefix)")
    try:
        raw = base58.b58decode(text[1:])
    except ValueError as exc:
        raise ValueError(f"invalid base58: {exc}") from exc
    for algorithm, prefix in MULTICODEC.items():
        if raw.startswith(prefix):
            key = raw[len(prefix):]
            if len(key) != 32:
                raise ValueError(f"expected 32-byte key, got {len(key)}")
            return algorithm, key
    raise ValueError("unknown multicodec prefix")
