"""Agent key bundles and the encrypted-at-rest key store.

Routine keys (authentication, key agreement) and the human-authorization key are
kept in separate files so the sensitive one can live on different media and be
unlocked on its own.
"""

from __future__ import annotations

import json
import os
import secrets
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.scrypt import Scrypt

from anp.e2e import LocalIdentity
from anp.encoding import b64url_decode, b64url_encode
from anp.errors import KeyStoreError
from anp.identity import (
    ED25519,
    X25519,
    DidDocument,
    DidId,
    KeyClass,
    KeyPair,
    build_did_document,
    generate_keypair,
    keypair_from_secret,
)

PASSPHRASE_ENV = "ANP_KEY_PASSPHRASE"
HUMAN_SUFFIX = ".human"
_SCRYPT_N = 2**14


@dataclass(frozen=True)
class AgentKeys:
    did: DidId
    auth_key: KeyPair
    agreement_key: KeyPair
    human_key: KeyPair | None = None

    @classmethod
    def generate(cls, did: DidId, with_human_key: bool = True) -> "AgentKeys":
        return cls(
            did,
            generate_keypair(ED25519, KeyClass.ROUTINE, "key-1"),
            generate_keypair(X25519, KeyClass.ROUTINE, "x25519-1"),
            generate_keypair(ED25519, KeyClass.HUMAN_AUTHORIZATION, "human-1") if with_human_key else None,
        )

    def did_document(self, ad_url: str | None = None) -> DidDocument:
        return build_did_document(self.did, [self.auth_key], self.human_key, [self.agreement_key], ad_url)

    @property
    def local_identity(self) -> LocalIdentity:
        return LocalIdentity(self.did, self.auth_key, self.agreement_key)

    @property
    def routine_keys(self) -> list[KeyPair]:
        return [self.auth_key, self.agreement_key]


def _kdf(passphrase: str, salt: bytes) -> bytes:
    return Scrypt(salt=salt, length=32, n=_SCRYPT_N, r=8, p=1).derive(passphrase.encode("utf-8"))


def _seal(payload: dict, passphrase: str) -> dict:
    salt, nonce = secrets.token_bytes(16), secrets.token_bytes(12)
    ct = ChaCha20Poly1305(_kdf(passphrase, salt)).encrypt(nonce, json.dumps(payload).encode("utf-8"), b"anp-keystore.v1")
    return {
        "version": 1,
        "kdf": {"name": "scrypt", "n": _SCRYPT_N, "r": 8, "p": 1, "salt": b64url_encode(salt)},
        "nonce": b64url_encode(nonce),
        "ciphertext": b64url_encode(ct),
    }


def _open(blob: dict, passphrase: str) -> dict:
    try:
        salt = b64url_decode(blob["kdf"]["salt"])
        key = _kdf(passphrase, salt)
        raw = ChaCha20Poly1305(key).decrypt(b64url_decode(blob["nonce"]), b64url_decode(blob["ciphertext"]), b"anp-keystore.v1")
    except InvalidTag as exc:
        raise KeyStoreError("wrong passphrase or corrupted key store") from exc
    except (KeyError, ValueError, TypeError) as exc:
        raise KeyStoreError(f"malformed key store: {exc}") from exc
    return json.loads(raw)


def _key_json(key: KeyPair) -> dict:
    return {
        "algorithm": key.algorithm,
        "keyClass": key.key_class.value,
        "keyId": key.key_id,
        "secretKey": b64url_encode(key.secret_key),
    }


def _key_from_json(data: dict) -> KeyPair:
    return keypair_from_secret(data["algorithm"], b64url_decode(data["secretKey"]), data["keyClass"], data["keyId"])


def _write(path: Path, blob: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    fd = os.open(tmp, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "w") as fh:
        json.dump(blob, fh, indent=2)
    os.replace(tmp, path)


def save_keys(path: str | os.PathLike, did: DidId | str, keys: Iterable[KeyPair], passphrase: str) -> None:
    """Write routine keys to ``path`` and any human-authorization key to ``path + '.human'``."""
    path = Path(path)
    keys = list(keys)
    routine = [k for k in keys if k.key_class is KeyClass.ROUTINE]
    human = [k for k in keys if k.key_class is KeyClass.HUMAN_AUTHORIZATION]
    _write(path, _seal({"did": str(did), "keys": [_key_json(k) for k in routine]}, passphrase))
    if human:
        _write(Path(str(path) + HUMAN_SUFFIX), _seal({"did": str(did), "keys": [_key_json(k) for k in human]}, passphrase))


def load_keys(path: str | os.PathLike, passphrase: str, include_human: bool = True) -> tuple[str, list[KeyPair]]:
    path = Path(path)
    try:
        blob = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise KeyStoreError(f"cannot read key store {path}: {exc}") from exc
    data = _open(blob, passphrase)
    keys = [_key_from_json(k) for k in data["keys"]]
    human_path = Path(str(path) + HUMAN_SUFFIX)
    if include_human and human_path.exists():
        keys += [_key_from_json(k) for k in _open(json.loads(human_path.read_text()), passphrase)["keys"]]
    return data["did"], keys


def agent_keys_from(did: DidId, keys: Iterable[KeyPair]) -> AgentKeys:
    keys = list(keys)
    auth = next((k for k in keys if k.algorithm == ED25519 and k.key_class is KeyClass.ROUTINE), None)
    agree = next((k for k in keys if k.algorithm == X25519), None)
    human = next((k for k in keys if k.key_class is KeyClass.HUMAN_AUTHORIZATION), None)
    if auth is None or agree is None:
        raise KeyStoreError("key store needs a routine Ed25519 key and an X25519 key")
    return AgentKeys(did, auth, agree, human)


def passphrase_from_env() -> str:
    value = os.environ.get(PASSPHRASE_ENV)
    if not value:
        raise KeyStoreError(f"set {PASSPHRASE_ENV} to unlock the key store")
    return value
