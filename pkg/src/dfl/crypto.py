"""Node identities, hashing and signatures.

SHA-256 is the hash; Ed25519 (deterministic signing) is the signature scheme.
An address is the full SHA-256 digest of the raw 32-byte public key.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

SIGNATURE_SCHEME = "ed25519"
HASH_SCHEME = "sha256"
DIGEST_SIZE = 32
SIGNATURE_SIZE = 64
PUBLIC_KEY_SIZE = 32


class KeyMaterialError(ValueError):
    """Malformed key or signature material."""


def hash_bytes(content: bytes) -> bytes:
    return hashlib.sha256(content).digest()


def address_of(public_key: bytes) -> bytes:
    return hash_bytes(public_key)


@dataclass(frozen=True)
class NodeIdentity:
    private_key: bytes = field(repr=False)
    public_key: bytes
    address: bytes

    @property
    def hex(self) -> str:
        return self.address.hex()

    def sign(self, digest: bytes) -> bytes:
        return sign(self, digest)


def _raw_public(key: Ed25519PrivateKey) -> bytes:
    return key.public_key().public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )


def generate_identity(seed: int | bytes | None = None) -> NodeIdentity:
    """Create a key pair and its address; a seed makes the result reproducible."""
    if seed is None:
        secret = os.urandom(32)
    else:
        if isinstance(seed, int):
            seed = seed.to_bytes(16, "big", signed=True)
        secret = hashlib.sha256(b"dfl-identity:" + seed).digest()
    key = Ed25519PrivateKey.from_private_bytes(secret)
    public = _raw_public(key)
    return NodeIdentity(private_key=secret, public_key=public, address=address_of(public))


def identity_from_private(private_key: bytes) -> NodeIdentity:
    if len(private_key) != 32:
        raise KeyMaterialError(f"private key must be 32 bytes, got {len(private_key)}")
    key = Ed25519PrivateKey.from_private_bytes(private_key)
    public = _raw_public(key)
    return NodeIdentity(private_key=bytes(private_key), public_key=public, address=address_of(public))


def sign(identity: NodeIdentity, digest: bytes) -> bytes:
    if len(digest) != DIGEST_SIZE:
        raise ValueError(f"digest must be {DIGEST_SIZE} bytes, got {len(digest)}")
    if len(identity.private_key) != 32:
        raise KeyMaterialError("malformed private key")
    return Ed25519PrivateKey.from_private_bytes(identity.private_key).sign(digest)


def verify(public_key: bytes, digest: bytes, signature: bytes) -> bool:
    """True iff `signature` was made over `digest` by the owner of `public_key`.

    Raises KeyMaterialError for a public key that is not a valid Ed25519 key;
    a well-formed but wrong signature returns False.
    """
    if len(public_key) != PUBLIC_KEY_SIZE:
        raise KeyMaterialError(f"public key must be {PUBLIC_KEY_SIZE} bytes, got {len(public_key)}")
    try:
        key = Ed25519PublicKey.from_public_bytes(public_key)
    except ValueError as exc:
        raise KeyMaterialError(str(exc)) from exc
    if len(signature) != SIGNATURE_SIZE:
        return False
    try:
        key.verify(signature, digest)
    except InvalidSignature:
        return False
    return True
