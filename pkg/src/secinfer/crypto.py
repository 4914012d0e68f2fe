"""Authenticated encryption, identity hashing and session-key derivation.

AES-256-GCM is provided by ``cryptography``; nonce management, the envelope
wire format and the AAD conventions live here.
"""
from __future__ import annotations

import hashlib
import hmac
import os
import secrets
import struct
import threading
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

KEY_BYTES = 32
NONCE_BYTES = 12
TAG_BYTES = 16
NONCE_PREFIX_BYTES = 4
_COUNTER_LIMIT = 1 << 64


class CryptoError(Exception):
    """Base class for cryptographic failures."""


class IntegrityError(CryptoError):
    """Authentication tag did not verify (wrong key, aad, or tampered data)."""


class MalformedEnvelope(CryptoError, ValueError):
    """Envelope bytes could not be parsed."""


class NonceExhausted(CryptoError):
    """The per-key nonce counter overflowed."""


class KeySource:
    """Source of key material.

    Without a seed this draws from the OS CSPRNG. With a seed it is a
    SHA-256 counter-mode generator, so test runs reproduce bit-for-bit.
    """

    def __init__(self, seed: int | bytes | None = None):
        if seed is None:
            self._seed = None
        else:
            if isinstance(seed, int):
                seed = seed.to_bytes(16, "big", signed=True)
            self._seed = hashlib.sha256(b"keysource|" + seed).digest()
        self._counter = 0
        self._lock = threading.Lock()

    @property
    def deterministic(self) -> bool:
        return self._seed is not None

    def random_bytes(self, n: int) -> bytes:
        if self._seed is None:
            return secrets.token_bytes(n)
        out = bytearray()
        with self._lock:
            while len(out) < n:
                block = hmac.new(self._seed, self._counter.to_bytes(8, "big"), hashlib.sha256)
                out += block.digest()
                self._counter += 1
        return bytes(out[:n])

    def child(self, label: str) -> "KeySource":
        """Independent sub-stream; deterministic iff this source is."""
        if self._seed is None:
            return KeySource()
        return KeySource(hashlib.sha256(self._seed + label.encode()).digest())


_default_source = KeySource()


@dataclass(frozen=True)
class SymKey:
    """A 32-byte symmetric key. ``repr`` never shows the key bytes."""

    bytes: bytes = field(repr=False)

    def __post_init__(self):
        if not isinstance(self.bytes, (bytes, bytearray)) or len(self.bytes) != KEY_BYTES:
            raise ValueError(f"SymKey must be exactly {KEY_BYTES} bytes")
        object.__setattr__(self, "bytes", bytes(self.bytes))

    @classmethod
    def generate(cls, source: KeySource | None = None) -> "SymKey":
        return cls((source or _default_source).random_bytes(KEY_BYTES))

    def fingerprint(self) -> bytes:
        return hashlib.sha256(b"fp|" + self.bytes).digest()[:16]


@dataclass(frozen=True)
class Digest:
    bytes: bytes

    def __post_init__(self):
        if len(self.bytes) != 32:
            raise ValueError("Digest must be 32 bytes")

    def hex(self) -> str:
        return self.bytes.hex()

    @classmethod
    def fromhex(cls, s: str) -> "Digest":
        return cls(bytes.fromhex(s))

    @classmethod
    def of(cls, data: bytes) -> "Digest":
        return cls(hashlib.sha256(data).digest())

    def __str__(self) -> str:
        return self.hex()


@dataclass(frozen=True)
class AeadEnvelope:
    """nonce ‖ ciphertext ‖ tag, plus the aad it was sealed under.

    The aad is carried for convenience only; ``to_bytes`` drops it and the
    receiver re-derives it from message context.
    """

    nonce: bytes
    ciphertext: bytes
    tag: bytes
    aad: bytes = b""

    def to_bytes(self) -> bytes:
        return self.nonce + struct.pack(">I", len(self.ciphertext)) + self.ciphertext + self.tag

    @classmethod
    def from_bytes(cls, data: bytes) -> "AeadEnvelope":
        if len(data) < NONCE_BYTES + 4 + TAG_BYTES:
            raise MalformedEnvelope("envelope too short")
        (n,) = struct.unpack(">I", data[NONCE_BYTES : NONCE_BYTES + 4])
        body = NONCE_BYTES + 4
        if len(data) != body + n + TAG_BYTES:
            raise MalformedEnvelope("envelope length field does not match data")
        return cls(data[:NONCE_BYTES], data[body : body + n], data[body + n :])

    @property
    def wire_size(self) -> int:
        return NONCE_BYTES + 4 + len(self.ciphertext) + TAG_BYTES


class NonceRegistry:
    """Per-key nonce sequences: 4-byte random prefix + 8-byte counter.

    Set ``record = True`` (tests) to keep every issued nonce per key.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._seqs: dict[bytes, list] = {}
        self.record = False
        self.issued: dict[bytes, set[bytes]] = {}

    def next(self, key: SymKey) -> bytes:
        fp = key.fingerprint()
        with self._lock:
            seq = self._seqs.get(fp)
            if seq is None:
                seq = self._seqs[fp] = [os.urandom(NONCE_PREFIX_BYTES), 0]
            if seq[1] >= _COUNTER_LIMIT:
                raise NonceExhausted("nonce counter exhausted for key")
            nonce = seq[0] + seq[1].to_bytes(8, "big")
            seq[1] += 1
            if self.record:
                self.issued.setdefault(fp, set()).add(nonce)
        return nonce

    def _set_counter(self, key: SymKey, value: int) -> None:
        # test hook for exhaustion
        with self._lock:
            fp = key.fingerprint()
            seq = self._seqs.setdefault(fp, [os.urandom(NONCE_PREFIX_BYTES), 0])
            seq[1] = value


nonces = NonceRegistry()


def aead_encrypt(key: SymKey, plaintext: bytes, aad: bytes = b"") -> AeadEnvelope:
    nonce = nonces.next(key)
    out = AESGCM(key.bytes).encrypt(nonce, bytes(plaintext), aad)
    return AeadEnvelope(nonce, out[:-TAG_BYTES], out[-TAG_BYTES:], aad)


def aead_decrypt(key: SymKey, env: AeadEnvelope, aad: bytes = b"") -> bytes:
    if len(env.nonce) != NONCE_BYTES or len(env.tag) != TAG_BYTES:
        raise MalformedEnvelope("bad nonce or tag length")
    try:
        return AESGCM(key.bytes).decrypt(env.nonce, env.ciphertext + env.tag, aad)
    except InvalidTag:
        raise IntegrityError("authentication failed") from None


def hash_identity(key: SymKey) -> Digest:
    return Digest(hashlib.sha256(key.bytes).digest())


def derive_session_keys(shared_secret: bytes, transcript: bytes) -> tuple[SymKey, SymKey]:
    """Directional keys (initiator→responder, responder→initiator)."""
    if not shared_secret:
        raise ValueError("empty shared secret")
    okm = HKDF(
        algorithm=hashes.SHA256(),
        length=2 * KEY_BYTES,
        salt=hashlib.sha256(transcript).digest(),
        info=b"secinfer channel v1",
    ).derive(shared_secret)
    return SymKey(okm[:KEY_BYTES]), SymKey(okm[KEY_BYTES:])


def context_aad(purpose: str, model_id: str = "", user_id: str = "", *extra) -> bytes:
    """``<purpose>|<model_id>|<user_id>[|extra...]`` as bytes."""
    parts = [purpose, model_id, user_id, *(str(e) for e in extra)]
    return "|".join(parts).encode()


def pack_fields(*fields: bytes) -> bytes:
    """Length-prefixed concatenation (u32 big-endian per field)."""
    return b"".join(struct.pack(">I", len(f)) + f for f in fields)


def unpack_fields(data: bytes, count: int) -> list[bytes]:
    out, pos = [], 0
    for _ in range(count):
        if pos + 4 > len(data):
            raise MalformedEnvelope("truncated field header")
        (n,) = struct.unpack(">I", data[pos : pos + 4])
        pos += 4
        if pos + n > len(data):
            raise MalformedEnvelope("truncated field")
        out.append(data[pos : pos + n])
        pos += n
    if pos != len(data):
        raise MalformedEnvelope("trailing bytes")
    return out
