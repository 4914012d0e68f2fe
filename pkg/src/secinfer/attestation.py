"""Simulated enclave identity, attestation reports and attested channels.

A :class:`Platform` plays the role of the hardware root of trust: it owns an
Ed25519 signing key and signs reports binding an enclave measurement to an
ephemeral X25519 share. A :class:`SecureChannel` can only be obtained by
running a handshake in which every required report verified.
"""
from __future__ import annotations

import json
import struct
import threading
from collections.abc import Callable
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey

from .crypto import (
    AeadEnvelope,
    CryptoError,
    Digest,
    KeySource,
    SymKey,
    aead_decrypt,
    aead_encrypt,
    context_aad,
    derive_session_keys,
    pack_fields,
    unpack_fields,
)
from .wire import b64d, b64e

REPORT_NONCE_BYTES = 16


class AttestationError(Exception):
    """Handshake aborted: a report failed verification or was missing."""


class _Any:
    def __repr__(self):
        return "ANY"


#: wildcard for ``verify_report``'s expected measurement
ANY = _Any()


@dataclass(frozen=True)
class CodeIdentity:
    """What an enclave measurement is computed over.

    ``config_flags`` is stored sorted so that equal identities serialize (and
    therefore measure) identically regardless of construction order.
    """

    runtime_name: str
    runtime_version: str
    backend_name: str
    config_flags: tuple = ()

    def __post_init__(self):
        flags = self.config_flags
        if isinstance(flags, dict):
            flags = flags.items()
        norm = tuple(sorted((str(k), _flag_value(v)) for k, v in flags))
        if len({k for k, _ in norm}) != len(norm):
            raise ValueError("duplicate config flag")
        object.__setattr__(self, "config_flags", norm)

    def flag(self, name: str, default=None):
        for k, v in self.config_flags:
            if k == name:
                return v
        return default

    def with_flags(self, **updates) -> "CodeIdentity":
        flags = dict(self.config_flags)
        flags.update(updates)
        return CodeIdentity(self.runtime_name, self.runtime_version, self.backend_name, flags)

    def canonical(self) -> bytes:
        return json.dumps(
            {
                "runtime": self.runtime_name,
                "version": self.runtime_version,
                "backend": self.backend_name,
                "flags": [list(kv) for kv in self.config_flags],
            },
            sort_keys=True,
            separators=(",", ":"),
        ).encode()


def _flag_value(v):
    if isinstance(v, (bool, int, str)) or v is None:
        return v
    if isinstance(v, Measurement):
        return v.hex()
    raise TypeError(f"unsupported flag value {v!r}")


@dataclass(frozen=True)
class Measurement:
    digest: Digest

    def hex(self) -> str:
        return self.digest.hex()

    @property
    def bytes(self) -> bytes:
        return self.digest.bytes

    @classmethod
    def fromhex(cls, s: str) -> "Measurement":
        return cls(Digest.fromhex(s))

    def __str__(self):
        return self.hex()[:16]


def measure_code(identity: CodeIdentity) -> Measurement:
    return Measurement(Digest.of(b"enclave-measurement|" + identity.canonical()))


@dataclass(frozen=True)
class AttestationReport:
    measurement: Measurement
    channel_pubkey: bytes
    nonce: bytes
    platform_sig: bytes

    def signed_bytes(self) -> bytes:
        return _report_body(self.measurement, self.channel_pubkey, self.nonce)

    def to_bytes(self) -> bytes:
        return pack_fields(self.measurement.bytes, self.channel_pubkey, self.nonce, self.platform_sig)

    @classmethod
    def from_bytes(cls, data: bytes) -> "AttestationReport":
        m, pk, nonce, sig = unpack_fields(data, 4)
        return cls(Measurement(Digest(m)), pk, nonce, sig)


def _report_body(measurement: Measurement, pubkey: bytes, nonce: bytes) -> bytes:
    return b"report-v1" + measurement.bytes + struct.pack(">H", len(pubkey)) + pubkey + nonce


class Platform:
    """Simulated platform root key, one per deployment.

    ``verification_key`` is what verifiers receive out of band.
    """

    def __init__(self, source: KeySource | None = None):
        source = source or KeySource()
        self._sk = Ed25519PrivateKey.from_private_bytes(source.random_bytes(32))
        self.verification_key: bytes = self._sk.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )
        self._seal_secret = source.random_bytes(32)

    def generate_report(self, measurement: Measurement, channel_pubkey: bytes, nonce: bytes) -> AttestationReport:
        if len(nonce) != REPORT_NONCE_BYTES:
            raise ValueError("report nonce must be 16 bytes")
        sig = self._sk.sign(_report_body(measurement, channel_pubkey, nonce))
        return AttestationReport(measurement, bytes(channel_pubkey), bytes(nonce), sig)

    def sealing_key(self, measurement: Measurement) -> SymKey:
        """Key only an enclave with this measurement on this platform derives."""
        return SymKey(Digest.of(b"seal|" + self._seal_secret + measurement.bytes).bytes)

    def attester(self, measurement: Measurement) -> "Attester":
        return Attester(self, measurement)


def generate_report(platform: Platform, enclave_measurement: Measurement, channel_pubkey: bytes,
                    nonce: bytes) -> AttestationReport:
    return platform.generate_report(enclave_measurement, channel_pubkey, nonce)


def _matches(measurement: Measurement, expected) -> bool:
    if expected is ANY:
        return True
    if isinstance(expected, Measurement):
        return measurement == expected
    if callable(expected):
        return bool(expected(measurement))
    return measurement in expected


def verify_report(report: AttestationReport, expected, verification_key: bytes) -> bool:
    """True iff the platform signature verifies and the measurement matches.

    ``expected`` is a :class:`Measurement`, :data:`ANY`, a collection of
    measurements, or a predicate.
    """
    try:
        Ed25519PublicKey.from_public_bytes(verification_key).verify(report.platform_sig, report.signed_bytes())
    except (InvalidSignature, ValueError):
        return False
    return _matches(report.measurement, expected)


@dataclass(frozen=True)
class Attester:
    """An enclave's ability to have the platform vouch for it."""

    platform: Platform = field(repr=False)
    measurement: Measurement

    def report(self, pubkey: bytes, nonce: bytes) -> AttestationReport:
        return self.platform.generate_report(self.measurement, pubkey, nonce)


_CHANNEL_TOKEN = object()


class SecureChannel:
    """Directional AEAD keys bound to a verified peer.

    Messages carry an 8-byte send counter which is bound into the aad; the
    receiving side rejects non-increasing counters. A channel is meant to be
    driven from one execution context at a time; sends are serialized.
    """

    def __init__(self, send_key: SymKey, recv_key: SymKey, peer_measurement: Measurement | None,
                 session_id: Digest, *, _token=None):
        if _token is not _CHANNEL_TOKEN:
            raise TypeError("SecureChannel is only created by a completed handshake")
        self.send_key = send_key
        self.recv_key = recv_key
        self.peer_measurement = peer_measurement
        self.session_id = session_id
        self._send_ctr = 0
        self._recv_ctr = -1
        self._lock = threading.Lock()

    def __repr__(self):
        peer = self.peer_measurement.hex()[:12] if self.peer_measurement else None
        return f"SecureChannel(session={self.session_id.hex()[:12]}, peer={peer})"

    def seal(self, payload: bytes) -> bytes:
        with self._lock:
            ctr = self._send_ctr
            self._send_ctr += 1
        aad = context_aad("channel", self.session_id.hex(), "", ctr)
        return struct.pack(">Q", ctr) + aead_encrypt(self.send_key, payload, aad).to_bytes()

    def open(self, data: bytes) -> bytes:
        if len(data) < 8:
            raise CryptoError("short channel message")
        (ctr,) = struct.unpack(">Q", data[:8])
        aad = context_aad("channel", self.session_id.hex(), "", ctr)
        plain = aead_decrypt(self.recv_key, AeadEnvelope.from_bytes(data[8:]), aad)
        with self._lock:
            if ctr <= self._recv_ctr:
                raise CryptoError("replayed or reordered channel message")
            self._recv_ctr = ctr
        return plain


def _pub_bytes(sk: X25519PrivateKey) -> bytes:
    return sk.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)


def _transcript(hello: dict, reply: dict) -> bytes:
    return pack_fields(
        hello["pubkey"], hello["nonce"], hello.get("report") or b"",
        reply["pubkey"], reply["nonce"], reply.get("report") or b"",
    )


def _x25519(source: KeySource | None) -> X25519PrivateKey:
    if source is not None and source.deterministic:
        return X25519PrivateKey.from_private_bytes(source.random_bytes(32))
    return X25519PrivateKey.generate()


class HandshakeInitiator:
    """Client half. ``expected`` is checked against the responder's report.

    Pass an ``attester`` to make the handshake mutual.
    """

    def __init__(self, verification_key: bytes, expected, attester: Attester | None = None,
                 source: KeySource | None = None):
        self.verification_key = verification_key
        self.expected = expected
        self.attester = attester
        self._source = source or KeySource()
        self._sk = _x25519(source)
        self._hello: dict | None = None
        self._done = False

    def hello(self) -> dict:
        if self._hello is not None:
            raise RuntimeError("handshake objects are single-use")
        pub = _pub_bytes(self._sk)
        nonce = self._source.random_bytes(REPORT_NONCE_BYTES)
        msg = {"pubkey": pub, "nonce": nonce, "report": None}
        if self.attester is not None:
            msg["report"] = self.attester.report(pub, nonce).to_bytes()
        self._hello = msg
        return msg

    def finish(self, reply: dict) -> SecureChannel:
        if self._hello is None or self._done:
            raise RuntimeError("handshake out of order")
        self._done = True
        if reply.get("error"):
            raise AttestationError(f"peer aborted handshake: {reply['error']}")
        try:
            report = AttestationReport.from_bytes(reply["report"])
        except (KeyError, TypeError, CryptoError) as e:
            raise AttestationError("responder sent no usable report") from e
        if not verify_report(report, self.expected, self.verification_key):
            raise AttestationError("responder report failed verification")
        if report.channel_pubkey != reply["pubkey"] or report.nonce != self._hello["nonce"]:
            raise AttestationError("responder report not bound to this handshake")
        shared = self._sk.exchange(X25519PublicKey.from_public_bytes(reply["pubkey"]))
        t = _transcript(self._hello, reply)
        k_out, k_in = derive_session_keys(shared, t)
        return SecureChannel(k_out, k_in, report.measurement, Digest.of(t), _token=_CHANNEL_TOKEN)


class HandshakeResponder:
    """Server half; always presents its own report.

    ``accept`` filters the initiator's report when one is presented;
    ``require_peer_report`` makes the handshake mutual.
    """

    def __init__(self, verification_key: bytes, attester: Attester, accept=ANY,
                 require_peer_report: bool = False, source: KeySource | None = None):
        self.verification_key = verification_key
        self.attester = attester
        self.accept = accept
        self.require_peer_report = require_peer_report
        self._source = source or KeySource()
        self._used = False

    def respond(self, hello: dict) -> tuple[dict, SecureChannel]:
        if self._used:
            raise RuntimeError("handshake objects are single-use")
        self._used = True
        peer = None
        raw = hello.get("report")
        if raw:
            try:
                report = AttestationReport.from_bytes(raw)
            except CryptoError as e:
                raise AttestationError("malformed initiator report") from e
            if not verify_report(report, self.accept, self.verification_key):
                raise AttestationError("initiator report failed verification")
            if report.channel_pubkey != hello["pubkey"] or report.nonce != hello["nonce"]:
                raise AttestationError("initiator report not bound to this handshake")
            peer = report.measurement
        elif self.require_peer_report:
            raise AttestationError("mutual attestation required")
        sk = _x25519(self._source)
        pub = _pub_bytes(sk)
        reply = {
            "pubkey": pub,
            "nonce": self._source.random_bytes(REPORT_NONCE_BYTES),
            # bound to the initiator's nonce for freshness
            "report": self.attester.report(pub, hello["nonce"]).to_bytes(),
        }
        shared = sk.exchange(X25519PublicKey.from_public_bytes(hello["pubkey"]))
        t = _transcript(hello, reply)
        k_in, k_out = derive_session_keys(shared, t)
        return reply, SecureChannel(k_out, k_in, peer, Digest.of(t), _token=_CHANNEL_TOKEN)


def message_to_json(msg: dict) -> dict:
    return {k: (b64e(v) if isinstance(v, (bytes, bytearray)) else v) for k, v in msg.items()}


def message_from_json(obj: dict) -> dict:
    out = {}
    for k, v in obj.items():
        out[k] = b64d(v) if k in ("pubkey", "nonce", "report") and isinstance(v, str) else v
    return out


def establish_channel(initiator: HandshakeInitiator, responder: HandshakeResponder,
                      wire: Callable[[str, bytes], None] | None = None) -> tuple[SecureChannel, SecureChannel]:
    """Run both halves in-process; fails closed with :class:`AttestationError`.

    ``wire`` (if given) observes the serialized handshake messages.
    """
    hello = initiator.hello()
    if wire:
        wire("handshake.hello", json.dumps(message_to_json(hello)).encode())
    reply, resp_channel = responder.respond(hello)
    if wire:
        wire("handshake.reply", json.dumps(message_to_json(reply)).encode())
    init_channel = initiator.finish(reply)
    return init_channel, resp_channel
