"""Attestation-gated key broker.

The four stores follow the broker design: identity keys (``KS_I``), model
keys (``KS_M``), request keys per (model, enclave measurement, user)
(``KS_R``) and the model access-control list (``AC_M``). Every update
arrives sealed under the caller's long-term identity key; keys leave only
through an attested :class:`~secinfer.attestation.SecureChannel`.
"""
from __future__ import annotations

import hashlib
import json
import logging
import threading
from collections.abc import Callable
from dataclasses import dataclass
from pathlib import Path

from .attestation import (
    AttestationError,
    AttestationReport,
    CodeIdentity,
    HandshakeInitiator,
    HandshakeResponder,
    Measurement,
    Platform,
    SecureChannel,
    measure_code,
    message_from_json,
    message_to_json,
    verify_report,
)
from .crypto import (
    AeadEnvelope,
    CryptoError,
    Digest,
    KeySource,
    SymKey,
    aead_decrypt,
    aead_encrypt,
    context_aad,
    hash_identity,
    pack_fields,
    unpack_fields,
)
from .wire import Transcript, b64d, b64e, record

log = logging.getLogger(__name__)

Triple = tuple[str, Measurement, Digest]


class KeyServiceError(Exception):
    code = "error"


class NotRegistered(KeyServiceError):
    code = "not_registered"


class Unauthorized(KeyServiceError):
    """The sealed update did not authenticate under the caller's identity key,
    or the caller does not own the model it names."""

    code = "unauthorized"


class ProvisionDenied(KeyServiceError):
    """Uniform denial; deliberately carries no reason."""

    code = "denied"

    def __init__(self):
        super().__init__("key provisioning denied")


def default_keyservice_identity() -> CodeIdentity:
    return CodeIdentity("keyservice", "1.0", "none", {"tcs_count": 8})


# --- sealed update payloads (shared with the client side) -----------------

def _aad(op: str, caller: Digest) -> bytes:
    return context_aad(op, "", caller.hex())


def seal_model_key(owner_key: SymKey, model_id: str, model_key: SymKey) -> AeadEnvelope:
    oid = hash_identity(owner_key)
    return aead_encrypt(owner_key, pack_fields(model_id.encode(), model_key.bytes), _aad("add_model_key", oid))


def seal_grant(owner_key: SymKey, model_id: str, enclave: Measurement, uid: Digest) -> AeadEnvelope:
    oid = hash_identity(owner_key)
    return aead_encrypt(owner_key, pack_fields(model_id.encode(), enclave.bytes, uid.bytes), _aad("grant_access", oid))


def seal_request_key(user_key: SymKey, model_id: str, enclave: Measurement, request_key: SymKey) -> AeadEnvelope:
    uid = hash_identity(user_key)
    return aead_encrypt(user_key, pack_fields(model_id.encode(), enclave.bytes, request_key.bytes),
                        _aad("add_req_key", uid))


@dataclass(frozen=True)
class ProvisionRequest:
    user_id: Digest
    model_id: str
    report: AttestationReport | None = None


class KeyService:
    """In-enclave broker state and the five broker operations.

    All store access is serialized by one lock, so the object is safe to use
    from one thread per connection.
    """

    def __init__(self, platform: Platform, identity: CodeIdentity | None = None,
                 source: KeySource | None = None, journal: str | Path | None = None):
        self.identity = identity or default_keyservice_identity()
        self.measurement = measure_code(self.identity)
        self.platform = platform
        self.attester = platform.attester(self.measurement)
        self.verification_key = platform.verification_key
        self.source = source or KeySource()
        self._lock = threading.RLock()
        self.KS_I: dict[Digest, SymKey] = {}
        self.KS_M: dict[str, SymKey] = {}
        self.KS_R: dict[Triple, SymKey] = {}
        self.AC_M: set[Triple] = set()
        self._model_owner: dict[str, Digest] = {}
        self.provision_calls = 0
        self.denials = 0
        self._journal = Path(journal) if journal else None
        self._seal = platform.sealing_key(self.measurement)
        if self._journal and self._journal.exists():
            self._replay()

    # --- the five operations -------------------------------------------

    def user_registration(self, identity_key: SymKey) -> Digest:
        ident = hash_identity(identity_key)
        with self._lock:
            if ident not in self.KS_I:
                self.KS_I[ident] = identity_key
                self._append("register", identity_key.bytes)
        return ident

    def add_model_key(self, oid: Digest, sealed: AeadEnvelope) -> None:
        with self._lock:
            k_oid = self._identity_key(oid)
            model_id, k_m = self._open(k_oid, sealed, "add_model_key", oid, 2)
            model_id = model_id.decode()
            owner = self._model_owner.get(model_id)
            if owner is not None and owner != oid:
                raise Unauthorized("model is owned by another identity")
            # last write wins: an owner may rotate its model key
            self.KS_M[model_id] = SymKey(k_m)
            self._model_owner[model_id] = oid
            self._append("add_model_key", oid.bytes, sealed.to_bytes())

    def grant_access(self, oid: Digest, sealed: AeadEnvelope) -> None:
        with self._lock:
            k_oid = self._identity_key(oid)
            model_id, es, uid = self._open(k_oid, sealed, "grant_access", oid, 3)
            model_id = model_id.decode()
            if self._model_owner.get(model_id) != oid:
                raise Unauthorized("grant for a model not deposited by this owner")
            self.AC_M.add((model_id, Measurement(Digest(es)), Digest(uid)))
            self._append("grant_access", oid.bytes, sealed.to_bytes())

    def add_req_key(self, uid: Digest, sealed: AeadEnvelope) -> None:
        with self._lock:
            k_uid = self._identity_key(uid)
            model_id, es, k_r = self._open(k_uid, sealed, "add_req_key", uid, 3)
            self.KS_R[(model_id.decode(), Measurement(Digest(es)), uid)] = SymKey(k_r)
            self._append("add_req_key", uid.bytes, sealed.to_bytes())

    def key_provisioning(self, req: ProvisionRequest, channel: SecureChannel) -> tuple[SymKey, SymKey]:
        """Return ``(K_M, K_R)`` for the attested enclave on ``channel``.

        The enclave identity comes from the channel's verified peer
        measurement. A report in ``req`` must agree with it.
        """
        with self._lock:
            self.provision_calls += 1
            es = channel.peer_measurement
            if es is None:
                return self._deny()
            if req.report is not None and (
                req.report.measurement != es or not verify_report(req.report, es, self.verification_key)
            ):
                return self._deny()
            triple = (req.model_id, es, req.user_id)
            if triple in self.AC_M and triple in self.KS_R and req.model_id in self.KS_M:
                return self.KS_M[req.model_id], self.KS_R[triple]
            return self._deny()

    # --- helpers -------------------------------------------------------

    def _deny(self):
        self.denials += 1
        raise ProvisionDenied()

    def _identity_key(self, ident: Digest) -> SymKey:
        try:
            return self.KS_I[ident]
        except KeyError:
            raise NotRegistered("identity not registered") from None

    def _open(self, key: SymKey, sealed: AeadEnvelope, op: str, caller: Digest, n: int) -> list[bytes]:
        try:
            return unpack_fields(aead_decrypt(key, sealed, _aad(op, caller)), n)
        except CryptoError as e:
            raise Unauthorized("sealed update failed authentication") from e

    def known_enclaves(self) -> set[Measurement]:
        with self._lock:
            return {t[1] for t in self.AC_M} | {t[1] for t in self.KS_R}

    def state_digest(self) -> str:
        """Hash over the full store contents (for before/after comparisons)."""
        with self._lock:
            h = hashlib.sha256()
            for ident in sorted(self.KS_I, key=lambda d: d.bytes):
                h.update(b"I" + ident.bytes + self.KS_I[ident].bytes)
            for m in sorted(self.KS_M):
                h.update(b"M" + m.encode() + b"\0" + self.KS_M[m].bytes)
            for t in sorted(self.KS_R, key=_triple_key):
                h.update(b"R" + _triple_key(t) + self.KS_R[t].bytes)
            for t in sorted(self.AC_M, key=_triple_key):
                h.update(b"A" + _triple_key(t))
            return h.hexdigest()

    # --- optional journal ----------------------------------------------

    def _append(self, op: str, *fields: bytes) -> None:
        if self._journal is None or getattr(self, "_replaying", False):
            return
        env = aead_encrypt(self._seal, pack_fields(op.encode(), *fields), b"journal")
        with self._journal.open("a") as fh:
            fh.write(b64e(env.to_bytes()) + "\n")

    def _replay(self) -> None:
        self._replaying = True
        try:
            for line in self._journal.read_text().splitlines():
                if not line.strip():
                    continue
                raw = aead_decrypt(self._seal, AeadEnvelope.from_bytes(b64d(line)), b"journal")
                op_len = int.from_bytes(raw[:4], "big")
                op = raw[4 : 4 + op_len].decode()
                if op == "register":
                    (_, key) = unpack_fields(raw, 2)
                    self.user_registration(SymKey(key))
                else:
                    _, caller, sealed = unpack_fields(raw, 3)
                    getattr(self, op)(Digest(caller), AeadEnvelope.from_bytes(sealed))
        finally:
            self._replaying = False


def _triple_key(t: Triple) -> bytes:
    return t[0].encode() + b"\0" + t[1].bytes + t[2].bytes


# --- message protocol ---------------------------------------------------
#
# Handshake: POST /handshake with {pubkey, nonce, report} (base64); the reply
# carries the broker's report. Every later call is
# {"session": <hex>, "envelope": <b64 channel message>} whose sealed body is
# a JSON object with base64 fields.

Transport = Callable[[str, bytes], bytes]


class KeyServiceServer:
    """Dispatches protocol messages to a :class:`KeyService`.

    Enclaves presenting a report are admitted only if their measurement is
    referenced by some grant or request key; other peers connect one-way.
    """

    ops = ("/register", "/model_key", "/grant", "/req_key", "/provision")

    def __init__(self, service: KeyService):
        self.service = service
        self._sessions: dict[str, SecureChannel] = {}
        self._lock = threading.Lock()

    def handle(self, path: str, body: bytes) -> bytes:
        try:
            msg = json.loads(body or b"{}")
        except ValueError:
            return _err("bad_request")
        if path == "/health":
            return json.dumps({"role": "keyservice", "measurement": self.service.measurement.hex()}).encode()
        if path == "/handshake":
            return self._handshake(msg)
        if path not in self.ops:
            return _err("not_found")
        with self._lock:
            channel = self._sessions.get(msg.get("session", ""))
        if channel is None:
            return _err("no_session")
        try:
            request = json.loads(channel.open(b64d(msg["envelope"])))
        except (CryptoError, KeyError, ValueError):
            return _err("bad_envelope")
        reply = self._dispatch(path, request, channel)
        return json.dumps({"envelope": b64e(channel.seal(json.dumps(reply).encode()))}).encode()

    def _handshake(self, msg: dict) -> bytes:
        svc = self.service
        responder = HandshakeResponder(svc.verification_key, svc.attester,
                                       accept=lambda m: m in svc.known_enclaves(),
                                       source=svc.source.child("hs") if svc.source.deterministic else None)
        try:
            reply, channel = responder.respond(message_from_json(msg))
        except (AttestationError, KeyError, ValueError) as e:
            log.info("handshake rejected: %s", e)
            return _err("attestation_failed")
        with self._lock:
            self._sessions[channel.session_id.hex()] = channel
        return json.dumps(message_to_json(reply)).encode()

    def _dispatch(self, path: str, req: dict, channel: SecureChannel) -> dict:
        svc = self.service
        try:
            if path == "/register":
                return {"id": svc.user_registration(SymKey(b64d(req["identity_key"]))).hex()}
            if path == "/provision":
                if channel.peer_measurement is None:
                    raise ProvisionDenied()
                k_m, k_r = svc.key_provisioning(
                    ProvisionRequest(Digest.fromhex(req["user_id"]), req["model_id"]), channel)
                return {"model_key": b64e(k_m.bytes), "request_key": b64e(k_r.bytes)}
            caller = Digest.fromhex(req["caller"])
            sealed = AeadEnvelope.from_bytes(b64d(req["sealed"]))
            {"/model_key": svc.add_model_key, "/grant": svc.grant_access, "/req_key": svc.add_req_key}[path](
                caller, sealed)
            return {"ok": True}
        except KeyServiceError as e:
            return {"error": e.code}
        except (KeyError, ValueError, CryptoError):
            return {"error": "bad_request"}


_ERRORS = {NotRegistered.code: NotRegistered, Unauthorized.code: Unauthorized}


def _err(code: str) -> bytes:
    return json.dumps({"error": code}).encode()


class LocalTransport:
    """In-process transport that records every wire message."""

    def __init__(self, server: KeyServiceServer, transcript: Transcript | None = None):
        self.server = server
        self.transcript = transcript

    def __call__(self, path: str, body: bytes) -> bytes:
        record(self.transcript, f"ks.req{path}", body)
        out = self.server.handle(path, body)
        record(self.transcript, f"ks.resp{path}", out)
        return out


class KeyServiceClient:
    """Client side of the protocol, used by owners, users and enclaves.

    ``expected`` is the broker measurement the caller trusts; pass an
    ``attester`` when the caller is itself an enclave.
    """

    def __init__(self, transport: Transport, verification_key: bytes, expected: Measurement,
                 attester=None, source: KeySource | None = None):
        self.transport = transport
        self.verification_key = verification_key
        self.expected = expected
        self.attester = attester
        self.source = source
        self.channel: SecureChannel | None = None
        self.handshakes = 0

    def connect(self) -> SecureChannel:
        hs = HandshakeInitiator(self.verification_key, self.expected, self.attester, self.source)
        hello = hs.hello()
        raw = self.transport("/handshake", json.dumps(message_to_json(hello)).encode())
        self.handshakes += 1
        self.channel = hs.finish(message_from_json(json.loads(raw)))
        return self.channel

    def call(self, path: str, body: dict) -> dict:
        if self.channel is None:
            self.connect()
        msg = {"session": self.channel.session_id.hex(), "envelope": b64e(self.channel.seal(json.dumps(body).encode()))}
        raw = json.loads(self.transport(path, json.dumps(msg).encode()))
        if "error" in raw:
            raise KeyServiceError(f"transport error: {raw['error']}")
        reply = json.loads(self.channel.open(b64d(raw["envelope"])))
        err = reply.get("error")
        if err == ProvisionDenied.code:
            raise ProvisionDenied()
        if err:
            raise _ERRORS.get(err, KeyServiceError)(err)
        return reply

    def register(self, identity_key: SymKey) -> Digest:
        return Digest.fromhex(self.call("/register", {"identity_key": b64e(identity_key.bytes)})["id"])

    def add_model_key(self, oid: Digest, sealed: AeadEnvelope) -> None:
        self.call("/model_key", {"caller": oid.hex(), "sealed": b64e(sealed.to_bytes())})

    def grant_access(self, oid: Digest, sealed: AeadEnvelope) -> None:
        self.call("/grant", {"caller": oid.hex(), "sealed": b64e(sealed.to_bytes())})

    def add_req_key(self, uid: Digest, sealed: AeadEnvelope) -> None:
        self.call("/req_key", {"caller": uid.hex(), "sealed": b64e(sealed.to_bytes())})

    def provision(self, user_id: Digest, model_id: str) -> tuple[SymKey, SymKey]:
        r = self.call("/provision", {"user_id": user_id.hex(), "model_id": model_id})
        return SymKey(b64d(r["model_key"])), SymKey(b64d(r["request_key"]))
