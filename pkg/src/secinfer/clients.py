"""Model-owner and model-user clients.

Both attest the broker against a known measurement before any key leaves
the client, register a long-term identity key, and then deposit sealed
updates over the attested channel.
"""
from __future__ import annotations

from collections.abc import Callable, Iterable
from dataclasses import dataclass, field

import numpy as np

from .attestation import Measurement
from .crypto import Digest, KeySource, SymKey, aead_decrypt, aead_encrypt, hash_identity
from .keyservice import KeyServiceClient, seal_grant, seal_model_key, seal_request_key
from .models import Model, decode_output, encode_input, encrypt_model_file
from .runtime import InferenceRequest, request_aad, result_aad
from .storage import ModelStore


@dataclass
class OwnerContext:
    identity_key: SymKey
    model_keys: dict[str, SymKey] = field(default_factory=dict)

    @property
    def oid(self) -> Digest:
        return hash_identity(self.identity_key)


@dataclass
class UserContext:
    identity_key: SymKey
    request_keys: dict[tuple[str, Measurement], SymKey] = field(default_factory=dict)
    seq: dict[str, int] = field(default_factory=dict)
    # enclave measurement to use per model when building requests
    enclave_for: dict[str, Measurement] = field(default_factory=dict)

    @property
    def uid(self) -> Digest:
        return hash_identity(self.identity_key)

    def next_seq(self, model_id: str) -> int:
        n = self.seq.get(model_id, -1) + 1
        self.seq[model_id] = n
        return n


class OwnerClient:
    def __init__(self, keyservice: KeyServiceClient, ctx: OwnerContext | None = None,
                 source: KeySource | None = None):
        self.ks = keyservice
        self.source = source or KeySource()
        self.ctx = ctx or OwnerContext(SymKey.generate(self.source))

    def register(self) -> Digest:
        # connect() verifies the broker report against the expected measurement
        if self.ks.channel is None:
            self.ks.connect()
        return self.ks.register(self.ctx.identity_key)

    def deploy_model(self, model: Model, storage: ModelStore, grants: Iterable[tuple[Measurement, Digest]] = ()) -> SymKey:
        """Encrypt and upload ``model``, deposit its key, grant access."""
        key = self.ctx.model_keys.get(model.model_id) or SymKey.generate(self.source)
        self.ctx.model_keys[model.model_id] = key
        storage.put(model.model_id, encrypt_model_file(model, key), model.declared_size_bytes)
        self.ks.add_model_key(self.ctx.oid, seal_model_key(self.ctx.identity_key, model.model_id, key))
        for enclave, uid in grants:
            self.grant(model.model_id, enclave, uid)
        return key

    def grant(self, model_id: str, enclave: Measurement, uid: Digest) -> None:
        self.ks.grant_access(self.ctx.oid, seal_grant(self.ctx.identity_key, model_id, enclave, uid))


def owner_setup(keyservice: KeyServiceClient, models: Iterable[Model], storage: ModelStore,
                grants: Iterable[tuple[Measurement, Digest]], source: KeySource | None = None) -> OwnerClient:
    """Register an owner, upload every model and grant each (enclave, user).

    Raises :class:`~secinfer.attestation.AttestationError` before anything is
    deposited if the broker does not attest as expected.
    """
    owner = OwnerClient(keyservice, source=source)
    owner.register()
    grants = list(grants)
    for m in models:
        owner.deploy_model(m, storage, grants)
    return owner


class UserClient:
    def __init__(self, keyservice: KeyServiceClient, keyservice_addr: str = "",
                 ctx: UserContext | None = None, source: KeySource | None = None):
        self.ks = keyservice
        self.keyservice_addr = keyservice_addr
        self.source = source or KeySource()
        self.ctx = ctx or UserContext(SymKey.generate(self.source))

    @property
    def uid(self) -> Digest:
        return self.ctx.uid

    def register(self) -> Digest:
        if self.ks.channel is None:
            self.ks.connect()
        return self.ks.register(self.ctx.identity_key)

    def add_request_key(self, model_id: str, enclave: Measurement) -> SymKey:
        key = SymKey.generate(self.source)
        self.ctx.request_keys[(model_id, enclave)] = key
        self.ctx.enclave_for[model_id] = enclave
        self.ks.add_req_key(self.uid, seal_request_key(self.ctx.identity_key, model_id, enclave, key))
        return key

    def request_key(self, model_id: str) -> SymKey:
        return self.ctx.request_keys[(model_id, self.ctx.enclave_for[model_id])]

    def build_request(self, model_id: str, x) -> InferenceRequest:
        seq = self.ctx.next_seq(model_id)
        env = aead_encrypt(self.request_key(model_id), encode_input(x), request_aad(model_id, self.uid, seq))
        return InferenceRequest(self.uid, model_id, self.keyservice_addr, env, seq)

    def open_result(self, req: InferenceRequest, result) -> tuple[int, np.ndarray]:
        plain = aead_decrypt(self.request_key(req.model_id), result, result_aad(req.model_id, self.uid, req.seq))
        return decode_output(plain)

    def user_request(self, model_id: str, x, submit: Callable[[InferenceRequest], object]) -> tuple[int, np.ndarray]:
        """Encrypt ``x``, hand it to ``submit`` (router or worker) and decrypt
        the returned result envelope."""
        req = self.build_request(model_id, x)
        return self.open_result(req, submit(req))
