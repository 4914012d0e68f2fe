"""Wiring for an in-process deployment: one platform root, one broker, model
storage, and factories for clients and runtime enclaves."""
from __future__ import annotations

from pathlib import Path

from .attestation import CodeIdentity, Platform
from .clients import OwnerClient, UserClient
from .crypto import KeySource
from .keyservice import KeyService, KeyServiceClient, KeyServiceServer, LocalTransport
from .models import LinearBackend
from .runtime import Enclave, runtime_identity
from .storage import ModelStore
from .wire import Transcript

LOCAL_ADDR = "local://keyservice"


class Deployment:
    def __init__(self, seed: int | None = None, transcript: Transcript | None = None,
                 storage_root: str | Path | None = None):
        self.source = KeySource(seed)
        self.transcript = transcript
        self.platform = Platform(self.source.child("platform"))
        self.keyservice = KeyService(self.platform, source=self.source.child("keyservice"))
        self.server = KeyServiceServer(self.keyservice)
        self.storage = ModelStore(storage_root, transcript)
        self._n = 0

    @property
    def keyservice_measurement(self):
        return self.keyservice.measurement

    def _child(self, label: str) -> KeySource | None:
        self._n += 1
        return self.source.child(f"{label}{self._n}") if self.source.deterministic else None

    def connect(self, addr: str = LOCAL_ADDR) -> LocalTransport:
        return LocalTransport(self.server, self.transcript)

    def client(self, attester=None) -> KeyServiceClient:
        return KeyServiceClient(self.connect(), self.platform.verification_key, self.keyservice.measurement,
                                attester=attester, source=self._child("client"))

    def owner(self) -> OwnerClient:
        owner = OwnerClient(self.client(), source=self._child("owner") or KeySource())
        owner.register()
        return owner

    def user(self) -> UserClient:
        user = UserClient(self.client(), LOCAL_ADDR, source=self._child("user") or KeySource())
        user.register()
        return user

    def runtime_identity(self, **flags) -> CodeIdentity:
        return runtime_identity(self.keyservice.measurement, **flags)

    def enclave(self, identity: CodeIdentity | None = None, backend: LinearBackend | None = None,
                fixed_overhead_bytes: int = 0, **flags) -> Enclave:
        identity = identity or self.runtime_identity(**flags)
        return Enclave(identity, self.platform, self.storage, self.connect, backend,
                       fixed_overhead_bytes=fixed_overhead_bytes, transcript=self.transcript,
                       source=self._child("enclave"))
