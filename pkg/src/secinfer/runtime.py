"""The model-serving enclave runtime.

An :class:`Enclave` keeps one decrypted model, one cached key pair and a
fixed number of request contexts (one per TCS). ``ec_model_inf`` runs the
serving sequence: fetch keys if the cached pair is for another
(model, user), swap the model if needed, initialize the context's runtime
if needed, then decrypt, execute and re-encrypt under the request key.
"""
from __future__ import annotations

import logging
import math
import threading
from collections.abc import Callable
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction

from .attestation import CodeIdentity, Measurement, Platform, measure_code
from .crypto import (
    AeadEnvelope,
    CryptoError,
    Digest,
    KeySource,
    SymKey,
    aead_decrypt,
    aead_encrypt,
    context_aad,
)
from .keyservice import KeyServiceClient, ProvisionDenied, Transport
from .models import ExecutionError, LinearBackend, Model, ModelRuntime, decrypt_model_file
from .storage import ModelStore
from .wire import Transcript, b64d, b64e, record

log = logging.getLogger(__name__)

RUNTIME_NAME = "model-runtime"
RUNTIME_VERSION = "1.0"


class InvocationPath(str, Enum):
    COLD = "cold"
    WARM = "warm"
    HOT = "hot"


class RequestRejected(Exception):
    """The enclave refused the request; no output was produced."""


class ReplayRejected(RequestRejected):
    pass


class EnclaveBusy(Exception):
    """Non-blocking admission would have had to wait."""


class NoOutput(Exception):
    pass


def request_aad(model_id: str, user_id: Digest, seq: int) -> bytes:
    return context_aad("request", model_id, user_id.hex(), seq)


def result_aad(model_id: str, user_id: Digest, seq: int) -> bytes:
    return context_aad("result", model_id, user_id.hex(), seq)


@dataclass(frozen=True)
class InferenceRequest:
    user_id: Digest
    model_id: str
    keyservice_addr: str
    payload: AeadEnvelope
    seq: int

    def to_json(self) -> dict:
        return {
            "user_id": self.user_id.hex(),
            "model_id": self.model_id,
            "keyservice_addr": self.keyservice_addr,
            "payload_b64": b64e(self.payload.to_bytes()),
            "seq": self.seq,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "InferenceRequest":
        return cls(Digest.fromhex(obj["user_id"]), obj["model_id"], obj.get("keyservice_addr", ""),
                   AeadEnvelope.from_bytes(b64d(obj["payload_b64"])), int(obj["seq"]))


def runtime_identity(keyservice: Measurement, *, tcs_count: int = 1, fixed_model: str | None = None,
                     key_cache_enabled: bool = True, model_cache_enabled: bool = True,
                     sequential_isolation: bool = False, backend: str = "linear") -> CodeIdentity:
    """Code identity of a runtime build.

    The broker measurement is compiled in, so pointing a runtime at another
    broker changes its own measurement.
    """
    if not 1 <= tcs_count <= 8:
        raise ValueError("tcs_count must be in 1..8")
    if sequential_isolation and tcs_count != 1:
        raise ValueError("sequential isolation requires tcs_count=1")
    return CodeIdentity(RUNTIME_NAME, RUNTIME_VERSION, backend, {
        "tcs_count": tcs_count,
        "fixed_model": fixed_model or "",
        "key_cache_enabled": key_cache_enabled and not sequential_isolation,
        "model_cache_enabled": model_cache_enabled,
        "sequential_isolation": sequential_isolation,
        "keyservice_measurement": keyservice,
    })


class _Context:
    __slots__ = ("index", "runtime", "output", "busy")

    def __init__(self, index: int):
        self.index = index
        self.runtime: ModelRuntime | None = None
        self.output: AeadEnvelope | None = None
        self.busy = False


@dataclass(frozen=True)
class StateSnapshot:
    model_id: str | None
    key_pair_for: tuple[str, Digest] | None
    ctx_runtime_model: str | None


def classify_invocation(sandbox_new: bool, before: StateSnapshot, req: InferenceRequest) -> InvocationPath:
    if sandbox_new:
        return InvocationPath.COLD
    if (before.model_id == req.model_id and before.ctx_runtime_model == req.model_id
            and before.key_pair_for == (req.model_id, req.user_id)):
        return InvocationPath.HOT
    return InvocationPath.WARM


class Enclave:
    """A runtime enclave instance.

    ``connect`` maps a broker address to a transport; the enclave keeps one
    attested channel per address for its lifetime. Safe to drive from up to
    ``tcs_count`` threads at once.
    """

    def __init__(self, identity: CodeIdentity, platform: Platform, storage: ModelStore,
                 connect: Callable[[str], Transport], backend: LinearBackend | None = None,
                 fixed_overhead_bytes: int = 0, transcript: Transcript | None = None,
                 source: KeySource | None = None):
        self.identity = identity
        self.measurement = measure_code(identity)
        self.attester = platform.attester(self.measurement)
        self.verification_key = platform.verification_key
        self.storage = storage
        self.backend = backend or LinearBackend()
        self._connect = connect
        self._source = source
        self.transcript = transcript
        self.fixed_overhead_bytes = fixed_overhead_bytes

        self.tcs_count = int(identity.flag("tcs_count", 1))
        self.fixed_model = identity.flag("fixed_model") or None
        self.key_cache_enabled = bool(identity.flag("key_cache_enabled", True))
        self.model_cache_enabled = bool(identity.flag("model_cache_enabled", True))
        self.sequential_isolation = bool(identity.flag("sequential_isolation", False))
        ks = identity.flag("keyservice_measurement")
        if not ks:
            raise ValueError("runtime identity must pin the broker measurement")
        self.keyservice_measurement = Measurement.fromhex(ks)

        self._cond = threading.Condition()
        self._model: Model | None = None
        self._kc: tuple[tuple[str, Digest], tuple[SymKey, SymKey]] | None = None
        self._channels: dict[str, KeyServiceClient] = {}
        self._contexts = [_Context(i) for i in range(self.tcs_count)]
        self._active = 0
        self._active_key: tuple[str, Digest] | None = None
        self._last_seq: dict[tuple[Digest, str], int] = {}
        self._admitted = 0

        self.provisioning_calls = 0
        self.model_loads = 0
        self.runtime_inits = 0
        self.peak_memory_bytes = 0
        self.decrypted_models_resident = 0
        self.max_models_resident = 0
        self._note_memory()

    # --- introspection ---------------------------------------------------

    @property
    def handshakes(self) -> int:
        return sum(c.handshakes for c in self._channels.values())

    @property
    def loaded_model_id(self) -> str | None:
        return self._model.model_id if self._model else None

    @property
    def key_cache(self) -> tuple[str, Digest] | None:
        return self._kc[0] if self._kc else None

    def context_model(self, ctx: int) -> str | None:
        rt = self._contexts[ctx].runtime
        return rt.model_id if rt else None

    def snapshot(self, ctx: int) -> StateSnapshot:
        return StateSnapshot(self.loaded_model_id, self.key_cache, self.context_model(ctx))

    def memory_bytes(self) -> int:
        total = self.fixed_overhead_bytes
        if self._model is not None:
            total += self._model.declared_size_bytes
        return total + sum(c.runtime.buffer_bytes for c in self._contexts if c.runtime)

    def _note_memory(self) -> None:
        self.peak_memory_bytes = max(self.peak_memory_bytes, self.memory_bytes())

    def free_contexts(self) -> list[int]:
        with self._cond:
            return [c.index for c in self._contexts if not c.busy]

    # --- ecalls ------------------------------------------------------------

    def ec_model_inf(self, req: InferenceRequest, ctx: int, *, sandbox_new: bool | None = None,
                     block: bool = True) -> InvocationPath:
        slot = self._contexts[ctx]
        group = (req.model_id, req.user_id)
        with self._cond:
            if slot.busy:
                raise RuntimeError(f"context {ctx} is in use")
            if self.fixed_model and req.model_id != self.fixed_model:
                raise RequestRejected("this enclave serves a fixed model")
            # one (model, user) group in flight at a time: a different user or
            # model waits until in-flight contexts drain
            while self._active and self._active_key != group:
                if not block:
                    raise EnclaveBusy()
                self._cond.wait()
            if sandbox_new is None:
                sandbox_new = self._admitted == 0
            self._admitted += 1
            path = classify_invocation(sandbox_new, self.snapshot(ctx), req)
            self._active += 1
            self._active_key = group
            slot.busy = True
            slot.output = None
            try:
                k_m, k_r = self._keys_for(req)
                if self.loaded_model_id != req.model_id:
                    self._swap_model(req.model_id, k_m)
                model = self._model
            except BaseException:
                self._leave(slot)
                raise
        try:
            if slot.runtime is None or slot.runtime.model_id != req.model_id:
                slot.runtime = self.backend.runtime_init(model)
                with self._cond:
                    self.runtime_inits += 1
                    self._note_memory()
            try:
                data = aead_decrypt(k_r, req.payload, request_aad(req.model_id, req.user_id, req.seq))
            except CryptoError:
                raise RequestRejected("request failed integrity check") from None
            with self._cond:
                last = self._last_seq.get((req.user_id, req.model_id), -1)
                if req.seq <= last:
                    raise ReplayRejected("stale sequence number")
                self._last_seq[(req.user_id, req.model_id)] = req.seq
            self.backend.model_exec(data, model, slot.runtime)
            result = self.backend.prepare_output(slot.runtime)
            slot.output = aead_encrypt(k_r, result, result_aad(req.model_id, req.user_id, req.seq))
        finally:
            with self._cond:
                self._after_request(slot)
                self._leave(slot)
        return path

    def ec_get_output(self, ctx: int) -> AeadEnvelope:
        env = self._contexts[ctx].output
        if env is None:
            raise NoOutput(f"no pending output on context {ctx}")
        record(self.transcript, "enclave.output", env.to_bytes())
        return env

    def ec_clear_exec_ctx(self, ctx: int) -> None:
        slot = self._contexts[ctx]
        with self._cond:
            if slot.busy:
                raise RuntimeError("context is mid-inference")
            slot.runtime = None
            slot.output = None
            if (self.sequential_isolation or not self.key_cache_enabled) and not self._active:
                self._kc = None

    # --- internals -----------------------------------------------------

    def _leave(self, slot: _Context) -> None:
        slot.busy = False
        self._active -= 1
        if not self._active:
            self._active_key = None
        self._cond.notify_all()

    def _after_request(self, slot: _Context) -> None:
        if self.sequential_isolation:
            slot.runtime = None
        last_out = self._active == 1
        if not self.model_cache_enabled:
            slot.runtime = None
            if last_out:
                self._drop_model()
        if not self.key_cache_enabled and last_out:
            self._kc = None

    def _keys_for(self, req: InferenceRequest) -> tuple[SymKey, SymKey]:
        group = (req.model_id, req.user_id)
        if self._kc is not None and self._kc[0] == group:
            return self._kc[1]
        client = self._channel(req.keyservice_addr)
        self.provisioning_calls += 1
        try:
            k_m, k_r = client.provision(req.user_id, req.model_id)
        except ProvisionDenied:
            raise RequestRejected("key provisioning denied") from None
        self._kc = (group, (k_m, k_r))
        return k_m, k_r

    def _channel(self, addr: str) -> KeyServiceClient:
        client = self._channels.get(addr)
        if client is None:
            client = KeyServiceClient(self._connect(addr), self.verification_key, self.keyservice_measurement,
                                      attester=self.attester, source=self._source)
            client.connect()
            self._channels[addr] = client
        return client

    def _swap_model(self, model_id: str, k_m: SymKey) -> None:
        # callers hold the lock and no other context is using the old model
        self._drop_model()
        self._model = self.model_load(model_id, k_m)
        self.model_loads += 1
        self.decrypted_models_resident += 1
        self.max_models_resident = max(self.max_models_resident, self.decrypted_models_resident)
        for c in self._contexts:
            if c.runtime is not None and c.runtime.model_id != model_id and not c.busy:
                c.runtime = None
        self._note_memory()

    def _drop_model(self) -> None:
        if self._model is not None:
            self._model = None
            self.decrypted_models_resident -= 1

    def model_load(self, model_id: str, k_m: SymKey) -> Model:
        data = self.storage.oc_load_model(model_id)
        try:
            return decrypt_model_file(bytes(data), k_m, self.storage.declared_size(model_id))
        except CryptoError:
            raise RequestRejected("model failed integrity check") from None
        finally:
            self.storage.oc_free_loaded(model_id)


# --- memory model --------------------------------------------------------

def shared_enclave_bytes(k: int, model_bytes: int, buffer_bytes: int, overhead_bytes: int = 0) -> int:
    """One enclave with ``k`` contexts sharing a single model copy."""
    return model_bytes + k * buffer_bytes + overhead_bytes


def separate_enclaves_bytes(k: int, model_bytes: int, buffer_bytes: int, overhead_bytes: int = 0) -> int:
    return k * (model_bytes + buffer_bytes + overhead_bytes)


def memory_saving(k: int, model_bytes: int, buffer_bytes: int, overhead_bytes: int = 0) -> Fraction:
    """Exact fraction of memory saved by sharing one enclave across ``k``."""
    shared = shared_enclave_bytes(k, model_bytes, buffer_bytes, overhead_bytes)
    separate = separate_enclaves_bytes(k, model_bytes, buffer_bytes, overhead_bytes)
    return 1 - Fraction(shared, separate)


def required_memory_mb(model_mb: float, buffer_mb: float, tcs_count: int, overhead_mb: float = 0.0) -> float:
    """Enclave memory for one instance: decrypted model plus its encrypted
    copy during load, one runtime buffer per context, fixed overhead."""
    return 2 * model_mb + tcs_count * buffer_mb + overhead_mb


def memory_budget_mb(required_mb: float, granularity_mb: int = 128) -> int:
    """Smallest multiple of ``granularity_mb`` that fits ``required_mb``."""
    return max(1, math.ceil(required_mb / granularity_mb)) * granularity_mb


def result_to_json(env: AeadEnvelope, path: InvocationPath) -> dict:
    return {"result_b64": b64e(env.to_bytes()), "path": path.value}
