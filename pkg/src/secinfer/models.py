"""Model representation, the encrypted model file format and the reference
linear-scorer inference backend."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .crypto import AeadEnvelope, MalformedEnvelope, SymKey, aead_decrypt, aead_encrypt, context_aad

MAGIC = b"SSMI"
FORMAT_VERSION = 1


class ExecutionError(Exception):
    """Input does not fit the model."""


@dataclass
class Model:
    model_id: str
    weights: np.ndarray
    bias: np.ndarray
    declared_size_bytes: int = 0

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype="<f8")
        self.bias = np.ascontiguousarray(self.bias, dtype="<f8")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ValueError("weights must be rows x cols with a bias of length rows")
        self.declared_size_bytes = max(self.declared_size_bytes, self.serialized_size)

    @property
    def rows(self) -> int:
        return self.weights.shape[0]

    @property
    def cols(self) -> int:
        return self.weights.shape[1]

    @property
    def serialized_size(self) -> int:
        return 8 + 8 * (self.weights.size + self.bias.size)

    def to_bytes(self) -> bytes:
        return struct.pack(">II", self.rows, self.cols) + self.weights.tobytes() + self.bias.tobytes()

    @classmethod
    def from_bytes(cls, model_id: str, data: bytes, declared_size_bytes: int = 0) -> "Model":
        if len(data) < 8:
            raise MalformedEnvelope("model payload too short")
        rows, cols = struct.unpack(">II", data[:8])
        if len(data) != 8 + 8 * (rows * cols + rows):
            raise MalformedEnvelope("model payload size mismatch")
        w = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=8).reshape(rows, cols)
        b = np.frombuffer(data, dtype="<f8", count=rows, offset=8 + 8 * rows * cols)
        return cls(model_id, w.copy(), b.copy(), declared_size_bytes)

    @classmethod
    def random(cls, model_id: str, rows: int, cols: int, rng: np.random.Generator,
               declared_size_bytes: int = 0) -> "Model":
        return cls(model_id, rng.standard_normal((rows, cols)), rng.standard_normal(rows), declared_size_bytes)


def model_aad(model_id: str) -> bytes:
    return context_aad("model", model_id, "")


def encrypt_model_file(model: Model, key: SymKey) -> bytes:
    """``SSMI`` ‖ 0x01 ‖ u16 id length ‖ id ‖ envelope(rows, cols, W, b)."""
    mid = model.model_id.encode()
    env = aead_encrypt(key, model.to_bytes(), model_aad(model.model_id))
    return MAGIC + bytes([FORMAT_VERSION]) + struct.pack(">H", len(mid)) + mid + env.to_bytes()


def parse_model_file(data: bytes) -> tuple[str, AeadEnvelope]:
    if data[:4] != MAGIC or len(data) < 7:
        raise MalformedEnvelope("not a model file")
    if data[4] != FORMAT_VERSION:
        raise MalformedEnvelope(f"unsupported model file version {data[4]}")
    (n,) = struct.unpack(">H", data[5:7])
    model_id = data[7 : 7 + n].decode()
    return model_id, AeadEnvelope.from_bytes(data[7 + n :])


def decrypt_model_file(data: bytes, key: SymKey, declared_size_bytes: int = 0) -> Model:
    model_id, env = parse_model_file(data)
    return Model.from_bytes(model_id, aead_decrypt(key, env, model_aad(model_id)), declared_size_bytes)


def encode_input(x) -> bytes:
    """u32 count (big-endian) then f64 little-endian values."""
    arr = np.ascontiguousarray(x, dtype="<f8").ravel()
    return struct.pack(">I", arr.size) + arr.tobytes()


def decode_input(data: bytes) -> np.ndarray:
    if len(data) < 4:
        raise ExecutionError("input too short")
    (n,) = struct.unpack(">I", data[:4])
    if len(data) != 4 + 8 * n:
        raise ExecutionError("input length mismatch")
    return np.frombuffer(data, dtype="<f8", offset=4).copy()


def encode_output(argmax: int, scores: np.ndarray) -> bytes:
    scores = np.ascontiguousarray(scores, dtype="<f8")
    return struct.pack(">iI", argmax, scores.size) + scores.tobytes()


def decode_output(data: bytes) -> tuple[int, np.ndarray]:
    argmax, n = struct.unpack(">iI", data[:8])
    return argmax, np.frombuffer(data, dtype="<f8", count=n, offset=8).copy()


@dataclass
class ModelRuntime:
    """Per-context inference state; bound to one model id."""

    model_id: str
    buffer_bytes: int
    scratch: np.ndarray = field(repr=False)
    initialized: bool = True
    has_output: bool = False


class LinearBackend:
    """Reference backend: ``scores = W @ x + b``.

    ``buffer_bytes`` is the runtime buffer size charged to the enclave per
    context (the scratch array itself is only ``rows`` floats).
    """

    name = "linear"

    def __init__(self, buffer_bytes: int | dict[str, int] = 0):
        self._buffer = buffer_bytes

    def buffer_bytes_for(self, model: Model) -> int:
        if isinstance(self._buffer, dict):
            return self._buffer.get(model.model_id, 0)
        return self._buffer

    def runtime_init(self, model: Model) -> ModelRuntime:
        return ModelRuntime(model.model_id, self.buffer_bytes_for(model), np.zeros(model.rows))

    def model_exec(self, data: bytes, model: Model, rt: ModelRuntime) -> None:
        if rt.model_id != model.model_id:
            raise ExecutionError("runtime belongs to another model")
        x = decode_input(data)
        if x.shape[0] != model.cols:
            raise ExecutionError(f"input has {x.shape[0]} values, model expects {model.cols}")
        np.matmul(model.weights, x, out=rt.scratch)
        rt.scratch += model.bias
        rt.has_output = True

    def prepare_output(self, rt: ModelRuntime) -> bytes:
        if not rt.has_output:
            raise ExecutionError("no output computed")
        rt.has_output = False
        return encode_output(int(np.argmax(rt.scratch)), rt.scratch)
