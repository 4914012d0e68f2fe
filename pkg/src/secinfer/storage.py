"""Untrusted model storage and the host-side staging buffers used by the
``oc_load_model`` / ``oc_free_loaded`` ocalls."""
from __future__ import annotations

import threading
from pathlib import Path

from .wire import Transcript, record


class ModelNotFound(KeyError):
    pass


class ModelStore:
    """Encrypted model files, in a directory or in memory.

    ``fetch_latency_ms`` is informational for the simulator (remote blob
    storage mode); reads here are immediate.
    """

    def __init__(self, root: str | Path | None = None, transcript: Transcript | None = None,
                 fetch_latency_ms: float = 0.0):
        self.root = Path(root) if root is not None else None
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)
        self._mem: dict[str, bytes] = {}
        self._declared: dict[str, int] = {}
        self._staged: dict[str, bytes] = {}
        self._lock = threading.Lock()
        self.transcript = transcript
        self.fetch_latency_ms = fetch_latency_ms

    def _path(self, model_id: str) -> Path:
        safe = "".join(c if c.isalnum() or c in "-_." else "_" for c in model_id)
        return self.root / f"{safe}.ssmi"

    def put(self, model_id: str, data: bytes, declared_size_bytes: int = 0) -> None:
        record(self.transcript, f"storage/{model_id}", data)
        with self._lock:
            if self.root is not None:
                self._path(model_id).write_bytes(data)
            else:
                self._mem[model_id] = bytes(data)
            if declared_size_bytes:
                self._declared[model_id] = declared_size_bytes

    def get(self, model_id: str) -> bytes:
        with self._lock:
            if self.root is not None:
                p = self._path(model_id)
                if not p.exists():
                    raise ModelNotFound(model_id)
                return p.read_bytes()
            try:
                return self._mem[model_id]
            except KeyError:
                raise ModelNotFound(model_id) from None

    def declared_size(self, model_id: str) -> int:
        return self._declared.get(model_id, 0)

    def __contains__(self, model_id: str) -> bool:
        try:
            self.get(model_id)
        except ModelNotFound:
            return False
        return True

    # --- ocalls ----------------------------------------------------------

    def oc_load_model(self, model_id: str) -> bytes:
        data = self.get(model_id)
        with self._lock:
            self._staged[model_id] = data
        record(self.transcript, f"staging/{model_id}", data)
        return data

    def oc_free_loaded(self, model_id: str) -> None:
        with self._lock:
            self._staged.pop(model_id, None)

    @property
    def staged_bytes(self) -> int:
        with self._lock:
            return sum(len(v) for v in self._staged.values())
