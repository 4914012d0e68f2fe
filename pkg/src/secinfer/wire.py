"""Recording of everything that crosses the untrusted side.

Tests attach a :class:`Transcript` to services, storage and hosts and then
scan it for secrets. Production code passes ``None`` and pays nothing.
"""
from __future__ import annotations

import base64
import logging
import threading


class Transcript:
    def __init__(self):
        self._lock = threading.Lock()
        self.chunks: list[tuple[str, bytes]] = []

    def record(self, where: str, data: bytes | str) -> None:
        if isinstance(data, str):
            data = data.encode()
        with self._lock:
            self.chunks.append((where, bytes(data)))

    def blob(self) -> bytes:
        with self._lock:
            return b"\x00".join(d for _, d in self.chunks)

    def count(self, needle: bytes) -> int:
        """Occurrences of ``needle`` raw, hex-encoded or base64-encoded."""
        blob = self.blob()
        forms = {needle, needle.hex().encode(), base64.b64encode(needle)}
        # base64 of an unaligned canary can start at any of 3 offsets; check the
        # stable inner part of each alignment.
        for shift in range(3):
            enc = base64.b64encode(b"\x00" * shift + needle)[4:-4]
            if len(enc) >= 16:
                forms.add(enc)
        return sum(blob.count(f) for f in forms)

    def __len__(self) -> int:
        return len(self.chunks)


def record(transcript: Transcript | None, where: str, data) -> None:
    if transcript is not None:
        transcript.record(where, data)


class TranscriptLogHandler(logging.Handler):
    """Copies formatted log records into a transcript."""

    def __init__(self, transcript: Transcript):
        super().__init__(logging.DEBUG)
        self.transcript = transcript

    def emit(self, rec: logging.LogRecord) -> None:
        self.transcript.record("log", self.format(rec))


def b64e(data: bytes) -> str:
    return base64.b64encode(data).decode()


def b64d(text: str) -> bytes:
    return base64.b64decode(text.encode(), validate=True)
