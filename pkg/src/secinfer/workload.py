"""Seeded request-trace generators and the trace CSV format.

A trace is a time-ordered list of :class:`TraceEvent`. Events with a
non-empty ``group`` belong to a closed-loop session: the harness issues each
one only after the previous event of the same group has completed, and
``t_ms`` is then the earliest issue time.
"""
from __future__ import annotations

import csv
import heapq
import io
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True, order=True)
class TraceEvent:
    t_ms: float
    user_id: str
    model_id: str
    group: str = ""


Trace = list[TraceEvent]


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _arrivals(rng: np.random.Generator, rate_rps: float, start_ms: float, end_ms: float) -> list[float]:
    if rate_rps <= 0 or end_ms <= start_ms:
        return []
    mean_ms = 1000.0 / rate_rps
    out = []
    t = start_ms
    while True:
        t += rng.exponential(mean_ms)
        if t >= end_ms:
            return out
        out.append(t)


def poisson_trace(rate_rps: float, duration_s: float, user: str = "u0", model: str = "m0",
                  seed=0, start_s: float = 0.0) -> Trace:
    """Exponential inter-arrivals with mean ``1/rate_rps`` over ``duration_s``."""
    if rate_rps < 0:
        raise ValueError("rate must be nonnegative")
    start = start_s * 1000.0
    times = _arrivals(_rng(seed), rate_rps, start, start + duration_s * 1000.0)
    return [TraceEvent(t, user, model) for t in times]


def mmpp_trace(rate_low: float = 20.0, rate_high: float = 40.0, switch_interval_s: float = 60.0,
               duration_s: float = 600.0, seed=0, users: Sequence[str] = ("u0",),
               models: Sequence[str] = ("m0",), start_high: bool = False) -> Trace:
    """Two-state modulated Poisson arrivals alternating every ``switch_interval_s``.

    Each arrival picks its user and model uniformly from ``users``/``models``.
    """
    if rate_low < 0 or rate_high < 0:
        raise ValueError("rates must be nonnegative")
    if switch_interval_s <= 0:
        raise ValueError("switch interval must be positive")
    rng = _rng(seed)
    end = duration_s * 1000.0
    step = switch_interval_s * 1000.0
    out: Trace = []
    high = start_high
    t0 = 0.0
    while t0 < end:
        t1 = min(t0 + step, end)
        for t in _arrivals(rng, rate_high if high else rate_low, t0, t1):
            u = users[int(rng.integers(len(users)))] if len(users) > 1 else users[0]
            m = models[int(rng.integers(len(models)))] if len(models) > 1 else models[0]
            out.append(TraceEvent(t, u, m))
        high = not high
        t0 = t1
    return out


def interactive_sessions(models: Sequence[str], session_times_s: Iterable[float], gap_ms: float = 0.0,
                         user: str = "interactive") -> Trace:
    """At each session time, one request per model in order.

    Events carry a per-session group so the harness runs them closed-loop;
    ``gap_ms`` is the think time between a response and the next query.
    """
    if not models:
        raise ValueError("models must be nonempty")
    out: Trace = []
    for i, ts in enumerate(session_times_s):
        for j, m in enumerate(models):
            out.append(TraceEvent(ts * 1000.0 + j * gap_ms, user, m, f"session{i + 1}"))
    return out


def merge(*traces: Trace) -> Trace:
    """Stable time-ordered merge; ties keep argument order."""
    keyed = ([(ev.t_ms, i, k, ev) for k, ev in enumerate(tr)] for i, tr in enumerate(traces))
    return [item[-1] for item in heapq.merge(*keyed)]


# --- CSV ---------------------------------------------------------------------

HEADER = ("t_ms", "user_id", "model_id", "group")


def dumps_trace(trace: Trace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEADER)
    for ev in trace:
        w.writerow((f"{ev.t_ms:.3f}", ev.user_id, ev.model_id, ev.group))
    return buf.getvalue()


def loads_trace(text: str) -> Trace:
    rows = csv.reader(io.StringIO(text))
    out: Trace = []
    for row in rows:
        if not row or row[0] == "t_ms":
            continue
        if len(row) < 3:
            raise ValueError(f"trace row needs t_ms,user_id,model_id: {row!r}")
        out.append(TraceEvent(float(row[0]), row[1], row[2], row[3] if len(row) > 3 else ""))
    if any(b.t_ms < a.t_ms for a, b in zip(out, out[1:])):
        raise ValueError("trace timestamps must be nondecreasing")
    return out


def write_trace(path: str | Path, trace: Trace) -> None:
    Path(path).write_text(dumps_trace(trace))


def read_trace(path: str | Path) -> Trace:
    return loads_trace(Path(path).read_text())
