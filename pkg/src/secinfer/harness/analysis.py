"""Latency statistics over metric rows.

Rows are mappings with at least ``submit_ms``, ``latency_ms`` (None when the
request did not finish), ``path`` and ``model_id``.
"""
from __future__ import annotations

from collections import Counter
from collections.abc import Iterable, Mapping, Sequence

import numpy as np

PATHS = ("cold", "warm", "hot")


def percentile(values: Sequence[float], q: float) -> float | None:
    if len(values) == 0:
        return None
    a = np.asarray(values, dtype=float)
    if np.isinf(a).any():
        # interpolating towards inf yields nan; an unbounded neighbour makes the quantile unbounded
        hi = float(np.percentile(a, q, method="higher"))
        if np.isinf(hi):
            return hi
    return float(np.percentile(a, q))


def completed(rows: Iterable[Mapping]) -> list[Mapping]:
    return [r for r in rows if r.get("latency_ms") is not None]


def latency_summary(rows: Iterable[Mapping]) -> dict:
    lat = [r["latency_ms"] for r in completed(rows)]
    return {
        "count": len(lat),
        "mean_ms": float(np.mean(lat)) if lat else None,
        "p50_ms": percentile(lat, 50),
        "p95_ms": percentile(lat, 95),
        "max_ms": max(lat) if lat else None,
    }


def path_counts(rows: Iterable[Mapping]) -> dict[str, int]:
    c = Counter(r["path"] for r in rows if r.get("path"))
    return {p: c.get(p, 0) for p in (*PATHS, *sorted(set(c) - set(PATHS)))}


def by_key(rows: Iterable[Mapping], key: str) -> dict[str, list[Mapping]]:
    out: dict[str, list[Mapping]] = {}
    for r in rows:
        out.setdefault(r.get(key) or "", []).append(r)
    return dict(sorted(out.items()))


def mean_by_path(rows: Iterable[Mapping]) -> dict[str, float]:
    groups = by_key(completed(rows), "path")
    return {p: float(np.mean([r["latency_ms"] for r in rs])) for p, rs in groups.items()}


def window_p95(rows: Sequence[Mapping], start_ms: float, end_ms: float) -> float | None:
    """p95 latency of requests submitted in [start_ms, end_ms)."""
    lat = [r["latency_ms"] for r in completed(rows) if start_ms <= r["submit_ms"] < end_ms]
    # unfinished requests in the window count as unbounded latency
    unfinished = sum(1 for r in rows if r.get("latency_ms") is None and start_ms <= r["submit_ms"] < end_ms)
    lat += [float("inf")] * unfinished
    return percentile(lat, 95)


def windowed_p95(rows: Sequence[Mapping], start_ms: float, end_ms: float, window_ms: float,
                 step_ms: float | None = None) -> list[tuple[float, float | None]]:
    step = step_ms or window_ms
    out = []
    t = start_ms
    while t + window_ms <= end_ms + 1e-9:
        out.append((t, window_p95(rows, t, t + window_ms)))
        t += step
    return out


def burst_recovery(rows: Sequence[Mapping], onset_ms: float, burst_end_ms: float, *, baseline_ms: float = 30_000,
                   window_ms: float = 5_000, step_ms: float = 1_000, factor: float = 1.5,
                   limit_ms: float = 30_000) -> dict:
    """How long windowed p95 stays above ``factor`` x the pre-burst p95.

    The baseline is the p95 of requests submitted in the ``baseline_ms``
    before ``onset_ms``. Recovery time is the start of the first window from
    which every window until ``burst_end_ms`` is back under the threshold;
    the run recovered if that is within ``limit_ms`` of the onset.
    """
    baseline = window_p95(rows, onset_ms - baseline_ms, onset_ms)
    if baseline is None:
        return {"baseline_p95_ms": None, "recovery_s": None, "recovered": False, "peak_p95_ms": None}
    threshold = factor * baseline
    windows = windowed_p95(rows, onset_ms, burst_end_ms, window_ms, step_ms)
    recovered_at = None
    for t, p in reversed(windows):
        if p is not None and p > threshold:
            break
        recovered_at = t
    peaks = [p for _, p in windows if p is not None]
    recovery = None if recovered_at is None else (recovered_at - onset_ms) / 1000.0
    return {
        "baseline_p95_ms": baseline,
        "threshold_ms": threshold,
        "peak_p95_ms": max(peaks) if peaks else None,
        "recovery_s": recovery,
        "recovered": recovery is not None and recovery * 1000.0 <= limit_ms,
    }
