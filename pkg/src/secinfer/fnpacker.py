"""Multi-model request router.

Models in a pool share a set of endpoints with one code identity and memory
budget. A model with responses outstanding keeps its endpoint to itself;
other models go to the first endpoint that is not busy, which packs rarely
used models onto a shared endpoint instead of cold-starting one per model.
The router only sees routing metadata, never plaintext.
"""
from __future__ import annotations

import threading
from collections.abc import Iterable
from dataclasses import dataclass, field

IDLE_FLOOR_MS = 10_000.0
EWMA_ALPHA = 0.2


class PoolError(Exception):
    pass


@dataclass(frozen=True)
class FnPool:
    pool_id: str
    models: tuple[str, ...]
    memory_budget_mb: int
    endpoints: tuple[str, ...] = ()

    @classmethod
    def create(cls, pool_id: str, models: Iterable[str], memory_budget_mb: int,
               n_endpoints: int | None = None) -> "FnPool":
        models = tuple(models)
        if not models:
            raise PoolError("a pool needs at least one model")
        n = n_endpoints if n_endpoints is not None else min(len(models), 4)
        if n < 1:
            raise PoolError("a pool needs at least one endpoint")
        return cls(pool_id, models, memory_budget_mb, tuple(f"{pool_id}-ep{i}" for i in range(n)))


@dataclass
class EndpointStats:
    endpoint_id: str
    pending: dict[str, int] = field(default_factory=dict)
    last_invocation: dict[str, float] = field(default_factory=dict)
    last_request_ms: float | None = None
    exclusive_for: str | None = None
    exclusive_since: float | None = None
    latency_ewma: dict[tuple[str, str], float] = field(default_factory=dict)

    @property
    def total_pending(self) -> int:
        return sum(self.pending.values())

    def to_json(self) -> dict:
        return {
            "endpoint_id": self.endpoint_id,
            "pending": dict(sorted(self.pending.items())),
            "last_invocation": dict(sorted(self.last_invocation.items())),
            "last_request_ms": self.last_request_ms,
            "exclusive_for": self.exclusive_for,
            "exclusive_since": self.exclusive_since,
            "latency_ewma": {f"{m}/{p}": v for (m, p), v in sorted(self.latency_ewma.items())},
        }


@dataclass
class ModelStats:
    model_id: str
    pending: int = 0
    last_invocation: float | None = None
    latency: dict[str, float] = field(default_factory=dict)


class FnPacker:
    """Router state for any number of pools; every call is atomic.

    ``idle_interval_ms`` fixes the reclaim interval for exclusive endpoints;
    by default it is twice the exclusive model's hot-latency average, and
    never less than 10 s.
    """

    def __init__(self, idle_interval_ms: float | None = None):
        self.idle_interval_ms = idle_interval_ms
        self.pools: dict[str, FnPool] = {}
        self.endpoints: dict[str, EndpointStats] = {}
        self._pool_of_model: dict[str, str] = {}
        self._lock = threading.Lock()
        self.errors = 0
        self.routed = 0
        self.overflows = 0

    def deploy_pool(self, pool: FnPool, platform=None) -> list[str]:
        """Register ``pool``; ``platform.register_endpoint(endpoint_id, pool)``
        is called for each endpoint when a platform is given."""
        with self._lock:
            if pool.pool_id in self.pools:
                raise PoolError(f"pool {pool.pool_id!r} already deployed")
            clash = [m for m in pool.models if m in self._pool_of_model]
            if clash:
                raise PoolError(f"models already pooled: {clash}")
            self.pools[pool.pool_id] = pool
            for m in pool.models:
                self._pool_of_model[m] = pool.pool_id
            for ep in pool.endpoints:
                self.endpoints[ep] = EndpointStats(ep)
        if platform is not None:
            for ep in pool.endpoints:
                platform.register_endpoint(ep, pool)
        return list(pool.endpoints)

    def pool_for(self, model_id: str) -> FnPool:
        try:
            return self.pools[self._pool_of_model[model_id]]
        except KeyError:
            raise PoolError(f"model {model_id!r} is not in any pool") from None

    def idle_interval(self, st: EndpointStats) -> float:
        if self.idle_interval_ms is not None:
            return self.idle_interval_ms
        hot = st.latency_ewma.get((st.exclusive_for, "hot")) if st.exclusive_for else None
        return max(2 * hot, IDLE_FLOOR_MS) if hot is not None else IDLE_FLOOR_MS

    def _not_busy(self, st: EndpointStats, model_id: str, t: float) -> bool:
        if st.total_pending == 0 and st.exclusive_for in (None, model_id):
            return True
        if st.exclusive_for is not None and st.last_request_ms is not None:
            return t - st.last_request_ms >= self.idle_interval(st)
        return False

    def route(self, model_id: str, user_id: str = "", t_ms: float = 0.0) -> str:
        with self._lock:
            pool = self.pool_for(model_id)
            eps = [self.endpoints[e] for e in pool.endpoints]
            target = next((st for st in eps if st.pending.get(model_id, 0) > 0), None)
            if target is not None:
                if target.exclusive_for != model_id:
                    target.exclusive_for = model_id
                    target.exclusive_since = t_ms
            else:
                target = next((st for st in eps if self._not_busy(st, model_id, t_ms)), None)
                if target is None:
                    # everything busy: least recently used exclusive endpoint
                    self.overflows += 1
                    excl = [st for st in eps if st.exclusive_for is not None] or eps
                    target = min(excl, key=lambda st: (st.last_request_ms or 0.0, st.endpoint_id))
                elif target.exclusive_for not in (None, model_id):
                    # reclaimed after the idle interval
                    target.exclusive_for = None
                    target.exclusive_since = None
            target.pending[model_id] = target.pending.get(model_id, 0) + 1
            target.last_request_ms = t_ms
            self.routed += 1
            return target.endpoint_id

    def complete(self, model_id: str, endpoint_id: str, latency_ms: float, path: str, t_ms: float) -> None:
        with self._lock:
            st = self.endpoints.get(endpoint_id)
            if st is None or st.pending.get(model_id, 0) <= 0:
                self.errors += 1
                return
            st.pending[model_id] -= 1
            if not st.pending[model_id]:
                del st.pending[model_id]
            st.last_invocation[model_id] = t_ms
            key = (model_id, path)
            prev = st.latency_ewma.get(key)
            st.latency_ewma[key] = latency_ms if prev is None else prev + EWMA_ALPHA * (latency_ms - prev)

    def model_stats(self, model_id: str) -> ModelStats:
        with self._lock:
            ms = ModelStats(model_id)
            counts: dict[str, list[float]] = {}
            for st in self.endpoints.values():
                ms.pending += st.pending.get(model_id, 0)
                t = st.last_invocation.get(model_id)
                if t is not None and (ms.last_invocation is None or t > ms.last_invocation):
                    ms.last_invocation = t
                for (m, p), v in st.latency_ewma.items():
                    if m == model_id:
                        counts.setdefault(p, []).append(v)
            ms.latency = {p: sum(v) / len(v) for p, v in sorted(counts.items())}
            return ms

    def stats(self) -> dict:
        with self._lock:
            return {
                "endpoints": [self.endpoints[e].to_json() for e in sorted(self.endpoints)],
                "errors": self.errors,
                "routed": self.routed,
                "overflows": self.overflows,
            }
