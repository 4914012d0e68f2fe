"""Stage-cost latency model, per-model profiles and GB-second accounting."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

from .runtime import memory_budget_mb, required_memory_mb


@dataclass(frozen=True)
class ModelProfile:
    """Timing and size parameters of one model family.

    ``exec_ms`` is the hot execution time on an uncontended core;
    ``runtime_init_ratio`` scales it to get runtime initialization time.
    ``fetch_ms`` overrides the per-MB storage cost (remote blob storage).
    """

    name: str
    model_mb: float
    buffer_mb: float
    exec_ms: float
    runtime_init_ratio: float = 0.0
    fetch_ms: float | None = None
    overhead_mb: float = 0.0

    def required_mb(self, tcs_count: int) -> float:
        return required_memory_mb(self.model_mb, self.buffer_mb, tcs_count, self.overhead_mb)

    def budget_mb(self, tcs_count: int) -> int:
        return memory_budget_mb(self.required_mb(tcs_count))


@dataclass(frozen=True)
class StageCosts:
    sandbox_init_ms: float = 300.0
    enclave_init_base_ms: float = 250.0
    enclave_init_ms_per_mb: float = 4.5
    enclave_init_concurrency: float = 0.07
    attestation_base_ms: float = 120.0
    attestation_per_peer_ms: float = 60.0
    key_fetch_ms: float = 5.0
    fetch_ms_per_mb: float = 2.0
    decrypt_ms_per_mb: float = 1.0
    request_decrypt_ms: float = 0.1
    result_encrypt_ms: float = 0.1
    physical_cores: int = 12
    epc_limit_mb: float | None = None
    epc_slowdown: float = 1.0

    def __post_init__(self):
        for name, v in vars(self).items():
            if isinstance(v, (int, float)) and v < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.physical_cores < 1:
            raise ValueError("physical_cores must be at least 1")

    def enclave_init_ms(self, enclave_mb: float, concurrent_launches: int = 1) -> float:
        base = self.enclave_init_base_ms + self.enclave_init_ms_per_mb * enclave_mb
        return base * (1 + self.enclave_init_concurrency * (max(concurrent_launches, 1) - 1))

    def attestation_ms(self, concurrent: int = 1) -> float:
        return self.attestation_base_ms + self.attestation_per_peer_ms * (max(concurrent, 1) - 1)

    def model_fetch_ms(self, p: ModelProfile) -> float:
        return p.fetch_ms if p.fetch_ms is not None else self.fetch_ms_per_mb * p.model_mb

    def model_decrypt_ms(self, p: ModelProfile) -> float:
        return self.decrypt_ms_per_mb * p.model_mb

    def runtime_init_ms(self, p: ModelProfile) -> float:
        return p.exec_ms * p.runtime_init_ratio

    def exec_ms(self, p: ModelProfile, concurrent_execs: int = 1, node_enclave_mb: float = 0.0) -> float:
        t = p.exec_ms * max(1.0, concurrent_execs / self.physical_cores)
        if self.epc_limit_mb is not None and node_enclave_mb > self.epc_limit_mb:
            t *= self.epc_slowdown
        return t

    def cold_total_ms(self, p: ModelProfile, enclave_mb: float) -> float:
        """Uncontended latency of a request that starts a new sandbox."""
        return (self.sandbox_init_ms + self.enclave_init_ms(enclave_mb) + self.attestation_ms()
                + self.model_fetch_ms(p) + self.model_decrypt_ms(p) + self.runtime_init_ms(p)
                + self.hot_total_ms(p))

    def hot_total_ms(self, p: ModelProfile) -> float:
        return self.request_decrypt_ms + self.exec_ms(p) + self.result_encrypt_ms


@dataclass
class LedgerRecord:
    instance_id: str
    endpoint_id: str
    memory_mb: float
    start_ms: float
    end_ms: float | None = None


@dataclass
class CostLedger:
    """Lifetime of every sandbox instance and its memory budget."""

    records: list[LedgerRecord] = field(default_factory=list)

    def open(self, instance_id: str, endpoint_id: str, memory_mb: float, t_ms: float) -> LedgerRecord:
        rec = LedgerRecord(instance_id, endpoint_id, memory_mb, t_ms)
        self.records.append(rec)
        return rec

    def close(self, rec: LedgerRecord, t_ms: float) -> None:
        if rec.end_ms is not None:
            raise ValueError(f"instance {rec.instance_id} already closed")
        if t_ms < rec.start_ms:
            raise ValueError("instance cannot end before it starts")
        rec.end_ms = t_ms

    def account(self, horizon_ms: float | None = None) -> float:
        """Total GB-seconds; open records (and anything past the horizon)
        are clipped at ``horizon_ms``."""
        terms = []
        for r in self.records:
            end = r.end_ms
            if horizon_ms is not None:
                end = horizon_ms if end is None else min(end, horizon_ms)
            elif end is None:
                raise ValueError("open records need a horizon")
            dur = max(0.0, end - r.start_ms)
            terms.append(r.memory_mb / 1024.0 * dur / 1000.0)
        return math.fsum(terms)

    def by_endpoint(self, horizon_ms: float | None = None) -> dict[str, float]:
        out: dict[str, float] = {}
        for ep in sorted({r.endpoint_id for r in self.records}):
            sub = CostLedger([r for r in self.records if r.endpoint_id == ep])
            out[ep] = sub.account(horizon_ms)
        return out


def account(ledger: CostLedger, horizon_ms: float | None = None) -> float:
    return ledger.account(horizon_ms)
