"""Experiment configuration schema (YAML or JSON on disk).

A config describes one base experiment; each entry in ``runs`` is a partial
copy of the top level that is deep-merged over the base, so variants only
state what they change.
"""
from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Annotated, Literal, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

from ..costs import ModelProfile, StageCosts


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ClusterConfig(_Strict):
    nodes: int = Field(1, ge=1)
    invoker_memory_mb: float = Field(4096, gt=0)
    cores: int = Field(12, ge=1)
    epc_limit_mb: float | None = None
    epc_slowdown: float = Field(1.0, ge=1.0)
    keep_warm_s: float = Field(180.0, ge=0)


class CostConfig(_Strict):
    sandbox_init_ms: float = Field(300.0, ge=0)
    enclave_init_base_ms: float = Field(250.0, ge=0)
    enclave_init_ms_per_mb: float = Field(4.5, ge=0)
    enclave_init_concurrency: float = Field(0.07, ge=0)
    attestation_base_ms: float = Field(120.0, ge=0)
    attestation_per_peer_ms: float = Field(60.0, ge=0)
    key_fetch_ms: float = Field(5.0, ge=0)
    fetch_ms_per_mb: float = Field(2.0, ge=0)
    decrypt_ms_per_mb: float = Field(1.0, ge=0)
    request_decrypt_ms: float = Field(0.1, ge=0)
    result_encrypt_ms: float = Field(0.1, ge=0)


class ProfileConfig(_Strict):
    model_mb: float = Field(gt=0)
    buffer_mb: float = Field(ge=0)
    exec_ms: float = Field(ge=0)
    runtime_init_ratio: float = Field(0.0, ge=0)
    fetch_ms: float | None = Field(None, ge=0)
    overhead_mb: float = Field(0.0, ge=0)


class PolicyConfig(_Strict):
    kind: Literal["native", "iso_reuse", "full_reuse"] = "full_reuse"
    tcs_count: int = Field(1, ge=1, le=8)
    memory_budget_mb: int | None = Field(None, gt=0, multiple_of=128)

    @model_validator(mode="after")
    def _one_slot_baselines(self):
        if self.kind != "full_reuse" and self.tcs_count != 1:
            raise ValueError(f"{self.kind} runs one request per instance; tcs_count must be 1")
        return self


class DeploymentConfig(_Strict):
    mode: Literal["one_to_one", "all_in_one", "fnpacker"] = "one_to_one"
    endpoints: int | None = Field(None, ge=1)
    idle_interval_ms: float | None = Field(None, ge=0)


class PoissonSpec(_Strict):
    kind: Literal["poisson"]
    rate_rps: float = Field(ge=0)
    duration_s: float = Field(ge=0)
    user: str = "u0"
    model: str
    start_s: float = Field(0.0, ge=0)


class MmppSpec(_Strict):
    kind: Literal["mmpp"]
    rate_low: float = Field(20.0, ge=0)
    rate_high: float = Field(40.0, ge=0)
    switch_interval_s: float = Field(60.0, gt=0)
    duration_s: float = Field(ge=0)
    users: list[str] = ["u0"]
    models: list[str]


class SessionSpec(_Strict):
    kind: Literal["sessions"]
    models: list[str] = Field(min_length=1)
    session_times_s: list[float]
    gap_ms: float = Field(0.0, ge=0)
    user: str = "interactive"


class TraceFileSpec(_Strict):
    kind: Literal["trace_file"]
    path: str


WorkloadSpec = Annotated[Union[PoissonSpec, MmppSpec, SessionSpec, TraceFileSpec], Field(discriminator="kind")]


class AnalysisConfig(_Strict):
    warmup_s: float = Field(0.0, ge=0)
    window_s: float = Field(5.0, gt=0)
    recovery_limit_s: float = Field(30.0, gt=0)
    recovery_factor: float = Field(1.5, gt=0)
    baseline_s: float = Field(30.0, gt=0)


class ExperimentConfig(_Strict):
    name: str = "experiment"
    seed: int = 0
    horizon_s: float | None = Field(None, gt=0)
    cluster: ClusterConfig = ClusterConfig()
    costs: CostConfig = CostConfig()
    profiles: dict[str, ProfileConfig]
    # model id -> profile name
    models: dict[str, str]
    policy: PolicyConfig = PolicyConfig()
    deployment: DeploymentConfig = DeploymentConfig()
    workload: list[WorkloadSpec] = []
    analysis: AnalysisConfig = AnalysisConfig()
    verify_results: bool = False

    @model_validator(mode="after")
    def _check_refs(self):
        unknown = sorted(set(self.models.values()) - set(self.profiles))
        if unknown:
            raise ValueError(f"models refer to unknown profiles: {unknown}")
        for w in self.workload:
            names = [w.model] if w.kind == "poisson" else getattr(w, "models", [])
            missing = sorted(set(names) - set(self.models))
            if missing:
                raise ValueError(f"workload refers to unknown models: {missing}")
        return self

    def stage_costs(self) -> StageCosts:
        return StageCosts(**self.costs.model_dump(), physical_cores=self.cluster.cores,
                          epc_limit_mb=self.cluster.epc_limit_mb, epc_slowdown=self.cluster.epc_slowdown)

    def model_profiles(self) -> dict[str, ModelProfile]:
        return {name: ModelProfile(name, **p.model_dump()) for name, p in self.profiles.items()}


class RunSpec(_Strict):
    name: str
    overrides: dict = {}


def deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_raw(path: str | Path) -> dict:
    text = Path(path).read_text()
    data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: top level must be a mapping")
    return data


def expand(raw: dict, seed: int | None = None) -> list[tuple[str, ExperimentConfig]]:
    """Validate ``raw`` and return one config per run (the base alone if
    there are no runs)."""
    raw = dict(raw)
    runs = raw.pop("runs", None)
    if seed is not None:
        raw["seed"] = seed
    if not runs:
        cfg = ExperimentConfig.model_validate(raw)
        return [(cfg.name, cfg)]
    out = []
    seen = set()
    for r in runs:
        spec = RunSpec.model_validate({"name": r.get("name"), "overrides": {k: v for k, v in r.items() if k != "name"}})
        if spec.name in seen:
            raise ValueError(f"duplicate run name {spec.name!r}")
        seen.add(spec.name)
        merged = deep_merge(raw, spec.overrides)
        if seed is not None:
            merged["seed"] = seed
        out.append((spec.name, ExperimentConfig.model_validate(merged)))
    return out


def load_config(path: str | Path, seed: int | None = None) -> list[tuple[str, ExperimentConfig]]:
    return expand(load_raw(path), seed)
