"""Build and run simulations from an :class:`ExperimentConfig`."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..fnpacker import FnPacker, FnPool
from ..simulator import FunctionSpec, Policy, SimResult, Simulator
from ..workload import Trace, interactive_sessions, merge, mmpp_trace, poisson_trace, read_trace
from . import analysis
from .config import ExperimentConfig, load_config

CSV_COLUMNS = ("request_id", "submit_ms", "complete_ms", "latency_ms", "path", "endpoint", "instance", "node",
               "model_id", "user_id", "group", "queue_ms", "model_switch", "error")


def build_trace(cfg: ExperimentConfig, base_dir: Path | None = None) -> Trace:
    parts = []
    for i, w in enumerate(cfg.workload):
        rng = np.random.default_rng([cfg.seed, i])
        if w.kind == "poisson":
            parts.append(poisson_trace(w.rate_rps, w.duration_s, w.user, w.model, rng, w.start_s))
        elif w.kind == "mmpp":
            parts.append(mmpp_trace(w.rate_low, w.rate_high, w.switch_interval_s, w.duration_s, rng,
                                    w.users, w.models))
        elif w.kind == "sessions":
            parts.append(interactive_sessions(w.models, w.session_times_s, w.gap_ms, w.user))
        else:
            p = Path(w.path)
            parts.append(read_trace(p if p.is_absolute() or base_dir is None else base_dir / p))
    return merge(*parts)


def build_endpoints(cfg: ExperimentConfig) -> tuple[list[FunctionSpec], FnPacker | None]:
    profiles = cfg.model_profiles()
    pol = cfg.policy
    models = sorted(cfg.models)

    def budget(ms) -> int:
        if pol.memory_budget_mb is not None:
            return pol.memory_budget_mb
        return max(profiles[cfg.models[m]].budget_mb(pol.tcs_count) for m in ms)

    def spec(ep, ms, fixed=None) -> FunctionSpec:
        return FunctionSpec(ep, tuple(ms), Policy(pol.kind), pol.tcs_count, budget(ms), fixed)

    mode = cfg.deployment.mode
    if mode == "one_to_one":
        return [spec(f"ep-{m}", [m], fixed=m) for m in models], None
    if mode == "all_in_one":
        return [spec("ep-all", models)], None
    pool = FnPool.create("pool", models, budget(models), cfg.deployment.endpoints)
    router = FnPacker(cfg.deployment.idle_interval_ms)
    router.deploy_pool(pool)
    return [spec(ep, models) for ep in pool.endpoints], router


def simulate(cfg: ExperimentConfig, trace: Trace | None = None, base_dir: Path | None = None) -> SimResult:
    trace = build_trace(cfg, base_dir) if trace is None else trace
    specs, router = build_endpoints(cfg)
    sim = Simulator(specs, cfg.model_profiles(), cfg.models, cfg.stage_costs(),
                    nodes=cfg.cluster.nodes, invoker_memory_mb=cfg.cluster.invoker_memory_mb,
                    router=router, keep_warm_s=cfg.cluster.keep_warm_s, seed=cfg.seed,
                    horizon_ms=cfg.horizon_s * 1000.0 if cfg.horizon_s else None,
                    verify_results=cfg.verify_results)
    return sim.run(trace)


def metric_rows(result: SimResult) -> list[dict]:
    rows = []
    for r in sorted(result.requests, key=lambda r: r.request_id):
        done = r.complete_ms is not None and r.complete_ms <= result.horizon_ms
        rows.append({
            "request_id": r.request_id,
            "submit_ms": r.submit_ms,
            "complete_ms": r.complete_ms if done else None,
            "latency_ms": r.latency_ms if done else None,
            "path": (r.path.value if r.path else "") if done else "queued",
            "endpoint": r.endpoint_id,
            "instance": r.instance.instance_id if r.instance else "",
            "node": r.instance.node.index if r.instance else "",
            "model_id": r.event.model_id,
            "user_id": r.event.user_id,
            "group": r.event.group,
            "queue_ms": r.queue_ms if done else None,
            "model_switch": int(r.model_switch),
            "error": r.error,
        })
    return rows


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.3f}"
    return str(v)


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def rows_from_csv(text: str) -> list[dict]:
    out = []
    for r in csv.DictReader(io.StringIO(text)):
        row = dict(r)
        for k in ("submit_ms", "complete_ms", "latency_ms", "queue_ms"):
            row[k] = float(row[k]) if row.get(k) else None
        row["request_id"] = int(row["request_id"])
        out.append(row)
    return out


def _mmpp_onset(cfg: ExperimentConfig) -> tuple[float, float] | None:
    for w in cfg.workload:
        if w.kind == "mmpp" and w.rate_high > w.rate_low and w.duration_s > w.switch_interval_s:
            onset = w.switch_interval_s * 1000.0
            return onset, min(onset + w.switch_interval_s * 1000.0, w.duration_s * 1000.0)
    return None


def summarize(cfg: ExperimentConfig, result: SimResult, rows: list[dict]) -> dict:
    a = cfg.analysis
    warm = a.warmup_s * 1000.0
    measured = [r for r in rows if r["submit_ms"] >= warm]
    out = {
        "requests": len(rows),
        "completed": len(analysis.completed(rows)),
        "queued_at_horizon": sum(1 for r in rows if r["latency_ms"] is None),
        "errors": sum(1 for r in rows if r["error"]),
        "latency": analysis.latency_summary(measured),
        "paths": analysis.path_counts(rows),
        "mean_ms_by_path": analysis.mean_by_path(rows),
        "by_model": {m: analysis.latency_summary(rs) for m, rs in analysis.by_key(measured, "model_id").items()},
        "by_group": {g: {"paths": analysis.path_counts(rs), "latency": analysis.latency_summary(rs)}
                     for g, rs in analysis.by_key(rows, "group").items() if g},
        "ungrouped_latency": analysis.latency_summary([r for r in measured if not r["group"]]),
        "model_switches": sum(r["model_switch"] for r in rows),
        "cold_starts": result.cold_starts,
        "evictions": result.evictions,
        "router_errors": result.router_errors,
        "gb_seconds": result.ledger.account(result.horizon_ms),
        "horizon_ms": result.horizon_ms,
    }
    burst = _mmpp_onset(cfg)
    if burst is not None:
        out["burst"] = analysis.burst_recovery(
            rows, burst[0], burst[1], baseline_ms=a.baseline_s * 1000.0, window_ms=a.window_s * 1000.0,
            factor=a.recovery_factor, limit_ms=a.recovery_limit_s * 1000.0)
    return _finite(out)


def _finite(obj):
    """Round floats for byte-stable JSON and map infinities to None."""
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_finite(v) for v in obj]
    if isinstance(obj, float):
        return round(obj, 6) if math.isfinite(obj) else None
    return obj


@dataclass
class RunOutput:
    name: str
    config: ExperimentConfig
    rows: list[dict]
    summary: dict
    csv: str


def run_config(path: str | Path, seed: int | None = None, out_dir: str | Path | None = None,
               only: list[str] | None = None) -> list[RunOutput]:
    """Run every variant in the config file; write ``<run>.csv`` and
    ``summary.json`` under ``out_dir`` when given."""
    path = Path(path)
    outputs = []
    for name, cfg in load_config(path, seed):
        if only and name not in only:
            continue
        result = simulate(cfg, base_dir=path.parent)
        rows = metric_rows(result)
        outputs.append(RunOutput(name, cfg, rows, summarize(cfg, result, rows), rows_to_csv(rows)))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for o in outputs:
            (out / f"{o.name}.csv").write_text(o.csv)
        summary = {"config": path.name, "seed": outputs[0].config.seed if outputs else seed,
                   "runs": {o.name: o.summary for o in outputs}}
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return outputs
