"""Command-line entry point: ``secinfer <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading
import time
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from ..attestation import AttestationError, Measurement, measure_code
from ..clients import OwnerClient, OwnerContext, UserClient, UserContext
from ..crypto import AeadEnvelope, Digest, SymKey
from ..keyservice import KeyServiceClient, KeyServiceError
from ..models import Model, encrypt_model_file
from ..runtime import InferenceRequest
from ..storage import ModelStore
from ..wire import b64d, b64e
from ..workload import read_trace
from . import live, report
from .config import load_config
from .simulate import metric_rows, rows_to_csv, run_config, simulate, summarize

log = logging.getLogger("secinfer")


# --- local key files -----------------------------------------------------------

def _write_private(path: Path, obj: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)


def _load_owner(path: Path) -> OwnerContext:
    if not path.exists():
        return OwnerContext(SymKey.generate())
    d = json.loads(path.read_text())
    return OwnerContext(SymKey(b64d(d["identity_key"])),
                        {m: SymKey(b64d(k)) for m, k in d.get("model_keys", {}).items()})


def _save_owner(path: Path, ctx: OwnerContext) -> None:
    _write_private(path, {"identity_key": b64e(ctx.identity_key.bytes),
                          "model_keys": {m: b64e(k.bytes) for m, k in ctx.model_keys.items()}})


def _load_user(path: Path) -> UserContext:
    if not path.exists():
        return UserContext(SymKey.generate())
    d = json.loads(path.read_text())
    ctx = UserContext(SymKey(b64d(d["identity_key"])))
    for r in d.get("request_keys", []):
        ctx.request_keys[(r["model_id"], Measurement.fromhex(r["enclave"]))] = SymKey(b64d(r["key"]))
    ctx.enclave_for = {m: Measurement.fromhex(e) for m, e in d.get("enclave_for", {}).items()}
    ctx.seq = {m: int(s) for m, s in d.get("seq", {}).items()}
    return ctx


def _save_user(path: Path, ctx: UserContext) -> None:
    _write_private(path, {
        "identity_key": b64e(ctx.identity_key.bytes),
        "request_keys": [{"model_id": m, "enclave": e.hex(), "key": b64e(k.bytes)}
                         for (m, e), k in sorted(ctx.request_keys.items(), key=lambda kv: (kv[0][0], kv[0][1].hex()))],
        "enclave_for": {m: e.hex() for m, e in sorted(ctx.enclave_for.items())},
        "seq": dict(sorted(ctx.seq.items())),
    })


def _ks_client(cfg: live.LiveConfig, url: str | None) -> KeyServiceClient:
    url = url or f"http://{cfg.keyservice.host}:{cfg.keyservice.port}"
    return KeyServiceClient(live.HttpTransport(url), cfg.platform().verification_key, cfg.expected_keyservice())


def _model_from_args(args) -> Model:
    if args.weights:
        w = np.load(args.weights)
        b = np.load(args.bias) if args.bias else np.zeros(w.shape[0])
        return Model(args.model_id, w, b)
    rows, cols = args.random
    return Model.random(args.model_id, rows, cols, np.random.default_rng(args.seed))


# --- commands --------------------------------------------------------------------

def cmd_simulate(args) -> int:
    outputs = run_config(args.config, seed=args.seed, out_dir=args.out, only=args.run or None)
    for o in outputs:
        lat = o.summary["latency"]
        mean = "-" if lat["mean_ms"] is None else f"{lat['mean_ms']:.2f}"
        p95 = "-" if lat["p95_ms"] is None else f"{lat['p95_ms']:.2f}"
        print(f"{o.name}: requests={o.summary['requests']} mean_ms={mean} p95_ms={p95} "
              f"paths={o.summary['paths']} gb_s={o.summary['gb_seconds']:.3f}")
    if args.out:
        print(f"wrote {args.out}")
    return 0


def cmd_replay(args) -> int:
    trace = read_trace(args.trace)
    if args.mode == "live":
        return _replay_live(args, trace)
    out = Path(args.out) if args.out else None
    summaries = {}
    for name, cfg in load_config(args.config, args.seed):
        if args.run and name not in args.run:
            continue
        result = simulate(cfg, trace=trace)
        rows = metric_rows(result)
        summaries[name] = summarize(cfg, result, rows)
        if out:
            out.mkdir(parents=True, exist_ok=True)
            (out / f"{name}.csv").write_text(rows_to_csv(rows))
        print(f"{name}: requests={len(rows)} paths={summaries[name]['paths']}")
    if out:
        (out / "summary.json").write_text(json.dumps({"runs": summaries}, indent=2, sort_keys=True) + "\n")
    return 0


def _replay_live(args, trace) -> int:
    """Send the trace to a live router or worker at wall-clock pace."""
    cfg = live.load_live_config(args.config)
    target = args.target or f"http://{cfg.fnpacker.host}:{cfg.fnpacker.port}/invoke"
    users: dict[str, tuple[UserClient, Path]] = {}
    rows = []
    start = time.monotonic()
    for i, ev in enumerate(trace):
        delay = ev.t_ms / 1000.0 / args.speed - (time.monotonic() - start)
        if delay > 0:
            time.sleep(delay)
        if ev.user_id not in users:
            kf = Path(args.keys_dir) / f"{ev.user_id}.json"
            users[ev.user_id] = (UserClient(_ks_client(cfg, args.keyservice), args.keyservice or "", _load_user(kf)), kf)
        user, _ = users[ev.user_id]
        req = user.build_request(ev.model_id, np.ones(args.input_dim))
        t0 = time.monotonic()
        status, body = live.post(target, json.dumps(req.to_json()).encode())
        t1 = time.monotonic()
        path = json.loads(body).get("path", "") if status == 200 else f"error{status}"
        rows.append({"request_id": i, "submit_ms": (t0 - start) * 1000, "complete_ms": (t1 - start) * 1000,
                     "latency_ms": (t1 - t0) * 1000, "path": path, "endpoint": target, "instance": "", "node": "",
                     "model_id": ev.model_id, "user_id": ev.user_id, "group": ev.group, "queue_ms": 0.0,
                     "model_switch": 0, "error": "" if status == 200 else str(status)})
    for user, kf in users.values():
        _save_user(kf, user.ctx)
    text = rows_to_csv(rows)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "live.csv").write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_serve(args) -> int:
    cfg = live.load_live_config(args.config)
    factory = {"keyservice": live.keyservice_service, "worker": live.worker_service,
               "fnpacker": live.fnpacker_service}[args.role]
    try:
        svc = factory(cfg, args.port)
    except OSError as e:
        print(f"error: cannot bind: {e}", file=sys.stderr)
        return 2
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    svc.start()
    _, health = live.get(svc.url + "/health")
    print(f"{args.role} listening on {svc.url} {health.decode()}", flush=True)
    stop.wait()
    svc.close()
    return 0


def cmd_measure(args) -> int:
    cfg = live.load_live_config(args.config)
    if args.what == "keyservice":
        print(cfg.expected_keyservice().hex())
    else:
        print(measure_code(cfg.worker_identity()).hex())
    return 0


def cmd_owner(args) -> int:
    kf = Path(args.keyfile)
    ctx = _load_owner(kf)
    if args.action == "encrypt-model":
        model = _model_from_args(args)
        key = ctx.model_keys.setdefault(model.model_id, SymKey.generate())
        Path(args.out).write_bytes(encrypt_model_file(model, key))
        _save_owner(kf, ctx)
        print(f"wrote {args.out}")
        return 0
    cfg = live.load_live_config(args.config)
    owner = OwnerClient(_ks_client(cfg, args.keyservice), ctx)
    if args.action == "register":
        print(owner.register().hex())
    elif args.action == "deploy":
        owner.register()
        owner.deploy_model(_model_from_args(args), ModelStore(args.storage))
        print(f"deployed {args.model_id}")
    elif args.action == "grant":
        owner.register()
        owner.grant(args.model_id, Measurement.fromhex(args.enclave), Digest.fromhex(args.user))
        print("granted")
    _save_owner(kf, ctx)
    return 0


def cmd_user(args) -> int:
    kf = Path(args.keyfile)
    cfg = live.load_live_config(args.config)
    ks_addr = args.keyservice or f"http://{cfg.keyservice.host}:{cfg.keyservice.port}"
    user = UserClient(_ks_client(cfg, args.keyservice), ks_addr, _load_user(kf))
    if args.action == "register":
        print(user.register().hex())
    elif args.action == "add-key":
        user.register()
        user.add_request_key(args.model_id, Measurement.fromhex(args.enclave))
        print("request key deposited")
    elif args.action == "infer":
        x = np.array([float(v) for v in args.input.split(",")])
        via = args.via or f"http://{cfg.fnpacker.host}:{cfg.fnpacker.port}/invoke"

        def submit(req: InferenceRequest):
            status, body = live.post(via, json.dumps(req.to_json()).encode())
            reply = json.loads(body)
            if status != 200:
                raise KeyServiceError(f"request failed ({status}): {reply.get('error')}")
            return AeadEnvelope.from_bytes(b64d(reply["result_b64"]))

        argmax, scores = user.user_request(args.model_id, x, submit)
        print(f"argmax {argmax}")
        print("scores " + " ".join(f"{s:.6f}" for s in scores))
    _save_user(kf, user.ctx)
    return 0


def cmd_report(args) -> int:
    table, plot = report.compare(args.inputs)
    print(table)
    if args.out:
        Path(args.out).write_text(plot)
        print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="secinfer", description="Confidential serverless model serving toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run every variant of an experiment config")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.add_argument("--run", action="append", help="only this run (repeatable)")
    s.add_argument("--mode", choices=["sim"], default="sim")
    s.set_defaults(fn=cmd_simulate)

    s = sub.add_parser("replay", help="replay a trace CSV in the simulator or against live services")
    s.add_argument("--trace", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--mode", choices=["sim", "live"], default="sim")
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.add_argument("--run", action="append")
    s.add_argument("--target", help="live: router /invoke or worker /run URL")
    s.add_argument("--keyservice", help="live: broker URL")
    s.add_argument("--keys-dir", default=".", help="live: directory of user key files")
    s.add_argument("--speed", type=float, default=1.0)
    s.add_argument("--input-dim", type=int, default=4)
    s.set_defaults(fn=cmd_replay)

    s = sub.add_parser("serve", help="run a live service until interrupted")
    s.add_argument("role", choices=["keyservice", "worker", "fnpacker"])
    s.add_argument("--config")
    s.add_argument("--port", type=int)
    s.add_argument("--mode", choices=["live"], default="live")
    s.set_defaults(fn=cmd_serve)

    s = sub.add_parser("measure", help="print the expected measurement of a service")
    s.add_argument("what", choices=["keyservice", "worker"])
    s.add_argument("--config")
    s.set_defaults(fn=cmd_measure)

    def model_args(sp):
        sp.add_argument("--model-id", required=True)
        g = sp.add_mutually_exclusive_group(required=True)
        g.add_argument("--weights", help=".npy matrix (rows x cols)")
        g.add_argument("--random", nargs=2, type=int, metavar=("ROWS", "COLS"))
        sp.add_argument("--bias", help=".npy vector")
        sp.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("owner", help="model-owner operations")
    s.add_argument("--keyfile", default="owner.json")
    s.add_argument("--config")
    s.add_argument("--keyservice", help="broker URL")
    osub = s.add_subparsers(dest="action", required=True)
    osub.add_parser("register")
    sp = osub.add_parser("encrypt-model")
    model_args(sp)
    sp.add_argument("--out", required=True)
    sp = osub.add_parser("deploy")
    model_args(sp)
    sp.add_argument("--storage", required=True)
    sp = osub.add_parser("grant")
    sp.add_argument("--model-id", required=True)
    sp.add_argument("--enclave", required=True, help="runtime measurement (hex)")
    sp.add_argument("--user", required=True, help="user id (hex)")
    s.set_defaults(fn=cmd_owner)

    s = sub.add_parser("user", help="model-user operations")
    s.add_argument("--keyfile", default="user.json")
    s.add_argument("--config")
    s.add_argument("--keyservice", help="broker URL")
    usub = s.add_subparsers(dest="action", required=True)
    usub.add_parser("register")
    sp = usub.add_parser("add-key")
    sp.add_argument("--model-id", required=True)
    sp.add_argument("--enclave", required=True)
    sp = usub.add_parser("infer")
    sp.add_argument("--model-id", required=True)
    sp.add_argument("--input", required=True, help="comma-separated vector")
    sp.add_argument("--via", help="router /invoke or worker /run URL")
    s.set_defaults(fn=cmd_user)

    s = sub.add_parser("report", help="compare summary.json files")
    s.add_argument("inputs", nargs="+", help="summary.json files or output directories")
    s.add_argument("--out", help="plot-ready CSV")
    s.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("SECINFER_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValidationError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (AttestationError, KeyServiceError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
