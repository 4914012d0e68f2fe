"""HTTP services for live mode: the key broker, a model-serving worker and
the multi-model router, plus an HTTP transport for clients."""
from __future__ import annotations

import json
import logging
import queue
import threading
import time
import urllib.error
import urllib.request
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from pydantic import BaseModel, ConfigDict, Field

from ..attestation import Measurement, Platform, measure_code
from ..crypto import KeySource
from ..fnpacker import FnPacker, FnPool, PoolError
from ..keyservice import KeyService, KeyServiceServer, default_keyservice_identity
from ..models import LinearBackend
from ..runtime import Enclave, InferenceRequest, RequestRejected, result_to_json, runtime_identity
from ..storage import ModelStore

log = logging.getLogger(__name__)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class KeyServiceSection(_Strict):
    host: str = "127.0.0.1"
    port: int = 8700
    journal: str | None = None


class WorkerSection(_Strict):
    host: str = "127.0.0.1"
    port: int = 8710
    storage: str = "storage"
    keyservice_url: str = "http://127.0.0.1:8700"
    tcs_count: int = Field(1, ge=1, le=8)
    fixed_model: str | None = None
    key_cache_enabled: bool = True
    model_cache_enabled: bool = True
    sequential_isolation: bool = False


class PoolSection(_Strict):
    pool_id: str
    models: list[str]
    memory_budget_mb: int = 256
    # endpoint id -> worker base URL
    endpoints: dict[str, str]


class FnPackerSection(_Strict):
    host: str = "127.0.0.1"
    port: int = 8720
    idle_interval_ms: float | None = None
    pools: list[PoolSection] = []


class LiveConfig(_Strict):
    """Shared settings for every live process.

    ``platform_seed`` stands in for the hardware root of trust: every
    process on the same simulated platform must use the same value.
    """

    platform_seed: int = 0
    keyservice_measurement: str | None = None
    keyservice: KeyServiceSection = KeyServiceSection()
    worker: WorkerSection = WorkerSection()
    fnpacker: FnPackerSection = FnPackerSection()

    def platform(self) -> Platform:
        return Platform(KeySource(self.platform_seed).child("platform"))

    def expected_keyservice(self) -> Measurement:
        if self.keyservice_measurement:
            return Measurement.fromhex(self.keyservice_measurement)
        return measure_code(default_keyservice_identity())

    def worker_identity(self):
        w = self.worker
        return runtime_identity(self.expected_keyservice(), tcs_count=w.tcs_count, fixed_model=w.fixed_model,
                                key_cache_enabled=w.key_cache_enabled, model_cache_enabled=w.model_cache_enabled,
                                sequential_isolation=w.sequential_isolation)


def load_live_config(path: str | Path | None) -> LiveConfig:
    if path is None:
        return LiveConfig()
    from .config import load_raw
    return LiveConfig.model_validate(load_raw(path))


# --- transport ---------------------------------------------------------------

def post(url: str, body: bytes, timeout: float = 30.0) -> tuple[int, bytes]:
    req = urllib.request.Request(url, data=body, method="POST", headers={"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return resp.status, resp.read()
    except urllib.error.HTTPError as e:
        return e.code, e.read()


def get(url: str, timeout: float = 10.0) -> tuple[int, bytes]:
    try:
        with urllib.request.urlopen(url, timeout=timeout) as resp:
            return resp.status, resp.read()
    except urllib.error.HTTPError as e:
        return e.code, e.read()


class HttpTransport:
    def __init__(self, base_url: str):
        self.base_url = base_url.rstrip("/")

    def __call__(self, path: str, body: bytes) -> bytes:
        return post(self.base_url + path, body)[1]


# --- servers -----------------------------------------------------------------

def _handler(routes_post: dict, routes_get: dict):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def _reply(self, status: int, body: bytes) -> None:
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_POST(self):
            n = int(self.headers.get("Content-Length") or 0)
            body = self.rfile.read(n)
            fn = routes_post.get(self.path, routes_post.get("*"))
            if fn is None:
                return self._reply(404, b'{"error": "not_found"}')
            self._reply(*fn(self.path, body))

        def do_GET(self):
            fn = routes_get.get(self.path)
            if fn is None:
                return self._reply(404, b'{"error": "not_found"}')
            self._reply(*fn())

        def log_message(self, fmt, *args):
            log.debug("%s %s", self.address_string(), fmt % args)

    return Handler


class Service:
    """A running HTTP server on a background thread."""

    def __init__(self, host: str, port: int, routes_post: dict, routes_get: dict, on_close=None):
        self.httpd = ThreadingHTTPServer((host, port), _handler(routes_post, routes_get))
        self.httpd.daemon_threads = True
        self._thread = threading.Thread(target=self.httpd.serve_forever, args=(0.05,), daemon=True)
        self._on_close = on_close

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "Service":
        self._thread.start()
        return self

    def close(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()
        if self._on_close:
            self._on_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.close()


def _json(status: int, obj) -> tuple[int, bytes]:
    return status, json.dumps(obj).encode()


def keyservice_service(cfg: LiveConfig, port: int | None = None) -> Service:
    platform = cfg.platform()
    ks = KeyService(platform, journal=cfg.keyservice.journal)
    server = KeyServiceServer(ks)

    def op(path, body):
        return 200, server.handle(path, body)

    routes = {p: op for p in (*KeyServiceServer.ops, "/handshake")}
    health = lambda: (200, server.handle("/health", b"{}"))  # noqa: E731
    svc = Service(cfg.keyservice.host, cfg.keyservice.port if port is None else port, routes, {"/health": health})
    svc.keyservice = ks
    return svc


class Worker:
    """The serverless action wrapper around one enclave."""

    def __init__(self, cfg: LiveConfig):
        self.cfg = cfg
        w = cfg.worker
        self.platform = cfg.platform()
        self.storage = ModelStore(w.storage)
        self.enclave: Enclave | None = None
        self._ctx: queue.Queue[int] = queue.Queue()
        self._init_lock = threading.Lock()

    def _connect(self, addr: str):
        return HttpTransport(addr or self.cfg.worker.keyservice_url)

    def init(self, path, body):
        with self._init_lock:
            if self.enclave is None:
                self.enclave = Enclave(self.cfg.worker_identity(), self.platform, self.storage, self._connect,
                                       LinearBackend())
                for i in range(self.enclave.tcs_count):
                    self._ctx.put(i)
        return _json(200, {"ok": True, "measurement": self.enclave.measurement.hex()})

    def run(self, path, body):
        if self.enclave is None:
            return _json(409, {"error": "not_initialized"})
        try:
            req = InferenceRequest.from_json(json.loads(body))
        except (ValueError, KeyError, TypeError):
            return _json(400, {"error": "bad_request"})
        ctx = self._ctx.get()
        try:
            inv = self.enclave.ec_model_inf(req, ctx)
            return _json(200, result_to_json(self.enclave.ec_get_output(ctx), inv))
        except RequestRejected:
            return _json(403, {"error": "rejected"})
        except Exception as e:  # execution errors and broker failures
            log.warning("run failed: %r", e)
            return _json(500, {"error": type(e).__name__})
        finally:
            self._ctx.put(ctx)

    def health(self):
        m = self.enclave.measurement if self.enclave else measure_code(self.cfg.worker_identity())
        return _json(200, {"role": "worker", "measurement": m.hex()})


def worker_service(cfg: LiveConfig, port: int | None = None) -> Service:
    w = Worker(cfg)
    svc = Service(cfg.worker.host, cfg.worker.port if port is None else port,
                  {"/init": w.init, "/run": w.run}, {"/health": w.health})
    svc.worker = w
    return svc


def fnpacker_service(cfg: LiveConfig, port: int | None = None) -> Service:
    router = FnPacker(cfg.fnpacker.idle_interval_ms)
    urls: dict[str, str] = {}
    for p in cfg.fnpacker.pools:
        eps = tuple(p.endpoints)
        router.deploy_pool(FnPool(p.pool_id, tuple(p.models), p.memory_budget_mb, eps))
        urls.update(p.endpoints)
    clock = _Clock()

    def invoke(path, body):
        try:
            msg = json.loads(body)
            model_id, user_id = msg["model_id"], msg["user_id"]
        except (ValueError, KeyError, TypeError):
            return _json(400, {"error": "bad_request"})
        pool_id = msg.pop("pool_id", None)
        try:
            pool = router.pool_for(model_id)
        except PoolError:
            return _json(404, {"error": "unknown_model"})
        if pool_id is not None and pool_id != pool.pool_id:
            return _json(404, {"error": "unknown_pool"})
        t0 = clock.ms()
        ep = router.route(model_id, user_id, t0)
        status, out = post(urls[ep] + "/run", json.dumps(msg).encode())
        if status == 409:
            post(urls[ep] + "/init", b"{}")
            status, out = post(urls[ep] + "/run", json.dumps(msg).encode())
        path_taken = ""
        if status == 200:
            path_taken = json.loads(out).get("path", "")
        t1 = clock.ms()
        router.complete(model_id, ep, t1 - t0, path_taken, t1)
        return status, out

    svc = Service(cfg.fnpacker.host, cfg.fnpacker.port if port is None else port,
                  {"/invoke": invoke}, {"/stats": lambda: _json(200, router.stats()),
                                        "/health": lambda: _json(200, {"role": "fnpacker"})})
    svc.router = router
    return svc


class _Clock:
    def __init__(self):
        self._start = time.monotonic()

    def ms(self) -> float:
        return (time.monotonic() - self._start) * 1000.0
