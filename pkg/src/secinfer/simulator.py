"""Discrete-event simulation of a serverless platform hosting model-serving
enclaves.

Time is virtual; everything else is real. Each sandbox instance embeds a
functional :class:`~secinfer.runtime.Enclave`, every request is encrypted,
provisioned, executed and decrypted for real, and the simulator charges
virtual time per serving stage according to what the enclave actually did
(handshake, key fetch, model load, runtime init).
"""
from __future__ import annotations

import heapq
import itertools
import logging
from collections import deque
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .costs import CostLedger, LedgerRecord, ModelProfile, StageCosts
from .deployment import Deployment
from .models import LinearBackend, Model
from .attestation import measure_code
from .runtime import Enclave, InvocationPath
from .workload import TraceEvent

log = logging.getLogger(__name__)

MB = 1 << 20


class Policy(str, Enum):
    """How much state an instance keeps between requests.

    ``native``: a fresh enclave for every request, all stages charged.
    ``iso_reuse``: the enclave and its keys are reused but the model and
    runtime are reloaded for every request.
    ``full_reuse``: model, runtime and keys are cached; charges follow the
    actual invocation path.
    """

    NATIVE = "native"
    ISO_REUSE = "iso_reuse"
    FULL_REUSE = "full_reuse"


class InstanceState(str, Enum):
    STARTING = "starting"
    READY = "ready"
    REAPED = "reaped"


@dataclass
class FunctionSpec:
    endpoint_id: str
    models: tuple[str, ...]
    policy: Policy = Policy.FULL_REUSE
    tcs_count: int = 1
    memory_budget_mb: int = 0
    fixed_model: str | None = None

    def __post_init__(self):
        self.policy = Policy(self.policy)
        if self.policy is not Policy.FULL_REUSE and self.tcs_count != 1:
            raise ValueError(f"{self.policy.value} instances run one request at a time")
        if self.memory_budget_mb <= 0 or self.memory_budget_mb % 128:
            raise ValueError("memory budget must be a positive multiple of 128 MB")

    def identity_flags(self) -> dict:
        return {
            "tcs_count": self.tcs_count,
            "fixed_model": self.fixed_model,
            "model_cache_enabled": self.policy is Policy.FULL_REUSE,
        }


@dataclass
class Node:
    index: int
    memory_mb: float
    cores: int
    used_mb: float = 0.0
    instances: list["Instance"] = field(default_factory=list)
    # end times of in-progress attestations and executions
    attesting: list[float] = field(default_factory=list)
    executing: list[float] = field(default_factory=list)

    @property
    def free_mb(self) -> float:
        return self.memory_mb - self.used_mb

    def active(self, which: list[float], t: float) -> int:
        which[:] = [e for e in which if e > t]
        return len(which)


@dataclass
class Instance:
    instance_id: str
    spec: FunctionSpec
    node: Node
    created_ms: float
    ready_ms: float
    enclave: Enclave | None
    record: LedgerRecord
    state: InstanceState = InstanceState.STARTING
    busy: int = 0
    group: tuple[str, str] | None = None
    attached: list["SimRequest"] = field(default_factory=list)
    last_used_ms: float = 0.0
    prep_until_ms: float = 0.0
    idle_token: int = 0

    @property
    def capacity(self) -> int:
        return self.spec.tcs_count

    def load(self) -> int:
        return self.busy + len(self.attached)

    def accepts(self, group: tuple[str, str]) -> bool:
        # one (model, user) group in flight per enclave
        return self.load() < self.capacity and (self.load() == 0 or self.group == group)


@dataclass
class SimRequest:
    request_id: int
    event: TraceEvent
    submit_ms: float
    endpoint_id: str = ""
    instance: Instance | None = None
    start_ms: float = 0.0
    complete_ms: float | None = None
    path: InvocationPath | None = None
    stages: dict[str, float] = field(default_factory=dict)
    queue_ms: float = 0.0
    cold: bool = False
    model_switch: bool = False
    error: str = ""

    @property
    def group(self) -> tuple[str, str]:
        return (self.event.model_id, self.event.user_id)

    @property
    def latency_ms(self) -> float:
        return self.complete_ms - self.submit_ms


class Router:
    """Endpoint selection hook; the default maps each model to one endpoint."""

    def route(self, model_id: str, user_id: str, t_ms: float) -> str:
        raise NotImplementedError

    def complete(self, model_id: str, endpoint_id: str, latency_ms: float, path: str, t_ms: float) -> None:
        pass


class StaticRouter(Router):
    def __init__(self, table: dict[str, str]):
        self.table = dict(table)

    def route(self, model_id, user_id, t_ms):
        try:
            return self.table[model_id]
        except KeyError:
            raise KeyError(f"no endpoint serves model {model_id!r}") from None


def node_schedule(nodes: Sequence[Node], endpoint_id: str, memory_mb: float) -> Node | None:
    """Prefer a node already hosting the endpoint, else first fit by memory."""
    for n in nodes:
        if n.free_mb >= memory_mb and any(i.spec.endpoint_id == endpoint_id for i in n.instances):
            return n
    for n in nodes:
        if n.free_mb >= memory_mb:
            return n
    return None


class _World:
    """The functional side: one deployment, an owner holding every model,
    and lazily created users with grants for every serving enclave."""

    def __init__(self, seed: int, profiles: dict[str, ModelProfile], model_profile: dict[str, str],
                 specs: Sequence[FunctionSpec], rows: int = 8, cols: int = 16):
        self.dep = Deployment(seed=seed)
        rng = np.random.default_rng(seed)
        self.models: dict[str, Model] = {}
        self.buffers: dict[str, int] = {}
        for mid in sorted(model_profile):
            p = profiles[model_profile[mid]]
            self.models[mid] = Model.random(mid, rows, cols, rng, int(p.model_mb * MB))
            self.buffers[mid] = int(p.buffer_mb * MB)
        self.identities = {}
        self.measurement_for: dict[str, object] = {}
        for s in specs:
            ident = self.dep.runtime_identity(**s.identity_flags())
            self.identities[s.endpoint_id] = ident
            m = measure_code(ident)
            for mid in s.models:
                prev = self.measurement_for.setdefault(mid, m)
                if prev != m:
                    raise ValueError(f"model {mid!r} is served by enclaves with different code identities")
        self.owner = self.dep.owner()
        for mid, model in self.models.items():
            self.owner.deploy_model(model, self.dep.storage)
        self.users: dict[str, object] = {}
        self._keyed: set[tuple[str, str]] = set()
        self._xrng = np.random.default_rng(seed + 1)

    def user(self, name: str, model_id: str):
        u = self.users.get(name)
        if u is None:
            u = self.users[name] = self.dep.user()
        if (name, model_id) not in self._keyed:
            m = self.measurement_for[model_id]
            self.owner.grant(model_id, m, u.uid)
            u.add_request_key(model_id, m)
            self._keyed.add((name, model_id))
        return u

    def enclave(self, spec: FunctionSpec) -> Enclave:
        return self.dep.enclave(self.identities[spec.endpoint_id], LinearBackend(self.buffers))

    def input_for(self, model_id: str) -> np.ndarray:
        return self._xrng.standard_normal(self.models[model_id].cols)


@dataclass
class SimResult:
    requests: list[SimRequest]
    ledger: CostLedger
    horizon_ms: float
    cold_starts: int
    evictions: int
    router_errors: int = 0


class Simulator:
    def __init__(self, specs: Sequence[FunctionSpec], profiles: dict[str, ModelProfile],
                 model_profile: dict[str, str], costs: StageCosts | None = None, *,
                 nodes: int = 1, invoker_memory_mb: float = 4096, router: Router | None = None,
                 keep_warm_s: float = 180.0, seed: int = 0, horizon_ms: float | None = None,
                 verify_results: bool = False):
        self.specs = {s.endpoint_id: s for s in specs}
        self.profiles = profiles
        self.model_profile = dict(model_profile)
        self.costs = costs or StageCosts()
        self.nodes = [Node(i, invoker_memory_mb, self.costs.physical_cores) for i in range(nodes)]
        if router is None:
            table = {}
            for s in specs:
                for m in s.models:
                    table.setdefault(m, s.endpoint_id)
            router = StaticRouter(table)
        self.router = router
        self.keep_warm_ms = keep_warm_s * 1000.0
        self.horizon_ms = horizon_ms
        self.verify_results = verify_results
        self.world = _World(seed, profiles, self.model_profile, specs)

        self.now = 0.0
        self._events: list = []
        self._seq = itertools.count()
        self._ids = itertools.count()
        self.instances: dict[str, list[Instance]] = {e: [] for e in self.specs}
        self.queues: dict[str, deque[SimRequest]] = {e: deque() for e in self.specs}
        self.ledger = CostLedger()
        self.cold_starts = 0
        self.evictions = 0
        self._groups: dict[str, deque[TraceEvent]] = {}
        self._group_prev: dict[str, float] = {}
        self._requests: list[SimRequest] = []
        self._pending: dict[tuple[int, str], object] = {}

    # --- event queue ---------------------------------------------------

    def _push(self, t: float, kind: str, payload) -> None:
        heapq.heappush(self._events, (t, next(self._seq), kind, payload))

    def run(self, trace: Sequence[TraceEvent]) -> SimResult:
        for ev in trace:
            if ev.group:
                q = self._groups.setdefault(ev.group, deque())
                q.append(ev)
                if len(q) == 1:
                    self._push(ev.t_ms, "arrive", ev)
            else:
                self._push(ev.t_ms, "arrive", ev)
        handlers: dict[str, Callable] = {
            "arrive": self._on_arrive,
            "ready": self._on_ready,
            "complete": self._on_complete,
            "reap": self._on_reap,
        }
        while self._events:
            t, _, kind, payload = self._events[0]
            if self.horizon_ms is not None and t > self.horizon_ms:
                break
            heapq.heappop(self._events)
            if t < self.now:
                raise AssertionError("virtual time went backwards")
            self.now = t
            handlers[kind](payload)
        horizon = self.horizon_ms if self.horizon_ms is not None else self.now
        return SimResult(self._requests, self.ledger, horizon, self.cold_starts, self.evictions,
                         getattr(self.router, "errors", 0))

    # --- arrivals and placement ---------------------------------------

    def _on_arrive(self, ev: TraceEvent) -> None:
        req = SimRequest(next(self._ids), ev, self.now)
        self._requests.append(req)
        req.endpoint_id = self.router.route(ev.model_id, ev.user_id, self.now)
        if req.endpoint_id not in self.specs:
            raise KeyError(f"router chose unknown endpoint {req.endpoint_id!r}")
        if not self._place(req):
            self.queues[req.endpoint_id].append(req)

    def _place(self, req: SimRequest) -> bool:
        spec = self.specs[req.endpoint_id]
        pool = [i for i in self.instances[req.endpoint_id] if i.state is not InstanceState.REAPED]
        group = req.group
        ready = [i for i in pool if i.state is InstanceState.READY and i.accepts(group)]
        # pack onto a busy instance of the same group, else the most recently used idle one
        busy = [i for i in ready if i.busy]
        if busy:
            self._start(req, busy[0])
            return True
        if ready:
            inst = max(ready, key=lambda i: (i.last_used_ms, i.instance_id))
            self._start(req, inst)
            return True
        for inst in pool:
            if inst.state is InstanceState.STARTING and inst.accepts(group):
                inst.attached.append(req)
                inst.group = group
                req.instance = inst
                return True
        inst = self._launch(spec)
        if inst is None:
            return False
        inst.attached.append(req)
        inst.group = group
        req.instance = inst
        req.cold = True
        return True

    def _launch(self, spec: FunctionSpec) -> Instance | None:
        node = node_schedule(self.nodes, spec.endpoint_id, spec.memory_budget_mb)
        if node is None:
            node = self._evict_for(spec.memory_budget_mb)
            if node is None:
                return None
        t = self.now
        launches = 1 + sum(1 for i in node.instances if i.state is InstanceState.STARTING)
        startup = self.costs.sandbox_init_ms + self.costs.enclave_init_ms(spec.memory_budget_mb, launches)
        iid = f"{spec.endpoint_id}#{next(self._ids)}"
        enclave = self.world.enclave(spec) if spec.policy is not Policy.NATIVE else None
        inst = Instance(iid, spec, node, t, t + startup, enclave,
                        self.ledger.open(iid, spec.endpoint_id, spec.memory_budget_mb, t), last_used_ms=t)
        node.used_mb += spec.memory_budget_mb
        node.instances.append(inst)
        self.instances[spec.endpoint_id].append(inst)
        self.cold_starts += 1
        self._push(inst.ready_ms, "ready", inst)
        return inst

    def _evict_for(self, memory_mb: float) -> Node | None:
        for node in self.nodes:
            idle = sorted((i for i in node.instances if i.state is InstanceState.READY and i.load() == 0),
                          key=lambda i: (i.last_used_ms, i.instance_id))
            freeable = node.free_mb + sum(i.spec.memory_budget_mb for i in idle)
            if freeable < memory_mb:
                continue
            for inst in idle:
                if node.free_mb >= memory_mb:
                    break
                self._retire(inst)
                self.evictions += 1
            return node
        return None

    def _retire(self, inst: Instance) -> None:
        inst.state = InstanceState.REAPED
        inst.node.used_mb -= inst.spec.memory_budget_mb
        inst.node.instances.remove(inst)
        self.ledger.close(inst.record, self.now)

    def _on_ready(self, inst: Instance) -> None:
        inst.state = InstanceState.READY
        attached, inst.attached = inst.attached, []
        for req in attached:
            self._start(req, inst, fresh=True)
        if inst.load() == 0:
            self._became_idle(inst)

    # --- service ---------------------------------------------------------

    def _start(self, req: SimRequest, inst: Instance, fresh: bool = False) -> None:
        t = self.now
        spec = inst.spec
        profile = self.profiles[self.model_profile[req.event.model_id]]
        node = inst.node
        req.instance = inst
        req.start_ms = t
        inst.busy += 1
        inst.group = req.group
        inst.idle_token += 1
        stages: dict[str, float] = {}
        if fresh and req.cold:
            # the launching request carries the sandbox and enclave start-up
            stages["sandbox_init"] = self.costs.sandbox_init_ms
            stages["enclave_init"] = inst.ready_ms - inst.created_ms - self.costs.sandbox_init_ms
            waited = inst.created_ms - req.submit_ms
        else:
            waited = t - req.submit_ms

        user = self.world.user(req.event.user_id, req.event.model_id)
        x = self.world.input_for(req.event.model_id)
        request = user.build_request(req.event.model_id, x)

        if spec.policy is Policy.NATIVE:
            # a new enclave for every request: every stage, every time
            enclave = self.world.enclave(spec)
            if not stages:
                launches = 1 + sum(1 for i in node.instances if i.state is InstanceState.STARTING)
                stages["sandbox_init"] = self.costs.sandbox_init_ms
                stages["enclave_init"] = self.costs.enclave_init_ms(spec.memory_budget_mb, launches)
            sandbox_new = True
        else:
            enclave = inst.enclave
            sandbox_new = fresh
        before = (enclave.handshakes, enclave.provisioning_calls, enclave.model_loads, enclave.runtime_inits)
        try:
            req.path = enclave.ec_model_inf(request, 0, sandbox_new=sandbox_new, block=False)
            argmax, scores = user.open_result(request, enclave.ec_get_output(0))
            if self.verify_results:
                m = self.world.models[req.event.model_id]
                np.testing.assert_allclose(scores, m.weights @ x + m.bias, rtol=0, atol=1e-12)
        except Exception as e:  # surfaced in metrics, never dropped
            req.error = type(e).__name__
            req.path = InvocationPath.COLD if sandbox_new else InvocationPath.WARM
            log.warning("request %d failed: %r", req.request_id, e)
        after = (enclave.handshakes, enclave.provisioning_calls, enclave.model_loads, enclave.runtime_inits)
        handshake, provision, loads, inits = (a - b for a, b in zip(after, before))

        native_setup = dict(stages) if spec.policy is Policy.NATIVE and not (fresh and req.cold) else {}
        if handshake:
            stages["attestation"] = self.costs.attestation_ms(1 + node.active(node.attesting, t))
        elif provision:
            stages["key_fetch"] = self.costs.key_fetch_ms
        if loads:
            stages["model_fetch"] = self.costs.model_fetch_ms(profile)
            stages["model_decrypt"] = self.costs.model_decrypt_ms(profile)
            req.model_switch = not sandbox_new and spec.policy is Policy.FULL_REUSE
        if inits:
            stages["runtime_init"] = self.costs.runtime_init_ms(profile)
        setup = handshake or provision or loads
        # a request with no setup of its own still waits for a sibling context
        # that is loading the shared model
        begin = t if setup else max(t, inst.prep_until_ms)
        prep = sum(v for k, v in stages.items() if k not in ("sandbox_init", "enclave_init")) \
            + sum(native_setup.values())
        if handshake:
            node.attesting.append(begin + stages["attestation"])
        if setup:
            inst.prep_until_ms = begin + prep
        exec_at = begin + prep
        stages["request_decrypt"] = self.costs.request_decrypt_ms
        node_mb = sum(i.spec.memory_budget_mb for i in node.instances)
        stages["exec"] = self.costs.exec_ms(profile, 1 + node.active(node.executing, exec_at), node_mb)
        stages["result_encrypt"] = self.costs.result_encrypt_ms
        node.executing.append(exec_at + stages["request_decrypt"] + stages["exec"])
        req.stages = stages
        req.queue_ms = waited + (begin - t)
        req.complete_ms = exec_at + stages["request_decrypt"] + stages["exec"] + stages["result_encrypt"]
        # latency is exactly queueing plus the charged stages
        if abs(req.latency_ms - req.queue_ms - sum(stages.values())) > 1e-6:
            raise AssertionError(f"request {req.request_id}: stage costs are not additive")
        self._push(req.complete_ms, "complete", req)

    def _on_complete(self, req: SimRequest) -> None:
        inst = req.instance
        inst.busy -= 1
        inst.last_used_ms = self.now
        if inst.busy == 0:
            inst.group = None
        self.router.complete(req.event.model_id, req.endpoint_id, req.latency_ms,
                             req.path.value if req.path else "", self.now)
        if req.event.group:
            self._advance_group(req)
        self._drain()
        if inst.state is InstanceState.READY and inst.load() == 0:
            self._became_idle(inst)

    def _advance_group(self, req: SimRequest) -> None:
        q = self._groups[req.event.group]
        done = q.popleft()
        if q:
            nxt = q[0]
            # closed loop: the next query goes out after this response plus
            # the same think time the trace put between the two
            gap = max(0.0, nxt.t_ms - done.t_ms)
            self._push(max(nxt.t_ms, self.now + gap), "arrive", nxt)

    def _drain(self) -> None:
        progress = True
        while progress:
            progress = False
            heads = sorted(((q[0].submit_ms, q[0].request_id, ep) for ep, q in self.queues.items() if q))
            for _, _, ep in heads:
                q = self.queues[ep]
                while q and self._place(q[0]):
                    q.popleft()
                    progress = True

    # --- keep-warm ---------------------------------------------------

    def _became_idle(self, inst: Instance) -> None:
        inst.idle_token += 1
        self._push(inst.last_used_ms + self.keep_warm_ms, "reap", (inst, inst.idle_token))

    def _on_reap(self, payload) -> None:
        inst, token = payload
        if inst.state is InstanceState.READY and inst.load() == 0 and inst.idle_token == token:
            self._retire(inst)
            self._drain()

    def reap_idle(self, t_ms: float) -> list[Instance]:
        """Retire every instance idle for at least the keep-warm timeout."""
        self.now = max(self.now, t_ms)
        out = []
        for pool in self.instances.values():
            for inst in pool:
                if (inst.state is InstanceState.READY and inst.load() == 0
                        and t_ms - inst.last_used_ms >= self.keep_warm_ms):
                    self._retire(inst)
                    out.append(inst)
        return out
