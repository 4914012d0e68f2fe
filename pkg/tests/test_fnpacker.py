import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from secinfer.fnpacker import FnPacker, FnPool, PoolError

MODELS = ("m0", "m1", "m2", "m3", "m4")


def packer(n=3, idle=None):
    fp = FnPacker(idle)
    fp.deploy_pool(FnPool.create("p", MODELS, 256, n))
    return fp


def test_pool_creation_and_duplicates():
    pool = FnPool.create("p", MODELS, 256)
    assert pool.endpoints == ("p-ep0", "p-ep1", "p-ep2", "p-ep3")
    fp = FnPacker()
    fp.deploy_pool(pool)
    with pytest.raises(PoolError):
        fp.deploy_pool(pool)
    with pytest.raises(PoolError):
        fp.deploy_pool(FnPool.create("q", ("m0",), 256, 1))
    with pytest.raises(PoolError):
        fp.route("nope")
    with pytest.raises(PoolError):
        FnPool.create("e", (), 256)


def test_idle_pool_single_request():
    fp = packer()
    assert fp.route("m2", "u", 0) == "p-ep0"
    # a lone request is not pinned; only a follow-up with responses outstanding is
    assert fp.endpoints["p-ep0"].exclusive_for is None
    assert fp.route("m2", "u", 1) == "p-ep0"
    assert fp.endpoints["p-ep0"].exclusive_for == "m2"


def test_two_streams_get_their_own_endpoints():
    fp = packer(2)
    a = fp.route("m0", "s0", 0)
    a2 = fp.route("m0", "s0", 1)
    b = fp.route("m1", "s1", 2)
    b2 = fp.route("m1", "s1", 3)
    assert a == a2 and b == b2 and a != b


def test_one_shot_queries_share_one_extra_endpoint():
    fp = packer(3)
    for t, m in enumerate(("m0", "m0", "m1", "m1")):
        fp.route(m, "", t)
    used = []
    t = 10.0
    for m in ("m2", "m3", "m4"):
        ep = fp.route(m, "i", t)
        used.append(ep)
        fp.complete(m, ep, 50, "warm", t + 50)
        t += 60
    assert len(set(used)) == 1
    assert used[0] not in {fp.route("m0", "", t), fp.route("m1", "", t)}


def test_reclaim_after_idle_interval():
    fp = packer(1, idle=1000)
    fp.route("m0", "", 0)
    fp.route("m0", "", 1)
    assert fp.endpoints["p-ep0"].exclusive_for == "m0"
    fp.complete("m0", "p-ep0", 5, "hot", 5)
    fp.complete("m0", "p-ep0", 5, "hot", 6)
    # still exclusive for m0 inside the interval: m1 overflows onto it
    assert fp.route("m1", "", 500) == "p-ep0" and fp.overflows == 1
    fp.complete("m1", "p-ep0", 5, "warm", 505)
    assert fp.route("m1", "", 1600) == "p-ep0"
    assert fp.endpoints["p-ep0"].exclusive_for is None


def test_default_idle_interval():
    fp = packer(1)
    st_ = fp.endpoints["p-ep0"]
    assert fp.idle_interval(st_) == 10_000
    fp.route("m0", "", 0)
    fp.route("m0", "", 0)
    for _ in range(2):
        fp.complete("m0", "p-ep0", 8_000, "hot", 1)
    assert fp.idle_interval(st_) == 16_000


def test_double_completion_counts_error():
    fp = packer()
    ep = fp.route("m0", "", 0)
    fp.complete("m0", ep, 10, "cold", 10)
    fp.complete("m0", ep, 10, "cold", 11)
    fp.complete("m0", "missing", 10, "cold", 11)
    assert fp.errors == 2
    assert all(v >= 0 for s in fp.endpoints.values() for v in s.pending.values())


def test_stats_and_ewma():
    fp = packer()
    ep = fp.route("m0", "", 0)
    fp.complete("m0", ep, 100, "hot", 100)
    ep = fp.route("m0", "", 200)
    fp.complete("m0", ep, 200, "hot", 400)
    ms = fp.model_stats("m0")
    assert ms.pending == 0 and ms.last_invocation == 400
    assert ms.latency["hot"] == pytest.approx(100 + 0.2 * 100)
    s = fp.stats()
    assert s["routed"] == 2 and s["errors"] == 0 and len(s["endpoints"]) == 3


ops = st.lists(st.tuples(st.sampled_from(MODELS), st.booleans()), min_size=1, max_size=80)


@settings(max_examples=150)
@given(ops, st.integers(1, 4))
def test_pinning_over_random_traces(seq, n):
    fp = packer(n)
    outstanding: list[tuple[str, str]] = []
    t = 0.0
    for model, finish in seq:
        t += 7
        if finish and outstanding:
            m, ep = outstanding.pop(0)
            fp.complete(m, ep, 3, "hot", t)
            continue
        live = {ep for m, ep in outstanding if m == model}
        ep = fp.route(model, "", t)
        if live:
            assert ep in live and len(live) == 1
        outstanding.append((model, ep))
    assert fp.errors == 0
    assert all(v > 0 for s in fp.endpoints.values() for v in s.pending.values())
