import json

import numpy as np
import pytest
import yaml

from secinfer.harness import live
from secinfer.harness.cli import main
from secinfer.models import Model


@pytest.fixture
def cluster(tmp_path):
    """Broker, one worker and a router on ephemeral ports."""
    base = live.LiveConfig(platform_seed=7)
    ks = live.keyservice_service(base, port=0).start()
    cfg = base.model_copy(update={"worker": live.WorkerSection(storage=str(tmp_path / "store"),
                                                                keyservice_url=ks.url)})
    wk = live.worker_service(cfg, port=0).start()
    pool = live.PoolSection(pool_id="p", models=["m0", "m1"], endpoints={"p-ep0": wk.url})
    cfg = cfg.model_copy(update={"fnpacker": live.FnPackerSection(pools=[pool])})
    fp = live.fnpacker_service(cfg, port=0).start()
    path = tmp_path / "live.yaml"
    path.write_text(yaml.safe_dump(cfg.model_dump()))
    yield cfg, path, ks, wk, fp
    for s in (fp, wk, ks):
        s.close()


def test_health_endpoints(cluster):
    _, _, ks, wk, fp = cluster
    for svc in (ks, wk, fp):
        status, body = live.get(svc.url + "/health")
        assert status == 200 and json.loads(body)
    assert live.get(fp.url + "/nope")[0] == 404


def test_run_before_init_refused(cluster):
    _, _, _, wk, _ = cluster
    assert live.post(wk.url + "/run", b"{}")[0] == 409
    assert live.post(wk.url + "/init", b"{}")[0] == 200
    assert live.post(wk.url + "/run", b"not json")[0] == 400


def test_owner_user_flow_through_router(cluster, tmp_path, capsys):
    cfg, path, ks, wk, fp = cluster
    common = ["--config", str(path), "--keyservice", ks.url]
    owner = ["owner", "--keyfile", str(tmp_path / "o.json"), *common]
    user = ["user", "--keyfile", str(tmp_path / "u.json"), *common]

    assert main(["measure", "worker", "--config", str(path)]) == 0
    enclave = capsys.readouterr().out.strip()
    assert main([*user, "register"]) == 0
    uid = capsys.readouterr().out.strip()
    assert main([*owner, "deploy", "--model-id", "m0", "--random", "3", "4", "--seed", "5",
                 "--storage", cfg.worker.storage]) == 0
    assert main([*owner, "grant", "--model-id", "m0", "--enclave", enclave, "--user", uid]) == 0
    assert main([*user, "add-key", "--model-id", "m0", "--enclave", enclave]) == 0
    capsys.readouterr()

    x = [1.0, -2.0, 0.5, 3.0]
    assert main([*user, "infer", "--model-id", "m0", "--input", ",".join(map(str, x)),
                 "--via", fp.url + "/invoke"]) == 0
    out = capsys.readouterr().out.split("\n")
    m = Model.random("m0", 3, 4, np.random.default_rng(5))
    expected = m.weights @ np.array(x) + m.bias
    scores = np.array([float(v) for v in out[1].split()[1:]])
    np.testing.assert_allclose(scores, expected, atol=1e-5)
    assert out[0] == f"argmax {int(np.argmax(expected))}"

    # a second request is served hot on the same endpoint
    assert main([*user, "infer", "--model-id", "m0", "--input", "1,1,1,1", "--via", fp.url + "/invoke"]) == 0
    status, body = live.get(fp.url + "/stats")
    stats = json.loads(body)
    assert status == 200 and stats["routed"] == 2 and stats["errors"] == 0
    ewma = stats["endpoints"][0]["latency_ewma"]
    assert "m0/cold" in ewma and "m0/hot" in ewma


def test_ungranted_user_refused(cluster, tmp_path, capsys):
    cfg, path, ks, wk, fp = cluster
    common = ["--config", str(path), "--keyservice", ks.url]
    assert main(["measure", "worker", "--config", str(path)]) == 0
    enclave = capsys.readouterr().out.strip()
    assert main(["owner", "--keyfile", str(tmp_path / "o.json"), *common, "deploy", "--model-id", "m1",
                 "--random", "2", "2", "--storage", cfg.worker.storage]) == 0
    user = ["user", "--keyfile", str(tmp_path / "u.json"), *common]
    assert main([*user, "add-key", "--model-id", "m1", "--enclave", enclave]) == 0
    # no grant: the enclave cannot obtain keys and the request is refused
    assert main([*user, "infer", "--model-id", "m1", "--input", "1,2", "--via", fp.url + "/invoke"]) == 3
    assert json.loads(live.get(fp.url + "/stats")[1])["errors"] == 0


def test_router_rejects_unknown_model(cluster):
    *_, fp = cluster
    assert live.post(fp.url + "/invoke", json.dumps({"model_id": "zz", "user_id": "u"}).encode())[0] == 404
    assert live.post(fp.url + "/invoke", b"[]")[0] == 400
