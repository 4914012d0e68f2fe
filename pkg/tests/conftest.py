from dataclasses import dataclass, field

import numpy as np
import pytest

from secinfer.deployment import Deployment
from secinfer.models import Model


@dataclass
class Setup:
    dep: Deployment
    enclave: object
    owner: object
    users: list
    models: dict = field(default_factory=dict)

    def submit(self, user, model_id, x=None, ctx=0, **kw):
        m = self.models[model_id]
        x = np.ones(m.cols) if x is None else x
        req = user.build_request(model_id, x)
        path = self.enclave.ec_model_inf(req, ctx, **kw)
        return path, user.open_result(req, self.enclave.ec_get_output(ctx))


def make_setup(seed=0, n_models=2, n_users=2, rows=4, cols=6, transcript=None, **flags) -> Setup:
    dep = Deployment(seed=seed, transcript=transcript)
    enclave = dep.enclave(**flags)
    rng = np.random.default_rng(seed)
    models = {f"m{i}": Model.random(f"m{i}", rows, cols, rng) for i in range(n_models)}
    users = [dep.user() for _ in range(n_users)]
    owner = dep.owner()
    for m in models.values():
        owner.deploy_model(m, dep.storage, [(enclave.measurement, u.uid) for u in users])
        for u in users:
            u.add_request_key(m.model_id, enclave.measurement)
    return Setup(dep, enclave, owner, users, models)


@pytest.fixture
def setup():
    return make_setup()


# --- acceptance reporting ------------------------------------------------------

_criteria: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        detail = "" if rep.passed else str(rep.longrepr.reprcrash.message if hasattr(rep.longrepr, "reprcrash")
                                           else rep.longrepr).splitlines()[0][:160]
        _criteria[n] = (title, "PASS" if rep.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        title, verdict, detail = _criteria[n]
        line = f"criterion {n:2d} {verdict}: {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
