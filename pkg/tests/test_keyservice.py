import pytest

from secinfer.attestation import AttestationError, CodeIdentity, measure_code
from secinfer.crypto import KeySource, SymKey
from secinfer.deployment import Deployment
from secinfer.keyservice import (
    KeyService,
    KeyServiceClient,
    NotRegistered,
    ProvisionDenied,
    Unauthorized,
    seal_grant,
    seal_model_key,
)
from secinfer.runtime import runtime_identity

from conftest import make_setup


def enclave_client(dep, measurement):
    return KeyServiceClient(dep.connect(), dep.platform.verification_key, dep.keyservice.measurement,
                            attester=dep.platform.attester(measurement))


def test_provision_happy_path(setup):
    dep, user = setup.dep, setup.users[0]
    k_m, k_r = enclave_client(dep, setup.enclave.measurement).provision(user.uid, "m0")
    assert k_m == setup.owner.ctx.model_keys["m0"]
    assert k_r == user.request_key("m0")


def test_denials_are_uniform(setup):
    dep, user = setup.dep, setup.users[0]
    client = enclave_client(dep, setup.enclave.measurement)
    outcomes = []
    for uid, model in [(user.uid, "missing"), (setup.owner.ctx.oid, "m0")]:
        with pytest.raises(ProvisionDenied) as e:
            client.provision(uid, model)
        outcomes.append(str(e.value))
    assert len(set(outcomes)) == 1


def test_unknown_enclave_cannot_attest(setup):
    dep = setup.dep
    stranger = measure_code(CodeIdentity("other", "1", "x", {}))
    with pytest.raises(AttestationError):
        enclave_client(dep, stranger).provision(setup.users[0].uid, "m0")


def test_plain_client_cannot_provision(setup):
    with pytest.raises(ProvisionDenied):
        setup.dep.client().provision(setup.users[0].uid, "m0")


def test_revoked_by_missing_grant():
    s = make_setup(n_users=1)
    dep, user = s.dep, s.users[0]
    other = dep.runtime_identity(tcs_count=2)
    m_other = measure_code(other)
    user.add_request_key("m0", m_other)  # request key but no grant for this enclave
    with pytest.raises(ProvisionDenied):
        enclave_client(dep, m_other).provision(user.uid, "m0")


def test_unregistered_caller():
    dep = Deployment(seed=3)
    c = dep.client()
    stranger = SymKey.generate()
    from secinfer.crypto import hash_identity
    with pytest.raises(NotRegistered):
        c.add_model_key(hash_identity(stranger), seal_model_key(stranger, "m", SymKey.generate()))


def test_wrong_identity_key_rejected():
    dep = Deployment(seed=4)
    owner = dep.owner()
    with pytest.raises(Unauthorized):
        owner.ks.add_model_key(owner.ctx.oid, seal_model_key(SymKey.generate(), "m", SymKey.generate()))


def test_grant_requires_ownership():
    s = make_setup(n_users=1)
    intruder = s.dep.owner()
    with pytest.raises(Unauthorized):
        intruder.grant("m0", s.enclave.measurement, intruder.ctx.oid)
    with pytest.raises(Unauthorized):
        intruder.ks.add_model_key(intruder.ctx.oid, seal_model_key(intruder.ctx.identity_key, "m0", SymKey.generate()))


def test_model_key_last_write_wins(setup):
    owner, dep = setup.owner, setup.dep
    new = SymKey.generate()
    owner.ks.add_model_key(owner.ctx.oid, seal_model_key(owner.ctx.identity_key, "m0", new))
    assert dep.keyservice.KS_M["m0"] == new


def test_grant_sealed_under_other_caller_aad(setup):
    owner = setup.owner
    sealed = seal_grant(owner.ctx.identity_key, "m0", setup.enclave.measurement, setup.users[0].uid)
    other = setup.dep.owner()
    with pytest.raises(Unauthorized):
        other.ks.grant_access(other.ctx.oid, sealed)


def test_registration_idempotent():
    dep = Deployment(seed=5)
    k = SymKey.generate()
    assert dep.keyservice.user_registration(k) == dep.keyservice.user_registration(k)
    assert len(dep.keyservice.KS_I) == 1


def test_journal_replay_restores_state(tmp_path):
    journal = tmp_path / "ks.journal"
    dep = Deployment(seed=6)
    dep.keyservice = KeyService(dep.platform, source=KeySource(9), journal=journal)
    from secinfer.keyservice import KeyServiceServer
    dep.server = KeyServiceServer(dep.keyservice)
    owner = dep.owner()
    user = dep.user()
    m = measure_code(runtime_identity(dep.keyservice.measurement))
    owner.ks.add_model_key(owner.ctx.oid, seal_model_key(owner.ctx.identity_key, "m", SymKey.generate()))
    owner.grant("m", m, user.uid)
    user.add_request_key("m", m)
    before = dep.keyservice.state_digest()
    restored = KeyService(dep.platform, source=KeySource(9), journal=journal)
    assert restored.state_digest() == before
    assert b"identity" not in journal.read_bytes()
    # a broker with another measurement cannot read the journal
    other = KeyService(dep.platform, identity=CodeIdentity("kbs", "2", "x", {}), journal=tmp_path / "other")
    assert other.KS_I == {}
