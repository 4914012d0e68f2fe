import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from secinfer.attestation import (
    ANY,
    AttestationError,
    AttestationReport,
    CodeIdentity,
    HandshakeInitiator,
    HandshakeResponder,
    Platform,
    SecureChannel,
    establish_channel,
    measure_code,
    verify_report,
)
from secinfer.crypto import CryptoError, IntegrityError, KeySource


@pytest.fixture
def platform():
    return Platform(KeySource(1))


def ident(**flags):
    return CodeIdentity("svc", "1", "x", flags)


def test_measurement_depends_on_every_identity_field():
    base = measure_code(ident(a=1))
    assert base == measure_code(ident(a=1))
    assert base != measure_code(ident(a=2))
    assert base != measure_code(CodeIdentity("svc", "2", "x", {"a": 1}))
    assert base != measure_code(CodeIdentity("svc", "1", "y", {"a": 1}))


def test_flag_order_does_not_matter():
    assert measure_code(ident(a=1, b=2)) == measure_code(ident(b=2, a=1))


def test_report_round_trip_and_verify(platform):
    m = measure_code(ident())
    r = platform.generate_report(m, b"p" * 32, b"n" * 16)
    r2 = AttestationReport.from_bytes(r.to_bytes())
    assert r2 == r
    assert verify_report(r2, m, platform.verification_key)
    assert verify_report(r2, ANY, platform.verification_key)
    assert verify_report(r2, {m}, platform.verification_key)
    assert not verify_report(r2, measure_code(ident(z=1)), platform.verification_key)


def test_report_from_other_platform_rejected(platform):
    m = measure_code(ident())
    r = Platform(KeySource(2)).generate_report(m, b"p" * 32, b"n" * 16)
    assert not verify_report(r, m, platform.verification_key)


@settings(max_examples=100, deadline=None)
@given(st.data())
def test_report_bit_flip_rejected(data):
    platform = Platform(KeySource(3))
    m = measure_code(ident())
    raw = bytearray(platform.generate_report(m, b"p" * 32, b"n" * 16).to_bytes())
    i = data.draw(st.integers(0, len(raw) - 1))
    raw[i] ^= 1 << data.draw(st.integers(0, 7))
    try:
        r = AttestationReport.from_bytes(bytes(raw))
    except Exception:
        return
    assert not verify_report(r, ANY, platform.verification_key)


def test_channel_not_constructible_directly():
    with pytest.raises(TypeError):
        SecureChannel(None, None, None, None)


def test_handshake_one_way(platform):
    m = measure_code(ident(role="server"))
    init = HandshakeInitiator(platform.verification_key, m)
    resp = HandshakeResponder(platform.verification_key, platform.attester(m))
    c, s = establish_channel(init, resp)
    assert c.peer_measurement == m
    assert s.peer_measurement is None
    assert c.session_id == s.session_id
    assert s.open(c.seal(b"hi")) == b"hi"
    assert c.open(s.seal(b"yo")) == b"yo"


def test_handshake_mutual(platform):
    ms, mc = measure_code(ident(role="server")), measure_code(ident(role="client"))
    init = HandshakeInitiator(platform.verification_key, ms, platform.attester(mc))
    resp = HandshakeResponder(platform.verification_key, platform.attester(ms), accept={mc}, require_peer_report=True)
    _, s = establish_channel(init, resp)
    assert s.peer_measurement == mc


def test_wrong_expected_measurement_aborts(platform):
    m = measure_code(ident(role="server"))
    init = HandshakeInitiator(platform.verification_key, measure_code(ident(role="other")))
    resp = HandshakeResponder(platform.verification_key, platform.attester(m))
    with pytest.raises(AttestationError):
        establish_channel(init, resp)


def test_responder_rejects_unknown_initiator(platform):
    ms, mc = measure_code(ident(role="server")), measure_code(ident(role="client"))
    init = HandshakeInitiator(platform.verification_key, ms, platform.attester(mc))
    resp = HandshakeResponder(platform.verification_key, platform.attester(ms), accept=set())
    with pytest.raises(AttestationError):
        establish_channel(init, resp)


def test_mutual_required_without_report(platform):
    ms = measure_code(ident(role="server"))
    init = HandshakeInitiator(platform.verification_key, ms)
    resp = HandshakeResponder(platform.verification_key, platform.attester(ms), require_peer_report=True)
    with pytest.raises(AttestationError):
        establish_channel(init, resp)


def test_replayed_responder_report_rejected(platform):
    m = measure_code(ident())
    first = HandshakeInitiator(platform.verification_key, m)
    reply, _ = HandshakeResponder(platform.verification_key, platform.attester(m)).respond(first.hello())
    second = HandshakeInitiator(platform.verification_key, m)
    second.hello()
    with pytest.raises(AttestationError):
        second.finish(reply)


def test_channel_replay_and_tamper(platform):
    m = measure_code(ident())
    c, s = establish_channel(HandshakeInitiator(platform.verification_key, m),
                             HandshakeResponder(platform.verification_key, platform.attester(m)))
    msg = c.seal(b"one")
    assert s.open(msg) == b"one"
    with pytest.raises(CryptoError, match="replayed"):
        s.open(msg)
    bad = bytearray(c.seal(b"two"))
    bad[-1] ^= 1
    with pytest.raises(IntegrityError):
        s.open(bytes(bad))


def test_wire_observer_sees_json(platform):
    m = measure_code(ident())
    seen = []
    establish_channel(HandshakeInitiator(platform.verification_key, m),
                      HandshakeResponder(platform.verification_key, platform.attester(m)),
                      wire=lambda where, data: seen.append((where, json.loads(data))))
    assert [w for w, _ in seen] == ["handshake.hello", "handshake.reply"]


def test_sealing_key_bound_to_measurement(platform):
    a, b = measure_code(ident(a=1)), measure_code(ident(a=2))
    assert platform.sealing_key(a) == platform.sealing_key(a)
    assert platform.sealing_key(a) != platform.sealing_key(b)
