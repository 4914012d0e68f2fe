import os
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from secinfer import crypto
from secinfer.crypto import (
    AeadEnvelope,
    IntegrityError,
    KeySource,
    MalformedEnvelope,
    NonceExhausted,
    SymKey,
    aead_decrypt,
    aead_encrypt,
    derive_session_keys,
    hash_identity,
)

# sha256sum of 32 zero bytes, computed with coreutils
ZERO_KEY_SHA256 = "66687aadf862bd776c8fc18b8e9f8e20089714856ee233b3902a591d0d5f2925"


def test_round_trip():
    k = SymKey.generate()
    env = aead_encrypt(k, b"hello", b"ctx")
    assert aead_decrypt(k, env, b"ctx") == b"hello"
    assert len(env.ciphertext) == 5


@settings(max_examples=200, deadline=None)
@given(st.binary(max_size=2048), st.binary(max_size=64))
def test_round_trip_property(payload, aad):
    k = SymKey.generate()
    env = AeadEnvelope.from_bytes(aead_encrypt(k, payload, aad).to_bytes())
    assert aead_decrypt(k, env, aad) == payload


def test_bit_flip_rejected():
    k = SymKey.generate()
    env = aead_encrypt(k, b"payload bytes", b"a")
    ct = bytearray(env.ciphertext)
    ct[0] ^= 1
    with pytest.raises(IntegrityError):
        aead_decrypt(k, AeadEnvelope(env.nonce, bytes(ct), env.tag), b"a")


def test_wrong_aad_and_wrong_key():
    k = SymKey.generate()
    env = aead_encrypt(k, b"x" * 10, b"model|m0|u1")
    with pytest.raises(IntegrityError):
        aead_decrypt(k, env, b"model|m0|u2")
    with pytest.raises(IntegrityError):
        aead_decrypt(SymKey.generate(), env, b"model|m0|u1")


def test_integrity_error_distinct_from_malformed():
    assert not issubclass(IntegrityError, MalformedEnvelope)
    with pytest.raises(MalformedEnvelope):
        AeadEnvelope.from_bytes(b"short")
    k = SymKey.generate()
    raw = aead_encrypt(k, b"abc").to_bytes()
    with pytest.raises(MalformedEnvelope):
        AeadEnvelope.from_bytes(raw + b"\x00")


def test_wire_format_layout():
    k = SymKey.generate()
    env = aead_encrypt(k, b"0123456789")
    raw = env.to_bytes()
    assert raw[:12] == env.nonce
    assert int.from_bytes(raw[12:16], "big") == 10
    assert raw[16:26] == env.ciphertext
    assert raw[26:] == env.tag


def test_model_sized_blob():
    # an MBNET-sized model
    blob = os.urandom(17 * 2**20)
    k = SymKey.generate()
    env = aead_encrypt(k, blob, b"model|mbnet|")
    assert len(env.ciphertext) == len(blob)
    assert len(env.nonce) + len(env.tag) == 28
    assert len(env.to_bytes()) == len(blob) + 32  # plus the 4-byte length field
    assert aead_decrypt(k, env, b"model|mbnet|") == blob


def test_nonce_exhaustion_is_hard_failure():
    k = SymKey.generate()
    crypto.nonces._set_counter(k, 2**64)
    with pytest.raises(NonceExhausted):
        aead_encrypt(k, b"x")


def test_nonces_unique_per_key_under_concurrency():
    k = SymKey.generate()
    crypto.nonces.record = True
    try:
        envs = []
        lock = threading.Lock()

        def work():
            local = [aead_encrypt(k, b"m") for _ in range(500)]
            with lock:
                envs.extend(local)

        threads = [threading.Thread(target=work) for _ in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        nonces = [e.nonce for e in envs]
        assert len(set(nonces)) == 4000
        assert crypto.nonces.issued[k.fingerprint()] >= set(nonces)
        assert len({n[:4] for n in nonces}) == 1  # one random prefix per key
    finally:
        crypto.nonces.record = False


def test_hash_identity_known_value():
    assert hash_identity(SymKey(bytes(32))).hex() == ZERO_KEY_SHA256


def test_hash_identity_deterministic_and_distinct():
    k = SymKey.generate()
    assert hash_identity(k) == hash_identity(SymKey(k.bytes))
    src = KeySource(7)
    ids = {hash_identity(SymKey.generate(src)) for _ in range(10_000)}
    assert len(ids) == 10_000


def test_symkey_validation_and_repr():
    with pytest.raises(ValueError):
        SymKey(b"short")
    k = SymKey(bytes(range(32)))
    assert bytes(range(32)).hex() not in repr(k)


def test_key_source_deterministic_under_seed():
    a, b = KeySource(42), KeySource(42)
    assert a.random_bytes(100) == b.random_bytes(100)
    assert KeySource(42).child("x").random_bytes(8) != KeySource(42).child("y").random_bytes(8)
    assert KeySource().random_bytes(32) != KeySource().random_bytes(32)


def test_session_keys():
    s, t = b"s" * 32, b"transcript"
    k1 = derive_session_keys(s, t)
    k2 = derive_session_keys(s, t)
    assert k1 == k2
    assert k1[0] != k1[1]
    with pytest.raises(ValueError):
        derive_session_keys(b"", t)


@settings(max_examples=100, deadline=None)
@given(st.binary(min_size=1, max_size=64), st.integers(min_value=0, max_value=63), st.integers(0, 7))
def test_session_keys_sensitive_to_transcript(transcript, pos, bit):
    pos %= len(transcript)
    other = bytearray(transcript)
    other[pos] ^= 1 << bit
    assert derive_session_keys(b"k" * 32, transcript) != derive_session_keys(b"k" * 32, bytes(other))


def test_pack_fields_round_trip():
    fields = [b"", b"a", b"bc" * 100]
    assert crypto.unpack_fields(crypto.pack_fields(*fields), 3) == fields
    with pytest.raises(MalformedEnvelope):
        crypto.unpack_fields(crypto.pack_fields(*fields) + b"x", 3)
