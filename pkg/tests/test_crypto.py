import random

import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from myzone import crypto
from myzone.crypto import SessionKey
from myzone.errors import AuthenticityFailure, ConfidentialityFailure


def test_keypair_deterministic(scheme):
    assert crypto.generate_keypair(1, scheme) == crypto.generate_keypair(1, scheme)


def test_keypair_distinct(scheme):
    assert crypto.generate_keypair(1, scheme).public_key != crypto.generate_keypair(2, scheme).public_key


def test_sign_roundtrip(scheme):
    kp = crypto.generate_keypair(5, scheme)
    assert scheme.verify(kp.public_key, b"x", scheme.sign(kp.private_key, b"x"))


def test_digest_order_sensitive(scheme):
    kp = crypto.generate_keypair(3, scheme)
    fields = ["10.0.0.1", 7000, "UDP", "", 0, ["tok1", "tok2"]]
    sig = crypto.sign_digest(kp.private_key, fields, scheme)
    assert crypto.verify_digest(kp.public_key, fields, sig, scheme)
    swapped = [fields[1], fields[0]] + fields[2:]
    assert not crypto.verify_digest(kp.public_key, swapped, sig, scheme)


def test_sign_digest_rejects_empty(toy):
    with pytest.raises(ValueError):
        crypto.sign_digest(crypto.generate_keypair(1, toy).private_key, [], toy)


def test_digest_every_single_bit_flip_detected(toy):
    kp = crypto.generate_keypair(11, toy)
    fields = [b"198.51.0.7", b"\x1b\x58", b"UDP"]
    sig = crypto.sign_digest(kp.private_key, fields, toy)
    for i, f in enumerate(fields):
        for byte in range(len(f)):
            for bit in range(8):
                mutated = bytearray(f)
                mutated[byte] ^= 1 << bit
                trial = list(fields)
                trial[i] = bytes(mutated)
                assert not crypto.verify_digest(kp.public_key, trial, sig, toy)
    for byte in range(len(sig)):
        for bit in range(8):
            bad = bytearray(sig)
            bad[byte] ^= 1 << bit
            assert not crypto.verify_digest(kp.public_key, fields, bytes(bad), toy)


def test_session_key_seal_all_pairs(scheme):
    keys = {name: crypto.generate_keypair(seed, scheme) for seed, name in enumerate("ABC", start=1)}
    k = SessionKey(b"k" * 32, 1234)
    for sender in keys:
        for recipient in keys:
            if sender == recipient:
                continue
            blob = crypto.seal_session_key(keys[sender].private_key, keys[recipient].public_key, k, scheme)
            for opener in keys:
                for claimed in keys:
                    args = (keys[opener].private_key, keys[claimed].public_key, blob, scheme)
                    if claimed != sender:
                        with pytest.raises(AuthenticityFailure):
                            crypto.open_session_key(*args)
                    elif opener != recipient:
                        with pytest.raises(ConfidentialityFailure):
                            crypto.open_session_key(*args)
                    else:
                        assert crypto.open_session_key(*args) == k


@settings(max_examples=60, deadline=None)
@given(st.binary(max_size=2048))
def test_seal_roundtrip_property(payload):
    s = crypto.TOY
    a, b = s.keypair(1), s.keypair(2)
    assert crypto.open_sealed(b.private_key, a.public_key, crypto.seal(a.private_key, b.public_key, payload, s), s) == payload


def test_seal_roundtrip_standard():
    s = crypto.get_scheme("standard")
    a, b = s.keypair(1), s.keypair(2)
    for payload in (b"", b"a", bytes(range(256)) * 40):
        assert crypto.open_sealed(b.private_key, a.public_key, crypto.seal(a.private_key, b.public_key, payload, s), s) == payload


def test_sealed_blob_single_byte_mutation_detected(scheme):
    a, b = scheme.keypair(1), scheme.keypair(2)
    blob = crypto.seal(a.private_key, b.public_key, b"meet at noon", scheme)
    for i in range(len(blob)):
        bad = bytearray(blob)
        bad[i] ^= 0x01
        with pytest.raises((AuthenticityFailure, ConfidentialityFailure)):
            crypto.open_sealed(b.private_key, a.public_key, bytes(bad), scheme)


def test_session_cipher(scheme):
    key = b"s" * 32
    ct = scheme.session_encrypt(key, b"frame body", b"n" * 12)
    assert b"frame body" not in ct
    assert scheme.session_decrypt(key, ct) == b"frame body"
    with pytest.raises(ConfidentialityFailure):
        scheme.session_decrypt(b"t" * 32, ct)


def test_dual_hash_deterministic_and_distinct():
    a = crypto.dual_hash("alice")
    assert a == crypto.dual_hash("alice")
    assert a[0] != a[1]
    assert all(0 <= x < crypto.ID_SPACE for x in a)


def test_dual_hash_rejects_empty():
    with pytest.raises(ValueError):
        crypto.dual_hash("")


@pytest.mark.parametrize("which", [0, 1])
def test_dual_hash_uniform(which):
    rng = random.Random(42)
    counts = [0] * 64
    for _ in range(10_000):
        name = "".join(rng.choice("abcdefghijklmnopqrstuvwxyz0123456789") for _ in range(10))
        counts[crypto.dual_hash(name)[which] >> (crypto.ID_BITS - 6)] += 1
    assert chisquare(counts).pvalue > 0.01
