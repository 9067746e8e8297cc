import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from dwpt_auth.errors import DecodeError, EnvelopeAuthError
from dwpt_auth.wire import (
    EXPECTED_SIZES,
    PUBLISHED_SIZES,
    SCHEMAS,
    GroupKeyEnvelope,
    PkeKeyPair,
    Repeated,
    decode,
    encode,
    encoded_size,
    hexdump_line,
    message,
    new_group_key,
    open_group,
    pke_open,
    pke_seal,
    seal_group,
    split_items,
)

# Field widths summed by hand: nonce/id/pid/mac/digest 32, point 64, ticket 64,
# timestamp 8, rate and flag 1.
HAND_SUMS = {
    "m5": 32 + 64 + 8,
    "m6": 32 + 64 + 32 + 8,
    "m7": 32 + 32 + 64 + 32 + 8,
    "m8": 32 + 32 + 8,
    "m9": 32 + 32 + 32 + 8,
    "m10": 32 + 32 + 8,
    "m11": 32 + 32 + 8 + 1,
    "m12": 32 + 32 + 8,
    "m13": 1 + 32,
    "m14": 32,
    "m15": 1 + 32 + 32,
    "m16": 32 + 8,
}


@pytest.mark.parametrize("tag", sorted(HAND_SUMS))
def test_encoded_size_matches_field_sum(tag):
    assert encoded_size(tag) == HAND_SUMS[tag] == EXPECTED_SIZES[tag]


def test_published_sizes_differ_only_for_m7():
    diff = {t for t in EXPECTED_SIZES if EXPECTED_SIZES[t] != PUBLISHED_SIZES[t]}
    assert diff == {"m7"}
    assert PUBLISHED_SIZES["m7"] == 170 and EXPECTED_SIZES["m7"] == 168


def test_billing_message_sizes():
    assert encoded_size("m17") == 48
    assert encoded_size("m18") == 80
    assert encoded_size("m19") == 16


def _sample(tag, rng, count=2):
    values = {}
    for name, width in SCHEMAS[tag]:
        if isinstance(width, Repeated):
            values[name] = rng.randbytes(count * width.item_width)
        elif name == "count":
            values[name] = count
        else:
            values[name] = rng.randbytes(width)
    return message(tag, **values)


@pytest.mark.parametrize("tag", sorted(SCHEMAS))
def test_roundtrip_every_schema(tag):
    msg = _sample(tag, random.Random(tag))
    raw = encode(msg)
    assert len(raw) == encoded_size(tag, count=2)
    assert decode(tag, raw) == msg


@given(st.binary(min_size=104, max_size=104))
def test_m5_decode_encode_is_identity(raw):
    assert encode(decode("m5", raw)) == raw


def test_decode_rejects_truncation_and_trailing_bytes():
    raw = encode(_sample("m10", random.Random(1)))
    with pytest.raises(DecodeError) as exc:
        decode("m10", raw[:-1])
    assert exc.value.field == "m10.t"
    with pytest.raises(DecodeError):
        decode("m10", raw + b"\x00")


def test_encode_rejects_wrong_width():
    msg = message("m14", value=bytes(32))
    bad = type(msg)("m14", {"value": bytes(31)})
    with pytest.raises(DecodeError) as exc:
        encode(bad)
    assert exc.value.field == "m14.value"
    assert encode(msg) == bytes(32)


def test_message_requires_exact_fields():
    with pytest.raises(DecodeError):
        message("m16", anchor=bytes(32))
    with pytest.raises(DecodeError):
        message("m16", anchor=bytes(32), t=0, extra=1)
    with pytest.raises(DecodeError):
        decode("m99", b"")


def test_int_fields_are_big_endian():
    msg = message("m19", cost=61, t=1234)
    assert encode(msg) == (61).to_bytes(8, "big") + (1234).to_bytes(8, "big")
    assert msg.as_int("cost") == 61 and msg.timestamp == 1234


def test_split_items():
    blob = b"a" * 32 + b"b" * 128 + b"c" * 32 + b"d" * 128
    items = split_items(blob, 32, 128)
    assert items == [(b"a" * 32, b"b" * 128), (b"c" * 32, b"d" * 128)]
    with pytest.raises(DecodeError):
        split_items(blob[:-1], 32, 128)


def test_group_envelope_roundtrip_and_binding():
    rng = random.Random(3)
    key = new_group_key(rng)
    env = seal_group(key, b"hello", rng, b"GK")
    assert open_group(key, env.to_bytes()) == b"hello"
    assert GroupKeyEnvelope.from_bytes(env.to_bytes()) == env
    with pytest.raises(EnvelopeAuthError):
        open_group(new_group_key(rng), env)
    relabelled = GroupKeyEnvelope(b"GX", env.nonce, env.ciphertext)
    with pytest.raises(EnvelopeAuthError):
        open_group(key, relabelled)


@given(st.integers(min_value=0, max_value=200))
def test_group_envelope_detects_any_bit_flip(index):
    rng = random.Random(9)
    key = new_group_key(rng)
    raw = bytearray(seal_group(key, b"payload-123", rng, b"k").to_bytes())
    raw[index % len(raw)] ^= 0x80
    with pytest.raises((EnvelopeAuthError, DecodeError)):
        open_group(key, bytes(raw))


def test_group_envelope_is_deterministic_in_rng():
    key = bytes(32)
    a = seal_group(key, b"x", random.Random(1)).to_bytes()
    b = seal_group(key, b"x", random.Random(1)).to_bytes()
    assert a == b


def test_pke_roundtrip_and_wrong_recipient():
    rng = random.Random(4)
    alice, bob = PkeKeyPair.generate(rng), PkeKeyPair.generate(rng)
    ct = pke_seal(alice.public, b"secret", rng)
    assert pke_open(alice, ct) == b"secret"
    with pytest.raises(EnvelopeAuthError):
        pke_open(bob, ct)
    with pytest.raises(DecodeError):
        pke_open(alice, ct[:20])
    tampered = ct[:-1] + bytes([ct[-1] ^ 1])
    with pytest.raises(EnvelopeAuthError):
        pke_open(alice, tampered)


def test_hexdump_line():
    assert hexdump_line("m14", "send", "a", "b", b"\x01\x02") == "m14 send a b 2 0102"
