"""Fixed-width message codecs and the symmetric / public-key envelopes.

Every message body is a concatenation of fixed-width fields in schema order,
with no tags or length prefixes.  The only variable part is the pseudonym
batch in ``m4``, whose length follows from its count field.  Sizes are
plaintext field sums; envelope overhead (nonce, AEAD tag, ephemeral key) is
accounted separately.

Field widths: identities, nonces, pseudonyms, macs and digests 32 bytes;
source-group points 64; mirror-group points 128; tickets 64; timestamps
8 (big-endian milliseconds); rate and flag 1; costs 8.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .errors import DecodeError, EnvelopeAuthError

ID = NONCE = PID = MAC = DIGEST = SCALAR = 32
POINT = 64
POINT2 = 128
TICKET = 64
TS = 8
RATE = FLAG = 1
COST = 8
COUNT = 2

# m4 carries one (a_i, k_i) pair per pseudonym.
BATCH_ITEM = SCALAR + POINT2


@dataclass(frozen=True)
class Repeated:
    """A field whose width is ``count_field * item_width``."""

    count_field: str
    item_width: int


SCHEMAS: dict[str, tuple[tuple[str, int | Repeated], ...]] = {
    "m1": (("id_cspa", ID), ("t", TS)),
    "m2": (("key_g1", POINT), ("key_g2", POINT2), ("t", TS)),
    "m3": (("id_ev", ID), ("t", TS)),
    "m4": (
        ("key_g1", POINT),
        ("key_g2", POINT2),
        ("d_ev", SCALAR),
        ("count", COUNT),
        ("batch", Repeated("count", BATCH_ITEM)),
        ("t", TS),
    ),
    "m3p": (("pid", PID), ("t", TS)),
    "m4p": (("ticket", TICKET), ("t", TS)),
    "m5": (("n_ev", NONCE), ("r_point", POINT), ("t", TS)),
    "m6": (("n_cspa", NONCE), ("r_point", POINT), ("id_cspa", ID), ("t", TS)),
    "m7": (("id_ra", ID), ("pid", PID), ("ticket", TICKET), ("mac_ev", MAC), ("t", TS)),
    "m8": (("mac_cspa", MAC), ("masked_token", DIGEST), ("t", TS)),
    "m9": (("token_hash", DIGEST), ("pid", PID), ("session_key", DIGEST), ("t", TS)),
    "m10": (("pid", PID), ("n_rsu", NONCE), ("t", TS)),
    "m11": (("n_rsu_next", NONCE), ("m_ev", NONCE), ("t", TS), ("rate", RATE)),
    "m12": (("head", DIGEST), ("anchor", DIGEST), ("t", TS)),
    "m13": (("flag", FLAG), ("value", DIGEST)),
    "m14": (("value", DIGEST),),
    "m15": (("flag", FLAG), ("preimage", DIGEST), ("anchor", DIGEST)),
    "m16": (("anchor", DIGEST), ("t", TS)),
    "m17": (("token_hash", DIGEST), ("cost", COST), ("t", TS)),
    "m18": (("ticket", TICKET), ("cost", COST), ("t", TS)),
    "m19": (("cost", COST), ("t", TS)),
}

# Plaintext lengths of the authentication messages.  m7's field widths sum
# to 168; the published figure for it is 170.
EXPECTED_SIZES = {
    "m5": 104,
    "m6": 136,
    "m7": 168,
    "m8": 72,
    "m9": 104,
    "m10": 72,
    "m11": 73,
    "m12": 72,
    "m13": 33,
    "m14": 32,
    "m15": 65,
    "m16": 40,
}
PUBLISHED_SIZES = {**EXPECTED_SIZES, "m7": 170}


@dataclass(frozen=True)
class WireMessage:
    tag: str
    fields: dict[str, bytes] = field(default_factory=dict)

    def __getitem__(self, name: str) -> bytes:
        return self.fields[name]

    def as_int(self, name: str) -> int:
        return int.from_bytes(self.fields[name], "big")

    @property
    def timestamp(self) -> int:
        return self.as_int("t")


def u(value: int, width: int) -> bytes:
    """Unsigned big-endian integer of ``width`` bytes."""
    return value.to_bytes(width, "big")


def ts(ms: int) -> bytes:
    return u(ms, TS)


def message(tag: str, **values) -> WireMessage:
    """Build a message, converting ints to their field width."""
    schema = _schema(tag)
    widths = dict(schema)
    fields = {}
    for name, _ in schema:
        if name not in values:
            raise DecodeError("missing field", f"{tag}.{name}")
        v = values[name]
        if isinstance(v, int):
            v = u(v, widths[name])
        fields[name] = bytes(v)
    extra = set(values) - set(widths)
    if extra:
        raise DecodeError(f"unknown fields {sorted(extra)}", tag)
    return WireMessage(tag, fields)


def _schema(tag: str):
    try:
        return SCHEMAS[tag]
    except KeyError:
        raise DecodeError(f"unknown message tag {tag!r}") from None


def _width(layout, fields: dict[str, bytes]) -> int:
    if isinstance(layout, Repeated):
        return int.from_bytes(fields[layout.count_field], "big") * layout.item_width
    return layout


def encode(msg: WireMessage) -> bytes:
    out = []
    for name, layout in _schema(msg.tag):
        if name not in msg.fields:
            raise DecodeError("missing field", f"{msg.tag}.{name}")
        value = msg.fields[name]
        want = _width(layout, msg.fields)
        if len(value) != want:
            raise DecodeError(f"width {len(value)} != {want}", f"{msg.tag}.{name}")
        out.append(value)
    return b"".join(out)


def decode(tag: str, data: bytes) -> WireMessage:
    fields: dict[str, bytes] = {}
    pos = 0
    for name, layout in _schema(tag):
        want = _width(layout, fields)
        if pos + want > len(data):
            raise DecodeError(f"truncated: need {want} bytes at offset {pos}", f"{tag}.{name}")
        fields[name] = bytes(data[pos : pos + want])
        pos += want
    if pos != len(data):
        raise DecodeError(f"{len(data) - pos} trailing bytes", tag)
    return WireMessage(tag, fields)


def encoded_size(tag: str, count: int = 0) -> int:
    """Encoded length of a message kind (``count`` sizes repeated fields)."""
    total = 0
    for _, layout in _schema(tag):
        total += count * layout.item_width if isinstance(layout, Repeated) else layout
    return total


def split_items(blob: bytes, *widths: int) -> list[tuple[bytes, ...]]:
    """Split a repeated field into tuples of sub-fields."""
    step = sum(widths)
    if step == 0 or len(blob) % step:
        raise DecodeError("repeated field not a whole number of items")
    items = []
    for off in range(0, len(blob), step):
        parts, pos = [], off
        for w in widths:
            parts.append(blob[pos : pos + w])
            pos += w
        items.append(tuple(parts))
    return items


# --- symmetric envelope -----------------------------------------------------

GROUP_KEY_SIZE = 32
ENVELOPE_NONCE = 12


@dataclass(frozen=True)
class GroupKeyEnvelope:
    """AES-256-GCM ciphertext; ``key_id`` names the key and is bound as AAD."""

    key_id: bytes
    nonce: bytes
    ciphertext: bytes

    def to_bytes(self) -> bytes:
        return bytes([len(self.key_id)]) + self.key_id + self.nonce + self.ciphertext

    @classmethod
    def from_bytes(cls, data: bytes) -> GroupKeyEnvelope:
        if not data:
            raise DecodeError("empty envelope", "key_id")
        n = data[0]
        if len(data) < 1 + n + ENVELOPE_NONCE + 16:
            raise DecodeError("envelope too short", "ciphertext")
        key_id = data[1 : 1 + n]
        nonce = data[1 + n : 1 + n + ENVELOPE_NONCE]
        return cls(bytes(key_id), bytes(nonce), bytes(data[1 + n + ENVELOPE_NONCE :]))


def seal_group(key: bytes, plaintext: bytes, rng: random.Random, key_id: bytes = b"") -> GroupKeyEnvelope:
    if len(key) != GROUP_KEY_SIZE:
        raise ValueError("group key must be 32 bytes")
    nonce = rng.randbytes(ENVELOPE_NONCE)
    return GroupKeyEnvelope(key_id, nonce, AESGCM(key).encrypt(nonce, plaintext, key_id))


def open_group(key: bytes, env: GroupKeyEnvelope | bytes) -> bytes:
    if isinstance(env, (bytes, bytearray)):
        env = GroupKeyEnvelope.from_bytes(bytes(env))
    try:
        return AESGCM(key).decrypt(env.nonce, env.ciphertext, env.key_id)
    except InvalidTag:
        raise EnvelopeAuthError(f"envelope under key {env.key_id!r} failed authentication") from None


def new_group_key(rng: random.Random) -> bytes:
    return rng.randbytes(GROUP_KEY_SIZE)


# --- public-key envelope ----------------------------------------------------
# Registration and billing messages travel under a hybrid X25519 envelope:
# ephemeral public key (32) || nonce (12) || AES-GCM ciphertext.

_PKE_INFO = b"dwpt-pke-v1"


class PkeKeyPair:
    def __init__(self, private: X25519PrivateKey):
        self._private = private
        self.public = private.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )

    @classmethod
    def generate(cls, rng: random.Random) -> PkeKeyPair:
        return cls(X25519PrivateKey.from_private_bytes(rng.randbytes(32)))

    def exchange(self, peer_public: bytes) -> bytes:
        return self._private.exchange(X25519PublicKey.from_public_bytes(peer_public))


def _pke_key(shared: bytes, eph_public: bytes, recipient_public: bytes) -> bytes:
    return HKDF(
        algorithm=hashes.SHA256(), length=32, salt=None, info=_PKE_INFO + eph_public + recipient_public
    ).derive(shared)


def pke_seal(recipient_public: bytes, plaintext: bytes, rng: random.Random) -> bytes:
    eph = PkeKeyPair.generate(rng)
    key = _pke_key(eph.exchange(recipient_public), eph.public, recipient_public)
    nonce = rng.randbytes(ENVELOPE_NONCE)
    return eph.public + nonce + AESGCM(key).encrypt(nonce, plaintext, None)


def pke_open(keypair: PkeKeyPair, data: bytes) -> bytes:
    if len(data) < 32 + ENVELOPE_NONCE + 16:
        raise DecodeError("public-key envelope too short")
    eph_public, nonce, ct = data[:32], data[32:44], data[44:]
    try:
        key = _pke_key(keypair.exchange(eph_public), eph_public, keypair.public)
        return AESGCM(key).decrypt(nonce, ct, None)
    except (InvalidTag, ValueError):
        raise EnvelopeAuthError("public-key envelope failed authentication") from None


def hexdump_line(tag: str, direction: str, src: str, dst: str, data: bytes) -> str:
    """One transcript line: ``tag dir src dst len hex``."""
    return f"{tag} {direction} {src} {dst} {len(data)} {data.hex()}"
