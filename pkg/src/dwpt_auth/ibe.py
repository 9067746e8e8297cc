"""Identity-based keys, pseudonyms and Boneh-Franklin style encryption."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field

from .errors import DecodeError, ParameterError
from .pairing import (
    GROUP_ORDER,
    G1Point,
    G2Point,
    GtElement,
    SystemParams,
    eow_hash,
    hash_to_digest,
    hash_to_identity_point,
    hash_to_scalar,
    pair,
    pseudonym_hash,
    random_scalar,
    scalar_to_bytes,
)

DEFAULT_BATCH_SIZE = 16


@dataclass(frozen=True)
class IdPrivateKey:
    owner_id: bytes
    key_g1: G1Point
    key_g2: G2Point

    def verify(self, params: SystemParams) -> bool:
        """Check both halves against the master public key with pairings."""
        q = hash_to_identity_point(self.owner_id)
        return pair(self.key_g1, params.g2_generator) == pair(
            q.in_g1, params.master_public_g2
        ) and pair(params.g1_generator, self.key_g2) == pair(params.master_public_g1, q.in_g2)


def extract_private_key(master_secret: int, identity: bytes) -> IdPrivateKey:
    q = hash_to_identity_point(identity)
    return IdPrivateKey(bytes(identity), q.in_g1 * master_secret, q.in_g2 * master_secret)


@dataclass(frozen=True)
class PseudonymRecord:
    pid: bytes
    k_i: G2Point
    a_i: int
    index: int


def pseudonym_id(ev_id: bytes, d_ev: int, a_i: int) -> bytes:
    """PID = H4(ID_EV || d_EV * a_i mod q)."""
    return pseudonym_hash(bytes(ev_id) + scalar_to_bytes(d_ev * a_i % GROUP_ORDER))


def pseudonym_exponent(ra_identity: bytes, pid: bytes) -> int:
    return hash_to_scalar(bytes(ra_identity) + bytes(pid))


def pseudonym_key(master_secret: int, params: SystemParams, pid: bytes) -> G2Point:
    """k_i = h(s*H1(ID_RA), H2(ID_RA || PID))."""
    ra_point = hash_to_identity_point(params.ra_identity).in_g2
    return eow_hash(ra_point * master_secret, pseudonym_exponent(params.ra_identity, pid))


def gen_pseudonym_batch(
    master_secret: int,
    params: SystemParams,
    ev_id: bytes,
    d_ev: int,
    count: int = DEFAULT_BATCH_SIZE,
    rng: random.Random | None = None,
    a_values: list[int] | None = None,
) -> list[PseudonymRecord]:
    """Issue ``count`` pseudonyms for one vehicle.

    The ``a_i`` are drawn from ``rng`` unless given explicitly.
    """
    if count < 0:
        raise ParameterError("count must be >= 0")
    if d_ev % GROUP_ORDER == 0:
        raise ParameterError("d_EV must be in Z*_q")
    if a_values is None:
        rng = rng or random.Random()
        a_values = [random_scalar(rng) for _ in range(count)]
    elif len(a_values) != count:
        raise ParameterError("a_values length must equal count")
    records = []
    for index, a_i in enumerate(a_values):
        pid = pseudonym_id(ev_id, d_ev, a_i)
        records.append(PseudonymRecord(pid, pseudonym_key(master_secret, params, pid), a_i, index))
    return records


@dataclass
class _VehicleEntry:
    d_ev: int
    a_values: list[int]
    pids: list[bytes]


@dataclass
class RaRegistry:
    """RA's database: pid -> (ID_EV, index), plus each vehicle's seed material.

    Single writer; callers serialize concurrent registrations.
    """

    by_pid: dict[bytes, tuple[bytes, int]] = field(default_factory=dict)
    vehicles: dict[bytes, _VehicleEntry] = field(default_factory=dict)

    def add(self, ev_id: bytes, d_ev: int, records: list[PseudonymRecord]) -> None:
        entry = self.vehicles.setdefault(ev_id, _VehicleEntry(d_ev, [], []))
        for rec in records:
            self.by_pid[rec.pid] = (ev_id, rec.index)
            entry.a_values.append(rec.a_i)
            entry.pids.append(rec.pid)

    def resolve(self, pid: bytes) -> tuple[bytes, int] | None:
        return self.by_pid.get(pid)

    def __contains__(self, ev_id: bytes) -> bool:
        return ev_id in self.vehicles

    def snapshot(self) -> str:
        rows = [
            {"pid_hex": pid.hex(), "ev_id": ev_id.hex(), "index": index}
            for pid, (ev_id, index) in self.by_pid.items()
        ]
        return json.dumps(rows, indent=1)

    @classmethod
    def from_snapshot(cls, text: str) -> RaRegistry:
        reg = cls()
        for row in json.loads(text):
            reg.by_pid[bytes.fromhex(row["pid_hex"])] = (bytes.fromhex(row["ev_id"]), row["index"])
        return reg


# --- key agreement ----------------------------------------------------------


def ev_pairing_key(cspa_id: bytes, k_i: G2Point) -> GtElement:
    """Vehicle side: e(H1(ID_CSPA), k_i)."""
    return pair(hash_to_identity_point(cspa_id).in_g1, k_i)


def cspa_pairing_key(cspa_key: IdPrivateKey, ra_identity: bytes, pid: bytes) -> GtElement:
    """Provider side: e(s*H1(ID_CSPA), h(H1(ID_RA), H2(ID_RA || PID)))."""
    ra_point = hash_to_identity_point(ra_identity).in_g2
    return pair(cspa_key.key_g1, eow_hash(ra_point, pseudonym_exponent(ra_identity, pid)))


# --- BasicIdent encryption --------------------------------------------------


@dataclass(frozen=True)
class IbeCiphertext:
    ephemeral_point: G1Point
    masked_payload: bytes

    def to_bytes(self) -> bytes:
        return self.ephemeral_point.to_bytes() + self.masked_payload

    @classmethod
    def from_bytes(cls, data: bytes) -> IbeCiphertext:
        if len(data) <= G1Point.SIZE:
            raise DecodeError("ciphertext too short", "ephemeral_point")
        return cls(G1Point.from_bytes(data[: G1Point.SIZE]), bytes(data[G1Point.SIZE :]))


def _keystream(secret: GtElement, length: int) -> bytes:
    seed = b"ibe-mask" + secret.to_bytes()
    blocks = (length + 31) // 32
    return b"".join(hash_to_digest(seed + i.to_bytes(4, "big")) for i in range(blocks))[:length]


def _xor(a: bytes, b: bytes) -> bytes:
    return bytes(x ^ y for x, y in zip(a, b))


def ibe_encrypt(params: SystemParams, recipient_id: bytes, payload: bytes, rng: random.Random) -> IbeCiphertext:
    if not payload:
        raise ParameterError("payload must be nonempty")
    r = random_scalar(rng)
    q = hash_to_identity_point(recipient_id).in_g2
    secret = pair(params.master_public_g1, q) ** r
    return IbeCiphertext(params.g1_generator * r, _xor(payload, _keystream(secret, len(payload))))


def ibe_decrypt(key: IdPrivateKey, ct: IbeCiphertext) -> bytes:
    # e(rP, sQ) = e(sP, Q)^r; a wrong key just yields a wrong mask.
    secret = pair(ct.ephemeral_point, key.key_g2)
    return _xor(ct.masked_payload, _keystream(secret, len(ct.masked_payload)))
