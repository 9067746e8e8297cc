"""Bilinear-group arithmetic and the hash suite.

The protocol is written for a symmetric pairing ``e: G1 x G1 -> G2``.  We run
it on BLS12-381, which is asymmetric, so every identity is hashed into both
source groups (:class:`PairedIdentityPoint`) and each formula pins which side
its operands live on.  Nothing above this module touches the curve library.

Group elements are immutable wrappers with fixed-width encodings:

==============  ======  =============================================
type            bytes   layout
==============  ======  =============================================
scalar          32      big-endian integer mod q
G1Point         64      zero padding + 49-byte compressed point
G2Point         128     zero padding + 97-byte compressed point
GtElement       384     compressed cyclotomic element
==============  ======  =============================================

The identity of G1/G2 encodes as all zero bytes.
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass

from petrelic.additive.pairing import G1, G2, GT

from .errors import DecodeError, ParameterError

GROUP_ORDER = int(G1.order())
SCALAR_SIZE = 32
DIGEST_SIZE = 32
ID_SIZE = 32

H1_TAG = b"DWPT-H1:"
H2_TAG = b"DWPT-H2:"
H3_TAG = b"DWPT-H3:"
H4_TAG = b"DWPT-H4:"


def scalar_to_bytes(x: int) -> bytes:
    return (x % GROUP_ORDER).to_bytes(SCALAR_SIZE, "big")


def scalar_from_bytes(data: bytes) -> int:
    if len(data) != SCALAR_SIZE:
        raise DecodeError(f"expected {SCALAR_SIZE} bytes, got {len(data)}", "scalar")
    x = int.from_bytes(data, "big")
    if x >= GROUP_ORDER:
        raise DecodeError("scalar not reduced mod q", "scalar")
    return x


def random_scalar(rng: random.Random) -> int:
    """Uniform element of Z*_q."""
    return rng.randrange(1, GROUP_ORDER)


def identity_bytes(label: str | bytes) -> bytes:
    """Fixed 32-byte identity string: the label, zero padded."""
    raw = label.encode() if isinstance(label, str) else bytes(label)
    if not raw:
        raise ParameterError("identity must be nonempty")
    if len(raw) > ID_SIZE:
        raise ParameterError(f"identity longer than {ID_SIZE} bytes")
    return raw.ljust(ID_SIZE, b"\x00")


class _GroupElement:
    __slots__ = ("_e",)
    _group = None
    _raw_size = 0
    SIZE = 0

    def __init__(self, element):
        self._e = element

    @classmethod
    def generator(cls):
        return cls(cls._group.generator())

    @classmethod
    def identity(cls):
        return cls(cls._group.neutral_element())

    def is_identity(self) -> bool:
        return self._e == self._group.neutral_element()

    def __add__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        return type(self)(self._e + other._e)

    def __neg__(self):
        return type(self)(-self._e)

    def __sub__(self, other):
        return self + (-other)

    def __mul__(self, k):
        if not isinstance(k, int):
            return NotImplemented
        return type(self)(self._e * (k % GROUP_ORDER))

    __rmul__ = __mul__

    def __eq__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        return self._e == other._e

    def __hash__(self):
        return hash(self.to_bytes())

    def __repr__(self):
        return f"{type(self).__name__}({self.to_bytes().hex()[:24]}...)"

    def to_bytes(self) -> bytes:
        if self.is_identity():
            return bytes(self.SIZE)
        raw = self._e.to_binary()
        return raw.rjust(self.SIZE, b"\x00")

    @classmethod
    def from_bytes(cls, data: bytes):
        name = cls.__name__
        if len(data) != cls.SIZE:
            raise DecodeError(f"expected {cls.SIZE} bytes, got {len(data)}", name)
        if not any(data):
            return cls.identity()
        pad = cls.SIZE - cls._raw_size
        if any(data[:pad]) or data[pad] not in (2, 3):
            raise DecodeError("not a canonical point encoding", name)
        try:
            element = cls._element_type.from_binary(data[pad:])
        except Exception as exc:  # the C backend raises assorted types
            raise DecodeError(f"invalid point: {exc}", name) from exc
        if not element.is_valid():
            raise DecodeError("point not on curve or not in subgroup", name)
        return cls(element)


class G1Point(_GroupElement):
    """Element of the first source group (left pairing slot)."""

    __slots__ = ()
    _group = G1
    _element_type = type(G1.generator())
    _raw_size = 49
    SIZE = 64


class G2Point(_GroupElement):
    """Element of the mirror source group (right pairing slot)."""

    __slots__ = ()
    _group = G2
    _element_type = type(G2.generator())
    _raw_size = 97
    SIZE = 128


class GtElement:
    """Target-group element, written multiplicatively."""

    __slots__ = ("_e",)
    SIZE = 384
    _element_type = type(GT.generator())

    def __init__(self, element):
        self._e = element

    @classmethod
    def identity(cls) -> GtElement:
        return cls(GT.neutral_element())

    def is_identity(self) -> bool:
        return self._e == GT.neutral_element()

    def __mul__(self, other: GtElement) -> GtElement:
        if not isinstance(other, GtElement):
            return NotImplemented
        return GtElement(self._e + other._e)

    def __pow__(self, k: int) -> GtElement:
        return GtElement(self._e * (k % GROUP_ORDER))

    def __eq__(self, other):
        if not isinstance(other, GtElement):
            return NotImplemented
        return self._e == other._e

    def __hash__(self):
        return hash(self.to_bytes())

    def __repr__(self):
        return f"GtElement({self.to_bytes().hex()[:24]}...)"

    def to_bytes(self) -> bytes:
        raw = self._e.to_binary()
        if len(raw) != self.SIZE:  # pragma: no cover - backend contract
            raise AssertionError(f"target group encoding is {len(raw)} bytes")
        return raw

    @classmethod
    def from_bytes(cls, data: bytes) -> GtElement:
        if len(data) != cls.SIZE:
            raise DecodeError(f"expected {cls.SIZE} bytes, got {len(data)}", "GtElement")
        try:
            element = cls._element_type.from_binary(data)
        except Exception as exc:
            raise DecodeError(f"invalid target group element: {exc}", "GtElement") from exc
        return cls(element)


def pair(a: G1Point, b: G2Point) -> GtElement:
    return GtElement(a._e.pair(b._e))


@dataclass(frozen=True)
class PairedIdentityPoint:
    in_g1: G1Point
    in_g2: G2Point


@dataclass(frozen=True)
class SystemParams:
    """Public parameters published by the registration authority."""

    g1_generator: G1Point
    g2_generator: G2Point
    master_public_g1: G1Point
    master_public_g2: G2Point
    ra_identity: bytes
    update_constant: int
    group_order: int = GROUP_ORDER
    hash_domain_tags: tuple = (H1_TAG, H2_TAG, H3_TAG, H4_TAG)

    def to_bytes(self) -> bytes:
        return b"".join(
            [
                self.g1_generator.to_bytes(),
                self.g2_generator.to_bytes(),
                self.master_public_g1.to_bytes(),
                self.master_public_g2.to_bytes(),
                self.ra_identity,
                scalar_to_bytes(self.update_constant),
                self.group_order.to_bytes(SCALAR_SIZE, "big"),
                *self.hash_domain_tags,
            ]
        )

    def check(self) -> bool:
        """Public consistency check e(sP1, P2) == e(P1, sP2)."""
        return pair(self.master_public_g1, self.g2_generator) == pair(
            self.g1_generator, self.master_public_g2
        )


def setup(
    rng_seed: bytes,
    master_secret: int | None = None,
    ra_identity: bytes | str = b"RA",
) -> tuple[SystemParams, int]:
    """Generate system parameters and the master secret.

    Deterministic in ``rng_seed``.  ``master_secret`` overrides the sampled
    secret; it must lie in Z*_q.
    """
    rng = random.Random(rng_seed)
    if master_secret is None:
        s = random_scalar(rng)
    else:
        s = master_secret % GROUP_ORDER
        if s == 0:
            raise ParameterError("master secret must be in Z*_q")
    update_constant = random_scalar(rng)
    p1, p2 = G1Point.generator(), G2Point.generator()
    params = SystemParams(
        g1_generator=p1,
        g2_generator=p2,
        master_public_g1=p1 * s,
        master_public_g2=p2 * s,
        ra_identity=identity_bytes(ra_identity),
        update_constant=update_constant,
    )
    return params, s


def hash_to_identity_point(identity: bytes) -> PairedIdentityPoint:
    """H1: hash an identity into both source groups."""
    if not identity:
        raise ParameterError("H1 input must be nonempty")
    msg = H1_TAG + bytes(identity)
    return PairedIdentityPoint(G1Point(G1.hash_to_point(msg)), G2Point(G2.hash_to_point(msg)))


def hash_to_scalar(data: bytes) -> int:
    """H2: hash into [1, q-1]."""
    if not data:
        raise ParameterError("H2 input must be nonempty")
    wide = hashlib.sha256(H2_TAG + b"\x00" + data).digest()
    wide += hashlib.sha256(H2_TAG + b"\x01" + data).digest()
    return int.from_bytes(wide, "big") % (GROUP_ORDER - 1) + 1


def hash_to_digest(data: bytes) -> bytes:
    """H3, also the generic byte-string hash h(.) used by the hash chain."""
    return hashlib.sha256(H3_TAG + data).digest()


def pseudonym_hash(data: bytes) -> bytes:
    """H4, the pseudonym hash."""
    return hashlib.sha256(H4_TAG + data).digest()


def eow_hash(point, x: int):
    """Commutative e-one-way hash h(P, x) := x*P.

    h(aP, x) = a*h(P, x) holds exactly; inverting it is a discrete log.
    """
    if x % GROUP_ORDER == 0:
        raise ParameterError("eow_hash exponent must be in Z*_q")
    return point * x
