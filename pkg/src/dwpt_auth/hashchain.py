"""Per-pad authentication with a hash chain, and charging termination.

For base ``b = h(T) || h(M_EV)`` the chain head is ``h^n(b)``.  At the pad
with index ``i`` (counted from the segment entry) the vehicle presents
``h^(n-1-i)(b)``.  A pad that has not yet received a relay from its neighbour
checks ``h^(i+1)(v) == head``; once the neighbour relays its accepted value
``w`` it only needs ``h(v) == w``.  Either way each pad enforces that the
value is exactly one step further along the chain than the last one used.

Termination reveals ``h(x)`` with ``x = h(T) xor h(M'_EV)`` and the anchor
``y = h(h(x))``, which the pads received from the RSU in m12.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ChainExhaustedError, ChainRejected, ParameterError, ProtocolError
from .pairing import hash_to_digest
from .wire import WireMessage, message

CHAIN_MARGIN = 2
MOD_256 = 1 << 256


def iterate(data: bytes, times: int) -> bytes:
    """h^times(data), with h^0 the identity."""
    for _ in range(times):
        data = hash_to_digest(data)
    return data


def xor_bytes(a: bytes, b: bytes) -> bytes:
    if len(a) != len(b):
        raise ValueError("xor operands differ in length")
    return bytes(x ^ y for x, y in zip(a, b))


def add_update_constant(m_ev: bytes, k: int) -> bytes:
    """M'_EV = M_EV + k as 256-bit integers."""
    return ((int.from_bytes(m_ev, "big") + k) % MOD_256).to_bytes(32, "big")


def default_chain_length(pads_per_segment: int) -> int:
    return pads_per_segment + CHAIN_MARGIN


@dataclass
class ChainState:
    token_hash: bytes
    n: int
    base: bytes
    head: bytes
    anchor: bytes
    release: bytes  # x = h(T) xor h(M'_EV); h(x) is revealed at termination
    next_index: int = 0


def build_chain(token_hash: bytes, m_ev: bytes, n: int, update_constant: int) -> ChainState:
    if n < 2:
        raise ParameterError("chain length must be at least 2")
    base = token_hash + hash_to_digest(m_ev)
    release = xor_bytes(token_hash, hash_to_digest(add_update_constant(m_ev, update_constant)))
    return ChainState(
        token_hash=token_hash,
        n=n,
        base=base,
        head=iterate(base, n),
        anchor=iterate(release, 2),
        release=release,
    )


def ev_next_auth_value(chain: ChainState, step: int | None = None) -> WireMessage:
    """m13 for pad ``step`` (defaults to the chain's next index)."""
    i = chain.next_index if step is None else step
    if i < 0:
        raise ParameterError("step must be >= 0")
    if i >= chain.n - 1:
        raise ChainExhaustedError(f"chain of length {chain.n} has no value for pad {i}")
    if step is None:
        chain.next_index += 1
    return message("m13", flag=1, value=iterate(chain.base, chain.n - 1 - i))


def ev_terminate(chain: ChainState) -> WireMessage:
    return message("m15", flag=0, preimage=hash_to_digest(chain.release), anchor=chain.anchor)


@dataclass
class PadSession:
    head: bytes
    anchor: bytes
    expected: bytes
    depth: int  # accept v iff iterate(v, depth) == expected
    accepts: int = 0


@dataclass
class ChargingPad:
    """Pad-side verifier.  One record per active chain, keyed by anchor."""

    name: str
    position: int
    sessions: dict[bytes, PadSession] = field(default_factory=dict)
    rejects: int = 0

    def store_chain(self, m12: WireMessage) -> None:
        head, anchor = m12["head"], m12["anchor"]
        self.sessions[anchor] = PadSession(head, anchor, head, self.position + 1)

    def relay_in(self, m14: WireMessage) -> bool:
        """Advance the matching record to the neighbour's accepted value."""
        v = m14["value"]
        for s in self.sessions.values():
            if s.depth >= 1 and iterate(v, s.depth - 1) == s.expected:
                s.expected, s.depth = v, 1
                return True
        return False

    def verify_and_relay(self, m13: WireMessage) -> tuple[PadSession, WireMessage]:
        """Accept an m13 value and return the m14 relay, or raise ChainRejected."""
        if m13["flag"] != b"\x01":
            raise ChainRejected("m13 flag is not 1")
        v = m13["value"]
        for s in self.sessions.values():
            if iterate(v, s.depth) == s.expected:
                s.expected, s.depth = v, 1
                s.accepts += 1
                return s, message("m14", value=v)
        self.rejects += 1
        raise ChainRejected(f"{self.name}: value not on any active chain")

    def verify_termination(self, m15: WireMessage) -> PadSession:
        if m15["flag"] != b"\x00":
            raise ChainRejected("m15 flag is not 0")
        if not self.sessions:
            raise ProtocolError(f"{self.name}: no charging session to terminate")
        s = self.sessions.get(m15["anchor"])
        if s is None or hash_to_digest(m15["preimage"]) != s.anchor:
            self.rejects += 1
            raise ChainRejected(f"{self.name}: termination proof does not match anchor")
        del self.sessions[s.anchor]
        return s

    def drop(self, anchor: bytes) -> None:
        self.sessions.pop(anchor, None)
