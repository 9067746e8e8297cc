"""Entity state machines: RA, Bank, CSPA, vehicle, RSU and the pad controller.

Each entity consumes and produces wire bytes; the pure message logic is in
methods that work on :class:`~dwpt_auth.wire.WireMessage` values.  Every
handler takes the current logical time ``now`` in milliseconds.  Entities
are single-threaded; run one handler at a time per entity.

Rejections raise subclasses of :class:`~dwpt_auth.errors.ProtocolError`.
"""

from __future__ import annotations

import enum
import hmac
import random
from dataclasses import dataclass, field
from typing import Callable

from . import billing
from .billing import CostLedger, ObuMeter, SegmentRecord
from .errors import (
    AdmissionError,
    AuthError,
    DecodeError,
    DoubleSpendError,
    DuplicateError,
    EnvelopeAuthError,
    FreshnessError,
    ProtocolError,
    RegistrationError,
    UnknownPseudonymError,
)
from .hashchain import ChainState, ChargingPad, MOD_256, add_update_constant, build_chain, ev_next_auth_value, ev_terminate, xor_bytes
from .ibe import (
    DEFAULT_BATCH_SIZE,
    IbeCiphertext,
    IdPrivateKey,
    PseudonymRecord,
    RaRegistry,
    cspa_pairing_key,
    ev_pairing_key,
    extract_private_key,
    gen_pseudonym_batch,
    ibe_decrypt,
    ibe_encrypt,
    pseudonym_id,
)
from .pairing import (
    G1Point,
    G2Point,
    GtElement,
    SystemParams,
    hash_to_digest,
    random_scalar,
    scalar_from_bytes,
    scalar_to_bytes,
)
from .wire import (
    BATCH_ITEM,
    POINT2,
    SCALAR,
    PkeKeyPair,
    WireMessage,
    decode,
    encode,
    message,
    open_group,
    pke_open,
    pke_seal,
    seal_group,
    split_items,
)

FRESHNESS_WINDOW_MS = 5_000
TOKEN_VALIDITY_MS = 10 * 60 * 1000

MAC_EV_SUFFIX = b"\x00"  # "00"
MAC_CSPA_SUFFIX = b"\x02"  # "10"
SESSION_KEY_SUFFIX = b"\x01"  # "01"

BANK_IDENTITY = b"BANK".ljust(32, b"\x00")

KEY_ID_RSU_CSPA = b"GK_RSU-CSPA"
KEY_ID_SESSION = b"sk"


def key_id_rsu_cp(rsu: str) -> bytes:
    return f"GK_{rsu}-CP".encode()


def key_id_cp_group(rsu: str) -> bytes:
    return f"GK_CP_{rsu}".encode()


class Phase(enum.Enum):
    IDLE = "Idle"
    NONCE_SENT = "NonceSent"
    MAC_SENT = "MacSent"
    ESTABLISHED = "Established"
    FAILED = "Failed"


_RANK = {Phase.IDLE: 0, Phase.NONCE_SENT: 1, Phase.MAC_SENT: 2, Phase.ESTABLISHED: 3, Phase.FAILED: 3}


@dataclass(frozen=True)
class Token:
    value: bytes
    issued_at: int
    validity: int = TOKEN_VALIDITY_MS

    @property
    def expires_at(self) -> int:
        return self.issued_at + self.validity

    def is_valid(self, now: int) -> bool:
        return now < self.expires_at

    @property
    def digest(self) -> bytes:
        return hash_to_digest(self.value)


@dataclass(frozen=True)
class Ticket:
    value: bytes
    pid: bytes


@dataclass
class SessionState:
    role: str
    n_ev: bytes = b""
    n_cspa: bytes = b""
    r_point_ev: G1Point | None = None
    r_point_cspa: G1Point | None = None
    own_scalar: int = 0
    k_shared: GtElement | None = None
    k_prime: G1Point | None = None
    mac_ev: bytes = b""
    mac_cspa: bytes = b""
    session_key: bytes | None = None
    token: Token | None = None
    pid: bytes = b""
    ticket: bytes = b""
    phase: Phase = Phase.IDLE

    def advance(self, phase: Phase) -> None:
        if self.phase in (Phase.ESTABLISHED, Phase.FAILED):
            raise ProtocolError(f"session already {self.phase.value}")
        if phase is not Phase.FAILED and _RANK[phase] <= _RANK[self.phase]:
            raise ProtocolError(f"illegal transition {self.phase.value} -> {phase.value}")
        self.phase = phase


@dataclass
class RsuSession:
    rsu_id: str
    n_rsu: bytes
    m_ev: bytes = b""
    m_ev_prime: bytes = b""
    unit_cost: int = 0


def session_digest(
    k_shared: GtElement,
    k_prime: G1Point,
    cspa_id: bytes,
    pid: bytes,
    n_ev: bytes,
    n_cspa: bytes,
    suffix: bytes,
) -> bytes:
    """H3(k || k' || ID_CSPA || PID || N_EV || N_CSPA || suffix)."""
    return hash_to_digest(
        k_shared.to_bytes() + k_prime.to_bytes() + cspa_id + pid + n_ev + n_cspa + suffix
    )


@dataclass(frozen=True)
class DirectoryEntry:
    public_key: bytes
    address: str


class Directory:
    """Public-key directory for the registration/billing envelopes."""

    def __init__(self):
        self._entries: dict[bytes, DirectoryEntry] = {}

    def register(self, identity: bytes, public_key: bytes, address: str) -> None:
        self._entries[identity] = DirectoryEntry(public_key, address)

    def lookup(self, identity: bytes) -> DirectoryEntry:
        try:
            return self._entries[identity]
        except KeyError:
            raise RegistrationError("identity has no public key on file") from None

    def __contains__(self, identity: bytes) -> bool:
        return identity in self._entries


class _NonceCache:
    def __init__(self, window: int):
        self.window = window
        self._seen: dict[bytes, int] = {}

    def check_and_add(self, key: bytes, now: int) -> None:
        self._seen = {k: t for k, t in self._seen.items() if now - t <= self.window}
        if key in self._seen:
            raise FreshnessError("nonce already seen")
        self._seen[key] = now


class Entity:
    """Shared clock checks and event reporting."""

    def __init__(self, name: str, rng: random.Random, *, freshness_window: int = FRESHNESS_WINDOW_MS):
        self.name = name
        self.rng = rng
        self.freshness_window = freshness_window
        self.check_freshness = True
        self.observer: Callable[[dict], None] | None = None

    def check_fresh(self, msg: WireMessage, now: int) -> None:
        if not self.check_freshness:
            return
        t = msg.timestamp
        if abs(now - t) > self.freshness_window:
            raise FreshnessError(f"{msg.tag} timestamp {t} outside window at {now}")

    def emit(self, now: int, event: str, tag: str | None = None, before=None, after=None) -> None:
        if self.observer is None:
            return
        self.observer(
            {
                "clock": now,
                "entity": self.name,
                "event": event,
                "phase_before": getattr(before, "value", before),
                "phase_after": getattr(after, "value", after),
                "msg_tag": tag,
            }
        )


# --- registration authority -------------------------------------------------


class RegistrationAuthority(Entity):
    def __init__(
        self,
        params: SystemParams,
        master_secret: int,
        directory: Directory,
        rng: random.Random,
        *,
        name: str = "ra",
        batch_size: int = DEFAULT_BATCH_SIZE,
    ):
        super().__init__(name, rng)
        self.params = params
        self._s = master_secret
        self.directory = directory
        self.batch_size = batch_size
        self.keypair = PkeKeyPair.generate(rng)
        self.registry = RaRegistry()
        self.registered_cspas: set[bytes] = set()
        directory.register(params.ra_identity, self.keypair.public, name)

    def ra_register(self, kind: str, msg: WireMessage, now: int) -> WireMessage:
        """Plaintext registration step: m1 -> m2 or m3 -> m4."""
        self.check_fresh(msg, now)
        if kind == "CSPA":
            ident = msg["id_cspa"]
            if not any(ident):
                raise RegistrationError("empty identity")
            if ident in self.registered_cspas:
                raise DuplicateError("CSPA already registered")
            key = extract_private_key(self._s, ident)
            self.registered_cspas.add(ident)
            return message("m2", key_g1=key.key_g1.to_bytes(), key_g2=key.key_g2.to_bytes(), t=now)
        if kind == "EV":
            ident = msg["id_ev"]
            if not any(ident):
                raise RegistrationError("empty identity")
            if ident in self.registry:
                raise DuplicateError("EV already registered")
            key = extract_private_key(self._s, ident)
            d_ev = random_scalar(self.rng)
            records = gen_pseudonym_batch(self._s, self.params, ident, d_ev, self.batch_size, self.rng)
            self.registry.add(ident, d_ev, records)
            batch = b"".join(scalar_to_bytes(r.a_i) + r.k_i.to_bytes() for r in records)
            return message(
                "m4",
                key_g1=key.key_g1.to_bytes(),
                key_g2=key.key_g2.to_bytes(),
                d_ev=scalar_to_bytes(d_ev),
                count=len(records),
                batch=batch,
                t=now,
            )
        raise ValueError(f"unknown entity kind {kind!r}")

    def handle(self, tag: str, data: bytes, now: int) -> bytes:
        """Open an m1/m3 envelope, register, and seal the reply to the sender."""
        kind, field_name = {"m1": ("CSPA", "id_cspa"), "m3": ("EV", "id_ev")}[tag]
        msg = decode(tag, pke_open(self.keypair, data))
        recipient = self.directory.lookup(msg[field_name])
        reply = self.ra_register(kind, msg, now)
        self.emit(now, f"registered {kind}", tag)
        return pke_seal(recipient.public_key, encode(reply), self.rng)


# --- bank -------------------------------------------------------------------


class Bank(Entity):
    """Issues tickets bound to pseudonyms and bills vehicles at settlement.

    ``resolve_pid`` maps a pseudonym to its vehicle identity; the bank is
    trusted with this link.
    """

    def __init__(
        self,
        resolve_pid: Callable[[bytes], tuple[bytes, int] | None],
        directory: Directory,
        rng: random.Random,
        *,
        name: str = "bank",
        identity: bytes = BANK_IDENTITY,
    ):
        super().__init__(name, rng)
        self.resolve_pid = resolve_pid
        self.directory = directory
        self.identity = identity
        self.keypair = PkeKeyPair.generate(rng)
        self.tickets: dict[bytes, bytes] = {}
        self.settled: set[bytes] = set()
        self.bills: list[dict] = []
        directory.register(identity, self.keypair.public, name)

    def bank_issue_ticket(self, pid: bytes) -> Ticket:
        if self.resolve_pid(pid) is None:
            raise UnknownPseudonymError("pseudonym not known to the bank")
        value = self.rng.randbytes(64)
        self.tickets[value] = pid
        return Ticket(value, pid)

    def handle_ticket_request(self, data: bytes, now: int) -> bytes:
        msg = decode("m3p", pke_open(self.keypair, data))
        self.check_fresh(msg, now)
        ticket = self.bank_issue_ticket(msg["pid"])
        ev_id, _ = self.resolve_pid(ticket.pid)
        self.emit(now, "ticket issued", "m3p")
        reply = message("m4p", ticket=ticket.value, t=now)
        return pke_seal(self.directory.lookup(ev_id).public_key, encode(reply), self.rng)

    def handle_settlement(self, data: bytes, now: int) -> tuple[str, bytes]:
        """m18 -> (vehicle address, sealed m19)."""
        m18 = decode("m18", pke_open(self.keypair, data))
        self.check_fresh(m18, now)
        pid, m19 = billing.bank_bill(self.tickets, self.settled, m18, now)
        ev_id, _ = self.resolve_pid(pid)
        entry = self.directory.lookup(ev_id)
        self.bills.append({"clock": now, "ticket_hex": m18["ticket"].hex(), "cost": m18.as_int("cost")})
        self.emit(now, "billed", "m18")
        return entry.address, pke_seal(entry.public_key, encode(m19), self.rng)


# --- charging service provider authority ------------------------------------


@dataclass
class IssuedToken:
    token: Token
    pid: bytes
    ticket: bytes
    peer: str


class ChargingProvider(Entity):
    """The CSPA: authenticates vehicles, issues tokens, aggregates costs."""

    def __init__(
        self,
        params: SystemParams,
        identity: bytes,
        directory: Directory,
        rng: random.Random,
        *,
        name: str = "cspa",
        group_key_rsu: bytes,
        rates: dict[str, int],
        token_validity: int = TOKEN_VALIDITY_MS,
    ):
        super().__init__(name, rng)
        self.params = params
        self.identity = identity
        self.directory = directory
        self.group_key_rsu = group_key_rsu
        self.rates = dict(rates)
        self.token_validity = token_validity
        self.keypair = PkeKeyPair.generate(rng)
        self.key: IdPrivateKey | None = None
        self.sessions: dict[str, SessionState] = {}
        self.issued: dict[bytes, IssuedToken] = {}  # token hash -> record
        self.active_pids: dict[bytes, bytes] = {}  # pid -> token hash
        self.used_tickets: set[bytes] = set()
        self.ledger = CostLedger()
        self.settlement_log: list[dict] = []
        self.cost_inflation = 0
        self.bank_identity = BANK_IDENTITY
        self._nonces = _NonceCache(self.freshness_window)
        directory.register(identity, self.keypair.public, name)

    # registration
    def registration_request(self, now: int) -> bytes:
        m1 = message("m1", id_cspa=self.identity, t=now)
        return pke_seal(self.directory.lookup(self.params.ra_identity).public_key, encode(m1), self.rng)

    def complete_registration(self, data: bytes, now: int) -> None:
        m2 = decode("m2", pke_open(self.keypair, data))
        self.check_fresh(m2, now)
        key = IdPrivateKey(self.identity, G1Point.from_bytes(m2["key_g1"]), G2Point.from_bytes(m2["key_g2"]))
        if not key.verify(self.params):
            raise RegistrationError("extracted key fails the pairing check")
        self.key = key
        self.emit(now, "registered", "m2")

    # authentication
    def cspa_respond(self, peer: str, m5: WireMessage, now: int) -> WireMessage:
        self.check_fresh(m5, now)
        self._nonces.check_and_add(m5["n_ev"], now)
        r_point_ev = G1Point.from_bytes(m5["r_point"])
        if r_point_ev.is_identity():
            raise AuthError("r_EV * P is the identity")
        state = SessionState(role="CSPA", n_ev=m5["n_ev"], r_point_ev=r_point_ev)
        state.own_scalar = random_scalar(self.rng)
        state.n_cspa = self.rng.randbytes(32)
        state.r_point_cspa = self.params.g1_generator * state.own_scalar
        state.k_prime = r_point_ev * state.own_scalar
        before = state.phase
        state.advance(Phase.NONCE_SENT)
        self.sessions[peer] = state
        self.emit(now, "nonce sent", "m5", before, state.phase)
        return message(
            "m6", n_cspa=state.n_cspa, r_point=state.r_point_cspa.to_bytes(), id_cspa=self.identity, t=now
        )

    def respond(self, peer: str, data: bytes, now: int) -> bytes:
        return encode(self.cspa_respond(peer, decode("m5", data), now))

    def cspa_verify_and_issue_token(self, peer: str, data: bytes, now: int) -> tuple[WireMessage, WireMessage, IssuedToken]:
        """Check m7 and build (m8, m9 plaintext, issued token)."""
        state = self.sessions.get(peer)
        if state is None or state.phase is not Phase.NONCE_SENT:
            raise ProtocolError("no handshake awaiting m7 on this link")
        if self.key is None:
            raise ProtocolError("CSPA is not registered")
        before = state.phase
        try:
            m7 = decode("m7", ibe_decrypt(self.key, IbeCiphertext.from_bytes(data)))
            self.check_fresh(m7, now)
            if m7["id_ra"] != self.params.ra_identity:
                raise AuthError("m7 names an unknown registration authority")
            pid, ticket = m7["pid"], m7["ticket"]
            if ticket in self.used_tickets:
                raise DoubleSpendError("ticket already used")
            live = self.active_pids.get(pid)
            if live is not None and self.issued[live].token.is_valid(now):
                raise DoubleSpendError("pseudonym already holds a valid token")
            state.pid, state.ticket = pid, ticket
            state.k_shared = cspa_pairing_key(self.key, self.params.ra_identity, pid)
            args = (state.k_shared, state.k_prime, self.identity, pid, state.n_ev, state.n_cspa)
            expected = session_digest(*args, MAC_EV_SUFFIX)
            if not hmac.compare_digest(expected, m7["mac_ev"]):
                raise AuthError("mac_EV mismatch")
        except (ProtocolError, DecodeError):
            state.advance(Phase.FAILED)
            self.emit(now, "auth failed", "m7", before, state.phase)
            raise
        state.mac_ev = expected
        state.mac_cspa = session_digest(*args, MAC_CSPA_SUFFIX)
        state.session_key = session_digest(*args, SESSION_KEY_SUFFIX)
        token = Token(self.rng.randbytes(32), now, self.token_validity)
        state.token = token
        state.advance(Phase.ESTABLISHED)
        record = IssuedToken(token, pid, ticket, peer)
        self.issued[token.digest] = record
        self.active_pids[pid] = token.digest
        self.used_tickets.add(ticket)
        self.ledger.open(token.digest, pid, ticket, token.expires_at)
        self.emit(now, "token issued", "m7", before, state.phase)
        m8 = message("m8", mac_cspa=state.mac_cspa, masked_token=xor_bytes(token.value, pid), t=now)
        m9 = message("m9", token_hash=token.digest, pid=pid, session_key=state.session_key, t=now)
        return m8, m9, record

    def verify_and_issue(self, peer: str, data: bytes, now: int) -> tuple[bytes, bytes, IssuedToken]:
        """m7 bytes -> (m8 bytes, m9 envelope for all RSUs, issued token)."""
        m8, m9, record = self.cspa_verify_and_issue_token(peer, data, now)
        env = seal_group(self.group_key_rsu, encode(m9), self.rng, KEY_ID_RSU_CSPA)
        return encode(m8), env.to_bytes(), record

    # billing
    def accumulate(self, rsu_id: str, data: bytes, now: int) -> int:
        m17 = decode("m17", open_group(self.group_key_rsu, data))
        self.check_fresh(m17, now)
        total = billing.cspa_accumulate(self.ledger, m17, rsu_id, self.rates[rsu_id], now)
        self.emit(now, "cost accumulated", "m17")
        return total

    def settle(self, token_hash: bytes, now: int) -> bytes:
        m18 = billing.cspa_settle(self.ledger, token_hash, now, self.cost_inflation)
        record = self.issued[token_hash]
        self.active_pids.pop(record.pid, None)
        self.settlement_log.append(
            {"clock": now, "pid_hex": record.pid.hex(), "ticket_hex": record.ticket.hex(), "total": m18.as_int("cost")}
        )
        self.emit(now, "settled", "m18")
        bank = self.directory.lookup(self.bank_identity)
        return pke_seal(bank.public_key, encode(m18), self.rng)


# --- electric vehicle -------------------------------------------------------


class Vehicle(Entity):
    def __init__(
        self,
        params: SystemParams,
        identity: bytes,
        directory: Directory,
        rng: random.Random,
        *,
        name: str = "ev",
        chain_length: int = 12,
        bank_identity: bytes = BANK_IDENTITY,
        publish: bool = True,
    ):
        super().__init__(name, rng)
        self.params = params
        self.identity = identity
        self.directory = directory
        self.chain_length = chain_length
        self.bank_identity = bank_identity
        self.keypair = PkeKeyPair.generate(rng)
        self.key: IdPrivateKey | None = None
        self.d_ev = 0
        self.pseudonyms: list[PseudonymRecord] = []
        self.next_pseudonym = 0
        self.tickets: dict[bytes, bytes] = {}
        self.session = SessionState(role="EV")
        self.pseudonym: PseudonymRecord | None = None
        self.token: Token | None = None
        self.rsu_session: RsuSession | None = None
        self.chain: ChainState | None = None
        self.meters: list[tuple[Token, ObuMeter]] = []
        self.verdicts: list[billing.BillVerdict] = []
        self.cspa_id = b""
        if publish:
            directory.register(identity, self.keypair.public, name)

    @property
    def phase(self) -> Phase:
        return self.session.phase

    @property
    def meter(self) -> ObuMeter:
        return self.meters[-1][1]

    # registration
    def registration_request(self, now: int) -> bytes:
        m3 = message("m3", id_ev=self.identity, t=now)
        return pke_seal(self.directory.lookup(self.params.ra_identity).public_key, encode(m3), self.rng)

    def complete_registration(self, data: bytes, now: int) -> None:
        m4 = decode("m4", pke_open(self.keypair, data))
        self.check_fresh(m4, now)
        self.key = IdPrivateKey(self.identity, G1Point.from_bytes(m4["key_g1"]), G2Point.from_bytes(m4["key_g2"]))
        self.d_ev = scalar_from_bytes(m4["d_ev"])
        self.pseudonyms = []
        for index, (a_raw, k_raw) in enumerate(split_items(m4["batch"], SCALAR, POINT2)):
            a_i = scalar_from_bytes(a_raw)
            pid = pseudonym_id(self.identity, self.d_ev, a_i)
            self.pseudonyms.append(PseudonymRecord(pid, G2Point.from_bytes(k_raw), a_i, index))
        self.emit(now, "registered", "m4")

    @property
    def current_pseudonym(self) -> PseudonymRecord:
        if self.next_pseudonym >= len(self.pseudonyms):
            raise ProtocolError("no unused pseudonyms left")
        return self.pseudonyms[self.next_pseudonym]

    # ticket
    def request_ticket(self, now: int) -> bytes:
        m3p = message("m3p", pid=self.current_pseudonym.pid, t=now)
        return pke_seal(self.directory.lookup(self.bank_identity).public_key, encode(m3p), self.rng)

    def store_ticket(self, data: bytes, now: int) -> None:
        m4p = decode("m4p", pke_open(self.keypair, data))
        self.check_fresh(m4p, now)
        self.tickets[self.current_pseudonym.pid] = m4p["ticket"]

    # authentication with the CSPA
    def ev_begin_auth(self, now: int) -> WireMessage:
        self.pseudonym = self.current_pseudonym
        if self.pseudonym.pid not in self.tickets:
            raise ProtocolError("no ticket for the current pseudonym")
        self.next_pseudonym += 1
        self.session = SessionState(role="EV", pid=self.pseudonym.pid, ticket=self.tickets[self.pseudonym.pid])
        s = self.session
        s.own_scalar = random_scalar(self.rng)
        s.n_ev = self.rng.randbytes(32)
        s.r_point_ev = self.params.g1_generator * s.own_scalar
        s.advance(Phase.NONCE_SENT)
        self.emit(now, "nonce sent", "m5", Phase.IDLE, s.phase)
        return message("m5", n_ev=s.n_ev, r_point=s.r_point_ev.to_bytes(), t=now)

    def begin_auth(self, now: int) -> bytes:
        return encode(self.ev_begin_auth(now))

    def ev_compute_mac(self, m6: WireMessage, now: int) -> WireMessage:
        """Derive k_EV, k'_EV and mac_EV; return the m7 plaintext."""
        s = self.session
        if s.phase is not Phase.NONCE_SENT:
            raise ProtocolError("no handshake awaiting m6")
        before = s.phase
        try:
            self.check_fresh(m6, now)
            r_point_cspa = G1Point.from_bytes(m6["r_point"])
            if r_point_cspa.is_identity():
                raise AuthError("r_CSPA * P is the identity")
        except (ProtocolError, DecodeError):
            s.advance(Phase.FAILED)
            self.emit(now, "auth failed", "m6", before, s.phase)
            raise
        s.n_cspa, s.r_point_cspa = m6["n_cspa"], r_point_cspa
        self.cspa_id = m6["id_cspa"]
        s.k_shared = ev_pairing_key(self.cspa_id, self.pseudonym.k_i)
        s.k_prime = r_point_cspa * s.own_scalar
        s.mac_ev = session_digest(s.k_shared, s.k_prime, self.cspa_id, s.pid, s.n_ev, s.n_cspa, MAC_EV_SUFFIX)
        s.advance(Phase.MAC_SENT)
        self.emit(now, "mac sent", "m6", before, s.phase)
        return message("m7", id_ra=self.params.ra_identity, pid=s.pid, ticket=s.ticket, mac_ev=s.mac_ev, t=now)

    def compute_mac(self, data: bytes, now: int) -> bytes:
        m7 = self.ev_compute_mac(decode("m6", data), now)
        return ibe_encrypt(self.params, self.cspa_id, encode(m7), self.rng).to_bytes()

    def ev_verify_cspa(self, m8: WireMessage, now: int) -> Phase:
        s = self.session
        if s.phase is not Phase.MAC_SENT:
            raise ProtocolError("no handshake awaiting m8")
        before = s.phase
        args = (s.k_shared, s.k_prime, self.cspa_id, s.pid, s.n_ev, s.n_cspa)
        try:
            self.check_fresh(m8, now)
            if not hmac.compare_digest(session_digest(*args, MAC_CSPA_SUFFIX), m8["mac_cspa"]):
                raise AuthError("mac_CSPA mismatch")
        except ProtocolError:
            s.advance(Phase.FAILED)
            self.emit(now, "auth failed", "m8", before, s.phase)
            raise
        s.mac_cspa = m8["mac_cspa"]
        s.session_key = session_digest(*args, SESSION_KEY_SUFFIX)
        s.token = Token(xor_bytes(m8["masked_token"], s.pid), m8.timestamp)
        self.token = s.token
        self.meters.append((s.token, ObuMeter()))
        s.advance(Phase.ESTABLISHED)
        self.emit(now, "established", "m8", before, s.phase)
        return s.phase

    def verify_cspa(self, data: bytes, now: int) -> Phase:
        return self.ev_verify_cspa(decode("m8", data), now)

    # admission at an RSU
    def ev_request_rsu(self, rsu_id: str, now: int) -> WireMessage:
        if self.session.session_key is None:
            raise ProtocolError("no session key")
        self.rsu_session = RsuSession(rsu_id, self.rng.randbytes(32))
        return message("m10", pid=self.session.pid, n_rsu=self.rsu_session.n_rsu, t=now)

    def request_rsu(self, rsu_id: str, now: int) -> bytes:
        m10 = self.ev_request_rsu(rsu_id, now)
        return seal_group(self.session.session_key, encode(m10), self.rng, KEY_ID_SESSION).to_bytes()

    def admitted(self, data: bytes, now: int) -> ChainState:
        rs = self.rsu_session
        if rs is None:
            raise ProtocolError("no admission pending")
        try:
            m11 = decode("m11", open_group(self.session.session_key, data))
        except EnvelopeAuthError as exc:
            raise AdmissionError(str(exc)) from None
        self.check_fresh(m11, now)
        want = (int.from_bytes(rs.n_rsu, "big") + 1) % MOD_256
        if m11.as_int("n_rsu_next") != want:
            raise AdmissionError("RSU did not answer N_RSU + 1")
        rs.m_ev = m11["m_ev"]
        rs.m_ev_prime = add_update_constant(rs.m_ev, self.params.update_constant)
        rs.unit_cost = m11.as_int("rate")
        self.meter.record_rate(rs.rsu_id, rs.unit_cost)
        self.chain = build_chain(self.token.digest, rs.m_ev, self.chain_length, self.params.update_constant)
        self.emit(now, "admitted", "m11")
        return self.chain

    def next_pad_value(self) -> bytes:
        if self.chain is None:
            raise ProtocolError("no active hash chain")
        return encode(ev_next_auth_value(self.chain))

    def power_on(self) -> None:
        """The pad under the vehicle started transferring power."""
        self.meter.record_pad(self.rsu_session.rsu_id)

    def terminate(self) -> bytes:
        if self.chain is None:
            raise ProtocolError("no active hash chain")
        m15 = ev_terminate(self.chain)
        self.chain = None
        return encode(m15)

    # billing
    def check_bill(self, data: bytes, now: int) -> billing.BillVerdict:
        m19 = decode("m19", pke_open(self.keypair, data))
        self.check_fresh(m19, now)
        settled = len(self.verdicts)
        if settled >= len(self.meters):
            raise ProtocolError("bill without a charging session")
        verdict = billing.ev_check_bill(self.meters[settled][1], m19)
        self.verdicts.append(verdict)
        self.emit(now, "bill accepted" if verdict.accepted else f"bill disputed delta={verdict.delta}", "m19")
        return verdict


# --- road-side unit ---------------------------------------------------------


@dataclass
class RsuTokenRecord:
    token_hash: bytes
    pid: bytes
    session_key: bytes
    expires_at: int


class RoadsideUnit(Entity):
    def __init__(
        self,
        name: str,
        params: SystemParams,
        rng: random.Random,
        *,
        group_key_cspa: bytes,
        group_key_cp: bytes,
        rate: int,
        chain_length: int,
        token_validity: int = TOKEN_VALIDITY_MS,
    ):
        super().__init__(name, rng)
        self.params = params
        self.group_key_cspa = group_key_cspa
        self.group_key_cp = group_key_cp
        self.rate = rate
        self.chain_length = chain_length
        self.token_validity = token_validity
        self.tokens: dict[bytes, RsuTokenRecord] = {}  # pid -> record
        self.chains: dict[bytes, SegmentRecord] = {}  # anchor -> record
        self._nonces = _NonceCache(self.freshness_window)

    def install(self, data: bytes, now: int) -> None:
        """m9 from the CSPA."""
        m9 = decode("m9", open_group(self.group_key_cspa, data))
        self.check_fresh(m9, now)
        self.tokens[m9["pid"]] = RsuTokenRecord(
            m9["token_hash"], m9["pid"], m9["session_key"], m9.timestamp + self.token_validity
        )

    def rsu_admit(self, data: bytes, now: int) -> tuple[WireMessage, WireMessage, RsuTokenRecord]:
        """Open m10 with whichever session key fits; return (m11, m12, record)."""
        for rec in self.tokens.values():
            try:
                plain = open_group(rec.session_key, data)
            except EnvelopeAuthError:
                continue
            break
        else:
            raise AdmissionError("m10 does not open under any distributed session key")
        m10 = decode("m10", plain)
        if m10["pid"] != rec.pid:
            raise AdmissionError("pseudonym does not match its session key")
        self.check_fresh(m10, now)
        self._nonces.check_and_add(rec.pid + m10["n_rsu"], now)
        if now >= rec.expires_at:
            raise DoubleSpendError("token expired")
        m_ev = self.rng.randbytes(32)
        chain = build_chain(rec.token_hash, m_ev, self.chain_length, self.params.update_constant)
        self.chains[chain.anchor] = SegmentRecord(rec.pid, rec.token_hash, chain.n)
        n_next = (m10.as_int("n_rsu") + 1) % MOD_256
        m11 = message("m11", n_rsu_next=n_next, m_ev=m_ev, t=now, rate=self.rate)
        m12 = message("m12", head=chain.head, anchor=chain.anchor, t=now)
        self.emit(now, "admitted", "m10")
        return m11, m12, rec

    def admit(self, data: bytes, now: int) -> tuple[bytes, bytes]:
        m11, m12, rec = self.rsu_admit(data, now)
        return (
            seal_group(rec.session_key, encode(m11), self.rng, KEY_ID_SESSION).to_bytes(),
            seal_group(self.group_key_cp, encode(m12), self.rng, key_id_rsu_cp(self.name)).to_bytes(),
        )

    def record_accept(self, anchor: bytes) -> None:
        self.chains[anchor].pads += 1

    def record_reject(self) -> None:
        for rec in self.chains.values():
            if not rec.terminated:
                rec.rejects += 1

    def close(self, data: bytes, now: int) -> tuple[bytes, bytes]:
        """m16 -> (anchor, sealed m17)."""
        m16 = decode("m16", open_group(self.group_key_cp, data))
        self.check_fresh(m16, now)
        anchor = m16["anchor"]
        m17 = billing.rsu_report_cost(self.chains, anchor, self.rate, now)
        self.chains[anchor].terminated = True
        self.emit(now, "segment closed", "m16")
        return anchor, seal_group(self.group_key_cspa, encode(m17), self.rng, KEY_ID_RSU_CSPA).to_bytes()


# --- charging pad -----------------------------------------------------------


class PadController(Entity):
    """Envelope handling around :class:`~dwpt_auth.hashchain.ChargingPad`."""

    def __init__(self, name: str, rsu: str, position: int, rng: random.Random, *, group_key_cp: bytes, group_key_pads: bytes):
        super().__init__(name, rng)
        self.rsu = rsu
        self.pad = ChargingPad(name, position)
        self.group_key_cp = group_key_cp
        self.group_key_pads = group_key_pads

    def install(self, data: bytes, now: int) -> None:
        m12 = decode("m12", open_group(self.group_key_cp, data))
        self.check_fresh(m12, now)
        self.pad.store_chain(m12)

    def relay_in(self, data: bytes) -> bool:
        return self.pad.relay_in(decode("m14", open_group(self.group_key_pads, data)))

    def receive(self, data: bytes, now: int) -> tuple[str, bytes, bytes]:
        """Dispatch on the leading flag byte.

        Returns ``("accept", anchor, sealed m14)`` for a chain step or
        ``("terminate", anchor, sealed m16)`` for a termination.
        """
        if not data:
            raise DecodeError("empty frame", "flag")
        if data[0] == 1:
            session, m14 = self.pad.verify_and_relay(decode("m13", data))
            self.emit(now, "power on", "m13")
            env = seal_group(self.group_key_pads, encode(m14), self.rng, key_id_cp_group(self.rsu))
            return "accept", session.anchor, env.to_bytes()
        if data[0] == 0:
            session = self.pad.verify_termination(decode("m15", data))
            m16 = message("m16", anchor=session.anchor, t=now)
            self.emit(now, "charging terminated", "m15")
            env = seal_group(self.group_key_cp, encode(m16), self.rng, key_id_rsu_cp(self.rsu))
            return "terminate", session.anchor, env.to_bytes()
        raise DecodeError(f"unknown flag {data[0]}", "flag")
