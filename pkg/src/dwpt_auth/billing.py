"""Cost accounting: per-RSU costs, per-pseudonym totals, settlement, disputes.

All amounts are unsigned integers.  Rates fit one byte, totals 64 bits.
"""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field

from .errors import AnchorLookupError, BillingError, DoubleSpendError, SettlementError
from .wire import WireMessage, message

MAX_RATE = 255
MAX_COST = (1 << 64) - 1


def segment_cost(pads: int, rate: int) -> int:
    """Cost_RSU_j = l * C_j."""
    if pads < 0:
        raise BillingError("pad count must be >= 0")
    if not 1 <= rate <= MAX_RATE:
        raise BillingError(f"rate {rate} outside [1, {MAX_RATE}]")
    return pads * rate


@dataclass
class SegmentRecord:
    """What an RSU remembers about one chain it handed out."""

    pid: bytes
    token_hash: bytes
    n: int
    pads: int = 0
    rejects: int = 0
    terminated: bool = False

    def audit(self) -> dict:
        return {
            "token_hash_hex": self.token_hash.hex(),
            "n": self.n,
            "accepts": self.pads,
            "rejects": self.rejects,
            "terminated": self.terminated,
        }


def rsu_report_cost(records: dict[bytes, SegmentRecord], anchor: bytes, rate: int, now: int) -> WireMessage:
    """Build m17 for the chain that terminated with ``anchor``."""
    rec = records.get(anchor)
    if rec is None:
        raise AnchorLookupError("no chain with this termination anchor")
    return message("m17", token_hash=rec.token_hash, cost=segment_cost(rec.pads, rate), t=now)


@dataclass(frozen=True)
class LedgerEntry:
    rsu_id: str
    pads: int
    rate: int
    cost: int


@dataclass
class _TokenAccount:
    pid: bytes
    ticket: bytes
    expires_at: int
    settled: bool = False


@dataclass
class CostLedger:
    """CSPA-side accumulation of costs against pseudonyms."""

    entries: dict[bytes, list[LedgerEntry]] = field(default_factory=lambda: defaultdict(list))
    tokens: dict[bytes, bytes] = field(default_factory=dict)
    accounts: dict[bytes, _TokenAccount] = field(default_factory=dict)

    def open(self, token_hash: bytes, pid: bytes, ticket: bytes, expires_at: int) -> None:
        self.tokens[token_hash] = pid
        self.accounts[token_hash] = _TokenAccount(pid, ticket, expires_at)

    def total(self, pid: bytes) -> int:
        return sum(e.cost for e in self.entries.get(pid, ()))

    def account(self, token_hash: bytes) -> _TokenAccount:
        try:
            return self.accounts[token_hash]
        except KeyError:
            raise BillingError("unknown token hash") from None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["pid_hex", "rsu_id", "pads", "rate", "cost"])
        for pid, rows in self.entries.items():
            for e in rows:
                w.writerow([pid.hex(), e.rsu_id, e.pads, e.rate, e.cost])
        return buf.getvalue()


def cspa_accumulate(ledger: CostLedger, m17: WireMessage, rsu_id: str, rate: int, now: int) -> int:
    """Add one RSU report to the pseudonym's running total; return the total."""
    acct = ledger.account(m17["token_hash"])
    if acct.settled or now >= acct.expires_at:
        raise DoubleSpendError("cost reported against an expired token")
    cost = m17.as_int("cost")
    pads, rem = divmod(cost, rate)
    if rem:
        raise BillingError(f"cost {cost} is not a multiple of rate {rate}")
    ledger.entries[acct.pid].append(LedgerEntry(rsu_id, pads, rate, cost))
    return ledger.total(acct.pid)


def cspa_settle(ledger: CostLedger, token_hash: bytes, now: int, inflation: int = 0) -> WireMessage:
    """m18 for a token at expiry.  ``inflation`` simulates a dishonest provider."""
    acct = ledger.account(token_hash)
    if acct.settled:
        raise SettlementError("token already settled")
    if now < acct.expires_at:
        raise SettlementError("token has not expired")
    acct.settled = True
    total = min(ledger.total(acct.pid) + inflation, MAX_COST)
    return message("m18", ticket=acct.ticket, cost=total, t=now)


def bank_bill(tickets: dict[bytes, bytes], settled: set[bytes], m18: WireMessage, now: int) -> tuple[bytes, WireMessage]:
    """Resolve ticket -> pid and produce the bill m19 for that pseudonym."""
    ticket = m18["ticket"]
    pid = tickets.get(ticket)
    if pid is None:
        raise SettlementError("unknown ticket")
    if ticket in settled:
        raise SettlementError("ticket already settled")
    settled.add(ticket)
    return pid, message("m19", cost=m18["cost"], t=now)


@dataclass
class ObuMeter:
    """Tamper-proof on-board meter: pads crossed per RSU and the rates quoted."""

    pads_by_rsu: dict[str, int] = field(default_factory=lambda: defaultdict(int))
    rates: dict[str, int] = field(default_factory=dict)
    tamper_proof: bool = True

    def record_rate(self, rsu_id: str, rate: int) -> None:
        self.rates[rsu_id] = rate

    def record_pad(self, rsu_id: str) -> None:
        self.pads_by_rsu[rsu_id] += 1

    def expected_total(self, rates: dict[str, int] | None = None) -> int:
        rates = self.rates if rates is None else rates
        return sum(pads * rates[rsu] for rsu, pads in self.pads_by_rsu.items())


@dataclass(frozen=True)
class BillVerdict:
    accepted: bool
    billed: int
    metered: int

    @property
    def delta(self) -> int:
        return self.billed - self.metered


def ev_check_bill(meter: ObuMeter, m19: WireMessage, rates: dict[str, int] | None = None) -> BillVerdict:
    billed = m19.as_int("cost")
    metered = meter.expected_total(rates)
    return BillVerdict(billed == metered, billed, metered)
