"""Deterministic in-memory network, topology and a Dolev-Yao adversary.

Time is a logical millisecond clock.  Delivery is instantaneous and FIFO per
link; the only way a message arrives later is an adversary replay or a
scheduled vehicle action.  Fog servers are transparent routers: traffic
between the CSPA and an RSU is recorded with the FS it passed through.

Links are named ``"src->dst"``.  The adversary is the peer ``adv``; it can
talk to any entity and sits on every link.
"""

from __future__ import annotations

import heapq
import json
import logging
import random
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from typing import Callable

from .errors import AdmissionError, ConfigError, DwptError, ParameterError
from .hashchain import default_chain_length
from .ibe import PseudonymRecord
from .pairing import G2Point, identity_bytes, random_scalar, setup
from .protocol import (
    FRESHNESS_WINDOW_MS,
    TOKEN_VALIDITY_MS,
    Bank,
    ChargingProvider,
    Directory,
    PadController,
    Phase,
    RegistrationAuthority,
    RoadsideUnit,
    Vehicle,
)
from .wire import encode, message, new_group_key

log = logging.getLogger(__name__)

ADVERSARY = "adv"


# --- topology ---------------------------------------------------------------


@dataclass
class Topology:
    fs: int = 1
    rsus_per_fs: int = 1
    cps_per_rsu: int = 5
    rates: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.fs < 1 or self.rsus_per_fs < 1 or self.cps_per_rsu < 1:
            raise ConfigError("topology counts must be >= 1")
        if not self.rates:
            self.rates = [1] * self.rsu_count
        if len(self.rates) != self.rsu_count:
            raise ConfigError(f"need {self.rsu_count} rates, got {len(self.rates)}")
        if any(not 1 <= r <= 255 for r in self.rates):
            raise ConfigError("rates must be in [1, 255]")

    @property
    def rsu_count(self) -> int:
        return self.fs * self.rsus_per_fs

    def rsu_names(self) -> list[str]:
        return [f"rsu{i}" for i in range(self.rsu_count)]

    def fs_of(self, rsu: str) -> str:
        return f"fs{int(rsu[3:]) // self.rsus_per_fs}"

    def cp_names(self, rsu: str) -> list[str]:
        return [f"{rsu}.cp{k}" for k in range(self.cps_per_rsu)]

    def rate_of(self, rsu: str) -> int:
        return self.rates[int(rsu[3:])]

    def links(self, vehicles: list[str]) -> set[str]:
        """Every link an honest run can use, plus the adversary's."""
        pairs = {("cspa", "ra"), ("cspa", "bank")}
        nodes = {"ra", "bank", "cspa"}
        for ev in vehicles:
            nodes.add(ev)
            pairs |= {(ev, "ra"), (ev, "bank"), (ev, "cspa")}
        for rsu in self.rsu_names():
            nodes.add(rsu)
            pairs.add(("cspa", rsu))
            cps = self.cp_names(rsu)
            for k, cp in enumerate(cps):
                nodes.add(cp)
                pairs.add((rsu, cp))
                if k + 1 < len(cps):
                    pairs.add((cp, cps[k + 1]))
                for ev in vehicles:
                    pairs.add((ev, cp))
            for ev in vehicles:
                pairs.add((ev, rsu))
        for n in nodes:
            pairs.add((ADVERSARY, n))
        out = set()
        for a, b in pairs:
            out.add(f"{a}->{b}")
            out.add(f"{b}->{a}")
        return out

    @classmethod
    def from_dict(cls, d: dict) -> Topology:
        return cls(
            fs=d.get("fs", 1),
            rsus_per_fs=d.get("rsus_per_fs", 1),
            cps_per_rsu=d.get("cps_per_rsu", 5),
            rates=list(d.get("rates", [])),
        )


# --- adversary --------------------------------------------------------------


def _hex_field(d: dict, key: str) -> bytes:
    try:
        return bytes.fromhex(d.get(key, ""))
    except ValueError:
        raise ConfigError(f"{key} is not hex") from None


@dataclass(frozen=True)
class Intercept:
    """Record matching messages without changing them."""

    link: str
    tag: str | None = None
    occurrence: int | None = None


@dataclass(frozen=True)
class Replay:
    """Deliver a copy of the matching message again after ``delay_ms``.

    With ``redirect`` the copy goes to another link.  ``open_session`` makes
    the adversary first send its own freshly composed m5 on that link, so a
    replayed m7 reaches a CSPA that is waiting for one.
    """

    link: str
    tag: str | None = None
    delay_ms: int = 0
    redirect: str | None = None
    occurrence: int | None = None
    open_session: bool = False


@dataclass(frozen=True)
class Tamper:
    """Flip the low bit of one byte."""

    link: str
    tag: str | None = None
    byte_index: int = 0
    occurrence: int | None = None


@dataclass(frozen=True)
class Rewrite:
    """Overwrite bytes starting at ``offset``."""

    link: str
    tag: str | None = None
    offset: int = 0
    data: bytes = b""
    occurrence: int | None = None


@dataclass(frozen=True)
class Drop:
    link: str
    tag: str | None = None
    occurrence: int | None = None


@dataclass(frozen=True)
class Inject:
    """Send raw bytes on a link at an absolute time."""

    link: str
    tag: str
    at_ms: int = 0
    data: bytes = b""


_ACTIONS = {
    "intercept": Intercept,
    "replay": Replay,
    "tamper": Tamper,
    "rewrite": Rewrite,
    "drop": Drop,
    "inject": Inject,
}


def _action_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("action", None)
    cls = _ACTIONS.get(kind)
    if cls is None:
        raise ConfigError(f"unknown adversary action {kind!r}")
    if "data_hex" in d:
        d["data"] = _hex_field(d, "data_hex")
        del d["data_hex"]
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"bad {kind} action: {exc}") from None


def _action_to_dict(a) -> dict:
    d = {"action": next(k for k, c in _ACTIONS.items() if isinstance(a, c))}
    for k, v in asdict(a).items():
        if isinstance(v, bytes):
            d["data_hex"] = v.hex()
        else:
            d[k] = v
    return d


@dataclass(frozen=True)
class AdversaryScript:
    actions: tuple = ()

    def validate(self, links: set[str]) -> None:
        for a in self.actions:
            for name in (a.link, getattr(a, "redirect", None)):
                if name is not None and name not in links:
                    raise ConfigError(f"adversary action names unknown link {name!r}")

    @classmethod
    def from_list(cls, items: list[dict]) -> AdversaryScript:
        return cls(tuple(_action_from_dict(d) for d in items))

    def to_list(self) -> list[dict]:
        return [_action_to_dict(a) for a in self.actions]


def _matches(action, link: str, tag: str, seen: int) -> bool:
    if action.link != link:
        return False
    if action.tag is not None and action.tag != tag:
        return False
    return action.occurrence is None or action.occurrence == seen


# --- scheduler --------------------------------------------------------------


class Scheduler:
    """Heap of (time, sequence) events over a logical clock."""

    def __init__(self):
        self.now = 0
        self._heap: list = []
        self._seq = 0

    def at(self, time: int, fn: Callable, *args) -> None:
        heapq.heappush(self._heap, (max(time, self.now), self._seq, fn, args))
        self._seq += 1

    def after(self, delay: int, fn: Callable, *args) -> None:
        self.at(self.now + delay, fn, *args)

    def advance_clock(self, by: int) -> int:
        if by < 0:
            raise ParameterError("clock cannot move backwards")
        self.now += by
        return self.now

    def run(self) -> None:
        while self._heap:
            t, _, fn, args = heapq.heappop(self._heap)
            self.advance_clock(t - self.now)
            fn(*args)


# --- scenario ---------------------------------------------------------------


@dataclass
class VehiclePlan:
    name: str
    start_ms: int = 10
    route: list[tuple[str, int]] = field(default_factory=list)  # (rsu, pads to cross)
    rejoin_at_ms: int | None = None  # ask the first RSU for admission again
    forged: bool = False  # no directory entry; fabricates credentials

    @classmethod
    def from_dict(cls, d: dict) -> VehiclePlan:
        return cls(
            name=d["name"],
            start_ms=d.get("start_ms", 10),
            route=[(r, int(p)) for r, p in d.get("route", [])],
            rejoin_at_ms=d.get("rejoin_at_ms"),
            forged=d.get("forged", False),
        )


@dataclass
class ScenarioConfig:
    topology: Topology = field(default_factory=Topology)
    vehicles: list[VehiclePlan] = field(default_factory=list)
    seed: int = 0
    script: AdversaryScript = field(default_factory=AdversaryScript)
    pad_interval_ms: int = 100
    token_validity_ms: int = TOKEN_VALIDITY_MS
    freshness_window_ms: int = FRESHNESS_WINDOW_MS
    cost_inflation: int = 0
    check_freshness: bool = True
    batch_size: int = 16
    expect: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> ScenarioConfig:
        try:
            sched = d.get("clock_schedule", {})
            return cls(
                topology=Topology.from_dict(d.get("topology", {})),
                vehicles=[VehiclePlan.from_dict(v) for v in d.get("vehicles", [])],
                seed=int(d.get("seed", 0)),
                script=AdversaryScript.from_list(d.get("adversary", [])),
                pad_interval_ms=int(sched.get("pad_interval_ms", 100)),
                token_validity_ms=int(sched.get("token_validity_ms", TOKEN_VALIDITY_MS)),
                freshness_window_ms=int(sched.get("freshness_window_ms", FRESHNESS_WINDOW_MS)),
                cost_inflation=int(d.get("cost_inflation", 0)),
                check_freshness=bool(d.get("check_freshness", True)),
                batch_size=int(d.get("batch_size", 16)),
                expect=dict(d.get("expect", {})),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad scenario config: {exc}") from None


@dataclass
class Transcript:
    events: list[dict] = field(default_factory=list)
    verdicts: dict = field(default_factory=dict)

    def wire(self, tag: str | None = None) -> list[dict]:
        return [e for e in self.events if e["kind"] == "wire" and (tag is None or e["tag"] == tag)]

    def rejections(self) -> list[dict]:
        return [e for e in self.events if e["kind"] == "reject"]

    def rejected(self, entity: str, tag: str, *errors: str) -> bool:
        return any(
            e["entity"] == entity and e["msg_tag"] == tag and (not errors or e["error"] in errors)
            for e in self.rejections()
        )

    def to_jsonl(self) -> str:
        lines = [json.dumps(e, sort_keys=True) for e in self.events]
        lines.append(json.dumps({"kind": "verdicts", **self.verdicts}, sort_keys=True))
        return "\n".join(lines) + "\n"


class Simulation:
    """One scenario: entities, links, adversary and the event loop."""

    def __init__(self, config: ScenarioConfig):
        self.config = config
        self.topology = config.topology
        self.sched = Scheduler()
        self.transcript = Transcript()
        self.links = self.topology.links([v.name for v in config.vehicles])
        config.script.validate(self.links)
        self.script = config.script
        self._seen: Counter = Counter()
        self.captured: list[tuple[str, str, bytes]] = []

        master = random.Random(config.seed)
        fork = lambda: random.Random(master.getrandbits(64))  # noqa: E731
        self.params, master_secret = setup(config.seed.to_bytes(8, "big"))
        self.directory = Directory()
        self.ra = RegistrationAuthority(
            self.params, master_secret, self.directory, fork(), batch_size=config.batch_size
        )
        self.bank = Bank(self.ra.registry.resolve, self.directory, fork())
        gk_rsu_cspa = new_group_key(master)
        rates = {rsu: self.topology.rate_of(rsu) for rsu in self.topology.rsu_names()}
        self.cspa = ChargingProvider(
            self.params,
            identity_bytes("CSPA"),
            self.directory,
            fork(),
            group_key_rsu=gk_rsu_cspa,
            rates=rates,
            token_validity=config.token_validity_ms,
        )
        self.cspa.cost_inflation = config.cost_inflation
        self.chain_length = default_chain_length(self.topology.cps_per_rsu)
        self.rsus: dict[str, RoadsideUnit] = {}
        self.pads: dict[str, PadController] = {}
        for rsu in self.topology.rsu_names():
            gk_cp = new_group_key(master)
            gk_pads = new_group_key(master)
            self.rsus[rsu] = RoadsideUnit(
                rsu,
                self.params,
                fork(),
                group_key_cspa=gk_rsu_cspa,
                group_key_cp=gk_cp,
                rate=rates[rsu],
                chain_length=self.chain_length,
                token_validity=config.token_validity_ms,
            )
            for k, cp in enumerate(self.topology.cp_names(rsu)):
                self.pads[cp] = PadController(cp, rsu, k, fork(), group_key_cp=gk_cp, group_key_pads=gk_pads)
        self.vehicles: dict[str, Vehicle] = {}
        self.plans = {p.name: p for p in config.vehicles}
        for plan in config.vehicles:
            self.vehicles[plan.name] = Vehicle(
                self.params,
                identity_bytes(plan.name),
                self.directory,
                fork(),
                name=plan.name,
                chain_length=self.chain_length,
                publish=not plan.forged,
            )
        self.adv_rng = fork()

        self.entities = {"ra": self.ra, "bank": self.bank, "cspa": self.cspa, **self.rsus, **self.pads, **self.vehicles}
        for ent in self.entities.values():
            ent.freshness_window = config.freshness_window_ms
            ent.check_freshness = config.check_freshness
            ent.observer = self._state_event
        self.cspa._nonces.window = config.freshness_window_ms
        for rsu in self.rsus.values():
            rsu._nonces.window = config.freshness_window_ms

        self.segment: dict[str, int] = {}
        self.awaiting_admission: set[str] = set()
        self.metrics = {
            "tokens_issued": Counter(),
            "power": Counter(),
            "admissions": Counter(),
            "settlements": [],
            "bills": defaultdict(list),
        }

    # transcript
    def _state_event(self, ev: dict) -> None:
        self.transcript.events.append({"kind": "state", **ev})

    def _record(self, kind: str, **fields) -> None:
        self.transcript.events.append({"kind": kind, "clock": self.sched.now, **fields})

    # transport
    def send(self, src: str, dst: str, tag: str, data: bytes) -> None:
        link = f"{src}->{dst}"
        if link not in self.links:
            raise ConfigError(f"no link {link}")
        self._seen[(link, tag)] += 1
        seen = self._seen[(link, tag)]
        deliveries = [(0, link, data)]
        for a in self.script.actions:
            if isinstance(a, Inject) or not _matches(a, link, tag, seen):
                continue
            if isinstance(a, Intercept):
                self.captured.append((link, tag, data))
                self._record("adversary", action="intercept", link=link, tag=tag)
            elif isinstance(a, Drop):
                deliveries = [d for d in deliveries if d[0] != 0]
                self._record("adversary", action="drop", link=link, tag=tag)
            elif isinstance(a, Tamper):
                deliveries = [(dl, ln, _flip(b, a.byte_index)) if dl == 0 else (dl, ln, b) for dl, ln, b in deliveries]
                self._record("adversary", action="tamper", link=link, tag=tag, byte_index=a.byte_index)
            elif isinstance(a, Rewrite):
                deliveries = [(dl, ln, _splice(b, a.offset, a.data)) if dl == 0 else (dl, ln, b) for dl, ln, b in deliveries]
                self._record("adversary", action="rewrite", link=link, tag=tag, offset=a.offset)
            elif isinstance(a, Replay):
                target = a.redirect or link
                self.sched.after(a.delay_ms, self._replay, target, tag, data, a.open_session)
                self._record("adversary", action="replay", link=link, tag=tag, to=target, delay_ms=a.delay_ms)
        self._record("wire", link=link, direction="send", tag=tag, len=len(data), hex=data.hex(), via=self._via(src, dst))
        for delay, ln, payload in deliveries:
            self.sched.after(delay, self._deliver, ln, tag, payload)

    def _via(self, src: str, dst: str) -> str | None:
        for a, b in ((src, dst), (dst, src)):
            if a == "cspa" and b in self.rsus:
                return self.topology.fs_of(b)
        return None

    def _replay(self, link: str, tag: str, data: bytes, open_session: bool) -> None:
        src, dst = link.split("->")
        if open_session:
            self._compose_m5(src, dst)
        self._record("wire", link=link, direction="send", tag=tag, len=len(data), hex=data.hex(), via=None)
        self.sched.after(0, self._deliver, link, tag, data)

    def _compose_m5(self, src: str, dst: str) -> None:
        r = random_scalar(self.adv_rng)
        m5 = message("m5", n_ev=self.adv_rng.randbytes(32), r_point=(self.params.g1_generator * r).to_bytes(), t=self.sched.now)
        self.send(src, dst, "m5", encode(m5))

    def _inject(self, a: Inject) -> None:
        self._record("adversary", action="inject", link=a.link, tag=a.tag)
        self._record("wire", link=a.link, direction="send", tag=a.tag, len=len(a.data), hex=a.data.hex(), via=None)
        self._deliver(a.link, a.tag, a.data)

    def _deliver(self, link: str, tag: str, data: bytes) -> None:
        src, dst = link.split("->")
        self._record("wire", link=link, direction="deliver", tag=tag, len=len(data), hex=data.hex(), via=self._via(src, dst))
        if dst == ADVERSARY:
            self.captured.append((link, tag, data))
            return
        try:
            self._dispatch(src, dst, tag, data)
        except DwptError as exc:
            log.debug("%s rejected %s from %s: %s", dst, tag, src, exc)
            self._record("reject", entity=dst, msg_tag=tag, src=src, error=type(exc).__name__, detail=str(exc))

    # entity behaviour
    def _dispatch(self, src: str, dst: str, tag: str, data: bytes) -> None:
        now = self.sched.now
        if dst == "ra":
            reply = self.ra.handle(tag, data, now)
            self.send("ra", src, {"m1": "m2", "m3": "m4"}[tag], reply)
        elif dst == "bank":
            if tag == "m3p":
                self.send("bank", src, "m4p", self.bank.handle_ticket_request(data, now))
            elif tag == "m18":
                addr, m19 = self.bank.handle_settlement(data, now)
                self.send("bank", addr, "m19", m19)
            else:
                raise ConfigError(f"bank does not handle {tag}")
        elif dst == "cspa":
            self._cspa(src, tag, data, now)
        elif dst in self.rsus:
            self._rsu(self.rsus[dst], src, tag, data, now)
        elif dst in self.pads:
            self._pad(self.pads[dst], src, tag, data, now)
        elif dst in self.vehicles:
            self._vehicle(self.vehicles[dst], src, tag, data, now)
        else:
            raise ConfigError(f"unknown entity {dst}")

    def _cspa(self, src: str, tag: str, data: bytes, now: int) -> None:
        if tag == "m2":
            self.cspa.complete_registration(data, now)
        elif tag == "m5":
            self.send("cspa", src, "m6", self.cspa.respond(src, data, now))
        elif tag == "m7":
            m8, m9, record = self.cspa.verify_and_issue(src, data, now)
            self.metrics["tokens_issued"][src] += 1
            self.sched.at(record.token.expires_at, self._settle, record.token.digest)
            self.send("cspa", src, "m8", m8)
            for rsu in self.rsus:
                self.send("cspa", rsu, "m9", m9)
        elif tag == "m17":
            self.cspa.accumulate(src, data, now)
        else:
            raise ConfigError(f"cspa does not handle {tag}")

    def _settle(self, token_hash: bytes) -> None:
        try:
            m18 = self.cspa.settle(token_hash, self.sched.now)
        except DwptError as exc:
            self._record("reject", entity="cspa", msg_tag="m18", src="cspa", error=type(exc).__name__, detail=str(exc))
            return
        self.metrics["settlements"].append(self.cspa.settlement_log[-1])
        self.send("cspa", "bank", "m18", m18)

    def _rsu(self, rsu: RoadsideUnit, src: str, tag: str, data: bytes, now: int) -> None:
        if tag == "m9":
            rsu.install(data, now)
        elif tag == "m10":
            m11, m12 = rsu.admit(data, now)
            self.metrics["admissions"][src] += 1
            self.send(rsu.name, src, "m11", m11)
            for cp in self.topology.cp_names(rsu.name):
                self.send(rsu.name, cp, "m12", m12)
        elif tag == "m16":
            anchor, m17 = rsu.close(data, now)
            for cp in self.topology.cp_names(rsu.name):
                self.pads[cp].pad.drop(anchor)
            self.send(rsu.name, "cspa", "m17", m17)
        else:
            raise ConfigError(f"rsu does not handle {tag}")

    def _pad(self, pad: PadController, src: str, tag: str, data: bytes, now: int) -> None:
        rsu = self.rsus[pad.rsu]
        if tag == "m12":
            pad.install(data, now)
            return
        if tag == "m14":
            pad.relay_in(data)
            return
        try:
            kind, anchor, out = pad.receive(data, now)
        except DwptError:
            if tag == "m13":
                rsu.record_reject()
            raise
        if kind == "accept":
            rsu.record_accept(anchor)
            self.metrics["power"][src] += 1
            if src in self.vehicles:
                self.vehicles[src].power_on()
            cps = self.topology.cp_names(pad.rsu)
            k = cps.index(pad.name)
            if k + 1 < len(cps):
                self.send(pad.name, cps[k + 1], "m14", out)
        else:
            self.send(pad.name, pad.rsu, "m16", out)

    def _vehicle(self, ev: Vehicle, src: str, tag: str, data: bytes, now: int) -> None:
        name = ev.name
        if tag == "m4":
            ev.complete_registration(data, now)
            self.send(name, "bank", "m3p", ev.request_ticket(now))
        elif tag == "m4p":
            ev.store_ticket(data, now)
            self.send(name, "cspa", "m5", ev.begin_auth(now))
        elif tag == "m6":
            self.send(name, "cspa", "m7", ev.compute_mac(data, now))
        elif tag == "m8":
            if ev.verify_cspa(data, now) is Phase.ESTABLISHED:
                self.segment[name] = 0
                self._request_segment(name)
        elif tag == "m11":
            if name not in self.awaiting_admission:
                raise AdmissionError(f"{name} did not ask for admission")
            ev.admitted(data, now)
            self.awaiting_admission.discard(name)
            self._drive_segment(name)
        elif tag == "m19":
            verdict = ev.check_bill(data, now)
            self.metrics["bills"][name].append(
                {"accepted": verdict.accepted, "billed": verdict.billed, "metered": verdict.metered, "delta": verdict.delta}
            )
        else:
            raise ConfigError(f"vehicle does not handle {tag}")

    def _request_segment(self, name: str) -> None:
        route = self.plans[name].route
        i = self.segment[name]
        if i >= len(route):
            return
        rsu, _ = route[i]
        self.awaiting_admission.add(name)
        self.send(name, rsu, "m10", self.vehicles[name].request_rsu(rsu, self.sched.now))

    def _drive_segment(self, name: str) -> None:
        rsu, pads = self.plans[name].route[self.segment[name]]
        cps = self.topology.cp_names(rsu)
        if pads > len(cps):
            raise ConfigError(f"{name} cannot cross {pads} pads on {rsu}")
        step = self.config.pad_interval_ms
        for k in range(pads):
            self.sched.after((k + 1) * step, self._cross_pad, name, cps[k])
        self.sched.after((pads + 1) * step, self._terminate, name, cps[min(pads, len(cps) - 1)])

    def _cross_pad(self, name: str, cp: str) -> None:
        self.send(name, cp, "m13", self.vehicles[name].next_pad_value())

    def _terminate(self, name: str, cp: str) -> None:
        self.send(name, cp, "m15", self.vehicles[name].terminate())
        self.segment[name] += 1
        self.sched.after(self.config.pad_interval_ms, self._request_segment, name)

    def _start_vehicle(self, name: str) -> None:
        ev = self.vehicles[name]
        self.send(name, "ra", "m3", ev.registration_request(self.sched.now))
        if self.plans[name].forged:
            self.sched.after(1, self._forged_auth, name)

    def _forged_auth(self, name: str) -> None:
        """A vehicle the RA refused makes up a pseudonym, key and ticket."""
        ev = self.vehicles[name]
        rng = self.adv_rng
        pid = rng.randbytes(32)
        ev.pseudonyms = [PseudonymRecord(pid, G2Point.generator() * random_scalar(rng), 1, 0)]
        ev.next_pseudonym = 0
        ev.tickets[pid] = rng.randbytes(64)
        self.send(name, "cspa", "m5", ev.begin_auth(self.sched.now))

    def _rejoin(self, name: str) -> None:
        plan = self.plans[name]
        if not plan.route or self.vehicles[name].session.session_key is None:
            return
        self.segment[name] = 0
        self.plans[name] = VehiclePlan(plan.name, plan.start_ms, plan.route[:1], None, plan.forged)
        self._request_segment(name)

    # run
    def run(self) -> Transcript:
        self.sched.at(0, lambda: self.send("cspa", "ra", "m1", self.cspa.registration_request(self.sched.now)))
        for plan in self.config.vehicles:
            self.sched.at(plan.start_ms, self._start_vehicle, plan.name)
            if plan.rejoin_at_ms is not None:
                self.sched.at(plan.rejoin_at_ms, self._rejoin, plan.name)
        for a in self.script.actions:
            if isinstance(a, Inject):
                self.sched.at(a.at_ms, self._inject, a)
        self.sched.run()
        self.transcript.verdicts = self._verdicts()
        return self.transcript

    def _verdicts(self) -> dict:
        m = self.metrics
        bills = {k: v for k, v in sorted(m["bills"].items())}
        return {
            "clock": self.sched.now,
            "phases": {n: ev.phase.value for n, ev in sorted(self.vehicles.items())},
            "tokens_issued": dict(sorted(m["tokens_issued"].items())),
            "power": dict(sorted(m["power"].items())),
            "admissions": dict(sorted(m["admissions"].items())),
            "settlements": len(m["settlements"]),
            "billed": {n: sum(b["billed"] for b in v) for n, v in bills.items()},
            "metered": {n: sum(b["metered"] for b in v) for n, v in bills.items()},
            "disputes": [{"vehicle": n, "delta": b["delta"]} for n, v in bills.items() for b in v if not b["accepted"]],
            "rejections": len(self.transcript.rejections()),
            "pad_accepts": {c: sum(s.accepts for s in p.pad.sessions.values()) for c, p in sorted(self.pads.items())},
            "segments": [rec.audit() for rsu in self.rsus.values() for rec in rsu.chains.values()],
        }


def _flip(data: bytes, index: int) -> bytes:
    if not data:
        return data
    i = index % len(data)
    return data[:i] + bytes([data[i] ^ 0x01]) + data[i + 1 :]


def _splice(data: bytes, offset: int, patch: bytes) -> bytes:
    end = min(len(data), offset + len(patch))
    return data[:offset] + patch[: end - offset] + data[end:]


def run_scenario(config: ScenarioConfig | dict) -> Transcript:
    if isinstance(config, dict):
        config = ScenarioConfig.from_dict(config)
    return Simulation(config).run()


def check_expectations(transcript: Transcript, expect: dict) -> list[str]:
    """Return the expectations a transcript fails; empty means all hold."""
    v = transcript.verdicts
    failures = []
    for entity, tag, *errors in expect.get("rejections", []):
        if not transcript.rejected(entity, tag, *errors):
            failures.append(f"expected {entity} to reject {tag} with {errors or 'any error'}")
    for key in ("tokens_issued", "power", "admissions"):
        for peer, want in expect.get(key, {}).items():
            got = v[key].get(peer, 0)
            if got != want:
                failures.append(f"{key}[{peer}] = {got}, expected {want}")
    if "disputes" in expect and len(v["disputes"]) != expect["disputes"]:
        failures.append(f"{len(v['disputes'])} disputes, expected {expect['disputes']}")
    if "settlements" in expect and v["settlements"] != expect["settlements"]:
        failures.append(f"{v['settlements']} settlements, expected {expect['settlements']}")
    return failures


# --- attack suite -----------------------------------------------------------


@dataclass(frozen=True)
class AttackRow:
    attack: str
    defense: str
    rejected_by: str
    held: bool
    detail: str = ""

    @property
    def verdict(self) -> str:
        return "PASS" if self.held else "FAIL"


def _victim(route_pads: int = 5, **extra) -> VehiclePlan:
    return VehiclePlan("ev0", 10, [("rsu0", route_pads)], **extra)


def attack_scenarios(seed: int = 0) -> dict[str, tuple[str, ScenarioConfig, dict]]:
    """name -> (defense, config, expectations)."""
    topo = lambda: Topology(1, 1, 5, [3])  # noqa: E731
    base = dict(seed=seed)
    stale = FRESHNESS_WINDOW_MS + 1000
    no_adv = {"tokens_issued": {ADVERSARY: 0}, "power": {ADVERSARY: 0}, "admissions": {ADVERSARY: 0}}

    out = {}
    out["replay"] = (
        "timestamp window at the CSPA (m7) and RSU (m10)",
        ScenarioConfig(
            topo(),
            [_victim()],
            script=AdversaryScript(
                (
                    Replay("ev0->cspa", "m7", stale, redirect="adv->cspa", open_session=True),
                    Replay("ev0->rsu0", "m10", stale),
                )
            ),
            **base,
        ),
        {
            "rejections": [["cspa", "m7", "FreshnessError", "DoubleSpendError"], ["rsu0", "m10", "FreshnessError"]],
            **no_adv,
            "tokens_issued": {ADVERSARY: 0, "ev0": 1},
            "admissions": {ADVERSARY: 0, "ev0": 1},
        },
    )
    nonce = bytes(32)
    out["mitm"] = (
        "mac_EV check binds both nonces",
        ScenarioConfig(
            topo(),
            [_victim()],
            script=AdversaryScript((Rewrite("ev0->cspa", "m5", 0, nonce), Rewrite("cspa->ev0", "m6", 0, nonce))),
            **base,
        ),
        {"rejections": [["cspa", "m7", "AuthError"]], **no_adv, "tokens_issued": {"ev0": 0}, "power": {"ev0": 0}, "settlements": 0},
    )
    # Byte 200 of m7 lies inside the masked mac_EV.
    out["tamper"] = (
        "mac_EV check on the decrypted m7",
        ScenarioConfig(topo(), [_victim()], script=AdversaryScript((Tamper("ev0->cspa", "m7", 200),)), **base),
        {"rejections": [["cspa", "m7", "AuthError"]], **no_adv, "tokens_issued": {"ev0": 0}, "power": {"ev0": 0}, "settlements": 0},
    )
    cps = topo().cp_names("rsu0")
    replays = tuple(
        Replay(f"ev0->{cps[k]}", "m13", 1, redirect=f"adv->{cps[k + 1]}") for k in range(len(cps) - 1)
    ) + tuple(Replay(f"ev0->{cp}", "m13", 1, redirect=f"adv->{cp}") for cp in cps)
    out["free_ride"] = (
        "pads accept only the next chain value",
        ScenarioConfig(topo(), [_victim()], script=AdversaryScript(replays), **base),
        {
            "rejections": [[cp, "m13", "ChainRejected"] for cp in cps],
            **no_adv,
            "power": {ADVERSARY: 0, "ev0": len(cps)},
        },
    )
    validity = TOKEN_VALIDITY_MS
    out["double_spend"] = (
        "token validity at the RSU",
        ScenarioConfig(topo(), [_victim(rejoin_at_ms=10 + validity + 1)], token_validity_ms=validity, **base),
        {
            "rejections": [["rsu0", "m10", "DoubleSpendError"]],
            **no_adv,
            "admissions": {ADVERSARY: 0, "ev0": 1},
            "power": {ADVERSARY: 0, "ev0": 5},
            "settlements": 1,
        },
    )
    out["spoof_registration"] = (
        "RA refuses unknown identities; CSPA checks mac_EV",
        ScenarioConfig(topo(), [VehiclePlan("ev_spoof", 10, [("rsu0", 5)], forged=True)], **base),
        {
            "rejections": [["ra", "m3", "RegistrationError"], ["cspa", "m7", "AuthError"]],
            "tokens_issued": {"ev_spoof": 0},
            "power": {"ev_spoof": 0},
            "settlements": 0,
        },
    )
    return out


def attack_suite(seed: int = 0, disable_freshness: bool = False) -> list[AttackRow]:
    """Run every attack; ``disable_freshness`` removes the timestamp checks."""
    rows = []
    for name, (defense, config, expect) in attack_scenarios(seed).items():
        config.check_freshness = not disable_freshness
        transcript = run_scenario(config)
        failures = check_expectations(transcript, expect)
        rejected_by = ", ".join(sorted({f"{r[0]}:{r[1]}" for r in expect.get("rejections", [])}))
        rows.append(AttackRow(name, defense, rejected_by, not failures, "; ".join(failures)))
    return rows
