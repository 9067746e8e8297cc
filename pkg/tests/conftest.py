import random
from dataclasses import dataclass

import pytest

from dwpt_auth.pairing import identity_bytes, setup
from dwpt_auth.protocol import (
    Bank,
    ChargingProvider,
    Directory,
    PadController,
    RegistrationAuthority,
    RoadsideUnit,
    Vehicle,
)
from dwpt_auth.wire import new_group_key

CHAIN_LENGTH = 7
PADS = 5


@pytest.fixture(scope="session")
def params_and_secret():
    return setup(b"test-params")


@pytest.fixture(scope="session")
def params(params_and_secret):
    return params_and_secret[0]


@dataclass
class World:
    params: object
    ra: RegistrationAuthority
    bank: Bank
    cspa: ChargingProvider
    rsu: RoadsideUnit
    pads: list
    directory: Directory
    now: int = 100_000

    def vehicle(self, label="EV1", seed=5, **kw):
        return Vehicle(self.params, identity_bytes(label), self.directory, random.Random(seed), name=label, chain_length=CHAIN_LENGTH, **kw)

    def register(self, ev):
        ev.complete_registration(self.ra.handle("m3", ev.registration_request(self.now), self.now), self.now)
        ev.store_ticket(self.bank.handle_ticket_request(ev.request_ticket(self.now), self.now), self.now)
        return ev

    def handshake(self, ev, peer="ev"):
        """Run m5..m8; return (m9 envelope, issued token record)."""
        m6 = self.cspa.respond(peer, ev.begin_auth(self.now), self.now)
        m8, m9, record = self.cspa.verify_and_issue(peer, ev.compute_mac(m6, self.now), self.now)
        ev.verify_cspa(m8, self.now)
        return m9, record

    def admit(self, ev, m9):
        self.rsu.install(m9, self.now)
        m11, m12 = self.rsu.admit(ev.request_rsu("rsu0", self.now), self.now)
        ev.admitted(m11, self.now)
        for p in self.pads:
            p.install(m12, self.now)


def make_world(seed=1, params_and_secret=None):
    params, s = params_and_secret or setup(b"world")
    rng = random.Random(seed)
    d = Directory()
    ra = RegistrationAuthority(params, s, d, random.Random(rng.getrandbits(64)))
    bank = Bank(ra.registry.resolve, d, random.Random(rng.getrandbits(64)))
    gk = new_group_key(rng)
    cspa = ChargingProvider(
        params, identity_bytes("CSPA"), d, random.Random(rng.getrandbits(64)), group_key_rsu=gk, rates={"rsu0": 3}
    )
    gk_cp, gk_pads = new_group_key(rng), new_group_key(rng)
    rsu = RoadsideUnit(
        "rsu0", params, random.Random(rng.getrandbits(64)), group_key_cspa=gk, group_key_cp=gk_cp, rate=3, chain_length=CHAIN_LENGTH
    )
    pads = [
        PadController(f"cp{i}", "rsu0", i, random.Random(rng.getrandbits(64)), group_key_cp=gk_cp, group_key_pads=gk_pads)
        for i in range(PADS)
    ]
    w = World(params, ra, bank, cspa, rsu, pads, d)
    cspa.complete_registration(ra.handle("m1", cspa.registration_request(w.now), w.now), w.now)
    return w


@pytest.fixture
def world(params_and_secret):
    return make_world(1, params_and_secret)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
