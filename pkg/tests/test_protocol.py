import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dwpt_auth.errors import (
    AdmissionError,
    AuthError,
    DecodeError,
    DoubleSpendError,
    DuplicateError,
    DwptError,
    FreshnessError,
    ProtocolError,
    RegistrationError,
    SettlementError,
    UnknownPseudonymError,
)
from dwpt_auth.hashchain import build_chain, xor_bytes
from dwpt_auth.ibe import pseudonym_id
from dwpt_auth.pairing import hash_to_digest, identity_bytes
from dwpt_auth.protocol import (
    FRESHNESS_WINDOW_MS,
    KEY_ID_SESSION,
    MAC_CSPA_SUFFIX,
    MAC_EV_SUFFIX,
    SESSION_KEY_SUFFIX,
    Phase,
    SessionState,
    session_digest,
)
from dwpt_auth.wire import SCHEMAS, decode, encode, message, open_group, seal_group

from conftest import make_world


def test_ev_registration_delivers_full_batch(world):
    ev = world.register(world.vehicle())
    assert len(ev.pseudonyms) == 16
    assert ev.key.verify(world.params)


def test_pids_reconstructed_by_vehicle_match_ra(world):
    ev = world.register(world.vehicle())
    entry = world.ra.registry.vehicles[ev.identity]
    assert [p.pid for p in ev.pseudonyms] == entry.pids
    for rec in ev.pseudonyms:
        assert rec.pid == pseudonym_id(ev.identity, entry.d_ev, rec.a_i)
        assert world.ra.registry.resolve(rec.pid) == (ev.identity, rec.index)


def test_stale_registration_rejected(world):
    ev = world.vehicle()
    m3 = message("m3", id_ev=ev.identity, t=world.now - FRESHNESS_WINDOW_MS - 1)
    with pytest.raises(FreshnessError):
        world.ra.ra_register("EV", m3, world.now)


def test_duplicate_registration_rejected(world):
    ev = world.register(world.vehicle())
    with pytest.raises(DuplicateError):
        world.ra.handle("m3", ev.registration_request(world.now), world.now)
    with pytest.raises(DuplicateError):
        world.ra.handle("m1", world.cspa.registration_request(world.now), world.now)


def test_unknown_identity_cannot_register(world):
    ghost = world.vehicle("GHOST", publish=False)
    with pytest.raises(RegistrationError):
        world.ra.handle("m3", ghost.registration_request(world.now), world.now)
    with pytest.raises(RegistrationError):
        world.ra.ra_register("EV", message("m3", id_ev=bytes(32), t=world.now), world.now)


def test_bank_tickets(world):
    ev = world.register(world.vehicle())
    pid = ev.pseudonyms[0].pid
    t1, t2 = world.bank.bank_issue_ticket(pid), world.bank.bank_issue_ticket(pid)
    assert t1.value != t2.value and len(t1.value) == 64
    assert world.bank.tickets[t1.value] == pid
    with pytest.raises(UnknownPseudonymError):
        world.bank.bank_issue_ticket(b"\x00" * 32)


def test_message_sizes_in_handshake(world):
    ev = world.register(world.vehicle())
    m5 = ev.begin_auth(world.now)
    assert len(m5) == 104
    m6 = world.cspa.respond("ev", m5, world.now)
    assert len(m6) == 136
    assert decode("m6", m6)["id_cspa"] == world.cspa.identity


def test_honest_handshake_agrees_on_keys(world):
    ev = world.register(world.vehicle())
    m9, record = world.handshake(ev)
    ours, theirs = ev.session, world.cspa.sessions["ev"]
    assert ours.phase is theirs.phase is Phase.ESTABLISHED
    assert ours.k_shared == theirs.k_shared
    assert ours.k_prime == theirs.k_prime
    assert ours.k_prime == ours.r_point_cspa * ours.own_scalar
    assert theirs.k_prime == theirs.r_point_ev * theirs.own_scalar
    assert ours.session_key == theirs.session_key
    assert ev.token.value == record.token.value


def test_three_suffixes_give_three_digests(world):
    ev = world.register(world.vehicle())
    world.handshake(ev)
    s = ev.session
    args = (s.k_shared, s.k_prime, ev.cspa_id, s.pid, s.n_ev, s.n_cspa)
    digests = {session_digest(*args, sfx) for sfx in (MAC_EV_SUFFIX, MAC_CSPA_SUFFIX, SESSION_KEY_SUFFIX)}
    assert len(digests) == 3
    assert s.mac_ev == session_digest(*args, MAC_EV_SUFFIX)
    assert s.session_key == session_digest(*args, SESSION_KEY_SUFFIX)


def test_token_is_masked_with_pid(world):
    ev = world.register(world.vehicle())
    m6 = world.cspa.respond("ev", ev.begin_auth(world.now), world.now)
    m8, _, record = world.cspa.verify_and_issue("ev", ev.compute_mac(m6, world.now), world.now)
    fields = decode("m8", m8)
    assert len(m8) == 72
    assert fields["masked_token"] == xor_bytes(record.token.value, record.pid)
    assert xor_bytes(fields["masked_token"], record.pid) == record.token.value


def test_m9_carries_token_hash_pid_and_session_key(world):
    ev = world.register(world.vehicle())
    m9, record = world.handshake(ev)
    fields = decode("m9", open_group(world.cspa.group_key_rsu, m9))
    assert fields["token_hash"] == hash_to_digest(record.token.value)
    assert fields["pid"] == record.pid
    assert fields["session_key"] == ev.session.session_key


def test_m7_is_ibe_encrypted_to_the_cspa(world):
    ev = world.register(world.vehicle())
    m6 = world.cspa.respond("ev", ev.begin_auth(world.now), world.now)
    m7 = ev.compute_mac(m6, world.now)
    assert len(m7) == 64 + 168


def test_flipped_nonce_fails_mac_check(world):
    ev = world.register(world.vehicle())
    m6 = bytearray(world.cspa.respond("ev", ev.begin_auth(world.now), world.now))
    m6[0] ^= 1
    m7 = ev.compute_mac(bytes(m6), world.now)
    with pytest.raises(AuthError):
        world.cspa.verify_and_issue("ev", m7, world.now)
    assert world.cspa.sessions["ev"].phase is Phase.FAILED
    assert not world.cspa.issued


def test_tampered_m8_fails_at_vehicle(world):
    ev = world.register(world.vehicle())
    m6 = world.cspa.respond("ev", ev.begin_auth(world.now), world.now)
    m8, _, _ = world.cspa.verify_and_issue("ev", ev.compute_mac(m6, world.now), world.now)
    bad = bytes([m8[0] ^ 1]) + m8[1:]
    with pytest.raises(AuthError):
        ev.verify_cspa(bad, world.now)
    assert ev.phase is Phase.FAILED
    assert ev.session.session_key is None


def test_stale_m8_rejected(world):
    ev = world.register(world.vehicle())
    m6 = world.cspa.respond("ev", ev.begin_auth(world.now), world.now)
    m8, _, _ = world.cspa.verify_and_issue("ev", ev.compute_mac(m6, world.now), world.now)
    with pytest.raises(FreshnessError):
        ev.verify_cspa(m8, world.now + FRESHNESS_WINDOW_MS + 1)


def test_stale_m5_rejected(world):
    ev = world.register(world.vehicle())
    m5 = ev.begin_auth(world.now)
    with pytest.raises(FreshnessError):
        world.cspa.respond("ev", m5, world.now + FRESHNESS_WINDOW_MS + 1)


def test_repeated_nonce_rejected(world):
    ev = world.register(world.vehicle())
    m5 = ev.begin_auth(world.now)
    world.cspa.respond("ev", m5, world.now)
    with pytest.raises(FreshnessError):
        world.cspa.respond("other", m5, world.now + 1)


def test_ticket_reuse_is_double_spending(world):
    ev = world.register(world.vehicle())
    world.handshake(ev)
    ev.next_pseudonym -= 1
    with pytest.raises(DoubleSpendError):
        world.handshake(ev, peer="again")


def test_m7_without_handshake_rejected(world):
    with pytest.raises(ProtocolError):
        world.cspa.verify_and_issue("nobody", bytes(232), world.now)


def test_handshake_needs_a_ticket(world):
    ev = world.vehicle()
    ev.complete_registration(world.ra.handle("m3", ev.registration_request(world.now), world.now), world.now)
    with pytest.raises(ProtocolError):
        ev.begin_auth(world.now)


def test_phase_transitions_are_monotone():
    s = SessionState("EV")
    s.advance(Phase.NONCE_SENT)
    with pytest.raises(ProtocolError):
        s.advance(Phase.IDLE)
    s.advance(Phase.MAC_SENT)
    s.advance(Phase.ESTABLISHED)
    with pytest.raises(ProtocolError):
        s.advance(Phase.FAILED)


def test_observer_receives_transitions(world):
    events = []
    world.cspa.observer = events.append
    ev = world.register(world.vehicle())
    world.handshake(ev)
    keys = {"clock", "entity", "event", "phase_before", "phase_after", "msg_tag"}
    assert all(set(e) == keys for e in events)
    assert ("NonceSent", "Established") in {(e["phase_before"], e["phase_after"]) for e in events}


def _field_of(tag, offset):
    pos = 0
    for name, width in SCHEMAS[tag]:
        if offset < pos + width:
            return name
        pos += width
    return None


@settings(max_examples=40, deadline=None)
@given(which=st.sampled_from(["m5", "m6", "m7", "m8"]), bit=st.integers(min_value=0, max_value=10_000))
def test_single_bit_flip_never_yields_mismatched_keys(params_and_secret, which, bit):
    w = make_world(2, params_and_secret)
    ev = w.register(w.vehicle())

    def flip(data, tag):
        if tag != which:
            return data
        i = bit % (len(data) * 8)
        out = bytearray(data)
        out[i // 8] ^= 1 << (i % 8)
        return bytes(out)

    try:
        m5 = flip(ev.begin_auth(w.now), "m5")
        m6 = flip(w.cspa.respond("ev", m5, w.now), "m6")
        m7 = flip(ev.compute_mac(m6, w.now), "m7")
        m8, _, _ = w.cspa.verify_and_issue("ev", m7, w.now)
        ev.verify_cspa(flip(m8, "m8"), w.now)
    except DwptError:
        # rejected somewhere: no side may hold an established session the other lacks
        assert ev.phase is not Phase.ESTABLISHED
        return
    # Timestamps, the ticket and the masked token are not covered by any mac.  A
    # flip there leaves the keys equal; a flipped token surfaces later at the
    # pads and a flipped ticket at settlement.
    i = bit % (len({"m5": m5, "m6": m6, "m7": m7, "m8": m8}[which]) * 8)
    offset = i // 8 - (64 if which == "m7" else 0)
    field = _field_of(which, offset)
    assert field in ("t", "ticket", "masked_token")
    assert ev.session.session_key == w.cspa.sessions["ev"].session_key
    issued = w.cspa.issued[next(iter(w.cspa.issued))]
    if field == "masked_token":
        assert ev.token.value != issued.token.value
    if field == "ticket":
        assert issued.ticket != ev.session.ticket


def test_tampered_ticket_is_caught_at_settlement(world):
    ev = world.register(world.vehicle())
    m5 = ev.begin_auth(world.now)
    m6 = world.cspa.respond("ev", m5, world.now)
    m7 = bytearray(ev.compute_mac(m6, world.now))
    m7[64 + 64 + 5] ^= 0x01  # ibe header, then id_ra and pid: byte 5 of the ticket
    m8, _, record = world.cspa.verify_and_issue("ev", bytes(m7), world.now)
    ev.verify_cspa(m8, world.now)
    assert record.ticket != ev.session.ticket
    m18 = world.cspa.settle(record.token.digest, record.token.expires_at)
    with pytest.raises(SettlementError):
        world.bank.handle_settlement(m18, record.token.expires_at)


def test_vehicle_identity_never_leaves_registration(world):
    ev = world.register(world.vehicle())
    m5 = ev.begin_auth(world.now)
    m6 = world.cspa.respond("ev", m5, world.now)
    m7 = ev.compute_mac(m6, world.now)
    m8, m9, _ = world.cspa.verify_and_issue("ev", m7, world.now)
    ev.verify_cspa(m8, world.now)
    world.rsu.install(m9, world.now)
    m10 = ev.request_rsu("rsu0", world.now)
    plaintexts = [m5, m6, m8, encode(ev.ev_request_rsu("rsu0", world.now))]
    assert all(ev.identity not in p for p in plaintexts + [m7, m9, m10])


def test_rsu_admission_returns_incremented_nonce(world):
    ev = world.register(world.vehicle())
    m9, record = world.handshake(ev)
    world.rsu.install(m9, world.now)
    m10 = ev.ev_request_rsu("rsu0", world.now)
    sealed = seal_group(ev.session.session_key, encode(m10), random.Random(0), KEY_ID_SESSION).to_bytes()
    assert len(encode(m10)) == 72
    m11, m12, _ = world.rsu.rsu_admit(sealed, world.now)
    assert len(encode(m11)) == 73 and len(encode(m12)) == 72
    assert m11.as_int("n_rsu_next") == m10.as_int("n_rsu") + 1
    assert m11.as_int("rate") == 3
    env = seal_group(ev.session.session_key, encode(m11), random.Random(1), KEY_ID_SESSION).to_bytes()
    chain = ev.admitted(env, world.now)
    # both ends build the same chain from (T, M_EV)
    independent = build_chain(record.token.digest, m11["m_ev"], chain.n, world.params.update_constant)
    assert chain.head == independent.head == m12["head"]
    assert chain.anchor == m12["anchor"]


def test_rsu_rejects_unknown_pid(world):
    ev = world.register(world.vehicle())
    world.handshake(ev)
    with pytest.raises(AdmissionError):
        world.rsu.admit(ev.request_rsu("rsu0", world.now), world.now)


def test_rsu_rejects_wrong_session_key(world):
    ev = world.register(world.vehicle())
    m9, _ = world.handshake(ev)
    world.rsu.install(m9, world.now)
    m10 = encode(ev.ev_request_rsu("rsu0", world.now))
    forged = seal_group(b"\x00" * 32, m10, random.Random(0), KEY_ID_SESSION).to_bytes()
    with pytest.raises(AdmissionError):
        world.rsu.admit(forged, world.now)


def test_vehicle_rejects_wrong_nonce_reply(world):
    ev = world.register(world.vehicle())
    m9, _ = world.handshake(ev)
    world.rsu.install(m9, world.now)
    m10 = ev.ev_request_rsu("rsu0", world.now)
    m11 = message("m11", n_rsu_next=m10.as_int("n_rsu"), m_ev=bytes(32), t=world.now, rate=3)
    env = seal_group(ev.session.session_key, encode(m11), random.Random(0), KEY_ID_SESSION).to_bytes()
    with pytest.raises(AdmissionError):
        ev.admitted(env, world.now)


def test_nonce_increment_wraps():
    m10_nonce = (1 << 256) - 1
    assert (m10_nonce + 1) % (1 << 256) == 0
    msg = message("m11", n_rsu_next=0, m_ev=bytes(32), t=0, rate=1)
    assert msg["n_rsu_next"] == bytes(32)


def test_rsu_rejects_replayed_m10_and_expired_token(world):
    ev = world.register(world.vehicle())
    m9, record = world.handshake(ev)
    world.rsu.install(m9, world.now)
    m10 = ev.request_rsu("rsu0", world.now)
    world.rsu.admit(m10, world.now)
    with pytest.raises(FreshnessError):
        world.rsu.admit(m10, world.now + 1)
    later = record.token.expires_at
    with pytest.raises(DoubleSpendError):
        world.rsu.admit(ev.request_rsu("rsu0", later), later)


def test_full_segment_and_bill(world):
    ev = world.register(world.vehicle())
    m9, record = world.handshake(ev)
    world.admit(ev, m9)
    for i, pad in enumerate(world.pads):
        kind, anchor, m14 = pad.receive(ev.next_pad_value(), world.now)
        assert kind == "accept"
        world.rsu.record_accept(anchor)
        ev.power_on()
        if i + 1 < len(world.pads):
            world.pads[i + 1].relay_in(m14)
    kind, anchor, m16 = world.pads[-1].receive(ev.terminate(), world.now)
    assert kind == "terminate"
    _, m17 = world.rsu.close(m16, world.now)
    assert world.cspa.accumulate("rsu0", m17, world.now) == 15
    t = record.token.expires_at
    addr, m19 = world.bank.handle_settlement(world.cspa.settle(record.token.digest, t), t)
    assert addr == ev.name
    verdict = ev.check_bill(m19, t)
    assert verdict.accepted and verdict.billed == verdict.metered == 15


def test_pad_controller_rejects_unknown_frames(world):
    with pytest.raises(DecodeError):
        world.pads[0].receive(b"", world.now)
    with pytest.raises(DecodeError):
        world.pads[0].receive(b"\x07" + bytes(32), world.now)


def test_cspa_identity_is_fixed_width():
    assert len(identity_bytes("CSPA")) == 32
