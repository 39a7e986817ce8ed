import random
import threading

import pytest
from hypothesis import given
from hypothesis import strategies as st

from sttcp import messages as m
from sttcp.channel import (Channel, ChannelError, NetChannel, Trace, enter, queue_pair)
from sttcp.dsl import compose
from sttcp.net import Datagram, FaultProfile, SimLink
from sttcp.session import (CLIENT_SYSTEM, END, SERVER_SYSTEM, End, LinearityError,
                           OfferOne, OfferTwo, ProtocolViolation, Rec, Role, SelectOne,
                           SelectTwo, SessionError, Token, accepts, branches,
                           expand_nary_offer, expand_nary_select, new_session)
from sttcp.shapes import ping_pong
from sttcp.sim import SimKernel, WallClock
from sttcp.tcp import Address
from sttcp.wire import Flags, PseudoHeader, Segment, encode

A, B = Role("A"), Role("B")
LABELLED = [m.Ping, m.Pong, m.Open, m.Close, m.Connected, m.TcbCreated, m.Data]


def pair(clock, trace):
    a_side, b_side = queue_pair(clock)
    return Channel(A, B, a_side, trace), Channel(B, A, b_side, trace)


# -- ping-pong --------------------------------------------------------------

def play_a(ch, tok):
    tok = ch.select_one(tok, m.Ping())
    msg, tok = ch.offer_one(tok)
    assert isinstance(msg, m.Pong)
    ch.close(tok)


def play_b(ch, tok):
    msg, tok = ch.offer_one(tok)
    assert isinstance(msg, m.Ping)
    tok = ch.select_one(tok, m.Pong())
    ch.close(tok)


def test_ping_pong_under_the_scheduler():
    kernel = SimKernel()
    trace = Trace(kernel)
    a_shape, b_shape = ping_pong()
    ca, cb = pair(kernel, trace)
    pa = kernel.spawn("a", play_a, ca, new_session(a_shape))
    pb = kernel.spawn("b", play_b, cb, new_session(b_shape))
    kernel.run()
    kernel.shutdown()
    assert pa.error is None and pb.error is None and pa.done and pb.done
    assert accepts(a_shape, trace.session_word(A))
    assert accepts(b_shape, trace.session_word(B))


def test_ping_pong_on_threads():
    clock = WallClock()
    trace = Trace(clock)
    a_shape, b_shape = ping_pong()
    ca, cb = pair(clock, trace)
    errors = []

    def guard(fn, *args):
        try:
            fn(*args)
        except BaseException as exc:  # pragma: no cover - reported below
            errors.append(exc)

    threads = [threading.Thread(target=guard, args=(play_a, ca, new_session(a_shape))),
               threading.Thread(target=guard, args=(play_b, cb, new_session(b_shape)))]
    for t in threads:
        t.start()
    for t in threads:
        t.join(5)
    assert not errors and not any(t.is_alive() for t in threads)
    assert accepts(a_shape, trace.session_word(A))


# -- linearity at runtime ---------------------------------------------------

def run_single(fn):
    kernel = SimKernel()
    proc = kernel.spawn("p", fn, kernel)
    kernel.run(until=10_000)
    kernel.shutdown()
    return proc


@pytest.mark.parametrize("op", ["select_one", "select", "select_left", "offer_one",
                                "offer_two", "close", "enter"])
def test_every_operation_rejects_a_spent_token(op):
    def body(kernel):
        trace = Trace(kernel)
        ca, cb = pair(kernel, trace)
        shapes = {
            "select_one": SelectOne(B, m.Ping, END),
            "select": expand_nary_select(B, [(m.Ping, END), (m.Pong, END), (m.Open, END)]),
            "select_left": SelectTwo(B, m.Ping, m.Pong, END, END),
            "offer_one": OfferOne(B, m.Ping, END),
            "offer_two": OfferTwo(B, m.Ping, m.Pong, END, END),
            "close": END,
            "enter": Rec("R", SelectOne(B, m.Ping, END)),
        }
        tok = new_session(shapes[op])
        actions = {
            "select_one": lambda t: ca.select_one(t, m.Ping()),
            "select": lambda t: ca.select(t, 2, m.Open()),
            "select_left": lambda t: ca.select_left(t, m.Ping()),
            "offer_one": lambda t: ca.offer_one(t),
            "offer_two": lambda t: ca.offer_two(t),
            "close": lambda t: ca.close(t),
            "enter": enter,
        }
        if op.startswith("offer"):
            cb.transport.send(("Ping", None))
            cb.transport.send(("Ping", None))
        actions[op](tok)
        with pytest.raises(LinearityError):
            actions[op](tok)

    proc = run_single(body)
    assert proc.done and proc.error is None, proc.error


def test_token_for_another_peer_is_refused_and_stays_live():
    def body(kernel):
        ca, _ = pair(kernel, None)
        tok = Token(SelectOne(CLIENT_SYSTEM, m.Ping, END))
        with pytest.raises(SessionError):
            ca.select_one(tok, m.Ping())
        assert not tok.spent

    assert run_single(body).error is None


def test_select_checks_message_class_and_virtual_cases():
    def body(kernel):
        ca, _ = pair(kernel, None)
        with pytest.raises(SessionError):
            ca.select_one(Token(SelectOne(B, m.Ping, END)), m.Pong())
        expanded = expand_nary_select(B, [(m.Ping, END), (m.Pong, END), (m.Open, END)])
        with pytest.raises(SessionError):
            ca.select_right(Token(expanded), m.Pong())
        with pytest.raises(SessionError):
            ca.select(Token(expanded), 5, m.Pong())
        nxt = ca.select(Token(expanded), 1, m.Pong())
        assert isinstance(nxt.shape, End)

    assert run_single(body).error is None


def test_closed_peer_surfaces_as_channel_error():
    def body(kernel):
        ca, cb = pair(kernel, None)
        cb.close(Token(END))
        with pytest.raises(ChannelError):
            ca.offer_one(Token(OfferOne(B, m.Ping, END)))

    assert run_single(body).error is None


def test_picker_result_is_validated():
    def body(kernel):
        ca, cb = pair(kernel, None)
        cb.transport.send(("Ping", None))
        with pytest.raises(ProtocolViolation):
            ca.offer_two(Token(OfferTwo(B, m.Ping, m.Pong, END, END)), picker=lambda rep: 7)
        cb.transport.send(("Nope", None))
        with pytest.raises(ProtocolViolation):
            ca.offer_two(Token(OfferTwo(B, m.Ping, m.Pong, END, END)))

    assert run_single(body).error is None


# -- network endpoint: filters and timed offers ------------------------------

SERVER = Address("10.0.0.1", 7)
CLIENT = Address("10.0.0.2", 999)


class OnlyAcks:
    def accepts(self, src, seg):
        return seg.has(Flags.ACK) and not seg.has(Flags.RST)


def net_fixture(kernel):
    link = SimLink(kernel, FaultProfile(delay_ms=1))
    trace = Trace(kernel)
    net = NetChannel(SERVER_SYSTEM, CLIENT_SYSTEM, link.a, SERVER, trace)
    net.remote = CLIENT

    def send(flags, payload=b"", corrupt=False, dst=SERVER.ip):
        raw = bytearray(encode(Segment(CLIENT.port, SERVER.port, 1, 1, Flags.parse(flags),
                                       payload=payload), PseudoHeader(CLIENT.ip, SERVER.ip)))
        if corrupt:
            raw[-1] ^= 0xFF
        link.b.send(Datagram(CLIENT.ip, dst, bytes(raw)))

    return net, trace, send


TIMED = compose("(ClientSystem & {Ack.end, FinAck.end, Timeout.end})")


def test_filtered_segments_never_reach_the_picker():
    seen = []

    def body(kernel):
        net, trace, send = net_fixture(kernel)
        send("R")
        send("A", b"x", corrupt=True)
        send("A", dst="10.9.9.9")
        send("S")
        send("FA")
        br = net.offer_two_filtered(Token(TIMED), lambda seg: seen.append(seg) or 1, OnlyAcks())
        assert br.index == 1 and isinstance(br.message, m.FinAck)
        assert (net.stats.filtered, net.stats.checksum_errors, net.stats.foreign) == (2, 1, 1)
        assert [e.label for e in trace.events if e.kind == "drop"] == [
            "filtered", "undecodable", "filtered"]

    assert run_single(body).error is None
    assert len(seen) == 1 and seen[0].flags == Flags.FIN | Flags.ACK


def test_offer_timed_takes_timeout_after_the_budget():
    def body(kernel):
        net, trace, send = net_fixture(kernel)
        br = net.offer_timed(Token(TIMED), lambda seg: 0, OnlyAcks(), budget=200)
        assert isinstance(br.message, m.Timeout) and br.index == 2
        assert kernel.now() == 200
        send("A")
        br = net.offer_timed(Token(TIMED), lambda seg: 0, OnlyAcks(), budget=200)
        assert isinstance(br.message, m.Ack) and kernel.now() == 201

    assert run_single(body).error is None


def test_offer_timed_without_budget_never_times_out():
    def body(kernel):
        net, _, _ = net_fixture(kernel)
        net.offer_timed(Token(TIMED), lambda seg: 0, None, budget=None)

    kernel = SimKernel()
    proc = kernel.spawn("p", body, kernel)
    kernel.run(until=1_000_000)
    assert not proc.done  # still waiting: no Timeout was synthesized
    kernel.shutdown()


def test_offer_timed_needs_a_timeout_case():
    def body(kernel):
        net, _, _ = net_fixture(kernel)
        with pytest.raises(SessionError):
            net.offer_timed(Token(OfferTwo(CLIENT_SYSTEM, m.Ack, m.FinAck, END, END)),
                            None, None, 10)

    assert run_single(body).error is None


def test_outbound_ack_must_be_plain():
    def body(kernel):
        net, _, _ = net_fixture(kernel)
        bad = m.Ack(Segment(7, 999, 0, 0, Flags.FIN | Flags.ACK))
        with pytest.raises(ProtocolViolation):
            net.select_one(Token(SelectOne(CLIENT_SYSTEM, m.Ack, END)), bad)

    assert run_single(body).error is None


# -- session fidelity over random dual pairs ---------------------------------

def dual(shape, peer, memo=None):
    """Mirror image of ``shape`` for the other endpoint (test helper)."""
    memo = {} if memo is None else memo
    if isinstance(shape, End):
        return shape
    if isinstance(shape, Rec):
        if shape.name not in memo:
            memo[shape.name] = Rec(shape.name)
            memo[shape.name].define(dual(shape.body, peer, memo))
        return memo[shape.name]
    flip = {OfferOne: SelectOne, SelectOne: OfferOne, OfferTwo: SelectTwo, SelectTwo: OfferTwo}
    cls = flip[type(shape)]
    if cls in (OfferOne, SelectOne):
        return cls(peer, shape.msg, dual(shape.cont, peer, memo))
    return cls(peer, shape.msg1, shape.msg2, dual(shape.cont1, peer, memo),
               dual(shape.cont2, peer, memo))


def gen(rng, depth, recs, counter):
    if depth == 0 or rng.random() < 0.1:
        return rng.choice(recs) if recs and rng.random() < 0.7 else END
    if rng.random() < 0.2:
        counter[0] += 1
        rec = Rec(f"L{counter[0]}")
        return rec.define(SelectOne(B, rng.choice(LABELLED), gen(rng, depth - 1, recs + [rec], counter))
                          if rng.random() < 0.5 else
                          OfferOne(B, rng.choice(LABELLED), gen(rng, depth - 1, recs + [rec], counter)))
    labels = rng.sample(LABELLED, rng.choice([1, 2, 3, 4]))
    cases = [(msg, gen(rng, depth - 1, recs, counter)) for msg in labels]
    return (expand_nary_offer if rng.random() < 0.5 else expand_nary_select)(B, cases)


def walker(ch, tok, rng, limit, outcome):
    for _ in range(limit):
        tok = enter(tok)
        shape = tok.shape
        if isinstance(shape, End):
            ch.close(tok)
            outcome.append("end")
            return
        if isinstance(shape, SelectOne):
            tok = ch.select_one(tok, shape.msg())
        elif isinstance(shape, SelectTwo):
            cases = branches(shape)
            i = rng.randrange(len(cases))
            tok = ch.select(tok, i, cases[i][0]())
        elif isinstance(shape, OfferOne):
            _, tok = ch.offer_one(tok)
        else:
            tok = ch.offer_two(tok).token
    outcome.append("limit")


@given(st.integers(0, 2**32))
def test_session_fidelity_random_dual_pairs(seed):
    rng = random.Random(seed)
    a_shape = gen(rng, 6, [], [0])
    b_shape = dual(a_shape, A)
    kernel = SimKernel()
    trace = Trace(kernel)
    ca, cb = pair(kernel, trace)
    outa, outb = [], []
    pa = kernel.spawn("a", walker, ca, new_session(a_shape), random.Random(seed + 1), 40, outa)
    pb = kernel.spawn("b", walker, cb, new_session(b_shape), random.Random(seed + 2), 40, outb)
    kernel.run()
    kernel.shutdown()
    # a walker that stops at its step limit leaves its peer blocked; that is
    # the only way either side may fail to finish
    for proc in (pa, pb):
        assert proc.error is None or "Shutdown" in type(proc.error).__name__, proc.error
    assert accepts(a_shape, trace.session_word(A), complete=outa == ["end"])
    assert accepts(b_shape, trace.session_word(B), complete=outb == ["end"])
