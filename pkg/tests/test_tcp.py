import itertools

import pytest
from hypothesis import given
from hypothesis import strategies as st

from sttcp.tcp import (TRANSITIONS, AckOfFin, Acceptable, Address, Duplicate, EstabClass,
                       FinAckSimultaneous, FinWait1Class, FinWait2Class, NotAcceptable,
                       Reset, RetransmissionQueue, SendError, State, Tcb, TcpError,
                       WrongState, acceptable, is_valid_path, seq_add, seq_lte, seq_sub)
from sttcp.wire import Flags, Segment

from . import oracles

SERVER = Address("10.0.0.1", 7)
CLIENT = Address("10.0.0.2", 4000)
IRS, ISS = 100, 300


def seg(flags="A", seq=IRS + 1, ack=ISS + 1, payload=b"", window=65535, sport=4000, dport=7):
    return Segment(sport, dport, seq % 2**32, ack % 2**32, Flags.parse(flags), window, payload)


def established(iss=ISS, irs=IRS) -> Tcb:
    tcb = Tcb().open(SERVER)
    tcb, _ = tcb.recv_syn(CLIENT, seg("S", seq=irs, ack=0), iss)
    reaction = tcb.synrcvd_recv_ack(seg(seq=irs + 1, ack=iss + 1))
    assert isinstance(reaction, Acceptable)
    return reaction.tcb


# -- four-case acceptability over a small window ----------------------------

def test_acceptable_exhaustive_small_lengths_and_windows():
    """All len, wnd <= 64 and every seq within reach of the window, on
    both sides of the 16-bit wrap."""
    import numpy as np
    for rcv in (0, 65500):
        combos = np.array([(s, n, w) for n in range(65) for w in range(65)
                           for s in range(-70, 140)])
        seqs = (rcv + combos[:, 0]) % oracles.MOD
        want = oracles.acceptable16(seqs, combos[:, 1], np.full(len(combos), rcv), combos[:, 2])
        got = [acceptable(int(s), int(n), rcv, int(w), 16)
               for s, n, w in zip(seqs, combos[:, 1], combos[:, 2])]
        assert np.array_equal(np.array(got), want)


def test_acceptability_examples():
    assert acceptable(10, 0, 10, 0)
    assert not acceptable(11, 0, 10, 0)
    assert not acceptable(10, 5, 10, 0)
    assert acceptable(5, 10, 10, 100)  # overlaps the left edge
    assert not acceptable(0, 10, 10, 100)
    assert acceptable(109, 50, 10, 100)
    assert not acceptable(110, 1, 10, 100)


# -- handshake --------------------------------------------------------------

def test_passive_open_builds_syn_ack():
    tcb = Tcb().open(SERVER)
    assert tcb.state is State.LISTEN
    tcb, synack = tcb.recv_syn(CLIENT, seg("S", seq=IRS, ack=0), ISS)
    assert tcb.state is State.SYN_RCVD
    assert synack.flags == Flags.SYN | Flags.ACK
    assert (synack.seq, synack.ack) == (ISS, IRS + 1)
    assert (tcb.snd_una, tcb.snd_nxt, tcb.rcv_nxt) == (ISS, ISS + 1, IRS + 1)
    assert tcb.rtx.span == 1


def test_recv_syn_ignores_non_syn():
    tcb = Tcb().open(SERVER)
    assert tcb.recv_syn(CLIENT, seg("SA", seq=IRS), ISS) == (tcb, None)


def test_wrong_state_is_refused():
    with pytest.raises(WrongState):
        Tcb().recv_syn(CLIENT, seg("S"), 0)
    with pytest.raises(WrongState):
        established().open(SERVER)


def synrcvd() -> Tcb:
    return Tcb().open(SERVER).recv_syn(CLIENT, seg("S", seq=IRS, ack=0), ISS)[0]


def test_synrcvd_reactions():
    tcb = synrcvd()
    ok = tcb.synrcvd_recv_ack(seg())
    assert isinstance(ok, Acceptable) and ok.tcb.state is State.ESTABLISHED and not ok.tcb.rtx
    bad_ack = tcb.synrcvd_recv_ack(seg(ack=ISS + 999))
    assert isinstance(bad_ack, NotAcceptable) and bad_ack.tcb == tcb
    assert (bad_ack.response.seq, bad_ack.response.ack) == (ISS + 1, IRS + 1)
    bad_seq = tcb.synrcvd_recv_ack(seg(seq=IRS + 200_000))
    assert isinstance(bad_seq, NotAcceptable)
    assert tcb.synrcvd_recv_ack(seg("R")) == Reset(None)
    half_open = tcb.synrcvd_recv_ack(seg("SA", seq=IRS + 1, ack=ISS + 50))
    assert isinstance(half_open, Reset)
    assert half_open.response.flags == Flags.RST and half_open.response.seq == ISS + 50


# -- established ------------------------------------------------------------

def test_in_order_data_advances_rcv_nxt():
    tcb = established()
    s = seg("PA", payload=b"hello\n")
    assert tcb.estab_classify(s) is EstabClass.ACCEPTABLE_WITH_PAYLOAD
    tcb2, ack, data = tcb.recv_data(s)
    assert data == b"hello\n" and tcb2.rcv_nxt == IRS + 7 and ack.ack == IRS + 7


def test_out_of_order_data_is_unacceptable():
    tcb = established()
    gap = seg("PA", seq=IRS + 1 + 6, payload=b"world\n")
    assert tcb.is_acceptable(gap)
    assert tcb.estab_classify(gap) is EstabClass.UNACCEPTABLE
    dup = tcb.build_empty_ack()
    assert dup.ack == tcb.rcv_nxt and not dup.payload


def test_overlap_delivers_only_new_bytes():
    tcb, _, _ = established().recv_data(seg("PA", payload=b"abc"))
    tcb, _, data = tcb.recv_data(seg("PA", seq=IRS + 2, payload=b"bcdef"))
    assert data == b"def" and tcb.rcv_nxt == IRS + 7


def test_classification_is_total_and_exclusive():
    tcb = established()
    for flags, off, ack, payload in itertools.product(
            ["A", "PA", "FA", "S", "SA", "", "RA"], [-5, 0, 3, 70000], [0, 1, 2],
            [b"", b"xy"]):
        s = seg(flags, seq=IRS + 1 + off, ack=ISS + ack, payload=payload)
        assert isinstance(tcb.estab_classify(s), EstabClass)


def test_ack_beyond_snd_nxt_is_unacceptable():
    assert established().estab_classify(seg(ack=ISS + 10)) is EstabClass.UNACCEPTABLE


def test_send_data_limits():
    tcb = established()
    with pytest.raises(SendError):
        tcb.send_data(b"")
    with pytest.raises(SendError):
        tcb.send_data(b"x" * (tcb.mss + 1))
    small = Tcb(**{**tcb.__dict__, "snd_wnd": 3})
    with pytest.raises(SendError):
        small.send_data(b"abcd")


def test_retransmission_queue_tracks_unacked_bytes():
    tcb = established()
    tcb, a = tcb.send_data(b"abc")
    tcb, b = tcb.send_data(b"defg")
    assert tcb.rtx.span == 7 == seq_sub(tcb.snd_nxt, tcb.snd_una)
    assert tcb.retransmit_head().payload == b"abc"
    part = tcb.ack_update(seg(ack=ISS + 2))
    assert len(part.rtx) == 2 and part.rtx.span == 6
    assert part.retransmit_head().payload == b"abc"  # partially acked entries stay whole
    one = tcb.ack_update(seg(ack=ISS + 4))
    assert [e.segment.payload for e in one.rtx.entries] == [b"defg"]
    done = tcb.ack_update(seg(ack=ISS + 8))
    assert not done.rtx and done.snd_una == done.snd_nxt
    with pytest.raises(TcpError):
        done.retransmit_head()
    # an old ACK never moves snd_una back
    assert done.ack_update(seg(ack=ISS + 4)).snd_una == ISS + 8


def test_retransmit_refreshes_ack_field():
    tcb, _ = established().send_data(b"abc")
    tcb, _, _ = tcb.recv_data(seg("PA", payload=b"zz"))
    assert tcb.retransmit_head().ack == IRS + 3


# -- closing ----------------------------------------------------------------

def test_passive_close_path():
    tcb = established()
    tcb, ack, data = tcb.recv_fin(seg("FA"))
    assert tcb.state is State.CLOSE_WAIT and ack.ack == IRS + 2 and data == b""
    tcb, fin = tcb.start_close()
    assert tcb.state is State.LAST_ACK and fin.flags == Flags.FIN | Flags.ACK
    assert tcb.lastack_recv(seg(seq=IRS + 2, ack=ISS + 1)).state is State.LAST_ACK
    assert tcb.lastack_recv(seg(seq=IRS + 2, ack=ISS + 2)).state is State.CLOSED


def test_fin_with_data():
    tcb, _, data = established().recv_fin(seg("FPA", payload=b"bye"))
    assert data == b"bye" and tcb.rcv_nxt == IRS + 5


def test_active_close_paths():
    tcb, fin = established().start_close()
    assert tcb.state is State.FIN_WAIT_1 and fin.seq == ISS + 1
    assert tcb.finwait1_classify(seg(ack=ISS + 1)) is FinWait1Class.STALE
    assert isinstance(tcb.finwait1_recv(seg(ack=ISS + 1)), Duplicate)
    r = tcb.finwait1_recv(seg(ack=ISS + 2))
    assert isinstance(r, AckOfFin) and r.tcb.state is State.FIN_WAIT_2
    both = tcb.finwait1_recv(seg("FA", ack=ISS + 2))
    assert isinstance(both, FinAckSimultaneous) and both.tcb.state is State.CLOSED
    assert both.response.ack == IRS + 2

    fw2 = r.tcb
    assert fw2.finwait2_classify(seg()) is FinWait2Class.IGNORED
    assert fw2.finwait2_recv(seg()) == (fw2, None)
    assert fw2.finwait2_classify(seg("PA", payload=b"x")) is FinWait2Class.UNACCEPTABLE
    assert fw2.finwait2_classify(seg(seq=IRS + 100_000)) is FinWait2Class.UNACCEPTABLE
    assert fw2.finwait2_classify(seg("FA", seq=IRS + 5)) is FinWait2Class.UNACCEPTABLE
    closed, last = fw2.finwait2_recv(seg("FA"))
    assert closed.state is State.CLOSED and last.ack == IRS + 2


# -- the segment filter -----------------------------------------------------

def test_accepts_filter():
    listen = Tcb().open(SERVER)
    assert listen.accepts(CLIENT, seg("S"))
    assert not listen.accepts(CLIENT, seg("S", dport=8))
    assert not listen.accepts(CLIENT, seg("SA"))
    tcb = established()
    assert tcb.accepts(CLIENT, seg())
    assert not tcb.accepts(Address("10.0.0.9", 4000), seg())
    assert not tcb.accepts(CLIENT, seg("P"))
    assert not tcb.accepts(CLIENT, seg("R", seq=IRS + 100_000))
    assert tcb.accepts(CLIENT, seg("R"))


# -- state graph ------------------------------------------------------------

def test_state_paths():
    S = State
    assert is_valid_path([S.CLOSED, S.LISTEN, S.SYN_RCVD, S.ESTABLISHED, S.FIN_WAIT_1,
                          S.FIN_WAIT_2, S.CLOSED])
    assert is_valid_path([S.CLOSED, S.LISTEN, S.SYN_RCVD, S.ESTABLISHED, S.CLOSE_WAIT,
                          S.LAST_ACK, S.CLOSED])
    assert not is_valid_path([S.LISTEN])
    assert not is_valid_path([S.CLOSED, S.ESTABLISHED])
    assert set(TRANSITIONS) == set(State)


# -- properties over random exchanges ---------------------------------------

client_actions = st.lists(st.one_of(
    st.tuples(st.just("data"), st.binary(min_size=1, max_size=20)),
    st.tuples(st.just("gap"), st.binary(min_size=1, max_size=20)),
    st.tuples(st.just("old"), st.integers(1, 40)),
    st.tuples(st.just("junk"), st.integers(0, 2**32 - 1)),
    st.tuples(st.just("ack"), st.integers(0, 60)),
    st.tuples(st.just("send"), st.binary(min_size=1, max_size=30)),
), max_size=40)


@given(st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1), client_actions, st.booleans())
def test_sequence_conservation(iss, irs, actions, client_fin):
    tcb = established(iss, irs)
    c_nxt = seq_add(irs, 1)
    received = sent = 0
    states = [State.CLOSED, State.LISTEN, State.SYN_RCVD, State.ESTABLISHED]
    for kind, arg in actions:
        before = tcb
        if kind == "send":
            tcb, _ = tcb.send_data(arg)
            sent += len(arg)
            continue
        if kind == "data":
            s = seg("PA", seq=c_nxt, ack=tcb.snd_una, payload=arg)
        elif kind == "gap":
            s = seg("PA", seq=c_nxt + 1 + len(arg), ack=tcb.snd_una, payload=arg)
        elif kind == "old":
            s = seg("PA", seq=c_nxt - arg, ack=tcb.snd_una, payload=b"x" * min(arg, 5))
        elif kind == "junk":
            s = seg("PA", seq=arg, ack=arg, payload=b"junk")
        else:
            s = seg("A", seq=c_nxt, ack=tcb.snd_una + min(arg, seq_sub(tcb.snd_nxt, tcb.snd_una)))
        cls = tcb.estab_classify(s)
        if cls is EstabClass.ACCEPTABLE_WITH_PAYLOAD:
            tcb, _, data = tcb.recv_data(s)
            received += len(data)
            c_nxt = seq_add(c_nxt, len(data)) if kind == "data" else c_nxt
        elif cls is EstabClass.ACCEPTABLE_EMPTY:
            tcb = tcb.ack_update(s)
        else:
            assert tcb == before
        # snd_una never goes back and stays at or before snd_nxt
        assert seq_lte(before.snd_una, tcb.snd_una)
        assert seq_lte(tcb.snd_una, tcb.snd_nxt)
        assert tcb.rtx.span == seq_sub(tcb.snd_nxt, tcb.snd_una)
        assert (not tcb.rtx) == (tcb.snd_una == tcb.snd_nxt)
        assert tcb.rcv_wnd <= 0xFFFF
    fins = 0
    if client_fin:
        tcb, _, _ = tcb.recv_fin(seg("FA", seq=tcb.rcv_nxt, ack=tcb.snd_una))
        fins = 1
        states.append(tcb.state)
    assert tcb.rcv_nxt == seq_add(irs, 1 + received + fins)
    assert tcb.snd_nxt == seq_add(iss, 1 + sent)
    tcb, _ = tcb.start_close()
    states.append(tcb.state)
    assert tcb.snd_nxt == seq_add(iss, 1 + sent + 1)
    assert is_valid_path(states)


@given(st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1),
       st.sampled_from(["A", "PA", "R", "S", "FA", "SA"]))
def test_not_acceptable_never_advances(iss, seqno, ackno, flags):
    tcb = synrcvd()
    r = tcb.synrcvd_recv_ack(seg(flags, seq=seqno, ack=ackno, payload=b"x" if "P" in flags else b""))
    if isinstance(r, NotAcceptable):
        assert (r.tcb.rcv_nxt, r.tcb.snd_una) == (tcb.rcv_nxt, tcb.snd_una)
        assert r.response.flags == Flags.ACK


@given(st.lists(st.binary(min_size=1, max_size=50), max_size=20), st.integers(0, 2**32 - 1),
       st.data())
def test_rtx_ack_removes_exactly_the_acked_prefix(payloads, start, data):
    q, seqno = RetransmissionQueue(), start
    for p in payloads:
        q = q.push(Segment(1, 2, seqno, 0, Flags.ACK, payload=p))
        seqno = seq_add(seqno, len(p))
    total = sum(map(len, payloads))
    k = data.draw(st.integers(0, total))
    q2 = q.ack(seq_add(start, k))
    ends = list(itertools.accumulate(map(len, payloads)))
    assert len(q2) == sum(1 for e in ends if e > k)
    assert q2.span == total - k
    seqs = [e.seq for e in q2.entries]
    assert seqs == sorted(seqs, key=lambda s: seq_sub(s, start))
