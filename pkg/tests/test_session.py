import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from sttcp import messages as m
from sttcp.dsl import DslError, compose, compose_module, render
from sttcp.session import (CLIENT_SYSTEM, END, SERVER_SYSTEM, SERVER_USER, LinearityError,
                           MalformedShape, OfferOne, OfferTwo, Rec, SelectOne, SelectTwo,
                           SessionError, Subchoice, Token, accepts, branches,
                           check_well_formed, choice_depth, expand_nary_offer,
                           expand_nary_select, new_session, rec_enter, shape_equal, unroll)

MSGS = [m.Open, m.TcbCreated, m.Connected, m.Close, m.Data, m.Ping, m.Pong, m.Ack, m.Syn,
        m.SynAck, m.FinAck, m.Rst, m.Timeout]
ROLES = [SERVER_USER, SERVER_SYSTEM, CLIENT_SYSTEM]


def leaf_walk(shape):
    """Cases of an expanded choice, found by walking the raw binary tree."""
    out = []
    while True:
        if isinstance(shape, (OfferOne, SelectOne)):
            return out + [(shape.msg, shape.cont)]
        out.append((shape.msg1, shape.cont1))
        if shape.msg2 is not Subchoice:
            return out + [(shape.msg2, shape.cont2)]
        shape = shape.cont2


@pytest.mark.parametrize("n", range(1, 9))
@pytest.mark.parametrize("expand,two", [(expand_nary_offer, OfferTwo),
                                        (expand_nary_select, SelectTwo)])
def test_expand_nary_leaves_and_depth(n, expand, two):
    rng = random.Random(n)
    cases = [(rng.choice(MSGS), Rec(f"K{i}", END)) for i in range(n)]
    shape = expand(CLIENT_SYSTEM, cases)
    leaves = leaf_walk(shape)
    assert len(leaves) == n
    assert [c for _, c in leaves] == [c for _, c in cases]  # identity, in order
    assert all(a is b for (a, _), (b, _) in zip(leaves, cases))
    assert branches(shape) == leaves
    assert choice_depth(shape) == max(n - 1, 0)
    if n >= 2:
        # left-leaning: every left child is a real case
        node = shape
        while isinstance(node, two):
            assert node.msg1 is not Subchoice
            node = node.cont2 if node.msg2 is Subchoice else None


def test_expand_needs_a_case():
    with pytest.raises(MalformedShape):
        expand_nary_offer(SERVER_USER, [])


def test_token_is_one_shot():
    tok = new_session(OfferOne(SERVER_USER, m.Open, END))
    assert tok.consume(OfferOne).msg is m.Open
    assert tok.spent
    with pytest.raises(LinearityError):
        tok.consume(OfferOne)
    with pytest.raises(LinearityError):
        tok.consume()


def test_token_kind_mismatch_leaves_it_live():
    tok = Token(OfferOne(SERVER_USER, m.Open, END))
    with pytest.raises(SessionError):
        tok.consume(SelectOne)
    assert not tok.spent


def test_end_token_closes_each_endpoint_once():
    tok = Token(END)
    a, b = object(), object()
    tok.release(a)
    tok.release(b)
    with pytest.raises(LinearityError):
        tok.release(a)
    with pytest.raises(SessionError):
        Token(OfferOne(SERVER_USER, m.Open, END)).release(a)


def test_rec_enter_unrolls_once():
    loop = Rec("Loop")
    loop.define(OfferTwo(CLIENT_SYSTEM, m.Ack, m.FinAck, loop, END))
    tok = new_session(loop)
    inner = rec_enter(tok)
    assert inner.shape is loop.body
    assert shape_equal(inner.shape, OfferTwo(CLIENT_SYSTEM, m.Ack, m.FinAck, loop, END))
    with pytest.raises(LinearityError):
        rec_enter(tok)


def test_well_formedness():
    with pytest.raises(MalformedShape):
        check_well_formed(Rec("Empty"))
    a, b = Rec("A"), Rec("B")
    a.define(b)
    b.define(a)
    with pytest.raises(MalformedShape):
        new_session(a)
    with pytest.raises(MalformedShape):
        check_well_formed(OfferOne(SERVER_USER, int, END))
    with pytest.raises(MalformedShape):
        Rec("X", END).define(END)


def test_interpreter_language():
    loop = compose("rec L.(ClientSystem & {Ack.L, FinAck.(ClientSystem + Ack).end})", m.env())
    word = [(CLIENT_SYSTEM, "recv", "Ack")] * 3 + [(CLIENT_SYSTEM, "recv", "FinAck"),
                                                  (CLIENT_SYSTEM, "send", "Ack")]
    assert accepts(loop, word)
    assert not accepts(loop, word[:-1])
    assert accepts(loop, word[:-1], complete=False)
    assert not accepts(loop, [(CLIENT_SYSTEM, "send", "Ack")], complete=False)
    assert not accepts(loop, [(SERVER_USER, "recv", "Ack")], complete=False)


def test_interpreter_tracks_same_label_branches():
    shape = compose("(ClientSystem & {Ack.(ClientSystem + Ack).end, Ack.(ServerUser + Close).end})",
                    m.env())
    assert accepts(shape, [(CLIENT_SYSTEM, "recv", "Ack"), (SERVER_USER, "send", "Close")])
    assert accepts(shape, [(CLIENT_SYSTEM, "recv", "Ack"), (CLIENT_SYSTEM, "send", "Ack")])


# -- notation ---------------------------------------------------------------

def random_shape(rng: random.Random, depth: int, recs: list[Rec], counter: list[int]):
    roll = rng.random()
    if depth == 0 or roll < 0.1:
        if recs and rng.random() < 0.6:
            return rng.choice(recs)
        return END
    if roll < 0.25:
        counter[0] += 1
        rec = Rec(f"R{counter[0]}")
        # guard the recursion with at least one action
        body = SelectOne(rng.choice(ROLES), rng.choice(MSGS),
                         random_shape(rng, depth - 1, recs + [rec], counter))
        return rec.define(body)
    peer = rng.choice(ROLES)
    n = rng.choice([1, 1, 2, 2, 3, 5])
    cases = [(rng.choice(MSGS), random_shape(rng, depth - 1, recs, counter)) for _ in range(n)]
    expand = expand_nary_offer if rng.random() < 0.5 else expand_nary_select
    return expand(peer, cases)


@given(st.integers(0, 2**32))
def test_render_compose_roundtrip(seed):
    shape = random_shape(random.Random(seed), 5, [], [0])
    text = render(shape)
    again = compose(text, m.env())
    assert shape_equal(shape, again)
    assert render(again) == text


def test_macro_forms():
    env = m.env()
    shapes = compose_module("""
        pub type Top = St![(RoleServerUser & Open).Loop];
        Rec!(pub Loop, [ (RoleClientSystem & { Ack. Loop, FinAck. end }) ]);
    """, env)
    top = shapes["Top"]
    assert isinstance(top, OfferOne) and top.msg is m.Open
    assert isinstance(top.cont, Rec) and top.cont.name == "Loop"
    assert isinstance(unroll(top.cont), OfferTwo)


@pytest.mark.parametrize("text", [
    "(ServerUser & Nope).end",
    "(Nobody & Open).end",
    "(ServerUser & Open)",
    "(ServerUser ? Open).end",
    "Undefined",
    "rec X.X",
])
def test_compose_errors(text):
    with pytest.raises((DslError, MalformedShape)):
        compose(text, m.env())


def test_dsl_error_reports_line():
    with pytest.raises(DslError) as err:
        compose("(ServerUser & Open).\n(ServerUser & Bogus).end", m.env())
    assert err.value.line == 2
