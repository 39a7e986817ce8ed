"""Channel endpoints that move messages only when a session token allows it.

Every operation takes the token for the current action, checks it against
the endpoint's peer, consumes it, performs the transfer and hands back the
continuation token. Offers resolve their branch with a *picker*: a function
from the raw inbound representation to a case index (0 is the left case).
For an expanded n-way offer the index counts the flattened cases in
declaration order.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, NamedTuple, Protocol

from .messages import SegmentMessage, Timeout
from .net import Datagram, LinkEndpoint
from .session import (Message, OfferOne, OfferTwo, ProtocolViolation, Rec,
                      Role, SelectOne, SelectTwo, SessionError, Shape, Subchoice,
                      Token, branches, describe)
from .tcp import Address
from .wire import DecodeError, PseudoHeader, Segment, decode, encode

log = logging.getLogger(__name__)

LEFT, RIGHT = 0, 1

Picker = Callable[[Any], int]


class ChannelError(SessionError):
    """The transport under an endpoint failed or was closed by the peer."""


class Branch(NamedTuple):
    index: int
    message: Message
    token: Token

    @property
    def is_left(self) -> bool:
        return self.index == LEFT


# -- trace ------------------------------------------------------------------

@dataclass(frozen=True)
class TraceEvent:
    time: float
    role: str
    kind: str  # send, recv, state, drop, note
    peer: str = ""
    label: str = ""
    detail: str = ""

    def line(self) -> str:
        head = f"{self.time:10.3f} {self.role}"
        if self.kind in ("send", "recv"):
            arrow = "->" if self.kind == "send" else "<-"
            text = f"{head} {arrow} {self.peer} {self.label}"
        else:
            text = f"{head} {self.kind} {self.label}"
        return f"{text} {self.detail}".rstrip()


class Clock(Protocol):
    def now(self) -> float: ...
    def wait_for(self, pred: Callable[[], bool], deadline: float | None = None) -> bool: ...
    def notify(self) -> None: ...


@dataclass
class Trace:
    """Ordered record of everything the endpoints did; also the run log."""

    clock: Clock
    events: list[TraceEvent] = field(default_factory=list)

    def add(self, role: Role | str, kind: str, peer: Role | str = "", label: str = "",
            detail: str = "") -> TraceEvent:
        ev = TraceEvent(round(self.clock.now(), 3), str(role), kind, str(peer), label, detail)
        self.events.append(ev)
        log.debug("%s", ev.line())
        return ev

    def session_word(self, role: Role | str) -> list[tuple[Role, str, str]]:
        """(peer, direction, label) actions of ``role``, for the interpreter."""
        return [(Role(e.peer), e.kind, e.label) for e in self.events
                if e.role == str(role) and e.kind in ("send", "recv")]

    def states(self, role: Role | str) -> list[str]:
        return [e.label for e in self.events if e.role == str(role) and e.kind == "state"]

    def text(self) -> str:
        return "".join(e.line() + "\n" for e in self.events)


# -- in-process transport ---------------------------------------------------

@dataclass
class _Pipe:
    capacity: int
    items: deque = field(default_factory=deque)
    writer_closed: bool = False
    reader_closed: bool = False


class QueueTransport:
    """One side of a bounded, blocking queue pair."""

    def __init__(self, clock: Clock, inbox: _Pipe, outbox: _Pipe):
        self.clock = clock
        self._in = inbox
        self._out = outbox

    def send(self, rep: Any) -> None:
        out = self._out
        self.clock.wait_for(lambda: len(out.items) < out.capacity or out.reader_closed)
        if out.reader_closed:
            raise ChannelError("peer endpoint is closed")
        out.items.append(rep)
        self.clock.notify()

    def recv(self, deadline: float | None = None) -> Any | None:
        inbox = self._in
        if not self.clock.wait_for(lambda: bool(inbox.items) or inbox.writer_closed, deadline):
            return None
        if inbox.items:
            rep = inbox.items.popleft()
            self.clock.notify()
            return rep
        raise ChannelError("peer closed the channel")

    def close(self) -> None:
        self._out.writer_closed = True
        self._in.reader_closed = True
        self.clock.notify()


def queue_pair(clock: Clock, capacity: int = 16) -> tuple[QueueTransport, QueueTransport]:
    ab, ba = _Pipe(capacity), _Pipe(capacity)
    return QueueTransport(clock, ba, ab), QueueTransport(clock, ab, ba)


# -- endpoints --------------------------------------------------------------

def _default_pick(leaves: list[tuple[type[Message], Shape]], rep: Any) -> int:
    for i, (cls, _) in enumerate(leaves):
        if cls.virtual:
            continue
        if isinstance(rep, Segment):
            if issubclass(cls, SegmentMessage) and cls.matches(rep):
                return i
        elif isinstance(rep, tuple) and rep and rep[0] == cls.label:
            return i
    raise ProtocolViolation(f"no branch accepts {rep!r}")


class Channel:
    """Endpoint of ``self_role`` talking to ``peer_role`` over ``transport``.

    ``transport`` needs ``send(rep)``, ``recv(deadline) -> rep | None`` and
    ``close()``.
    """

    def __init__(self, self_role: Role, peer_role: Role, transport: Any,
                 trace: Trace | None = None):
        self.self_role = self_role
        self.peer_role = peer_role
        self.transport = transport
        self.trace = trace
        self.closed = False

    def __repr__(self) -> str:
        return f"<{type(self).__name__} {self.self_role}->{self.peer_role}>"

    # -- plumbing ---------------------------------------------------------
    def _take(self, token: Token, *kinds: type) -> Shape:
        if self.closed:
            raise ChannelError(f"{self!r} is closed")
        shape = token.shape
        if isinstance(shape, kinds) and shape.peer != self.peer_role:
            raise SessionError(f"{describe(shape)} is not an action with {self.peer_role}")
        return token.consume(*kinds)

    def _record(self, kind: str, msg: Message) -> None:
        if self.trace is not None:
            self.trace.add(self.self_role, kind, self.peer_role, msg.label, self._detail(msg))

    def _detail(self, msg: Message) -> str:
        data = getattr(msg, "data", None)
        return f"data={data!r}" if data is not None else ""

    def _transmit(self, msg: Message, **kw: Any) -> None:
        self.transport.send(msg.encode())

    def _recv(self, deadline: float | None, ctx: Any) -> Any | None:
        return self.transport.recv(deadline)

    def _deliver(self, msg: Message, **kw: Any) -> None:
        self._transmit(msg, **kw)
        self._record("send", msg)

    @staticmethod
    def _check_message(msg: Message, cls: type[Message]) -> None:
        if not isinstance(msg, cls):
            raise SessionError(f"expected a {cls.label} message, got {type(msg).__name__}")
        if cls.virtual:
            raise SessionError(f"{cls.label} is virtual and cannot be selected")
        if isinstance(msg, SegmentMessage):
            msg.check_outbound()

    # -- selects ----------------------------------------------------------
    def select_one(self, token: Token, message: Message, **kw: Any) -> Token:
        if isinstance(token.shape, SelectOne):
            self._check_message(message, token.shape.msg)
        shape = self._take(token, SelectOne)
        self._deliver(message, **kw)
        return Token(shape.cont)

    def select(self, token: Token, index: int, message: Message, **kw: Any) -> Token:
        """Choose case ``index`` of a (possibly expanded) selection."""
        if isinstance(token.shape, (SelectOne, SelectTwo)):
            leaves = branches(token.shape)
            if not 0 <= index < len(leaves):
                raise SessionError(f"case {index} out of range for {describe(token.shape)}")
            self._check_message(message, leaves[index][0])
        shape = self._take(token, SelectOne, SelectTwo)
        self._deliver(message, **kw)
        return Token(branches(shape)[index][1])

    def select_left(self, token: Token, message: Message, **kw: Any) -> Token:
        return self.select(token, LEFT, message, **kw)

    def select_right(self, token: Token, message: Message, **kw: Any) -> Token:
        if isinstance(token.shape, SelectTwo) and token.shape.msg2 is Subchoice:
            raise SessionError("right side of an expanded selection is virtual; use select()")
        return self.select(token, RIGHT, message, **kw)

    # -- offers -----------------------------------------------------------
    def offer_one(self, token: Token) -> tuple[Message, Token]:
        self._take(token, OfferOne)
        return self._offer_one(token.shape, None)

    def _offer_one(self, shape: OfferOne, ctx: Any) -> tuple[Message, Token]:
        rep = self._recv(None, ctx)
        msg = shape.msg.decode(rep)
        self._record("recv", msg)
        return msg, Token(shape.cont)

    def offer_two(self, token: Token, picker: Picker | None = None) -> Branch:
        self._take(token, OfferTwo)
        return self._offer(token.shape, picker, None, None)

    def _offer(self, shape: OfferTwo, picker: Picker | None, ctx: Any,
               deadline: float | None) -> Branch:
        leaves = branches(shape)
        rep = self._recv(deadline, ctx)
        if rep is None:
            idx = next(i for i, (cls, _) in enumerate(leaves) if cls is Timeout)
            msg: Message = Timeout()
        else:
            idx = picker(rep) if picker is not None else _default_pick(leaves, rep)
            if not (isinstance(idx, int) and 0 <= idx < len(leaves)):
                raise ProtocolViolation(f"picker returned {idx!r} for {describe(shape)}")
            cls = leaves[idx][0]
            if cls.virtual:
                raise ProtocolViolation(f"picker chose the virtual {cls.label} case")
            msg = cls.decode(rep)
        self._record("recv", msg)
        return Branch(idx, msg, Token(leaves[idx][1]))

    # -- end --------------------------------------------------------------
    def close(self, token: Token) -> None:
        token.release(self)
        if not self.closed:
            self.closed = True
            self.transport.close()
            if self.trace is not None:
                self.trace.add(self.self_role, "note", label="close", detail=str(self.peer_role))

    def abort(self) -> None:
        """Release the transport without a token, after a session failure."""
        if not self.closed:
            self.closed = True
            self.transport.close()


class SegmentFilter(Protocol):
    def accepts(self, src: Address, seg: Segment) -> bool: ...


@dataclass
class NetStats:
    received: int = 0
    sent: int = 0
    checksum_errors: int = 0
    filtered: int = 0
    foreign: int = 0


class _LinkTransport:
    def __init__(self, link: LinkEndpoint):
        self.link = link

    def close(self) -> None:
        pass


class NetChannel(Channel):
    """Endpoint facing the client system over a datagram link.

    Outbound messages are encoded with the pseudo-header checksum for the
    current remote address. Inbound datagrams that fail to decode are
    dropped and counted; with a filter context, so are segments the context
    does not accept, before any picker sees them.
    """

    def __init__(self, self_role: Role, peer_role: Role, link: LinkEndpoint,
                 local: Address, trace: Trace | None = None):
        super().__init__(self_role, peer_role, _LinkTransport(link), trace)
        self.link = link
        self.local = local
        self.remote: Address | None = None
        self.stats = NetStats()

    @property
    def clock(self) -> Clock:
        return self.link.clock

    def _detail(self, msg: Message) -> str:
        seg = getattr(msg, "segment", None)
        if isinstance(msg, SegmentMessage) and seg is None:
            return "suppressed"
        return seg.summary() if seg is not None else ""

    def _transmit(self, msg: Message, to: Address | None = None, **kw: Any) -> None:
        seg = msg.encode()
        if seg is None:
            return  # a reset received from the peer: nothing goes back
        to = to or self.remote
        if to is None:
            raise ChannelError("no remote address to send to")
        data = encode(seg, PseudoHeader(self.local.ip, to.ip))
        self.link.send(Datagram(self.local.ip, to.ip, data))
        self.stats.sent += 1

    def _drop(self, reason: str, detail: str) -> None:
        if self.trace is not None:
            self.trace.add(self.self_role, "drop", label=reason, detail=detail)

    def _recv_addr(self, deadline: float | None, ctx: SegmentFilter | None
                   ) -> tuple[Address, Segment] | None:
        while True:
            dgram = self.link.recv(deadline)
            if dgram is None:
                return None
            if dgram.dst != self.local.ip:
                self.stats.foreign += 1
                continue
            try:
                seg = decode(dgram.payload, PseudoHeader(dgram.src, dgram.dst))
            except DecodeError as exc:
                self.stats.checksum_errors += 1
                log.info("dropping undecodable datagram from %s: %s", dgram.src, exc)
                self._drop("undecodable", str(exc))
                continue
            src = Address(dgram.src, seg.src_port)
            if ctx is not None and not ctx.accepts(src, seg):
                self.stats.filtered += 1
                self._drop("filtered", seg.summary())
                continue
            self.stats.received += 1
            return src, seg

    def _recv(self, deadline: float | None, ctx: Any) -> Segment | None:
        got = self._recv_addr(deadline, ctx)
        return None if got is None else got[1]

    def offer_one_with_addr(self, token: Token, ctx: SegmentFilter
                            ) -> tuple[Address, Message, Token]:
        """Wait for the first segment ``ctx`` accepts; remember its sender."""
        self._take(token, OfferOne)
        shape: OfferOne = token.shape
        src, seg = self._recv_addr(None, ctx)
        msg = shape.msg.decode(seg)
        self.remote = src
        self._record("recv", msg)
        return src, msg, Token(shape.cont)

    def offer_one_filtered(self, token: Token, ctx: SegmentFilter) -> tuple[Message, Token]:
        self._take(token, OfferOne)
        return self._offer_one(token.shape, ctx)

    def offer_two_filtered(self, token: Token, picker: Picker | None,
                           ctx: SegmentFilter) -> Branch:
        self._take(token, OfferTwo)
        return self._offer(token.shape, picker, ctx, None)

    def offer_timed(self, token: Token, picker: Picker | None, ctx: SegmentFilter | None,
                    budget: float | None) -> Branch:
        """Like :meth:`offer_two_filtered`, but if nothing acceptable arrives
        within ``budget`` ms the Timeout case is taken. With ``budget`` None
        the offer blocks and the Timeout case is unreachable."""
        shape = token.shape
        if isinstance(shape, OfferTwo) and not any(c is Timeout for c, _ in branches(shape)):
            raise SessionError(f"{describe(shape)} has no Timeout case")
        self._take(token, OfferTwo)
        deadline = None if budget is None else self.clock.now() + budget
        return self._offer(shape, picker, ctx, deadline)


def enter(token: Token) -> Token:
    """Unfold recursion points until the token names an action or end."""
    while isinstance(token.shape, Rec):
        token = Token(token.consume(Rec).body)
    return token

