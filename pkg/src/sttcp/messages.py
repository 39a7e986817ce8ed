"""Message classes exchanged between the roles.

User-side messages travel over in-process queues as ``(label, payload)``
pairs. Network messages wrap a :class:`~sttcp.wire.Segment`; the network
channel turns that into bytes. ``Timeout`` is virtual: it is synthesized by
the channel when a receive budget expires and never crosses a transport.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, ClassVar

from .session import (CLIENT_SYSTEM, SERVER_SYSTEM, SERVER_USER, Message,
                      ProtocolViolation)
from .wire import Flags, Segment


class UserMessage(Message):
    """Message with an optional bytes payload, carried as (label, payload)."""

    def encode(self) -> tuple[str, Any]:
        return (self.label, getattr(self, "data", None))

    @classmethod
    def decode(cls, rep: Any) -> "UserMessage":
        try:
            label, payload = rep
        except (TypeError, ValueError):
            raise ProtocolViolation(f"{rep!r} is not a (label, payload) pair") from None
        if label != cls.label:
            raise ProtocolViolation(f"expected {cls.label}, received {label}")
        return cls(payload) if payload is not None else cls()

    def __eq__(self, other: object) -> bool:
        return type(other) is type(self) and other.encode() == self.encode()

    def __hash__(self) -> int:
        return hash(self.encode())

    def __repr__(self) -> str:
        payload = getattr(self, "data", None)
        return f"{self.label}({payload!r})" if payload is not None else f"{self.label}()"


class Open(UserMessage):
    pass


class TcbCreated(UserMessage):
    pass


class Connected(UserMessage):
    pass


class Close(UserMessage):
    pass


class Data(UserMessage):
    def __init__(self, data: bytes = b""):
        self.data = bytes(data)


class Ping(UserMessage):
    pass


class Pong(UserMessage):
    pass


@dataclass(eq=True)
class SegmentMessage(Message):
    """A network message. ``segment`` is None only for a suppressed Rst."""

    segment: Segment | None = None

    # flags an inbound segment must carry to be read as this class
    required: ClassVar[Flags] = Flags.NONE

    def encode(self) -> Segment:
        return self.segment

    @classmethod
    def decode(cls, rep: Any) -> "SegmentMessage":
        if not isinstance(rep, Segment):
            raise ProtocolViolation(f"{rep!r} is not a TCP segment")
        if not cls.matches(rep):
            raise ProtocolViolation(
                f"segment {rep.summary()} cannot be read as {cls.label}")
        return cls(rep)

    @classmethod
    def matches(cls, seg: Segment) -> bool:
        return (seg.flags & cls.required) == cls.required

    def check_outbound(self) -> None:
        if self.segment is None:
            raise ProtocolViolation(f"{self.label} has no segment to send")


class Syn(SegmentMessage):
    required = Flags.SYN

    @classmethod
    def matches(cls, seg: Segment) -> bool:
        return seg.has(Flags.SYN) and not seg.has(Flags.ACK)


class SynAck(SegmentMessage):
    required = Flags.SYN | Flags.ACK


class Ack(SegmentMessage):
    # Inbound, Ack is whatever the picker routed to an Ack branch: the
    # shapes use it for acceptable and unacceptable segments alike.
    @classmethod
    def matches(cls, seg: Segment) -> bool:
        return True

    def check_outbound(self) -> None:
        super().check_outbound()
        seg = self.segment
        if not seg.has(Flags.ACK) or seg.flags & (Flags.SYN | Flags.FIN | Flags.RST):
            raise ProtocolViolation(f"outbound Ack must be a plain ACK, got {seg.flags.letters()}")


class FinAck(SegmentMessage):
    required = Flags.FIN | Flags.ACK


class Rst(SegmentMessage):
    required = Flags.RST

    def check_outbound(self) -> None:
        # no segment: the reset came from the peer, nothing goes back
        if self.segment is not None and not self.segment.has(Flags.RST):
            raise ProtocolViolation("outbound Rst must carry RST")


class Timeout(Message):
    virtual = True

    def encode(self) -> Any:
        raise ProtocolViolation("Timeout is virtual and never transmitted")

    @classmethod
    def decode(cls, rep: Any) -> "Timeout":
        raise ProtocolViolation("Timeout is virtual and never received")

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Timeout)

    def __hash__(self) -> int:
        return hash("Timeout")

    def __repr__(self) -> str:
        return "Timeout()"


SEGMENT_CLASSES = (Syn, SynAck, Ack, FinAck, Rst)
USER_CLASSES = (Open, TcbCreated, Connected, Data, Close)


def env() -> dict[str, Any]:
    """Names known to the session-type notation by default."""
    names: dict[str, Any] = {r.name: r for r in (SERVER_USER, SERVER_SYSTEM, CLIENT_SYSTEM)}
    for cls in (*USER_CLASSES, *SEGMENT_CLASSES, Ping, Pong, Timeout):
        names[cls.label] = cls
    return names
