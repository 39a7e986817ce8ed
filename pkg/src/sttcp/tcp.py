"""TCP server state machine: sequence arithmetic, acceptability, reactions.

Everything here is pure. A :class:`Tcb` is immutable and every operation
returns a new one, so a copy can be handed to a picker while the driver
keeps the original.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import NamedTuple

from .wire import Flags, Segment

SEQ_BITS = 32
DEFAULT_RCV_WND = 0xFFFF  # 64 KiB, capped by the unscaled 16-bit header field
DEFAULT_MSS = 1460
DEFAULT_RTO_MS = 200


# -- sequence arithmetic ----------------------------------------------------

def seq_add(a: int, n: int, bits: int = SEQ_BITS) -> int:
    return (a + n) & ((1 << bits) - 1)


def seq_sub(a: int, b: int, bits: int = SEQ_BITS) -> int:
    """Forward distance from ``b`` to ``a``."""
    return (a - b) & ((1 << bits) - 1)


def seq_lt(a: int, b: int, bits: int = SEQ_BITS) -> bool:
    return 0 < seq_sub(b, a, bits) < (1 << (bits - 1))


def seq_lte(a: int, b: int, bits: int = SEQ_BITS) -> bool:
    return a == b or seq_lt(a, b, bits)


def seq_between(x: int, lo: int, hi: int, bits: int = SEQ_BITS) -> bool:
    """``lo <= x < hi`` walking forward from ``lo``; empty when lo == hi."""
    return seq_sub(x, lo, bits) < seq_sub(hi, lo, bits)


def acceptable(seq: int, length: int, rcv_nxt: int, rcv_wnd: int,
               bits: int = SEQ_BITS) -> bool:
    """The four-case segment acceptability test of RFC 9293, 3.10.7.4."""
    end = seq_add(rcv_nxt, rcv_wnd, bits)
    if length == 0:
        if rcv_wnd == 0:
            return seq == rcv_nxt
        return seq_between(seq, rcv_nxt, end, bits)
    if rcv_wnd == 0:
        return False
    last = seq_add(seq, length - 1, bits)
    return seq_between(seq, rcv_nxt, end, bits) or seq_between(last, rcv_nxt, end, bits)


# -- state ------------------------------------------------------------------

class State(enum.Enum):
    CLOSED = "Closed"
    LISTEN = "Listen"
    SYN_RCVD = "SynRcvd"
    ESTABLISHED = "Established"
    FIN_WAIT_1 = "FinWait1"
    FIN_WAIT_2 = "FinWait2"
    CLOSE_WAIT = "CloseWait"
    LAST_ACK = "LastAck"

    def __str__(self) -> str:
        return self.value


# Arcs of the RFC 9293 diagram that this server walks. Closed is also the
# terminal state after the closing handshake or a reset.
TRANSITIONS: dict[State, frozenset[State]] = {
    State.CLOSED: frozenset({State.LISTEN}),
    State.LISTEN: frozenset({State.SYN_RCVD}),
    State.SYN_RCVD: frozenset({State.ESTABLISHED, State.CLOSED}),
    State.ESTABLISHED: frozenset({State.FIN_WAIT_1, State.CLOSE_WAIT}),
    State.FIN_WAIT_1: frozenset({State.FIN_WAIT_2, State.CLOSED}),
    State.FIN_WAIT_2: frozenset({State.CLOSED}),
    State.CLOSE_WAIT: frozenset({State.LAST_ACK}),
    State.LAST_ACK: frozenset({State.CLOSED}),
}


def is_valid_path(states: list[State]) -> bool:
    """True when ``states`` starts at Closed and follows only TRANSITIONS."""
    if not states or states[0] is not State.CLOSED:
        return False
    return all(b in TRANSITIONS[a] for a, b in zip(states, states[1:]))


class Address(NamedTuple):
    ip: str
    port: int

    def __str__(self) -> str:
        return f"{self.ip}:{self.port}"


class TcpError(Exception):
    pass


class WrongState(TcpError):
    pass


class SendError(TcpError):
    """User data cannot be sent as one segment (empty, over MSS or window)."""


# -- retransmission queue ---------------------------------------------------

@dataclass(frozen=True)
class RtxEntry:
    segment: Segment
    seq: int
    end: int  # first sequence number after this segment


@dataclass(frozen=True)
class RetransmissionQueue:
    entries: tuple[RtxEntry, ...] = ()
    una: int = 0

    def __len__(self) -> int:
        return len(self.entries)

    def __bool__(self) -> bool:
        return bool(self.entries)

    def push(self, segment: Segment) -> "RetransmissionQueue":
        entry = RtxEntry(segment, segment.seq, seq_add(segment.seq, segment.seg_len))
        una = self.una if self.entries else segment.seq
        return RetransmissionQueue(self.entries + (entry,), una)

    def ack(self, ack_no: int) -> "RetransmissionQueue":
        # Partially acknowledged entries stay whole; only una moves into them.
        if not self.entries:
            return self
        kept = tuple(e for e in self.entries if not seq_lte(e.end, ack_no))
        if not kept:
            return RetransmissionQueue((), ack_no)
        una = ack_no if seq_lt(self.una, ack_no) else self.una
        return RetransmissionQueue(kept, una)

    @property
    def head(self) -> RtxEntry:
        return self.entries[0]

    @property
    def span(self) -> int:
        if not self.entries:
            return 0
        return seq_sub(self.entries[-1].end, self.una)


# -- reactions --------------------------------------------------------------

@dataclass(frozen=True)
class Acceptable:
    tcb: "Tcb"
    response: Segment | None = None


@dataclass(frozen=True)
class NotAcceptable:
    tcb: "Tcb"
    response: Segment | None = None


@dataclass(frozen=True)
class Reset:
    response: Segment | None = None


Reaction = Acceptable | NotAcceptable | Reset


class EstabClass(enum.Enum):
    ACCEPTABLE_WITH_PAYLOAD = "AcceptableWithPayload"
    ACCEPTABLE_EMPTY = "AcceptableEmpty"
    FIN_ACK = "FinAck"
    UNACCEPTABLE = "Unacceptable"


class FinWait1Class(enum.Enum):
    ACK_OF_FIN = "AckOfFin"
    FIN_ACK = "FinAck"
    STALE = "Stale"


class FinWait2Class(enum.Enum):
    FIN = "Fin"
    IGNORED = "Ignored"
    UNACCEPTABLE = "Unacceptable"


@dataclass(frozen=True)
class AckOfFin:
    tcb: "Tcb"


@dataclass(frozen=True)
class FinAckSimultaneous:
    tcb: "Tcb"
    response: Segment


@dataclass(frozen=True)
class Duplicate:
    tcb: "Tcb"


# -- the control block ------------------------------------------------------

@dataclass(frozen=True)
class Tcb:
    state: State = State.CLOSED
    local: Address | None = None
    remote: Address | None = None
    iss: int = 0
    irs: int = 0
    snd_una: int = 0
    snd_nxt: int = 0
    snd_wnd: int = 0
    rcv_nxt: int = 0
    rcv_wnd: int = DEFAULT_RCV_WND
    mss: int = DEFAULT_MSS
    rtx: RetransmissionQueue = field(default_factory=RetransmissionQueue)

    def _require(self, *states: State) -> None:
        if self.state not in states:
            wanted = ", ".join(str(s) for s in states)
            raise WrongState(f"operation needs state {wanted}, TCB is {self.state}")

    def _segment(self, flags: Flags, seq: int | None = None,
                 payload: bytes = b"") -> Segment:
        return Segment(src_port=self.local.port, dst_port=self.remote.port,
                       seq=self.snd_nxt if seq is None else seq,
                       ack=self.rcv_nxt, flags=flags, window=self.rcv_wnd,
                       payload=payload)

    def build_empty_ack(self) -> Segment:
        """Empty ACK restating rcv_nxt and the window (also the challenge ACK)."""
        return self._segment(Flags.ACK)

    def is_acceptable(self, seg: Segment) -> bool:
        return acceptable(seg.seq, seg.seg_len, self.rcv_nxt, self.rcv_wnd)

    # Filtering that the network channel applies before any picker runs.
    # Returning False means the segment is silently discarded.
    def accepts(self, src: Address, seg: Segment) -> bool:
        if self.state is State.LISTEN:
            return (seg.dst_port == self.local.port and seg.has(Flags.SYN)
                    and not seg.has(Flags.ACK) and not seg.has(Flags.RST))
        if src != self.remote or seg.dst_port != self.local.port:
            return False
        if seg.has(Flags.RST):
            # out-of-window resets are dropped in every synchronized state
            return self.is_acceptable(seg) and self.state in (State.SYN_RCVD, State.ESTABLISHED)
        if self.state is State.SYN_RCVD:
            return seg.has(Flags.ACK) or seg.has(Flags.SYN)
        if not seg.has(Flags.ACK):
            return False
        if self.state is State.FIN_WAIT_1:
            return self.finwait1_classify(seg) is not FinWait1Class.STALE
        if self.state in (State.CLOSE_WAIT, State.LAST_ACK):
            return self.is_acceptable(seg) and seg.ack == self.snd_nxt
        return self.state in (State.ESTABLISHED, State.FIN_WAIT_2)

    def open(self, local: Address) -> "Tcb":
        self._require(State.CLOSED)
        return replace(self, state=State.LISTEN, local=local)

    def recv_syn(self, src: Address, syn: Segment, iss: int) -> tuple["Tcb", Segment | None]:
        """Passive open. Returns the SYN-RCVD TCB and the SYN-ACK, or
        ``(self, None)`` when ``syn`` is not a bare SYN."""
        self._require(State.LISTEN)
        if not syn.has(Flags.SYN) or syn.has(Flags.ACK) or syn.has(Flags.RST):
            return self, None
        irs = syn.seq
        tcb = replace(self, state=State.SYN_RCVD, remote=src, iss=iss, irs=irs,
                      rcv_nxt=seq_add(irs, 1), snd_una=iss, snd_nxt=iss,
                      snd_wnd=syn.window)
        synack = tcb._segment(Flags.SYN | Flags.ACK)
        return replace(tcb, snd_nxt=seq_add(iss, 1), rtx=tcb.rtx.push(synack)), synack

    def _reset_for(self, seg: Segment) -> Segment:
        if seg.has(Flags.ACK):
            return Segment(self.local.port, self.remote.port, seq=seg.ack, ack=0,
                           flags=Flags.RST, window=0)
        return Segment(self.local.port, self.remote.port, seq=0,
                       ack=seq_add(seg.seq, seg.seg_len),
                       flags=Flags.RST | Flags.ACK, window=0)

    def synrcvd_recv_ack(self, seg: Segment) -> Reaction:
        self._require(State.SYN_RCVD)
        if not self.is_acceptable(seg):
            return NotAcceptable(self, self.build_empty_ack())
        if seg.has(Flags.RST):
            return Reset(None)
        if seg.has(Flags.SYN):
            # a fresh SYN inside the window: the peer restarted (half-open)
            return Reset(self._reset_for(seg))
        if not seg.has(Flags.ACK) or seg.ack != self.snd_nxt:
            return NotAcceptable(self, self.build_empty_ack())
        tcb = replace(self, state=State.ESTABLISHED, snd_una=seg.ack,
                      snd_wnd=seg.window, rtx=self.rtx.ack(seg.ack))
        return Acceptable(tcb, None)

    def estab_classify(self, seg: Segment) -> EstabClass:
        self._require(State.ESTABLISHED)
        if not self.is_acceptable(seg) or seg.has(Flags.SYN):
            return EstabClass.UNACCEPTABLE
        carries = bool(seg.payload) or seg.has(Flags.FIN)
        if carries and seq_lt(self.rcv_nxt, seg.seq):
            # in-window but out of order: not cached, peer must retransmit
            return EstabClass.UNACCEPTABLE
        if seg.has(Flags.ACK) and seq_lt(self.snd_nxt, seg.ack):
            return EstabClass.UNACCEPTABLE
        if seg.has(Flags.FIN):
            return EstabClass.FIN_ACK
        if seg.payload:
            return EstabClass.ACCEPTABLE_WITH_PAYLOAD
        return EstabClass.ACCEPTABLE_EMPTY

    def ack_update(self, seg: Segment) -> "Tcb":
        if not seg.has(Flags.ACK):
            return self
        if not (seq_lte(self.snd_una, seg.ack) and seq_lte(seg.ack, self.snd_nxt)):
            return self
        return replace(self, snd_una=seg.ack, snd_wnd=seg.window,
                       rtx=self.rtx.ack(seg.ack))

    def _new_bytes(self, seg: Segment) -> bytes:
        skip = seq_sub(self.rcv_nxt, seg.seq) if seq_lt(seg.seq, self.rcv_nxt) else 0
        return seg.payload[skip:]

    def recv_data(self, seg: Segment) -> tuple["Tcb", Segment, bytes]:
        """Accept in-order payload; returns the TCB, an empty ACK and the new bytes."""
        if self.estab_classify(seg) is not EstabClass.ACCEPTABLE_WITH_PAYLOAD:
            raise TcpError("recv_data needs an acceptable segment with payload")
        data = self._new_bytes(seg)
        tcb = replace(self.ack_update(seg), rcv_nxt=seq_add(self.rcv_nxt, len(data)))
        return tcb, tcb.build_empty_ack(), data

    def usable_window(self) -> int:
        return max(0, self.snd_wnd - seq_sub(self.snd_nxt, self.snd_una))

    def send_data(self, data: bytes) -> tuple["Tcb", Segment]:
        self._require(State.ESTABLISHED, State.CLOSE_WAIT)
        if not data:
            raise SendError("empty payload; use build_empty_ack")
        if len(data) > self.mss:
            raise SendError(f"{len(data)} bytes exceeds MSS {self.mss}")
        if len(data) > self.usable_window():
            raise SendError(f"{len(data)} bytes exceeds usable window {self.usable_window()}")
        seg = self._segment(Flags.ACK | Flags.PSH, payload=bytes(data))
        return replace(self, snd_nxt=seq_add(self.snd_nxt, len(data)),
                       rtx=self.rtx.push(seg)), seg

    def retransmit_head(self) -> Segment:
        if not self.rtx:
            raise TcpError("retransmit_head on an empty retransmission queue")
        return replace(self.rtx.head.segment, ack=self.rcv_nxt, window=self.rcv_wnd)

    def recv_fin(self, seg: Segment) -> tuple["Tcb", Segment, bytes]:
        """Peer FIN in Established; returns CloseWait TCB, its ACK and any new payload."""
        if self.estab_classify(seg) is not EstabClass.FIN_ACK:
            raise TcpError("recv_fin needs an acceptable in-order FIN")
        data = self._new_bytes(seg)
        tcb = replace(self.ack_update(seg), state=State.CLOSE_WAIT,
                      rcv_nxt=seq_add(seg.seq, len(seg.payload) + 1))
        return tcb, tcb.build_empty_ack(), data

    def start_close(self) -> tuple["Tcb", Segment]:
        self._require(State.ESTABLISHED, State.CLOSE_WAIT)
        fin = self._segment(Flags.FIN | Flags.ACK)
        nxt = State.FIN_WAIT_1 if self.state is State.ESTABLISHED else State.LAST_ACK
        return replace(self, state=nxt, snd_nxt=seq_add(self.snd_nxt, 1),
                       rtx=self.rtx.push(fin)), fin

    def finwait1_classify(self, seg: Segment) -> FinWait1Class:
        self._require(State.FIN_WAIT_1)
        if (not self.is_acceptable(seg) or not seg.has(Flags.ACK)
                or seg.ack != self.snd_nxt or seg.has(Flags.SYN) or seg.has(Flags.RST)):
            return FinWait1Class.STALE
        if seg.has(Flags.FIN):
            if seq_lt(self.rcv_nxt, seg.seq):
                return FinWait1Class.STALE
            return FinWait1Class.FIN_ACK
        return FinWait1Class.ACK_OF_FIN

    def finwait1_recv(self, seg: Segment) -> AckOfFin | FinAckSimultaneous | Duplicate:
        kind = self.finwait1_classify(seg)
        if kind is FinWait1Class.STALE:
            return Duplicate(self)
        tcb = self.ack_update(seg)
        if kind is FinWait1Class.ACK_OF_FIN:
            return AckOfFin(replace(tcb, state=State.FIN_WAIT_2))
        tcb = replace(tcb, rcv_nxt=seq_add(seg.seq, len(seg.payload) + 1))
        final = tcb.build_empty_ack()
        return FinAckSimultaneous(replace(tcb, state=State.CLOSED), final)

    def finwait2_classify(self, seg: Segment) -> FinWait2Class:
        self._require(State.FIN_WAIT_2)
        if not self.is_acceptable(seg) or seg.has(Flags.SYN):
            return FinWait2Class.UNACCEPTABLE
        if seg.has(Flags.FIN):
            if seq_lt(self.rcv_nxt, seg.seq):
                return FinWait2Class.UNACCEPTABLE
            return FinWait2Class.FIN
        if seg.payload:
            # nobody is left to read it
            return FinWait2Class.UNACCEPTABLE
        return FinWait2Class.IGNORED

    def finwait2_recv(self, seg: Segment) -> tuple["Tcb", Segment | None]:
        """Returns (Closed TCB, final ACK) for a FIN, (self, challenge ACK) for an
        unacceptable segment and (self, None) for an ignorable one."""
        kind = self.finwait2_classify(seg)
        if kind is FinWait2Class.IGNORED:
            return self.ack_update(seg), None
        if kind is FinWait2Class.UNACCEPTABLE:
            return self, self.build_empty_ack()
        tcb = replace(self.ack_update(seg), rcv_nxt=seq_add(seg.seq, len(seg.payload) + 1))
        return replace(tcb, state=State.CLOSED), tcb.build_empty_ack()

    def lastack_recv(self, seg: Segment) -> "Tcb":
        self._require(State.LAST_ACK)
        if seg.has(Flags.ACK) and seg.ack == self.snd_nxt:
            return replace(self.ack_update(seg), state=State.CLOSED)
        return self
