"""Client-side helpers: a segment-level peer and a well-behaved echo client.

The client system has no session type of its own, so these work directly
on segments.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

from .net import Datagram, LinkEndpoint
from .tcp import Address, seq_add, seq_lt, seq_lte, seq_sub
from .wire import DecodeError, Flags, PseudoHeader, Segment, decode, encode

log = logging.getLogger(__name__)


class Peer:
    """Sends and receives whole segments between two fixed addresses."""

    def __init__(self, link: LinkEndpoint, local: Address, remote: Address):
        self.link = link
        self.local = local
        self.remote = remote
        self.clock = link.clock

    def encode(self, seg: Segment) -> bytes:
        return encode(seg, PseudoHeader(self.local.ip, self.remote.ip))

    def send(self, seg: Segment) -> None:
        self.send_bytes(self.encode(seg))

    def send_bytes(self, data: bytes, src_ip: str | None = None) -> None:
        self.link.send(Datagram(src_ip or self.local.ip, self.remote.ip, data))

    def recv(self, deadline: float | None = None) -> Segment | None:
        while True:
            dgram = self.link.recv(deadline)
            if dgram is None:
                return None
            if dgram.dst != self.local.ip:
                continue
            try:
                return decode(dgram.payload, PseudoHeader(dgram.src, dgram.dst))
            except DecodeError as exc:
                log.info("client dropped undecodable datagram: %s", exc)


@dataclass
class ClientReport:
    transcript: bytearray = field(default_factory=bytearray)
    retransmissions: int = 0
    established: bool = False
    closed: bool = False
    error: str = ""


class EchoClient:
    """Connects, sends one line per segment and collects the replies.

    Up to ``window`` segments are in flight; on a timeout every unacked
    segment is sent again. Out-of-order replies are held until the gap
    fills. When all replies are in, ``before_close`` runs, then an empty
    line asks the server to close and the client answers the server's FIN
    (as a separate ACK and FIN, or one FIN-ACK with ``combined_fin``).
    """

    def __init__(self, peer: Peer, lines: list[bytes], iss: int = 1000, rto_ms: float = 300.0,
                 window: int = 8, max_timeouts: int = 30, expected: bytes | None = None,
                 combined_fin: bool = False,
                 on_established: Callable[[], None] | None = None,
                 before_close: Callable[[], None] | None = None):
        self.peer = peer
        self.chunks = [line + b"\n" for line in lines]
        self.expected = expected if expected is not None else b"".join(
            line[::-1] + b"\n" for line in lines)
        self.iss = iss
        self.rto_ms = rto_ms
        self.window = window
        self.max_timeouts = max_timeouts
        self._timeouts = 0
        self.combined_fin = combined_fin
        self.on_established = on_established
        self.before_close = before_close
        self.report = ClientReport()
        self.snd_una = self.snd_nxt = iss
        self.rcv_nxt = 0
        self._ooo: dict[int, bytes] = {}

    def _seg(self, flags: Flags, payload: bytes = b"", seq: int | None = None) -> Segment:
        return Segment(self.peer.local.port, self.peer.remote.port,
                       self.snd_nxt if seq is None else seq, self.rcv_nxt, flags,
                       payload=payload)

    def _now(self) -> float:
        return self.peer.clock.now()

    def _timed_out(self) -> None:
        self._timeouts += 1
        if self._timeouts > self.max_timeouts:
            self.report.error = f"gave up after {self.max_timeouts} timeouts in a row"
            raise RuntimeError(self.report.error)

    def _recv(self, deadline: float | None) -> Segment | None:
        seg = self.peer.recv(deadline)
        if seg is None:
            self._timed_out()
        else:
            self._timeouts = 0
        return seg

    def run(self) -> ClientReport:
        self._handshake()
        self.report.established = True
        if self.on_established:
            self.on_established()
        self._exchange()
        if self.before_close:
            self.before_close()
        self._close()
        self.report.closed = True
        return self.report

    def _handshake(self) -> None:
        syn = Segment(self.peer.local.port, self.peer.remote.port, self.iss, 0, Flags.SYN)
        while True:
            self.peer.send(syn)
            deadline = self._now() + self.rto_ms
            while True:
                seg = self._recv(deadline)
                if seg is None:
                    self.report.retransmissions += 1
                    break
                if seg.has(Flags.SYN | Flags.ACK) and seg.ack == seq_add(self.iss, 1):
                    self.rcv_nxt = seq_add(seg.seq, 1)
                    self.snd_una = self.snd_nxt = seq_add(self.iss, 1)
                    self.peer.send(self._seg(Flags.ACK))
                    return

    def _on_ack(self, seg: Segment, outstanding: deque) -> bool:
        if not seg.has(Flags.ACK):
            return False
        if seq_lt(self.snd_una, seg.ack) and seq_lte(seg.ack, self.snd_nxt):
            self.snd_una = seg.ack
            while outstanding and seq_lte(seq_add(outstanding[0][0], len(outstanding[0][1])), seg.ack):
                outstanding.popleft()
            return True
        return False

    def _on_data(self, seg: Segment) -> None:
        if not seg.payload:
            return
        if seq_lt(self.rcv_nxt, seg.seq):
            self._ooo.setdefault(seg.seq, seg.payload)
        else:
            skip = seq_sub(self.rcv_nxt, seg.seq)
            if skip < len(seg.payload):
                self._take(seg.payload[skip:])
            while self.rcv_nxt in self._ooo:
                self._take(self._ooo.pop(self.rcv_nxt))
        self.peer.send(self._seg(Flags.ACK))

    def _take(self, data: bytes) -> None:
        self.report.transcript += data
        self.rcv_nxt = seq_add(self.rcv_nxt, len(data))

    def _exchange(self) -> None:
        outstanding: deque[tuple[int, bytes]] = deque()
        pending = deque(self.chunks)
        timer: float | None = None
        while pending or outstanding or len(self.report.transcript) < len(self.expected):
            while pending and len(outstanding) < self.window:
                data = pending.popleft()
                self.peer.send(self._seg(Flags.ACK | Flags.PSH, data))
                outstanding.append((self.snd_nxt, data))
                self.snd_nxt = seq_add(self.snd_nxt, len(data))
                if timer is None:
                    timer = self._now() + self.rto_ms
            seg = self._recv(timer)
            if seg is None:
                for seq, data in outstanding:
                    self.peer.send(self._seg(Flags.ACK | Flags.PSH, data, seq=seq))
                    self.report.retransmissions += 1
                timer = self._now() + self.rto_ms if outstanding else None
                continue
            if seg.has(Flags.RST) or seg.has(Flags.FIN):
                self.report.error = f"unexpected {seg.summary()} during data exchange"
                raise RuntimeError(self.report.error)
            if self._on_ack(seg, outstanding):
                timer = self._now() + self.rto_ms if outstanding else None
            self._on_data(seg)

    def _close(self) -> None:
        outstanding: deque[tuple[int, bytes]] = deque([(self.snd_nxt, b"\n")])
        self.peer.send(self._seg(Flags.ACK | Flags.PSH, b"\n"))
        self.snd_nxt = seq_add(self.snd_nxt, 1)
        deadline = self._now() + self.rto_ms
        while True:
            seg = self._recv(deadline)
            if seg is None:
                for seq, data in outstanding:
                    self.peer.send(self._seg(Flags.ACK | Flags.PSH, data, seq=seq))
                    self.report.retransmissions += 1
                deadline = self._now() + self.rto_ms
                continue
            self._on_ack(seg, outstanding)
            if seg.has(Flags.FIN) and seg.seq == self.rcv_nxt:
                self.rcv_nxt = seq_add(seg.seq, len(seg.payload) + 1)
                break
            self._on_data(seg)
        if not self.combined_fin:
            self.peer.send(self._seg(Flags.ACK))
        fin = self._seg(Flags.FIN | Flags.ACK)
        self.snd_nxt = seq_add(self.snd_nxt, 1)
        while True:
            self.peer.send(fin)
            deadline = self._now() + self.rto_ms
            while True:
                seg = self._recv(deadline)
                if seg is None:
                    self.report.retransmissions += 1
                    break
                if seg.has(Flags.ACK) and seg.ack == self.snd_nxt and not seg.has(Flags.FIN):
                    return
