"""The Server System driver and the Server User applications.

The system driver walks :data:`~sttcp.shapes.SERVER_SYSTEM_TEXT` one token
at a time while feeding segments through the :class:`~sttcp.tcp.Tcb`. Every
segment it emits comes from a Tcb operation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

from . import shapes
from .channel import Channel, NetChannel, Trace
from .messages import (Ack, Close, Connected, Data, FinAck, Open, Rst, SynAck,
                       TcbCreated)
from .session import (ProtocolViolation, SessionError, Token, new_session,
                      rec_enter)
from .tcp import (DEFAULT_MSS, DEFAULT_RCV_WND, DEFAULT_RTO_MS, Acceptable,
                  AckOfFin, Address, EstabClass, FinAckSimultaneous,
                  FinWait1Class, FinWait2Class, NotAcceptable, Reset, State,
                  Tcb, TcpError)
from .wire import Flags, Segment

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ServerConfig:
    local: Address = Address("10.0.0.1", 7)
    iss: int = 0
    rcv_wnd: int = DEFAULT_RCV_WND
    mss: int = DEFAULT_MSS
    rto_ms: float = DEFAULT_RTO_MS


class PeerReset(ProtocolViolation):
    """An in-window RST arrived in a state whose type has no reset case."""


@dataclass
class RunReport:
    """Outcome of one server run.

    ``outcome`` is ``running`` until the driver returns, then ``end`` for a
    completed closing handshake, ``reset`` for the SYN-RCVD reset path or
    ``aborted`` with a ``diagnostic``.
    """

    trace: Trace
    outcome: str = "running"
    diagnostic: str = ""
    states: list[State] = field(default_factory=lambda: [State.CLOSED])
    retransmissions: int = 0
    delivered: bytearray = field(default_factory=bytearray)

    @property
    def state(self) -> State:
        return self.states[-1]

    @property
    def ok(self) -> bool:
        return self.outcome in ("end", "reset")

    def summary(self) -> str:
        lines = [f"outcome {self.outcome}"]
        if self.diagnostic:
            lines.append(f"diagnostic {self.diagnostic}")
        lines.append("states " + " ".join(str(s) for s in self.states))
        lines.append(f"retransmissions {self.retransmissions}")
        return "\n".join(lines) + "\n"

    def text(self) -> str:
        return self.trace.text() + self.summary()


class _SystemDriver:
    def __init__(self, user: Channel, net: NetChannel, config: ServerConfig, report: RunReport):
        self.user = user
        self.net = net
        self.config = config
        self.report = report
        self.clock = net.clock
        self._tcb = Tcb(rcv_wnd=config.rcv_wnd, mss=config.mss)
        self.rtx_deadline: float | None = None
        report.trace.add(net.self_role, "state", label=str(State.CLOSED))

    # The retransmission timer follows the queue: armed when it fills,
    # restarted when the head is acknowledged or resent, off when empty.
    @property
    def tcb(self) -> Tcb:
        return self._tcb

    @tcb.setter
    def tcb(self, new: Tcb) -> None:
        old, self._tcb = self._tcb, new
        if not new.rtx:
            self.rtx_deadline = None
        elif not old.rtx or new.snd_una != old.snd_una:
            self.rtx_deadline = self.clock.now() + self.config.rto_ms
        if new.state is not old.state:
            self.report.states.append(new.state)
            self.report.trace.add(self.net.self_role, "state", label=str(new.state))

    def budget(self) -> float | None:
        if self.rtx_deadline is None:
            return None
        return max(0.0, self.rtx_deadline - self.clock.now())

    def finish(self, end: Token, outcome: str) -> None:
        self.net.close(end)
        self.user.close(end)
        self.report.outcome = outcome

    # -- the session ------------------------------------------------------
    def run(self) -> None:
        user, net = self.user, self.net
        st = new_session(shapes.server_system())
        _, st = user.offer_one(st)
        self.tcb = self.tcb.open(self.config.local)
        st = user.select_one(st, TcbCreated())
        addr, syn, st = net.offer_one_with_addr(st, self.tcb)
        tcb, synack = self.tcb.recv_syn(addr, syn.segment, self.config.iss)
        self.tcb = tcb
        st = net.select_one(st, SynAck(synack), to=addr)
        st = self.syn_rcvd(st)
        if st is None:
            return
        self.comm_loop(user.select_one(st, Connected()))

    def syn_rcvd(self, syn_rcvd: Token) -> Token | None:
        net = self.net
        while True:
            st = rec_enter(syn_rcvd)
            snap = self.tcb

            def pick(seg: Segment) -> int:
                if isinstance(snap.synrcvd_recv_ack(seg), Acceptable):
                    return shapes.SYNRCVD_ACCEPTABLE
                return shapes.SYNRCVD_OTHER

            br = net.offer_two_filtered(st, pick, snap)
            seg = br.message.segment
            reaction = self.tcb.synrcvd_recv_ack(seg)
            if br.index == shapes.SYNRCVD_ACCEPTABLE:
                if seg.payload:
                    raise ProtocolViolation("first ACK must be empty")
                self.tcb = reaction.tcb
                return br.token
            if isinstance(reaction, NotAcceptable):
                syn_rcvd = net.select_left(br.token, Ack(reaction.response))
                continue
            assert isinstance(reaction, Reset)
            st = net.select_right(br.token, Rst(reaction.response))
            self.tcb = replace(self.tcb, state=State.CLOSED, rtx=replace(self.tcb.rtx, entries=()))
            end = self.user.select_one(st, Close())
            self.finish(end, "reset")
            return None

    def comm_loop(self, comm: Token) -> None:
        net, user = self.net, self.user
        classes = {
            EstabClass.ACCEPTABLE_WITH_PAYLOAD: shapes.COMM_DATA,
            EstabClass.ACCEPTABLE_EMPTY: shapes.COMM_EMPTY,
            EstabClass.FIN_ACK: shapes.COMM_FIN,
            EstabClass.UNACCEPTABLE: shapes.COMM_UNACCEPTABLE,
        }
        while True:
            st = rec_enter(comm)
            snap = self.tcb

            def pick(seg: Segment) -> int:
                if seg.has(Flags.RST):
                    raise PeerReset(f"connection reset by peer ({seg.summary()})")
                return classes[snap.estab_classify(seg)]

            br = net.offer_timed(st, pick, snap, self.budget())
            if br.index == shapes.COMM_TIMEOUT:
                head = self.tcb.retransmit_head()
                self.report.retransmissions += 1
                self.rtx_deadline = self.clock.now() + self.config.rto_ms
                comm = net.select_one(br.token, Ack(head))
                continue
            seg = br.message.segment
            if br.index == shapes.COMM_UNACCEPTABLE:
                comm = net.select_one(br.token, Ack(self.tcb.build_empty_ack()))
            elif br.index == shapes.COMM_EMPTY:
                self.tcb = self.tcb.ack_update(seg)
                comm = br.token
            elif br.index == shapes.COMM_FIN:
                tcb, ack, _ = self.tcb.recv_fin(seg)
                self.tcb = tcb
                st = net.select_one(br.token, Ack(ack))
                self.close_wait(user.select_one(st, Close()))
                return
            else:
                tcb, ack, data = self.tcb.recv_data(seg)
                self.tcb = tcb
                self.report.delivered += data
                st = net.select_one(br.token, Ack(ack))
                st = user.select_one(st, Data(data))
                reply = user.offer_two(st)
                if reply.index == shapes.USER_REPLY_DATA:
                    payload = reply.message.data
                    if payload:
                        tcb, out = self.tcb.send_data(payload)
                        self.tcb = tcb
                    else:
                        # nothing to say back; the slot carries a bare ACK
                        out = self.tcb.build_empty_ack()
                    comm = net.select_one(reply.token, Ack(out))
                    continue
                tcb, fin = self.tcb.start_close()
                self.tcb = tcb
                self.fin_wait_1(net.select_one(reply.token, FinAck(fin)))
                return

    def close_wait(self, close_wait: Token) -> None:
        net, user = self.net, self.user
        while True:
            st = rec_enter(close_wait)
            br = user.offer_two(st)
            if br.index == 0:
                payload = br.message.data
                if not payload:
                    raise ProtocolViolation("empty Data in CLOSE-WAIT would wait for an ACK that never comes")
                tcb, out = self.tcb.send_data(payload)
                self.tcb = tcb
                st = net.select_one(br.token, Ack(out))
                ack, close_wait = net.offer_one_filtered(st, self.tcb)
                self.tcb = self.tcb.ack_update(ack.segment)
                continue
            tcb, fin = self.tcb.start_close()
            self.tcb = tcb
            st = net.select_one(br.token, FinAck(fin))
            ack, end = net.offer_one_filtered(st, self.tcb)
            self.tcb = self.tcb.lastack_recv(ack.segment)
            self.finish(end, "end")
            return

    def fin_wait_1(self, st: Token) -> None:
        net = self.net
        snap = self.tcb

        def pick(seg: Segment) -> int:
            if snap.finwait1_classify(seg) is FinWait1Class.FIN_ACK:
                return shapes.FINWAIT1_FINACK
            return shapes.FINWAIT1_ACK

        br = net.offer_two_filtered(st, pick, snap)
        result = self.tcb.finwait1_recv(br.message.segment)
        if isinstance(result, FinAckSimultaneous):
            self.tcb = result.tcb
            self.finish(net.select_one(br.token, Ack(result.response)), "end")
            return
        assert isinstance(result, AckOfFin)
        self.tcb = result.tcb
        self.fin_wait_2(br.token)

    def fin_wait_2(self, fin_wait_2: Token) -> None:
        net = self.net
        cases = {
            FinWait2Class.FIN: shapes.FINWAIT2_FIN,
            FinWait2Class.IGNORED: shapes.FINWAIT2_IGNORED,
            FinWait2Class.UNACCEPTABLE: shapes.FINWAIT2_UNACCEPTABLE,
        }
        while True:
            st = rec_enter(fin_wait_2)
            snap = self.tcb
            br = net.offer_two_filtered(st, lambda seg: cases[snap.finwait2_classify(seg)], snap)
            tcb, resp = self.tcb.finwait2_recv(br.message.segment)
            self.tcb = tcb
            if br.index == shapes.FINWAIT2_FIN:
                self.finish(net.select_one(br.token, Ack(resp)), "end")
                return
            if br.index == shapes.FINWAIT2_IGNORED:
                fin_wait_2 = br.token
            else:
                fin_wait_2 = net.select_one(br.token, Ack(resp))


def run_server_system(user: Channel, net: NetChannel, config: ServerConfig = ServerConfig(),
                      report: RunReport | None = None) -> RunReport:
    """Serve one connection. Session or TCP errors abort the run; the
    report then carries the diagnostic and both endpoints are released."""
    report = report or RunReport(net.trace or Trace(net.clock))
    driver = _SystemDriver(user, net, config, report)
    try:
        driver.run()
    except (SessionError, TcpError) as exc:
        report.outcome = "aborted"
        report.diagnostic = f"{type(exc).__name__}: {exc}"
        report.trace.add(net.self_role, "note", label="abort", detail=report.diagnostic)
        log.warning("server aborted: %s", report.diagnostic)
        user.abort()
        net.abort()
    return report


# -- server users -----------------------------------------------------------

def split_lines(buffer: bytes) -> tuple[list[bytes], bytes]:
    """Complete lines (without their line feed) and the unterminated rest."""
    *lines, rest = buffer.split(b"\n")
    return lines, rest


@dataclass
class UserReport:
    outcome: str = "running"
    received: bytearray = field(default_factory=bytearray)
    sent: bytearray = field(default_factory=bytearray)
    diagnostic: str = ""


def run_echo_user(ch: Channel, mss: int = DEFAULT_MSS, report: UserReport | None = None) -> UserReport:
    """Reverse every received line and send it back; close on an empty line.

    Exactly one reply follows each delivery. Replies are capped at ``mss``
    bytes; the excess waits for the next reply slot. A delivery without a
    complete line is answered with an empty Data.
    """
    report = report or UserReport()
    try:
        _echo(ch, mss, report)
    except SessionError as exc:
        report.outcome = "aborted"
        report.diagnostic = f"{type(exc).__name__}: {exc}"
        ch.abort()
    return report


def _echo(ch: Channel, mss: int, report: UserReport) -> None:
    st = new_session(shapes.server_user())
    st = ch.select_one(st, Open())
    _, st = ch.offer_one(st)
    br = ch.offer_two(st)
    if isinstance(br.message, Close):
        ch.close(br.token)
        report.outcome = "reset"
        return
    loop, partial, pending = br.token, b"", b""
    while True:
        br = ch.offer_two(rec_enter(loop))
        if isinstance(br.message, Close):
            break
        report.received += br.message.data
        lines, partial = split_lines(partial + br.message.data)
        for line in lines:
            if not line:
                end = ch.select(br.token, 1, Close())
                ch.close(end)
                report.outcome = "closed"
                return
            pending += line[::-1] + b"\n"
        chunk, pending = pending[:mss], pending[mss:]
        report.sent += chunk
        loop = ch.select(br.token, 0, Data(chunk))
    close_wait = br.token
    while True:
        st = rec_enter(close_wait)
        if not pending:
            ch.close(ch.select(st, 1, Close()))
            report.outcome = "peer-closed"
            return
        chunk, pending = pending[:mss], pending[mss:]
        report.sent += chunk
        close_wait = ch.select(st, 0, Data(chunk))


class ScriptedUser:
    """A user that answers each decision point with the next injected
    command: ``("data", bytes)`` or ``("close",)``."""

    def __init__(self, clock) -> None:
        self.clock = clock
        self.commands: list[tuple] = []
        self.report = UserReport()

    def inject(self, *command) -> None:
        self.commands.append(tuple(command))
        self.clock.notify()

    def _next(self) -> tuple:
        self.clock.wait_for(lambda: bool(self.commands))
        return self.commands.pop(0)

    def _reply(self, ch: Channel, st: Token) -> Token | None:
        cmd = self._next()
        if cmd[0] == "data":
            self.report.sent += cmd[1]
            return ch.select(st, 0, Data(cmd[1]))
        ch.close(ch.select(st, 1, Close()))
        return None

    def run(self, ch: Channel) -> UserReport:
        try:
            self._run(ch)
        except SessionError as exc:
            self.report.outcome = "aborted"
            self.report.diagnostic = f"{type(exc).__name__}: {exc}"
            ch.abort()
        return self.report

    def _run(self, ch: Channel) -> None:
        st = new_session(shapes.server_user())
        st = ch.select_one(st, Open())
        _, st = ch.offer_one(st)
        br = ch.offer_two(st)
        if isinstance(br.message, Close):
            ch.close(br.token)
            self.report.outcome = "reset"
            return
        loop = br.token
        while True:
            br = ch.offer_two(rec_enter(loop))
            if isinstance(br.message, Close):
                break
            self.report.received += br.message.data
            loop = self._reply(ch, br.token)
            if loop is None:
                self.report.outcome = "closed"
                return
        close_wait = br.token
        while close_wait is not None:
            close_wait = self._reply(ch, rec_enter(close_wait))
        self.report.outcome = "peer-closed"

