"""Wiring for simulated runs: one server (system and user) plus a client,
all under a :class:`~sttcp.sim.SimKernel`."""

from __future__ import annotations

import random
import string
import threading
from dataclasses import dataclass, field
from typing import Any, Callable

from .channel import Channel, NetChannel, Trace, queue_pair
from .client import ClientReport, EchoClient, Peer
from .net import FaultProfile, LinkEndpoint, SimLink
from .server import (RunReport, ServerConfig, UserReport, run_echo_user,
                     run_server_system)
from .session import CLIENT_SYSTEM, SERVER_SYSTEM, SERVER_USER
from .sim import SimKernel
from .tcp import Address, State

CLIENT_ADDR = Address("10.0.0.2", 40000)


@dataclass
class SimRun:
    """A server wired to a simulated link; the client side is left free."""

    config: ServerConfig = field(default_factory=ServerConfig)
    kernel: SimKernel = field(default_factory=SimKernel)
    profile: FaultProfile = field(default_factory=FaultProfile)

    def __post_init__(self) -> None:
        self.link = SimLink(self.kernel, self.profile)
        self.trace = Trace(self.kernel)
        user_side, system_side = queue_pair(self.kernel)
        self.user_channel = Channel(SERVER_USER, SERVER_SYSTEM, user_side, self.trace)
        self.system_user_channel = Channel(SERVER_SYSTEM, SERVER_USER, system_side, self.trace)
        self.net = NetChannel(SERVER_SYSTEM, CLIENT_SYSTEM, self.link.a, self.config.local, self.trace)
        self.report = RunReport(self.trace)
        self.user_report: Any = None

    def client_peer(self, local: Address = CLIENT_ADDR) -> Peer:
        return Peer(self.link.b, local, self.config.local)

    def start(self, user: Callable[[Channel], Any] | None = None) -> None:
        user = user or (lambda ch: run_echo_user(ch, self.config.mss))

        def user_proc() -> None:
            self.user_report = user(self.user_channel)

        self.kernel.spawn("system", run_server_system, self.system_user_channel, self.net,
                          self.config, self.report)
        self.kernel.spawn("user", user_proc)

    def spawn(self, name: str, fn: Callable[..., Any], *args: Any) -> Any:
        return self.kernel.spawn(name, fn, *args)

    def run(self, until: float | None = None) -> None:
        try:
            self.kernel.run(until=until)
        finally:
            self.kernel.shutdown()


def random_lines(rng: random.Random, count: int, max_len: int = 60) -> list[bytes]:
    """Non-empty printable ASCII lines without line feeds."""
    alphabet = (string.ascii_letters + string.digits + string.punctuation + " ").encode()
    return [bytes(rng.choice(alphabet) for _ in range(rng.randint(1, max_len)))
            for _ in range(count)]


@dataclass
class SoakResult:
    lines: int
    expected: bytes
    client: ClientReport
    server: RunReport
    user: UserReport | None
    virtual_ms: float

    @property
    def transcript_ok(self) -> bool:
        return bytes(self.client.transcript) == self.expected

    @property
    def retransmissions(self) -> int:
        return self.client.retransmissions + self.server.retransmissions

    @property
    def ok(self) -> bool:
        return self.transcript_ok and self.client.closed and self.server.outcome == "end"

    def summary(self) -> str:
        return (f"lines={self.lines} transcript={'exact' if self.transcript_ok else 'MISMATCH'} "
                f"server={self.server.outcome} client_closed={self.client.closed} "
                f"retransmissions server={self.server.retransmissions} "
                f"client={self.client.retransmissions} virtual_ms={self.virtual_ms:.0f}")


def echo_session(lines: list[bytes], profile: FaultProfile = FaultProfile(),
                 config: ServerConfig = ServerConfig(iss=5000), client_iss: int = 1000,
                 combined_fin: bool = False, limit_ms: float = 3_600_000) -> SoakResult:
    """Run the echo server against the built-in client. Impairments from
    ``profile`` apply only between the handshake and the closing exchange;
    the timing and seed hold throughout."""
    run = SimRun(config=config, profile=profile.lifted())

    def impair() -> None:
        # the first ACK must reach the server before anything can overtake it
        run.kernel.wait_for(lambda: run.report.state is not State.SYN_RCVD)
        run.link.set_profile(profile)

    client = EchoClient(run.client_peer(), lines, iss=client_iss, combined_fin=combined_fin,
                        on_established=impair,
                        before_close=lambda: run.link.set_profile(profile.lifted()))
    run.start()

    def client_proc() -> None:
        try:
            client.run()
        except RuntimeError:
            pass

    run.spawn("client", client_proc)
    run.run(until=limit_ms)
    return SoakResult(len(lines), client.expected, client.report, run.report,
                      run.user_report, run.kernel.now())


def soak(count: int = 200, profile: FaultProfile = FaultProfile(), line_seed: int | None = None
         ) -> SoakResult:
    rng = random.Random(profile.seed if line_seed is None else line_seed)
    return echo_session(random_lines(rng, count), profile)


def serve_live(endpoint: LinkEndpoint, config: ServerConfig,
               timeout_s: float | None = None) -> tuple[RunReport, Any]:
    """Serve one echo connection over a live endpoint. The system and user
    roles run in their own threads against the endpoint's wall clock."""
    clock = endpoint.clock
    trace = Trace(clock)
    user_side, system_side = queue_pair(clock)
    user_ch = Channel(SERVER_USER, SERVER_SYSTEM, user_side, trace)
    system_ch = Channel(SERVER_SYSTEM, SERVER_USER, system_side, trace)
    net = NetChannel(SERVER_SYSTEM, CLIENT_SYSTEM, endpoint, config.local, trace)
    report = RunReport(trace)
    user_result: list[Any] = []
    threads = [
        threading.Thread(target=run_server_system, args=(system_ch, net, config, report),
                         name="server-system", daemon=True),
        threading.Thread(target=lambda: user_result.append(run_echo_user(user_ch, config.mss)),
                         name="server-user", daemon=True),
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout_s)
    return report, (user_result[0] if user_result else None)
