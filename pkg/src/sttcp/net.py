"""Datagram transports under the network channel.

The in-memory link is driven by a :class:`~sttcp.sim.SimKernel` and applies
loss, duplication, reordering and delay from a seeded generator, one
independent stream per direction. The raw backends carry real IPv4/TCP
datagrams through a TUN device or a raw socket.
"""

from __future__ import annotations

import errno
import fcntl
import heapq
import logging
import os
import random
import select
import socket
import struct
from dataclasses import dataclass, field, replace
from typing import NamedTuple

from .sim import SimKernel, WallClock
from .wire import PROTO_TCP

log = logging.getLogger(__name__)


class Datagram(NamedTuple):
    src: str
    dst: str
    payload: bytes


@dataclass(frozen=True)
class FaultProfile:
    loss: float = 0.0
    dup: float = 0.0
    reorder: float = 0.0
    delay_ms: float = 0.0
    jitter_ms: float = 0.0
    seed: int = 0
    # a datagram held back for reordering goes out after this long if
    # nothing overtakes it
    hold_ms: float = 5.0

    def __post_init__(self) -> None:
        for name in ("loss", "dup", "reorder"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name}={p} is not a probability")
        if self.delay_ms < 0 or self.jitter_ms < 0 or self.hold_ms < 0:
            raise ValueError("delays must be non-negative")

    @property
    def lossless(self) -> bool:
        return self.loss == self.dup == self.reorder == 0.0

    def lifted(self) -> "FaultProfile":
        """Same timing and seed with every impairment switched off."""
        return replace(self, loss=0.0, dup=0.0, reorder=0.0)


@dataclass
class LinkStats:
    sent: int = 0
    dropped: int = 0
    duplicated: int = 0
    reordered: int = 0
    delivered: int = 0


@dataclass
class _Held:
    dgram: Datagram
    due: float
    release_at: float


@dataclass
class _Direction:
    kernel: SimKernel
    profile: FaultProfile
    rng: random.Random
    heap: list = field(default_factory=list)
    held: _Held | None = None
    order: int = 0
    stats: LinkStats = field(default_factory=LinkStats)

    def _schedule(self, dgram: Datagram, at: float) -> None:
        heapq.heappush(self.heap, (at, self.order, dgram))
        self.order += 1

    def send(self, dgram: Datagram) -> None:
        p, now = self.profile, self.kernel.now()
        self.stats.sent += 1
        # draw every variate on every send so the stream never shifts
        lost = self.rng.random() < p.loss
        dup = self.rng.random() < p.dup
        hold = self.rng.random() < p.reorder
        jitter = self.rng.random() * p.jitter_ms
        if lost:
            self.stats.dropped += 1
            return
        due = now + p.delay_ms + jitter
        copies = 2 if dup else 1
        self.stats.duplicated += copies - 1
        if self.held is not None:
            # the held datagram goes out right behind this one
            prev, self.held = self.held, None
            for _ in range(copies):
                self._schedule(dgram, due)
            self._schedule(prev.dgram, max(due, prev.due))
            self.stats.reordered += 1
            return
        if hold:
            self.held = _Held(dgram, due, due + p.hold_ms)
            if dup:
                self._schedule(dgram, due)
            return
        for _ in range(copies):
            self._schedule(dgram, due)

    def release_held(self, force: bool = False) -> None:
        if self.held and (force or self.held.release_at <= self.kernel.now()):
            held, self.held = self.held, None
            self._schedule(held.dgram, max(held.due, self.kernel.now()))

    def ready(self) -> bool:
        self.release_held()
        return bool(self.heap) and self.heap[0][0] <= self.kernel.now()

    def pop(self) -> Datagram:
        _, _, dgram = heapq.heappop(self.heap)
        self.stats.delivered += 1
        return dgram

    def next_event(self) -> float | None:
        times = []
        if self.heap:
            times.append(self.heap[0][0])
        if self.held:
            times.append(self.held.release_at)
        return min(times) if times else None


class LinkEndpoint:
    """One side of a datagram link: ``send`` never blocks, ``recv`` waits
    until ``deadline`` (ms on the endpoint's clock) and returns None on
    timeout."""

    clock: SimKernel | WallClock

    def send(self, dgram: Datagram) -> None:
        raise NotImplementedError

    def recv(self, deadline: float | None = None) -> Datagram | None:
        raise NotImplementedError

    def close(self) -> None:
        pass


class SimEndpoint(LinkEndpoint):
    def __init__(self, link: "SimLink", outbound: _Direction, inbound: _Direction):
        self.link = link
        self.clock = link.kernel
        self._out = outbound
        self._in = inbound

    def send(self, dgram: Datagram) -> None:
        self._out.send(dgram)

    def recv(self, deadline: float | None = None) -> Datagram | None:
        if self.clock.wait_for(self._in.ready, deadline):
            return self._in.pop()
        return None

    @property
    def stats(self) -> LinkStats:
        return self._out.stats


class SimLink:
    """Duplex in-memory link. Direction 0 carries a→b, direction 1 b→a."""

    def __init__(self, kernel: SimKernel, profile: FaultProfile = FaultProfile()):
        self.kernel = kernel
        self.dirs = [_Direction(kernel, profile, random.Random(profile.seed * 2 + k))
                     for k in (0, 1)]
        self.a = SimEndpoint(self, self.dirs[0], self.dirs[1])
        self.b = SimEndpoint(self, self.dirs[1], self.dirs[0])
        kernel.add_source(self._next_event)

    @property
    def profile(self) -> FaultProfile:
        return self.dirs[0].profile

    def set_profile(self, profile: FaultProfile) -> None:
        """Change impairments mid-run. Generator streams carry on; anything
        held back for reordering is released."""
        for d in self.dirs:
            d.profile = profile
            if profile.reorder == 0.0:
                d.release_held(force=True)

    def _next_event(self) -> float | None:
        times = [t for t in (d.next_event() for d in self.dirs) if t is not None]
        return min(times) if times else None


def link_pair(profile: FaultProfile = FaultProfile(),
              kernel: SimKernel | None = None) -> tuple[SimEndpoint, SimEndpoint]:
    link = SimLink(kernel or SimKernel(), profile)
    return link.a, link.b


# -- raw IPv4 backends ------------------------------------------------------

class BackendError(RuntimeError):
    pass


_IPV4 = struct.Struct("!BBHHHBBH4s4s")


def ipv4_checksum(header: bytes) -> int:
    total = sum(struct.unpack(f"!{len(header) // 2}H", header))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def build_ipv4(dgram: Datagram, ident: int) -> bytes:
    total = _IPV4.size + len(dgram.payload)
    fields = [0x45, 0, total, ident & 0xFFFF, 0x4000, 64, PROTO_TCP, 0,
              socket.inet_aton(dgram.src), socket.inet_aton(dgram.dst)]
    header = _IPV4.pack(*fields)
    fields[7] = ipv4_checksum(header)
    return _IPV4.pack(*fields) + dgram.payload


def parse_ipv4(packet: bytes) -> Datagram | None:
    """TCP datagram carried in ``packet``, or None for anything else."""
    if len(packet) < _IPV4.size or packet[0] >> 4 != 4:
        return None
    ihl = (packet[0] & 0x0F) * 4
    total = struct.unpack_from("!H", packet, 2)[0]
    if packet[9] != PROTO_TCP or ihl < 20 or total > len(packet):
        return None
    return Datagram(socket.inet_ntoa(packet[12:16]), socket.inet_ntoa(packet[16:20]),
                    bytes(packet[ihl:total]))


class _FdEndpoint(LinkEndpoint):
    def __init__(self) -> None:
        self.clock = WallClock()

    def _fileno(self) -> int:
        raise NotImplementedError

    def _read(self) -> Datagram | None:
        raise NotImplementedError

    def recv(self, deadline: float | None = None) -> Datagram | None:
        while True:
            timeout = None if deadline is None else max(0.0, (deadline - self.clock.now()) / 1000.0)
            ready, _, _ = select.select([self._fileno()], [], [], timeout)
            if not ready:
                return None
            dgram = self._read()
            if dgram is not None:
                return dgram


TUNSETIFF = 0x400454CA
IFF_TUN = 0x0001
IFF_NO_PI = 0x1000
SIOCGIFFLAGS = 0x8913
SIOCSIFFLAGS = 0x8914
SIOCSIFADDR = 0x8916
SIOCSIFNETMASK = 0x891C
IFF_UP = 0x1


class TunEndpoint(_FdEndpoint):
    """A TUN device whose kernel side is ``host_ip``; this process answers
    for every other address on the subnet."""

    def __init__(self, name: str = "sttcp0", host_ip: str = "10.77.0.1",
                 netmask: str = "255.255.255.0"):
        super().__init__()
        self.name = name
        try:
            self.fd = os.open("/dev/net/tun", os.O_RDWR)
        except OSError as exc:
            raise BackendError(
                f"cannot open /dev/net/tun ({exc.strerror}); run as root or with "
                "CAP_NET_ADMIN and make sure the tun module is loaded") from exc
        try:
            fcntl.ioctl(self.fd, TUNSETIFF,
                        struct.pack("16sH", name.encode(), IFF_TUN | IFF_NO_PI))
            self._configure(host_ip, netmask)
        except OSError as exc:
            os.close(self.fd)
            raise BackendError(
                f"cannot configure TUN device {name} ({exc.strerror}); CAP_NET_ADMIN "
                "is required") from exc
        self._ident = 0

    def _configure(self, host_ip: str, netmask: str) -> None:
        ctl = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        try:
            ifname = self.name.encode()
            for req, addr in ((SIOCSIFADDR, host_ip), (SIOCSIFNETMASK, netmask)):
                fcntl.ioctl(ctl, req, struct.pack("16sH2s4s8s", ifname, socket.AF_INET,
                                                  b"\0\0", socket.inet_aton(addr), b"\0" * 8))
            flags = struct.unpack("16sH", fcntl.ioctl(ctl, SIOCGIFFLAGS,
                                                      struct.pack("16sH22x", ifname, 0))[:18])[1]
            fcntl.ioctl(ctl, SIOCSIFFLAGS, struct.pack("16sH22x", ifname, flags | IFF_UP))
        finally:
            ctl.close()

    def _fileno(self) -> int:
        return self.fd

    def _read(self) -> Datagram | None:
        return parse_ipv4(os.read(self.fd, 65535))

    def send(self, dgram: Datagram) -> None:
        self._ident += 1
        os.write(self.fd, build_ipv4(dgram, self._ident))

    def close(self) -> None:
        if self.fd >= 0:
            os.close(self.fd)
            self.fd = -1


class RawSocketEndpoint(_FdEndpoint):
    """SOCK_RAW endpoint bound to a local address. The host kernel also sees
    the traffic and will answer SYNs with RST unless told not to, e.g.
    ``iptables -A OUTPUT -p tcp --tcp-flags RST RST --sport PORT -j DROP``."""

    def __init__(self, local_ip: str):
        super().__init__()
        try:
            self.sock = socket.socket(socket.AF_INET, socket.SOCK_RAW, socket.IPPROTO_TCP)
        except PermissionError as exc:
            raise BackendError("raw sockets need root or CAP_NET_RAW") from exc
        try:
            self.sock.bind((local_ip, 0))
        except OSError as exc:
            self.sock.close()
            hint = "address is not configured on this host" if exc.errno == errno.EADDRNOTAVAIL else exc.strerror
            raise BackendError(f"cannot bind raw socket to {local_ip}: {hint}") from exc
        self.local_ip = local_ip

    def _fileno(self) -> int:
        return self.sock.fileno()

    def _read(self) -> Datagram | None:
        return parse_ipv4(self.sock.recv(65535))

    def send(self, dgram: Datagram) -> None:
        self.sock.sendto(dgram.payload, (dgram.dst, 0))

    def close(self) -> None:
        self.sock.close()


def raw_backend(local_ip: str, device: str = "tun", **options) -> LinkEndpoint:
    """Open a live endpoint. ``device`` is ``tun`` (a TUN interface; options
    ``name``, ``host_ip``, ``netmask``) or ``socket`` (a raw socket on a
    configured address)."""
    if device == "tun":
        return TunEndpoint(**options)
    if device == "socket":
        return RawSocketEndpoint(local_ip)
    raise BackendError(f"unknown raw device {device!r}; use 'tun' or 'socket'")
