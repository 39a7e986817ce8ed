"""TCP segment encoding and decoding over IPv4 (RFC 9293 header layout).

Options are accepted on decode and dropped; they are never emitted.
"""

from __future__ import annotations

import enum
import socket
import struct
from dataclasses import dataclass, field

HEADER = struct.Struct("!HHIIBBHHH")
HEADER_LEN = HEADER.size  # 20
PROTO_TCP = 6
MAX_TCP_LENGTH = 0xFFFF


class Flags(enum.IntFlag):
    FIN = 0x01
    SYN = 0x02
    RST = 0x04
    PSH = 0x08
    ACK = 0x10
    URG = 0x20

    NONE = 0

    def letters(self) -> str:
        """tcpdump-like flag string, e.g. ``SA`` or ``FA``."""
        order = [(Flags.SYN, "S"), (Flags.FIN, "F"), (Flags.RST, "R"),
                 (Flags.PSH, "P"), (Flags.ACK, "A"), (Flags.URG, "U")]
        return "".join(ch for bit, ch in order if self & bit) or "."

    @classmethod
    def parse(cls, text: str) -> "Flags":
        table = {"S": cls.SYN, "F": cls.FIN, "R": cls.RST, "P": cls.PSH,
                 "A": cls.ACK, "U": cls.URG}
        flags = cls.NONE
        for ch in text.upper():
            if ch == ".":
                continue
            try:
                flags |= table[ch]
            except KeyError:
                raise ValueError(f"unknown TCP flag {ch!r} in {text!r}") from None
        return flags


class CodecError(Exception):
    pass


class EncodeError(CodecError):
    pass


class DecodeError(CodecError):
    pass


class ShortBuffer(DecodeError):
    pass


class BadDataOffset(DecodeError):
    pass


class ChecksumMismatch(DecodeError):
    pass


@dataclass(frozen=True)
class Segment:
    src_port: int
    dst_port: int
    seq: int
    ack: int
    flags: Flags
    window: int = 65535
    payload: bytes = b""
    urgent: int = 0
    data_offset: int = 5
    # filled in by decode; never part of equality
    checksum: int = field(default=0, compare=False)

    def has(self, flag: Flags) -> bool:
        return bool(self.flags & flag)

    @property
    def seg_len(self) -> int:
        """Sequence space occupied: payload bytes plus one each for SYN and FIN."""
        return len(self.payload) + self.has(Flags.SYN) + self.has(Flags.FIN)

    def summary(self) -> str:
        return (f"flags={self.flags.letters()} seq={self.seq} ack={self.ack} "
                f"win={self.window} len={len(self.payload)}")


@dataclass(frozen=True)
class PseudoHeader:
    src_ip: str
    dst_ip: str
    tcp_length: int | None = None
    protocol: int = PROTO_TCP

    def pack(self, tcp_length: int) -> bytes:
        length = self.tcp_length if self.tcp_length is not None else tcp_length
        return (socket.inet_aton(self.src_ip) + socket.inet_aton(self.dst_ip)
                + struct.pack("!BBH", 0, self.protocol, length))


def ones_sum(data: bytes) -> int:
    """16-bit one's-complement sum of ``data`` (odd length is zero padded)."""
    if len(data) % 2:
        data += b"\0"
    total = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return total


def checksum(pseudo: PseudoHeader, tcp_bytes: bytes) -> int:
    return ~ones_sum(pseudo.pack(len(tcp_bytes)) + tcp_bytes) & 0xFFFF


def encode(segment: Segment, pseudo: PseudoHeader) -> bytes:
    length = HEADER_LEN + len(segment.payload)
    if length > MAX_TCP_LENGTH:
        raise EncodeError(f"segment of {length} bytes exceeds the 16-bit TCP length")
    for name in ("src_port", "dst_port", "window", "urgent"):
        value = getattr(segment, name)
        if not 0 <= value <= 0xFFFF:
            raise EncodeError(f"{name}={value} does not fit in 16 bits")
    for name in ("seq", "ack"):
        value = getattr(segment, name)
        if not 0 <= value <= 0xFFFFFFFF:
            raise EncodeError(f"{name}={value} does not fit in 32 bits")

    def pack(csum: int) -> bytes:
        return HEADER.pack(segment.src_port, segment.dst_port, segment.seq,
                           segment.ack, 5 << 4, int(segment.flags) & 0x3F,
                           segment.window, csum, segment.urgent)

    raw = pack(0) + segment.payload
    return pack(checksum(pseudo, raw)) + segment.payload


def decode(data: bytes, pseudo: PseudoHeader) -> Segment:
    if len(data) < HEADER_LEN:
        raise ShortBuffer(f"{len(data)} bytes is shorter than a TCP header")
    (src_port, dst_port, seq, ack, offset_byte, flag_byte, window, csum,
     urgent) = HEADER.unpack_from(data)
    offset = offset_byte >> 4
    if offset < 5 or offset * 4 > len(data):
        raise BadDataOffset(f"data offset {offset} invalid for {len(data)} bytes")
    if ones_sum(pseudo.pack(len(data)) + data) != 0xFFFF:
        raise ChecksumMismatch(f"checksum 0x{csum:04x} does not verify")
    return Segment(src_port=src_port, dst_port=dst_port, seq=seq, ack=ack,
                   flags=Flags(flag_byte & 0x3F), window=window,
                   payload=bytes(data[offset * 4:]), urgent=urgent,
                   checksum=csum)
