"""CloudBurst packet format.

Layout (all multi-octet fields big-endian)::

    octet 0      version (high 4 bits) | packet type (low 4 bits)
    octet 1      message id
    octets 2-3   n, number of original parts
    octets 4-7   message size in bytes
    octets 8-    index bitmap, 2**x bits rounded up to whole octets;
                 bit i (value 1 << i of the big-endian integer) = part i

The payload follows the header. ``x`` is a deployment constant shared by
both endpoints; it is not carried on the wire.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from fractions import Fraction

VERSION = 1
DEFAULT_X = 6
DEFAULT_MTU = 1500
IP_HEADER = 20
UDP_HEADER = 8
FIXED_HEADER = 8

_FIXED = struct.Struct(">BBHI")


class WireError(ValueError):
    pass


class TruncatedPacket(WireError):
    pass


class BadVersion(WireError):
    pass


class BadPacketType(WireError):
    pass


class BitmapOutOfRange(WireError):
    pass


class PacketType(enum.IntEnum):
    DATA = 0
    STOP = 1
    FEEDBACK_REQ = 2
    FEEDBACK = 3
    REQUEST = 4


def bitmap_octets(x: int = DEFAULT_X) -> int:
    if x < 0:
        raise ValueError("x must be >= 0")
    return max(1, -(-(1 << x) // 8))


def header_len(x: int = DEFAULT_X) -> int:
    return FIXED_HEADER + bitmap_octets(x)


@dataclass(frozen=True)
class CbrstHeader:
    pkt_type: PacketType
    message_id: int
    n: int
    message_size: int
    index_bitmap: int = 0
    version: int = VERSION

    def validate(self, x: int = DEFAULT_X) -> None:
        if self.version != VERSION:
            raise BadVersion(f"unsupported version {self.version}")
        if not 0 <= self.message_id < 256:
            raise WireError("message_id must fit in 8 bits")
        if not 0 <= self.message_size < 1 << 32:
            raise WireError("message_size must fit in 32 bits")
        if not 0 <= self.n <= 1 << x:
            raise BitmapOutOfRange(f"n={self.n} exceeds 2**{x}")
        if self.index_bitmap < 0 or self.index_bitmap >> (1 << x):
            raise BitmapOutOfRange("bitmap wider than 2**x bits")
        if self.pkt_type == PacketType.DATA:
            if self.n < 1 or self.index_bitmap == 0:
                raise BitmapOutOfRange("DATA needs n >= 1 and a non-empty index set")
            if self.index_bitmap >> self.n:
                raise BitmapOutOfRange("index set has bits at positions >= n")


def serialize(header: CbrstHeader, payload: bytes = b"", x: int = DEFAULT_X) -> bytes:
    header.validate(x)
    head = _FIXED.pack((header.version << 4) | int(header.pkt_type), header.message_id,
                       header.n, header.message_size)
    return head + header.index_bitmap.to_bytes(bitmap_octets(x), "big") + payload


def parse(octets: bytes, x: int = DEFAULT_X) -> tuple[CbrstHeader, bytes]:
    hlen = header_len(x)
    if len(octets) < hlen:
        raise TruncatedPacket(f"{len(octets)} octets, header needs {hlen}")
    vt, message_id, n, size = _FIXED.unpack_from(octets)
    version, ptype = vt >> 4, vt & 0x0F
    if version != VERSION:
        raise BadVersion(f"unsupported version {version}")
    try:
        pkt_type = PacketType(ptype)
    except ValueError:
        raise BadPacketType(f"unknown packet type {ptype}") from None
    bitmap = int.from_bytes(octets[FIXED_HEADER:hlen], "big")
    header = CbrstHeader(pkt_type, message_id, n, size, bitmap, version)
    header.validate(x)
    return header, bytes(octets[hlen:])


def bitmap_to_bytes(mask: int, x: int = DEFAULT_X) -> bytes:
    return mask.to_bytes(bitmap_octets(x), "big")


def bitmap_from_bytes(data: bytes, x: int = DEFAULT_X) -> int:
    if len(data) < bitmap_octets(x):
        raise TruncatedPacket("bitmap payload too short")
    return int.from_bytes(data[:bitmap_octets(x)], "big")


@dataclass(frozen=True)
class HeaderBudget:
    mtu: int = DEFAULT_MTU
    x: int = DEFAULT_X
    h_ip: int = IP_HEADER
    h_udp: int = UDP_HEADER

    @property
    def h_cbrst(self) -> int:
        return header_len(self.x)

    @property
    def payload_len(self) -> int:
        return self.mtu - self.h_ip - self.h_udp - self.h_cbrst

    @property
    def overhead_fraction(self) -> Fraction:
        return Fraction(self.h_ip + self.h_udp + self.h_cbrst, self.mtu)

    @property
    def max_parts(self) -> int:
        return 1 << self.x

    @property
    def max_message_bytes(self) -> int:
        return self.max_parts * self.payload_len

    def __post_init__(self):
        if self.payload_len <= 0:
            raise ValueError(f"MTU {self.mtu} leaves no room for payload at x={self.x}")


def header_overhead(x: int, mtu: int = DEFAULT_MTU) -> Fraction:
    """Share of an MTU-sized packet spent on IP, UDP and CloudBurst headers."""
    total = IP_HEADER + UDP_HEADER + header_len(x)
    if mtu < total:
        raise ValueError("mtu smaller than the headers")
    return Fraction(total, mtu)
