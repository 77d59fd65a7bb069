"""Burst-until-received sender and receiver.

``SenderSession`` and ``ReceiverEndpoint`` are plain state machines: they
consume and produce wire datagrams and never touch a clock or a socket. The
blocking drivers ``cbrst_send`` and ``receiver_poll`` run them over any
``MultipathChannel``; the simulator drives them from its own event loop.
"""

from __future__ import annotations

import enum
import logging
import os
import random
import selectors
import socket
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Hashable, Optional, Protocol, Sequence

from .ltcodec import (
    DecodeStatus,
    DecoderState,
    DegreeDistribution,
    FixedDegree,
    HeaderMismatch,
    LtEncoder,
    OversizeMessage,
    RobustSoliton,
    packetize,
)
from .wire import (
    DEFAULT_MTU,
    DEFAULT_X,
    FIXED_HEADER,
    CbrstHeader,
    HeaderBudget,
    PacketType,
    WireError,
    bitmap_from_bytes,
    bitmap_octets,
    bitmap_to_bytes,
    parse,
    serialize,
)

log = logging.getLogger(__name__)


@dataclass
class TransportConfig:
    r: float = 1.0
    link_capacity: float = 1e9  # bits/s
    pkt_size: int = DEFAULT_MTU  # bytes on the wire per symbol, for pacing
    timeout: float = 0.1
    feedback_threshold: Optional[int] = None  # None: 4 * k symbols
    decoder_idle_timeout: float = 0.010
    degree: DegreeDistribution = field(default_factory=lambda: FixedDegree(5))
    x: int = DEFAULT_X
    mtu: int = DEFAULT_MTU

    def __post_init__(self):
        if not 0 < self.r <= 1:
            raise ValueError("r must be in (0, 1]")
        if self.link_capacity <= 0 or self.pkt_size <= 0:
            raise ValueError("link_capacity and pkt_size must be positive")

    @property
    def budget(self) -> HeaderBudget:
        return HeaderBudget(self.mtu, self.x)

    @classmethod
    def from_mapping(cls, cfg: dict[str, Any]) -> "TransportConfig":
        """Build from the documented config keys (``timeout_ms`` etc.)."""
        kw: dict[str, Any] = {}
        if "r" in cfg:
            kw["r"] = float(cfg["r"])
        if "timeout_ms" in cfg:
            kw["timeout"] = cfg["timeout_ms"] / 1e3
        if "feedback_threshold" in cfg:
            kw["feedback_threshold"] = cfg["feedback_threshold"]
        if "decoder_idle_timeout_ms" in cfg:
            kw["decoder_idle_timeout"] = cfg["decoder_idle_timeout_ms"] / 1e3
        if "link_capacity_gbps" in cfg:
            kw["link_capacity"] = cfg["link_capacity_gbps"] * 1e9
        for key in ("pkt_size", "x", "mtu"):
            if key in cfg:
                kw[key] = int(cfg[key])
        if "degree" in cfg:
            kw["degree"] = FixedDegree(int(cfg["degree"]))
        if "robust_soliton" in cfg:
            rs = cfg["robust_soliton"]
            kw["degree"] = RobustSoliton(rs.get("c", 0.1), rs.get("delta", 0.5))
        return cls(**kw)


def pacing_interval(r, num_paths: int, pkt_size: int, link_capacity) -> Fraction:
    """Exact inter-round delay in seconds: (1/r) * paths * bits / capacity."""
    r = Fraction(str(r)) if isinstance(r, float) else Fraction(r)
    cap = Fraction(str(link_capacity)) if isinstance(link_capacity, float) else Fraction(link_capacity)
    return num_paths * pkt_size * 8 / (r * cap)


def inter_round_delay(r, num_paths: int, pkt_size: int, link_capacity) -> float:
    return float(pacing_interval(r, num_paths, pkt_size, link_capacity))


def peek_type(octets: bytes) -> Optional[PacketType]:
    if not octets:
        return None
    try:
        return PacketType(octets[0] & 0x0F)
    except ValueError:
        return None


# -- sender -------------------------------------------------------------------


class SessionState(enum.Enum):
    BURSTING = "bursting"
    DONE = "done"
    FAILED = "failed"


class SenderSession:
    def __init__(self, message: bytes, message_id: int, num_paths: int,
                 config: Optional[TransportConfig] = None, rng: Optional[random.Random] = None):
        self.config = config or TransportConfig()
        budget = self.config.budget
        if not message or len(message) > budget.max_message_bytes:
            raise OversizeMessage(f"{len(message)} bytes exceeds {budget.max_message_bytes}")
        if num_paths < 1:
            raise ValueError("need at least one path")
        self.message_id = message_id & 0xFF
        self.num_paths = num_paths
        self.payload = packetize(message, budget.payload_len, budget.max_parts)
        self.encoder = LtEncoder(self.payload, self.config.degree, rng or random.Random())
        self.state = SessionState.BURSTING
        self.failure: Optional[str] = None
        self.symbols_sent = 0
        self.rounds = 0
        self.feedback_threshold = self.config.feedback_threshold or 4 * self.payload.k
        self._next_feedback = self.feedback_threshold
        self.feedback_requests = 0
        self.feedback_received = 0
        self._x = self.config.x
        first = serialize(CbrstHeader(PacketType.DATA, self.message_id, self.payload.k,
                                      self.payload.size, 1), b"", self._x)
        self._data_prefix = first[:FIXED_HEADER]
        self._bitmap_len = bitmap_octets(self._x)

    @property
    def k(self) -> int:
        return self.payload.k

    @property
    def pacing(self) -> Fraction:
        c = self.config
        return pacing_interval(c.r, self.num_paths, c.pkt_size, c.link_capacity)

    @property
    def inter_round_delay(self) -> float:
        return float(self.pacing)

    def data_datagram(self) -> bytes:
        mask, value = self.encoder.next_raw()
        self.symbols_sent += 1
        # index sets come from the encoder, so they are valid by construction
        return (self._data_prefix + mask.to_bytes(self._bitmap_len, "big")
                + value.to_bytes(self.payload.part_len, "big"))

    def next_round(self) -> list[bytes]:
        """One fresh encoded symbol per path."""
        self.rounds += 1
        return [self.data_datagram() for _ in range(self.num_paths)]

    def poll_feedback(self) -> Optional[bytes]:
        """A FEEDBACK_REQ datagram each time another threshold's worth was sent."""
        if self.state is not SessionState.BURSTING or self.symbols_sent < self._next_feedback:
            return None
        self._next_feedback += self.feedback_threshold
        self.feedback_requests += 1
        return self._control(PacketType.FEEDBACK_REQ)

    def _control(self, ptype: PacketType, payload: bytes = b"") -> bytes:
        head = CbrstHeader(ptype, self.message_id, self.payload.k, self.payload.size)
        return serialize(head, payload, self._x)

    def handle(self, octets: bytes) -> Optional[PacketType]:
        """Process a datagram from the receiver; returns its type if it was ours."""
        try:
            head, payload = parse(octets, self._x)
        except WireError:
            return None
        if head.message_id != self.message_id:
            return None
        if head.pkt_type == PacketType.STOP:
            if self.state is SessionState.BURSTING:
                self.state = SessionState.DONE
        elif head.pkt_type == PacketType.FEEDBACK:
            self.on_feedback(bitmap_from_bytes(payload, self._x))
        else:
            return None
        return head.pkt_type

    def on_feedback(self, decoded_bitmap: int) -> None:
        if self.state is not SessionState.BURSTING:
            return
        self.feedback_received += 1
        full = (1 << self.k) - 1
        self.encoder.restrict(full & ~decoded_bitmap)

    def fail(self, reason: str) -> None:
        if self.state is SessionState.BURSTING:
            self.state = SessionState.FAILED
            self.failure = reason


def sender_on_feedback(session: SenderSession, decoded_bitmap: int) -> None:
    session.on_feedback(decoded_bitmap)


class MessageIdAllocator:
    """Per-destination 8-bit ids; an id is reusable once quarantined long enough.

    The quarantine covers the receiver's idle timeout so a reused id never
    lands on a decoder still holding the previous message.
    """

    def __init__(self, quarantine: float):
        self.quarantine = quarantine
        self._next: dict[Hashable, int] = {}
        self._busy: dict[Hashable, dict[int, Optional[float]]] = {}

    def allocate(self, dest: Hashable, now: float) -> Optional[int]:
        busy = self._busy.setdefault(dest, {})
        start = self._next.get(dest, 0)
        for step in range(256):
            mid = (start + step) & 0xFF
            released = busy.get(mid, -1.0)
            if released is None:
                continue
            if released < 0 or now - released >= self.quarantine:
                busy[mid] = None
                self._next[dest] = (mid + 1) & 0xFF
                return mid
        return None

    def release(self, dest: Hashable, mid: int, now: float) -> None:
        self._busy.setdefault(dest, {})[mid] = now


# -- receiver -----------------------------------------------------------------


@dataclass
class DeliveredMessage:
    source: Hashable
    message_id: int
    data: bytes
    symbols_received: int
    first_arrival: float
    completed_at: float


@dataclass
class IncomingRequest:
    source: Hashable
    request_id: int
    size: int
    arrived_at: float


@dataclass
class ReceiverOutput:
    delivered: list[DeliveredMessage] = field(default_factory=list)
    requests: list[IncomingRequest] = field(default_factory=list)
    replies: list[bytes] = field(default_factory=list)  # to the source, on every path


@dataclass
class _Inbound:
    decoder: DecoderState
    first_arrival: float
    last_arrival: float
    delivered: bool = False
    stops: int = 0


class ReceiverEndpoint:
    def __init__(self, config: Optional[TransportConfig] = None):
        self.config = config or TransportConfig()
        self._x = self.config.x
        self._part_len = self.config.budget.payload_len
        self.inbound: dict[tuple[Hashable, int], _Inbound] = {}
        self.malformed = 0
        self.mismatched = 0
        self.stops_sent = 0
        self.delivered_count = 0
        self.expired = 0
        self.pending_requests: list[IncomingRequest] = []

    def on_datagram(self, octets: bytes, source: Hashable, now: float) -> ReceiverOutput:
        out = ReceiverOutput()
        try:
            head, payload = parse(octets, self._x)
        except WireError:
            self.malformed += 1
            return out
        ptype = head.pkt_type
        if ptype == PacketType.DATA:
            self._on_data(head, payload, source, now, out)
        elif ptype == PacketType.FEEDBACK_REQ:
            self._on_feedback_req(head, source, now, out)
        elif ptype == PacketType.REQUEST:
            req = IncomingRequest(source, head.message_id, head.message_size, now)
            out.requests.append(req)
            self.pending_requests.append(req)
        return out

    def _stop(self, head: CbrstHeader, entry: _Inbound, out: ReceiverOutput) -> None:
        stop = CbrstHeader(PacketType.STOP, head.message_id, head.n, head.message_size)
        out.replies.append(serialize(stop, b"", self._x))
        entry.stops += 1
        self.stops_sent += 1

    def _on_data(self, head: CbrstHeader, payload: bytes, source, now, out) -> None:
        if len(payload) != self._part_len:
            self.malformed += 1
            return
        key = (source, head.message_id)
        entry = self.inbound.get(key)
        if entry is not None and (entry.decoder.n != head.n
                                  or entry.decoder.message_size != head.message_size):
            if not entry.delivered:
                self.mismatched += 1
                return
            entry = None  # id reused by a new message
        if entry is None:
            entry = _Inbound(DecoderState(head.n, head.message_size, self._part_len), now, now)
            self.inbound[key] = entry
        entry.last_arrival = now
        if entry.delivered:
            self._stop(head, entry, out)
            return
        try:
            res = entry.decoder.push_raw(head.index_bitmap, int.from_bytes(payload, "big"))
        except HeaderMismatch:
            self.mismatched += 1
            return
        if res.status is DecodeStatus.COMPLETE:
            entry.delivered = True
            self.delivered_count += 1
            out.delivered.append(DeliveredMessage(
                source, head.message_id, res.data, entry.decoder.symbols_consumed,
                entry.first_arrival, now))
            self._stop(head, entry, out)

    def _on_feedback_req(self, head: CbrstHeader, source, now, out) -> None:
        entry = self.inbound.get((source, head.message_id))
        if entry is not None and entry.delivered:
            self._stop(head, entry, out)
            return
        decoded = 0
        if entry is not None and entry.decoder.n == head.n:
            decoded = entry.decoder.decoded
            entry.last_arrival = now
        fb = CbrstHeader(PacketType.FEEDBACK, head.message_id, head.n, head.message_size)
        out.replies.append(serialize(fb, bitmap_to_bytes(decoded, self._x), self._x))

    def expire(self, now: float) -> int:
        limit = self.config.decoder_idle_timeout
        stale = [k for k, e in self.inbound.items() if now - e.last_arrival > limit]
        for k in stale:
            del self.inbound[k]
        self.expired += len(stale)
        return len(stale)


# -- channels -----------------------------------------------------------------


class MultipathChannel(Protocol):
    paths: Sequence[Any]

    def send(self, path: Any, octets: bytes, dest: Any = None) -> None: ...

    def receive(self, timeout: float = 0.0) -> Optional[tuple[bytes, Any, Any]]: ...

    def now(self) -> float: ...

    def sleep_until(self, t: float) -> None: ...


def _cpus() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


class SocketChannel:
    """UDP sockets over a pool of local ports.

    Each datagram toward a plain host goes out of a random local socket to a
    random port of the remote pool, so ECMP hashing spreads symbols across
    paths. ``paths`` are round-robin slots; received datagrams report the
    index of the local socket they arrived on.
    """

    def __init__(self, local_ports: Sequence[int], remote_ports: Sequence[int] = (),
                 remote_host: str = "127.0.0.1", bind_host: str = "127.0.0.1",
                 num_paths: Optional[int] = None, rng: Optional[random.Random] = None,
                 rcvbuf: int = 1 << 22, spin: Optional[float] = None):
        if not local_ports:
            raise ValueError("local port pool is empty")
        self.rng = rng or random.Random()
        self.remote_host = remote_host
        self.remote_ports = list(remote_ports)
        self._socks: list[socket.socket] = []
        self._sel = selectors.DefaultSelector()
        for i, port in enumerate(local_ports):
            s = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
            try:
                s.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, rcvbuf)
            except OSError:
                pass
            s.bind((bind_host, port))
            s.setblocking(False)
            self._socks.append(s)
            self._sel.register(s, selectors.EVENT_READ, i)
        self.paths = list(range(num_paths or len(self._socks)))
        # Busy-wait the last stretch of each pacing sleep for precision, but
        # only with a spare CPU: on one core the spin starves a local peer.
        if spin is None:
            spin = 5e-4 if _cpus() > 1 else 0.0
        self.spin = spin

    @property
    def local_ports(self) -> list[int]:
        return [s.getsockname()[1] for s in self._socks]

    def send(self, path, octets: bytes, dest=None) -> None:
        if isinstance(dest, tuple):
            sock = self._socks[path % len(self._socks)]
            sock.sendto(octets, dest)
            return
        if not self.remote_ports:
            raise ValueError("no remote port pool to spray over")
        host = dest or self.remote_host
        sock = self._socks[self.rng.randrange(len(self._socks))]
        sock.sendto(octets, (host, self.remote_ports[self.rng.randrange(len(self.remote_ports))]))

    def receive(self, timeout: float = 0.0):
        for i, s in enumerate(self._socks):
            try:
                data, addr = s.recvfrom(65535)
                return data, i, addr
            except BlockingIOError:
                continue
        if timeout <= 0:
            return None
        for key, _ in self._sel.select(timeout):
            try:
                data, addr = key.fileobj.recvfrom(65535)
                return data, key.data, addr
            except BlockingIOError:
                continue
        return None

    def now(self) -> float:
        return time.perf_counter()

    def sleep_until(self, t: float) -> None:
        remaining = t - time.perf_counter()
        if remaining > self.spin:
            time.sleep(remaining - self.spin * 0.6)
        while time.perf_counter() < t:
            time.sleep(0)

    def close(self) -> None:
        self._sel.close()
        for s in self._socks:
            s.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def socket_channel(local_port_pool: Sequence[int], remote_port_pool: Sequence[int],
                   **kwargs) -> SocketChannel:
    return SocketChannel(local_port_pool, remote_port_pool, **kwargs)


class LossyChannel:
    """Drops a seeded random share of outgoing datagrams of the given types."""

    def __init__(self, inner, drop_rate: float, seed: int = 0,
                 types: Sequence[PacketType] = (PacketType.DATA,)):
        self.inner = inner
        self.drop_rate = drop_rate
        self.rng = random.Random(seed)
        self.types = set(types)
        self.dropped = 0
        self.sent = 0

    @property
    def paths(self):
        return self.inner.paths

    def send(self, path, octets: bytes, dest=None) -> None:
        if peek_type(octets) in self.types and self.rng.random() < self.drop_rate:
            self.dropped += 1
            return
        self.sent += 1
        self.inner.send(path, octets, dest)

    def receive(self, timeout: float = 0.0):
        return self.inner.receive(timeout)

    def now(self) -> float:
        return self.inner.now()

    def sleep_until(self, t: float) -> None:
        self.inner.sleep_until(t)


# -- blocking drivers -------------------------------------------------------------


@dataclass
class SendResult:
    ok: bool
    reason: Optional[str] = None
    symbols_sent: int = 0
    rounds: int = 0
    elapsed: float = 0.0
    feedback_requests: int = 0
    round_times: list[float] = field(default_factory=list)

    def __bool__(self):
        return self.ok


def _drain(channel, session: SenderSession) -> None:
    while True:
        dg = channel.receive(0.0)
        if dg is None:
            return
        session.handle(dg[0])


def cbrst_send(channel, receiver_addr, message: bytes, timeout: Optional[float] = None,
               ratio: Optional[float] = None, *, config: Optional[TransportConfig] = None,
               message_id: int = 0, rng: Optional[random.Random] = None,
               record_rounds: bool = False) -> SendResult:
    """Send one message, bursting a symbol per path per round until STOP."""
    cfg = config or TransportConfig()
    if ratio is not None or timeout is not None:
        cfg = TransportConfig(**{**cfg.__dict__,
                                 "r": cfg.r if ratio is None else ratio,
                                 "timeout": cfg.timeout if timeout is None else timeout})
    if not message or len(message) > cfg.budget.max_message_bytes:
        return SendResult(False, "oversize")
    paths = list(channel.paths)
    if not paths:
        return SendResult(False, "no-paths")
    session = SenderSession(message, message_id, len(paths), cfg, rng)
    delay = session.inter_round_delay
    start = channel.now()
    deadline = start + cfg.timeout
    rounds: list[float] = []
    i = 0
    try:
        while True:
            i += 1
            channel.sleep_until(start + i * delay)
            _drain(channel, session)
            if session.state is SessionState.DONE:
                break
            if record_rounds:
                rounds.append(channel.now())
            session.rounds += 1
            for path in paths:
                channel.send(path, session.data_datagram(), receiver_addr)
                if channel.now() >= deadline:
                    session.fail("timeout")
                    break
            if session.state is SessionState.FAILED:
                break
            req = session.poll_feedback()
            if req is not None:
                for path in paths:
                    channel.send(path, req, receiver_addr)
    except OSError as exc:
        log.warning("channel I/O failed: %s", exc)
        session.fail("io")
    ok = session.state is SessionState.DONE
    return SendResult(ok, None if ok else session.failure, session.symbols_sent,
                      session.rounds, channel.now() - start, session.feedback_requests, rounds)


def receiver_poll(endpoint: ReceiverEndpoint, channel, timeout: float = 0.0,
                  source_key=None) -> list[DeliveredMessage]:
    """Drain the channel once, answering STOP/FEEDBACK on every path.

    ``source_key`` maps a datagram's source address to the decoder key; by
    default the sending host (ports vary per symbol) is used.
    """
    key_of = source_key or (lambda addr: addr[0] if isinstance(addr, tuple) else addr)
    delivered: list[DeliveredMessage] = []
    wait = timeout
    while True:
        dg = channel.receive(wait)
        wait = 0.0
        if dg is None:
            break
        octets, _path, addr = dg
        out = endpoint.on_datagram(octets, key_of(addr), channel.now())
        delivered.extend(out.delivered)
        for reply in out.replies:
            for path in channel.paths:
                channel.send(path, reply, addr)
    endpoint.expire(channel.now())
    return delivered
