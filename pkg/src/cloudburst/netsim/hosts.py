"""Bindings between the transport state machines and the simulated fabric."""

from __future__ import annotations

import random
from collections import deque
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Optional

from ..ltcodec import OversizeMessage
from ..transport import (
    MessageIdAllocator,
    ReceiverEndpoint,
    SenderSession,
    SessionState,
    TransportConfig,
    peek_type,
)
from ..wire import UDP_HEADER, IP_HEADER, CbrstHeader, PacketType, serialize
from .core import CLOUDBURST, CONTROL, Network, Packet, flow_hash
from .topology import PS_PER_S, CodecCosts, ps

PROTO = "cbrst"
L3L4 = IP_HEADER + UDP_HEADER
REQUEST_BYTES = 1500


def datagram_packet(octets: bytes, src: int, dst: int, path: Optional[int], meta=None) -> Packet:
    cls = CLOUDBURST if peek_type(octets) == PacketType.DATA else CONTROL
    # distinct per-packet hash so ECMP fallback behaves like the port pool
    return Packet(cls, len(octets) + L3L4, src, dst, PROTO, (octets, meta), path,
                  flow_hash(src, dst, len(octets), path or 0))


class SimChannel:
    """MultipathChannel over the simulator; path p forces spine p.

    Blocking calls (``sleep_until``, ``receive`` with a timeout) advance the
    shared event loop, so the blocking drivers in ``transport`` run unchanged
    against simulated time.
    """

    def __init__(self, net: Network, host: int, path_ids: list, peer: Optional[int] = None):
        self.net = net
        self.host = host
        self.paths = list(path_ids)
        self.peer = peer
        self.inbox: deque = deque()
        self.sent = 0
        net.register(host, PROTO, self._arrive)

    def _arrive(self, pkt: Packet) -> None:
        self.inbox.append((pkt.data[0], pkt.path, pkt.src))

    def send(self, path, octets: bytes, dest=None) -> None:
        dst = self.peer if dest is None else dest
        self.sent += 1
        self.net.inject(self.host, datagram_packet(octets, self.host, dst, path))

    def receive(self, timeout: float = 0.0):
        if not self.inbox and timeout > 0:
            self.net.run(self.net.now + ps(timeout), stop=lambda: bool(self.inbox))
        return self.inbox.popleft() if self.inbox else None

    def now(self) -> float:
        return self.net.now / PS_PER_S

    def sleep_until(self, t: float) -> None:
        target = ps(t)
        if target > self.net.now:
            self.net.run(target)


def sim_channel(net: Network, host: int, path_ids: list, peer: Optional[int] = None) -> SimChannel:
    return SimChannel(net, host, path_ids, peer)


class EndpointAgent:
    """Runs a ReceiverEndpoint on a host, answering on every live path."""

    def __init__(self, net: Network, host: int, endpoint: ReceiverEndpoint,
                 on_delivered: Optional[Callable] = None):
        self.net = net
        self.host = host
        self.endpoint = endpoint
        self.on_delivered = on_delivered
        self.delivered = []
        self._last_expire = 0
        self._expire_every = ps(endpoint.config.decoder_idle_timeout) // 2
        net.register(host, PROTO, self._arrive)

    def _arrive(self, pkt: Packet) -> None:
        now = self.net.now
        if now - self._last_expire >= self._expire_every:
            self._last_expire = now
            self.endpoint.expire(now / PS_PER_S)
        out = self.endpoint.on_datagram(pkt.data[0], pkt.src, now / PS_PER_S)
        for d in out.delivered:
            self.delivered.append(d)
            if self.on_delivered:
                self.on_delivered(d, now)
        for reply in out.replies:
            for p in self.net.live_paths(self.host, pkt.src):
                self.net.inject(self.host, datagram_packet(reply, self.host, pkt.src, p))


def attach_transport(net: Network, host: int, receiver: Optional[ReceiverEndpoint] = None,
                     path_ids: Optional[list] = None, peer: Optional[int] = None):
    """Bind a receiver endpoint (event driven) or a sender channel to ``host``."""
    if receiver is not None:
        return EndpointAgent(net, host, receiver)
    if path_ids is None:
        path_ids = net.live_paths(host, peer) if peer is not None else list(range(net.topo.spines))
    return SimChannel(net, host, path_ids, peer)


@dataclass
class _Outbound:
    session: SenderSession
    dst: int
    uid: int
    paths: list
    t0: int
    step: Fraction  # ps per round
    deadline: int
    round: int = 0


class CloudBurstHost:
    """Event-driven CloudBurst sender and receiver for one simulated host.

    Encode and decode latency are charged from ``costs``: the first round
    leaves after the encode time, and a completed message is handed to the
    application after the decode time.
    """

    def __init__(self, net: Network, host: int, config: TransportConfig, costs: CodecCosts,
                 rng: random.Random, multipath: bool = True,
                 on_delivered: Optional[Callable] = None,
                 on_request: Optional[Callable] = None,
                 on_sender_done: Optional[Callable] = None):
        self.net = net
        self.host = host
        self.config = config
        self.costs = costs
        self.rng = rng
        self.multipath = multipath
        self.endpoint = ReceiverEndpoint(config)
        self.ids = MessageIdAllocator(2 * config.decoder_idle_timeout)
        self.sessions: dict[tuple[int, int], _Outbound] = {}
        self.on_delivered = on_delivered
        self.on_request = on_request
        self.on_sender_done = on_sender_done
        self._seen_requests: set = set()
        self._last_expire = 0
        self._expire_every = ps(config.decoder_idle_timeout) // 2
        self.refused = 0
        net.register(host, PROTO, self._arrive)

    # -- sending ----------------------------------------------------------------------

    def paths_to(self, dst: int) -> list:
        live = self.net.live_paths(self.host, dst)
        if not live or self.multipath:
            return live
        return [self.rng.choice(live)]

    def send_message(self, dst: int, data: bytes, uid: int) -> Optional[str]:
        """Start bursting ``data`` to ``dst``; returns a failure reason or None."""
        now = self.net.now
        paths = self.paths_to(dst)
        if not paths:
            return "no-paths"
        mid = self.ids.allocate(dst, now / PS_PER_S)
        if mid is None:
            self.refused += 1
            return "no-id"
        try:
            sess = SenderSession(data, mid, len(paths), self.config, self.rng)
        except OversizeMessage:
            self.ids.release(dst, mid, now / PS_PER_S)
            return "oversize"
        ob = _Outbound(sess, dst, uid, paths, now + self.costs.encode_ps(sess.k),
                       sess.pacing * PS_PER_S, now + ps(self.config.timeout))
        self.sessions[(dst, mid)] = ob
        self.net.schedule(self._round_time(ob, 1), self._round, ob)
        return None

    @staticmethod
    def _round_time(ob: _Outbound, i: int) -> int:
        return ob.t0 + int(i * ob.step)

    def _round(self, ob: _Outbound) -> None:
        sess = ob.session
        if sess.state is not SessionState.BURSTING:
            return
        net = self.net
        ob.round += 1
        sess.rounds += 1
        for p in ob.paths:
            net.inject(self.host, datagram_packet(sess.data_datagram(), self.host, ob.dst, p, ob.uid))
        if net.now >= ob.deadline:
            sess.fail("timeout")
            self._finish(ob)
            return
        req = sess.poll_feedback()
        if req is not None:
            for p in ob.paths:
                net.inject(self.host, datagram_packet(req, self.host, ob.dst, p, ob.uid))
        net.schedule(self._round_time(ob, ob.round + 1), self._round, ob)

    def _finish(self, ob: _Outbound) -> None:
        key = (ob.dst, ob.session.message_id)
        if self.sessions.get(key) is ob:
            del self.sessions[key]
        self.ids.release(ob.dst, ob.session.message_id, self.net.now / PS_PER_S)
        if self.on_sender_done:
            self.on_sender_done(ob)

    def send_request(self, dst: int, size: int, uid: int) -> None:
        head = CbrstHeader(PacketType.REQUEST, uid & 0xFF, 0, size)
        pad = REQUEST_BYTES - L3L4 - self.config.budget.h_cbrst
        octets = serialize(head, bytes(max(0, pad)), self.config.x)
        for p in self.net.live_paths(self.host, dst):
            self.net.inject(self.host, datagram_packet(octets, self.host, dst, p, uid))

    # -- receiving --------------------------------------------------------------------

    def _arrive(self, pkt: Packet) -> None:
        octets, uid = pkt.data
        ptype = peek_type(octets)
        now = self.net.now
        if ptype in (PacketType.STOP, PacketType.FEEDBACK):
            ob = self.sessions.get((pkt.src, octets[1]))
            if ob is not None and ob.uid == uid:
                ob.session.handle(octets)
                if ob.session.state is SessionState.DONE:
                    self._finish(ob)
            return
        out = self.endpoint.on_datagram(octets, pkt.src, now / PS_PER_S)
        for d in out.delivered:
            if self.on_delivered:
                k = -(-len(d.data) // self.config.budget.payload_len)
                self.on_delivered(uid, d, now + self.costs.decode_ps(k))
        for reply in out.replies:
            for p in self.net.live_paths(self.host, pkt.src):
                self.net.inject(self.host, datagram_packet(reply, self.host, pkt.src, p, uid))
        if out.requests:
            self.endpoint.pending_requests.clear()
        for req in out.requests:
            if uid in self._seen_requests:
                continue
            self._seen_requests.add(uid)
            if self.on_request:
                self.on_request(self.host, pkt.src, req.size, uid)
        if now - self._last_expire >= self._expire_every:
            self._last_expire = now
            self.endpoint.expire(now / PS_PER_S)
