"""A deliberately small DCTCP: enough to build queues, react to ECN and time out.

No SACK and no delayed ACKs. Loss recovery is fast retransmit on three
duplicate ACKs with NewReno-style partial-ACK retransmission, and go-back-N
after a retransmission timeout.
"""

from __future__ import annotations

import itertools
from typing import Callable, Optional

from .core import BACKGROUND, Network, Packet, flow_hash
from .topology import ps

MSS = 1460
HEADER = 40
ACK_SIZE = 64
PROTO = "tcp"

_DATA, _ACK = 0, 1


class DctcpFlow:
    def __init__(self, stack: "TcpStack", fid: int, src: int, dst: int, size: int,
                 path: Optional[int], on_done: Optional[Callable] = None, kind: str = "flow"):
        self.stack = stack
        self.net = stack.net
        self.fid = fid
        self.src = src
        self.dst = dst
        self.size = size
        self.kind = kind
        self.path = path
        self.on_done = on_done
        self.on_delivered: Optional[Callable] = None
        self.fhash = flow_hash(src, dst, 1024 + fid % 50000, 5001, 6)
        self.npkts = max(1, -(-size // MSS))
        p = stack.params
        self.g = p["g"]
        self.rto_min = ps(p["rto_min"])
        self.rto_max = ps(p["rto_max"])
        self.cwnd = float(p["init_cwnd"])
        self.ssthresh = float("inf")
        self.alpha = 1.0
        self.snd_una = 0
        self.snd_nxt = 0
        self.high_tx = 0
        self.dupacks = 0
        self.recover = -1
        self.in_recovery = False
        self.win_end = 0
        self.win_acked = 0
        self.win_marked = 0
        self.srtt: Optional[int] = None
        self.rttvar = 0
        self.rto = self.rto_min
        self.rto_deadline: Optional[int] = None
        self._timer_armed = False
        self.timeouts = 0
        self.retransmits = 0
        self.reductions = 0
        self.started = self.net.now
        self.finished: Optional[int] = None
        # receiver side
        self.rcv_nxt = 0
        self.ooo: set[int] = set()
        self.rcv_bytes = 0

    # -- sender -----------------------------------------------------------------------

    def start(self) -> None:
        self.started = self.net.now
        self._fill()

    def _seg_len(self, seq: int) -> int:
        if seq == self.npkts - 1:
            return self.size - MSS * (self.npkts - 1) if self.size else 1
        return MSS

    def _xmit(self, seq: int) -> None:
        pkt = Packet(BACKGROUND, self._seg_len(seq) + HEADER, self.src, self.dst, PROTO,
                     (self.fid, _DATA, seq, False, self.net.now), self.path, self.fhash, ect=True)
        self.net.inject(self.src, pkt)
        if seq < self.high_tx:
            self.retransmits += 1
        else:
            self.high_tx = seq + 1
        if self.rto_deadline is None:
            self._arm()

    def _fill(self) -> None:
        limit = min(self.npkts, self.snd_una + max(1, int(self.cwnd)))
        while self.snd_nxt < limit:
            self._xmit(self.snd_nxt)
            self.snd_nxt += 1

    def _arm(self) -> None:
        self.rto_deadline = self.net.now + self.rto
        if not self._timer_armed:
            self._timer_armed = True
            self.net.schedule(self.rto_deadline, self._on_timer)

    def _on_timer(self) -> None:
        self._timer_armed = False
        if self.rto_deadline is None or self.finished is not None:
            return
        if self.net.now < self.rto_deadline:
            self._timer_armed = True
            self.net.schedule(self.rto_deadline, self._on_timer)
            return
        self.timeouts += 1
        if self.path is not None:
            live = self.net.live_paths(self.src, self.dst)
            if live and self.path not in live:
                self.path = live[self.fhash % len(live)]
        self.ssthresh = max(self.cwnd / 2, 2.0)
        self.cwnd = 1.0
        self.in_recovery = False
        self.dupacks = 0
        self.snd_nxt = self.snd_una
        self.win_end = self.snd_una
        self.rto = min(self.rto * 2, self.rto_max)
        self.rto_deadline = None
        self._fill()

    def _rtt_sample(self, sent_at: int) -> None:
        r = self.net.now - sent_at
        if self.srtt is None:
            self.srtt, self.rttvar = r, r // 2
        else:
            self.rttvar = (3 * self.rttvar + abs(self.srtt - r)) // 4
            self.srtt = (7 * self.srtt + r) // 8
        self.rto = min(max(self.rto_min, self.srtt + 4 * self.rttvar), self.rto_max)

    def _on_ack(self, ack: int, ece: bool, echo: int) -> None:
        if self.finished is not None:
            return
        if ack > self.snd_una:
            newly = ack - self.snd_una
            self.snd_una = ack
            if self.snd_nxt < ack:
                self.snd_nxt = ack
            self._rtt_sample(echo)
            self.dupacks = 0
            self.win_acked += newly
            if ece:
                self.win_marked += newly
            if self.in_recovery:
                if ack >= self.recover:
                    self.in_recovery = False
                    self.cwnd = self.ssthresh
                else:
                    self._xmit(self.snd_una)
            elif self.cwnd < self.ssthresh:
                self.cwnd += newly
            else:
                self.cwnd += newly / self.cwnd
            if ack >= self.win_end:
                frac = self.win_marked / self.win_acked if self.win_acked else 0.0
                self.alpha = (1 - self.g) * self.alpha + self.g * frac
                if self.win_marked and not self.in_recovery:
                    self.cwnd = max(1.0, self.cwnd * (1 - self.alpha / 2))
                    self.ssthresh = max(self.cwnd, 2.0)
                    self.reductions += 1
                self.win_acked = self.win_marked = 0
                self.win_end = self.snd_nxt
            if ack >= self.npkts:
                self.finished = self.net.now
                self.rto_deadline = None
                if self.on_done is not None:
                    self.on_done(self)
                return
            self.rto_deadline = None
            if self.snd_una < self.snd_nxt:
                self._arm()
        elif ack == self.snd_una and self.snd_nxt > self.snd_una:
            if ece:
                self.win_marked += 1
            self.dupacks += 1
            if self.dupacks == 3 and not self.in_recovery:
                self.ssthresh = max(self.cwnd / 2, 2.0)
                self.cwnd = self.ssthresh
                self.recover = self.snd_nxt
                self.in_recovery = True
                self._xmit(self.snd_una)
        self._fill()

    # -- receiver ---------------------------------------------------------------------

    def _on_data(self, pkt: Packet) -> None:
        _, _, seq, _, sent_at = pkt.data
        if seq == self.rcv_nxt:
            self.rcv_nxt += 1
            self.rcv_bytes += self._seg_len(seq)
            while self.rcv_nxt in self.ooo:
                self.ooo.discard(self.rcv_nxt)
                self.rcv_bytes += self._seg_len(self.rcv_nxt)
                self.rcv_nxt += 1
            if self.rcv_nxt == self.npkts and self.on_delivered is not None:
                self.on_delivered(self)
                self.on_delivered = None
        elif seq > self.rcv_nxt:
            self.ooo.add(seq)
        ack = Packet(BACKGROUND, ACK_SIZE, self.dst, self.src, PROTO,
                     (self.fid, _ACK, self.rcv_nxt, pkt.ce, sent_at), self.path,
                     self.fhash ^ 0x5A5A5A5A)
        self.net.inject(self.dst, ack)

    @property
    def fct(self) -> Optional[int]:
        return None if self.finished is None else self.finished - self.started


class TcpStack:
    """Demultiplexes TCP segments to flows on every host of a network."""

    DEFAULTS = {"g": 1 / 16, "rto_min": 0.010, "rto_max": 1.0, "init_cwnd": 10}

    def __init__(self, net: Network, **params):
        unknown = set(params) - set(self.DEFAULTS)
        if unknown:
            raise ValueError(f"unknown DCTCP parameters {sorted(unknown)}")
        self.net = net
        self.params = {**self.DEFAULTS, **params}
        self.flows: dict[int, DctcpFlow] = {}
        self._ids = itertools.count()
        for h in range(net.topo.hosts):
            net.register(h, PROTO, self._recv)

    def _recv(self, pkt: Packet) -> None:
        fid, kind, seq, ece, echo = pkt.data
        flow = self.flows.get(fid)
        if flow is None:
            return
        if kind == _DATA:
            flow._on_data(pkt)
        else:
            flow._on_ack(seq, ece, echo)

    def open(self, src: int, dst: int, size: int, path: Optional[int] = None,
             on_done: Optional[Callable] = None, kind: str = "flow", start: bool = True) -> DctcpFlow:
        fid = next(self._ids)
        flow = DctcpFlow(self, fid, src, dst, size, path, on_done, kind)
        self.flows[fid] = flow
        if start:
            flow.start()
        return flow

    def close(self, flow: DctcpFlow) -> None:
        self.flows.pop(flow.fid, None)
