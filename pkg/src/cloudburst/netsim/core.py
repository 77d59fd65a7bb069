"""Event loop, switch ports and routing for the leaf-spine fabric.

Time is an integer count of picoseconds so that pacing and serialization
arithmetic is exact and runs are bit-reproducible.
"""

from __future__ import annotations

import heapq
from heapq import heappush
import itertools
import random
import struct
import zlib
from collections import deque
from typing import Callable, Optional

from .topology import ConfigError, FailureSpec, SwitchConfig, Topology, ps

CLOUDBURST, BACKGROUND, CONTROL = 0, 1, 2
CLASS_NAMES = ("cloudburst", "background", "control")

QUEUED, MARKED, DROPPED = 0, 1, 2

BG_Q, CB_Q = 0, 1

_FLOW = struct.Struct(">IIHHB")


def flow_hash(src: int, dst: int, sport: int, dport: int, proto: int = 17) -> int:
    return zlib.crc32(_FLOW.pack(src, dst, sport & 0xFFFF, dport & 0xFFFF, proto))


class Packet:
    __slots__ = ("cls", "size", "src", "dst", "fhash", "path", "ect", "ce", "proto", "data",
                 "born", "t_enq")

    def __init__(self, cls: int, size: int, src: int, dst: int, proto: str, data=None,
                 path: Optional[int] = None, fhash: int = 0, ect: bool = False):
        self.cls = cls
        self.size = size
        self.src = src
        self.dst = dst
        self.proto = proto
        self.data = data
        self.path = path
        self.fhash = fhash
        self.ect = ect
        self.ce = False
        self.born = 0
        self.t_enq = 0


class Port:
    """Egress port: a tiny CloudBurst queue and a background queue under DRR.

    Weighted round robin is byte based: each visit credits a queue with
    ``weight * quantum`` bytes. With ``cb_enabled`` off every class shares
    the background FIFO.
    """

    def __init__(self, net: "Network", name: str, rate: float, delay_ps: int,
                 deliver: Callable, cfg: SwitchConfig, host: bool = False):
        self.net = net
        self.name = name
        self.rate = int(rate)
        self.delay = delay_ps
        self.deliver = deliver
        # host NICs always isolate classes (qdisc level); the scheme toggle is for switches
        self.cb_enabled = True if host else cfg.cb_queue_enabled
        cb_cap = cfg.host_cb_queue_packets if host and cfg.host_cb_queue_packets else cfg.cb_queue_packets
        bg_cap = cfg.host_bg_queue_bytes if host and cfg.host_bg_queue_bytes else cfg.bg_queue_bytes
        self.host = host
        self.cb_cap = cb_cap
        self.bg_cap = bg_cap
        self.ecn_k = cfg.ecn_k_packets
        self.quantum = (cfg.quantum_bytes * cfg.w_bg, cfg.quantum_bytes * cfg.w_cb)
        self.queues = (deque(), deque())
        self.qbytes = [0, 0]
        self.deficit = [0, 0]
        self.turn = BG_Q
        self.granted = False
        self.busy = False
        self.busy_until = 0
        self.wake = False
        self._tx_cache: dict[int, int] = {}
        self.up = True
        # per class: enqueued, dropped, marked
        self.stats = [[0, 0, 0] for _ in CLASS_NAMES]
        self.max_cb_qdelay = 0
        self.sent_bytes = [0, 0, 0]

    def tx_ps(self, size: int) -> int:
        return (size * 8 * 10**12 + self.rate // 2) // self.rate

    def set_rate(self, rate: float) -> None:
        self.rate = int(rate)
        self._tx_cache.clear()

    def enqueue(self, pkt: Packet) -> int:
        st = self.stats[pkt.cls]
        if not self.up:
            st[1] += 1
            self.net._drop(pkt, "link_down")
            return DROPPED
        status = QUEUED
        if pkt.cls != BACKGROUND and self.cb_enabled:
            q = self.queues[CB_Q]
            # a host never tail-drops its own control packets
            if len(q) >= self.cb_cap and not (self.host and pkt.cls == CONTROL):
                st[1] += 1
                self.net._drop(pkt, "cb_tail")
                return DROPPED
            qi = CB_Q
        else:
            q = self.queues[BG_Q]
            if self.qbytes[BG_Q] + pkt.size > self.bg_cap:
                st[1] += 1
                self.net._drop(pkt, "bg_tail")
                return DROPPED
            if pkt.ect and len(q) >= self.ecn_k:
                pkt.ce = True
                st[2] += 1
                status = MARKED
            qi = BG_Q
        st[0] += 1
        pkt.t_enq = self.net.now
        q.append(pkt)
        self.qbytes[qi] += pkt.size
        if not self.busy:
            self._start()
        elif not self.wake:
            if self.busy_until <= self.net.now:
                self._start()
            else:
                self.wake = True
                self.net.schedule_first(self.busy_until, self._start)
        return status

    def wrr_dequeue(self) -> Optional[Packet]:
        queues = self.queues
        if not queues[CB_Q]:
            self.deficit[CB_Q] = 0
            if not queues[BG_Q]:
                return None
            self.deficit[BG_Q] = 0
            qi = BG_Q
        elif not queues[BG_Q]:
            self.deficit[BG_Q] = 0
            self.deficit[CB_Q] = 0
            qi = CB_Q
        else:
            while True:
                t = self.turn
                if not self.granted:
                    self.deficit[t] += self.quantum[t]
                    self.granted = True
                if queues[t][0].size <= self.deficit[t]:
                    self.deficit[t] -= queues[t][0].size
                    qi = t
                    break
                self.turn = t ^ 1
                self.granted = False
        pkt = queues[qi].popleft()
        self.qbytes[qi] -= pkt.size
        return pkt

    def _start(self) -> None:
        self.wake = False
        pkt = self.wrr_dequeue()
        if pkt is None:
            self.busy = False
            return
        self.busy = True
        net = self.net
        now = net.now
        cls = pkt.cls
        if cls != BACKGROUND:
            wait = now - pkt.t_enq
            if wait > self.max_cb_qdelay:
                self.max_cb_qdelay = wait
        net.transit[cls] += 1
        size = pkt.size
        self.sent_bytes[cls] += size
        tx = self._tx_cache.get(size)
        if tx is None:
            tx = self._tx_cache[size] = self.tx_ps(size)
        done = now + tx
        heap = net._heap
        heappush(heap, (done + self.delay, 1, next(net._seq), self.deliver, (pkt,)))
        self.busy_until = done
        # the next dequeue needs an event only if something is waiting
        if self.queues[0] or self.queues[1]:
            self.wake = True
            heappush(heap, (done, 0, next(net._seq), self._start, ()))

    def flush(self) -> None:
        for qi in (BG_Q, CB_Q):
            q = self.queues[qi]
            while q:
                pkt = q.popleft()
                self.stats[pkt.cls][1] += 1
                self.net._drop(pkt, "link_down")
            self.qbytes[qi] = 0

    def queued(self, cls: int) -> int:
        return sum(1 for q in self.queues for p in q if p.cls == cls)


class Network:
    def __init__(self, topology: Topology, switch: Optional[SwitchConfig] = None, seed: int = 0):
        self.topo = topology
        self.cfg = switch or SwitchConfig()
        self.rng = random.Random(seed)
        self.now = 0
        self._heap: list = []
        self._seq = itertools.count()
        self.injected = [0, 0, 0]
        self.delivered = [0, 0, 0]
        self.dropped = [0, 0, 0]
        self.transit = [0, 0, 0]
        self.drop_reasons: dict[str, int] = {}
        self.handlers: list[dict[str, Callable]] = [dict() for _ in range(topology.hosts)]
        self._build()

    # -- construction -----------------------------------------------------------------

    def _build(self) -> None:
        t, cfg = self.topo, self.cfg
        self.leaf_of = [t.leaf_of(h) for h in range(t.hosts)]
        ed, cd = ps(t.edge_delay), ps(t.core_delay)
        self.host_up = [
            Port(self, f"h{h}->l{self.leaf_of[h]}", t.edge_rate, ed,
                 self._leaf_arrival(self.leaf_of[h]), cfg, host=True)
            for h in range(t.hosts)
        ]
        self.leaf_down = [
            {h: Port(self, f"l{l}->h{h}", t.edge_rate, ed, self._host_arrival(h), cfg)
             for h in t.rack(l)}
            for l in range(t.leaves)
        ]
        self.leaf_up = [
            [Port(self, f"l{l}->s{s}", t.core_rate, cd, self._spine_arrival(s), cfg)
             for s in range(t.spines)]
            for l in range(t.leaves)
        ]
        self.spine_down = [
            [Port(self, f"s{s}->l{l}", t.core_rate, cd, self._leaf_arrival(l), cfg)
             for l in range(t.leaves)]
            for s in range(t.spines)
        ]
        self._salts = [struct.pack(">I", 0x9E3779B9 * (l + 1) & 0xFFFFFFFF)
                       for l in range(t.leaves)]

    def ports(self) -> list[Port]:
        out = list(self.host_up)
        for l in range(self.topo.leaves):
            out.extend(self.leaf_down[l].values())
            out.extend(self.leaf_up[l])
        for s in range(self.topo.spines):
            out.extend(self.spine_down[s])
        return out

    def _leaf_arrival(self, leaf: int):
        def arrive(pkt: Packet) -> None:
            self.transit[pkt.cls] -= 1
            self._at_leaf(leaf, pkt)
        return arrive

    def _spine_arrival(self, spine: int):
        def arrive(pkt: Packet) -> None:
            self.transit[pkt.cls] -= 1
            port = self.spine_down[spine][self.leaf_of[pkt.dst]]
            port.enqueue(pkt)
        return arrive

    def _host_arrival(self, host: int):
        def arrive(pkt: Packet) -> None:
            self.transit[pkt.cls] -= 1
            self.delivered[pkt.cls] += 1
            handler = self.handlers[host].get(pkt.proto)
            if handler is not None:
                handler(pkt)
        return arrive

    # -- event loop -------------------------------------------------------------------

    def schedule(self, t: int, fn: Callable, *args) -> None:
        heappush(self._heap, (t, 1, next(self._seq), fn, args))

    def schedule_first(self, t: int, fn: Callable, *args) -> None:
        """Like ``schedule`` but ahead of ordinary events due at the same instant."""
        heappush(self._heap, (t, 0, next(self._seq), fn, args))

    def run(self, until: Optional[int] = None, stop: Optional[Callable[[], bool]] = None) -> None:
        """Process events up to ``until`` ps (or until the heap drains).

        ``stop`` is polled after every event and ends the run early when true.
        """
        heap = self._heap
        pop = heapq.heappop
        if stop is not None:
            while heap and (until is None or heap[0][0] <= until):
                t, _, _, fn, args = pop(heap)
                self.now = t
                fn(*args)
                if stop():
                    return
            if until is not None and until > self.now:
                self.now = until
            return
        if until is None:
            while heap:
                t, _, _, fn, args = pop(heap)
                self.now = t
                fn(*args)
            return
        while heap and heap[0][0] <= until:
            t, _, _, fn, args = pop(heap)
            self.now = t
            fn(*args)
        if until > self.now:
            self.now = until

    def pending_events(self) -> int:
        return len(self._heap)

    # -- routing ----------------------------------------------------------------------

    def register(self, host: int, proto: str, handler: Callable) -> None:
        self.handlers[host][proto] = handler

    def inject(self, host: int, pkt: Packet) -> int:
        if not 0 <= pkt.dst < self.topo.hosts:
            raise ConfigError(f"no such host {pkt.dst}")
        pkt.born = self.now
        self.injected[pkt.cls] += 1
        return self.host_up[host].enqueue(pkt)

    def _drop(self, pkt: Packet, reason: str) -> None:
        self.dropped[pkt.cls] += 1
        self.drop_reasons[reason] = self.drop_reasons.get(reason, 0) + 1

    def _path_up(self, src_leaf: int, dst_leaf: int, spine: int) -> bool:
        return self.leaf_up[src_leaf][spine].up and self.spine_down[spine][dst_leaf].up

    def live_paths(self, src: int, dst: int) -> list[Optional[int]]:
        """Spine ids usable from src to dst; ``[None]`` inside one rack."""
        ls, ld = self.leaf_of[src], self.leaf_of[dst]
        if ls == ld:
            return [None]
        return [s for s in range(self.topo.spines) if self._path_up(ls, ld, s)]

    def ecmp_route(self, pkt: Packet, leaf: int) -> Optional[int]:
        """Spine chosen by hashing the flow tuple with a per-switch salt."""
        ld = self.leaf_of[pkt.dst]
        cands = [s for s in range(self.topo.spines) if self._path_up(leaf, ld, s)]
        if not cands:
            return None
        return cands[zlib.crc32(self._salts[leaf], pkt.fhash) % len(cands)]

    def explicit_route(self, pkt: Packet, leaf: int) -> Optional[int]:
        s = pkt.path
        if s is None or not 0 <= s < self.topo.spines:
            return None
        if not self._path_up(leaf, self.leaf_of[pkt.dst], s):
            return None
        return s

    def _at_leaf(self, leaf: int, pkt: Packet) -> None:
        dst_leaf = self.leaf_of[pkt.dst]
        if dst_leaf == leaf:
            self.leaf_down[leaf][pkt.dst].enqueue(pkt)
            return
        if pkt.path is not None:
            s = self.explicit_route(pkt, leaf)
        else:
            s = self.ecmp_route(pkt, leaf)
        if s is None:
            self.leaf_up[leaf][0].stats[pkt.cls][1] += 1
            self._drop(pkt, "route_down")
            return
        self.leaf_up[leaf][s].enqueue(pkt)

    # -- failures ---------------------------------------------------------------------

    def core_ports(self, leaf: int, spine: int) -> tuple[Port, Port]:
        if not (0 <= leaf < self.topo.leaves and 0 <= spine < self.topo.spines):
            raise ConfigError(f"no core link leaf {leaf} <-> spine {spine}")
        return self.leaf_up[leaf][spine], self.spine_down[spine][leaf]

    def apply_failure(self, f: FailureSpec) -> None:
        ports = self.core_ports(f.leaf, f.spine)

        def activate():
            for p in ports:
                if f.kind == "link_down":
                    p.up = False
                    p.flush()
                else:
                    p.set_rate(f.rate)

        self.schedule(ps(f.at), activate)

    # -- accounting -------------------------------------------------------------------

    def in_network(self, cls: int) -> int:
        return sum(p.queued(cls) for p in self.ports()) + self.transit[cls]

    def port_rows(self) -> list[dict]:
        rows = []
        for p in self.ports():
            for c, name in enumerate(CLASS_NAMES):
                enq, drop, mark = p.stats[c]
                if enq or drop or mark:
                    rows.append({
                        "port": p.name, "class": name, "enqueued": enq, "dropped": drop,
                        "marked": mark,
                        "max_queue_delay_us": f"{p.max_cb_qdelay / 1e6:.6f}" if c != BACKGROUND else "",
                    })
        return rows
