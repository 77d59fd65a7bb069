"""Workloads, ablation schemes and the top-level ``run``."""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Optional, Sequence

from ..transport import TransportConfig
from .core import CLASS_NAMES, Network
from .dctcp import TcpStack
from .hosts import CloudBurstHost
from .topology import PS_PER_S, CodecCosts, ConfigError, FailureSpec, SwitchConfig, Topology, ps
from .trace import MessageRecord, ThroughputSample, TraceLog

DEFAULT_SIZES = (5_000, 10_000, 20_000, 50_000, 93_000)
PATTERNS = ("none", "all_to_all", "front_back", "incast")


@dataclass
class WorkloadSpec:
    pattern: str = "all_to_all"
    rate: float = 0.0  # requests per second per requesting server
    sizes: Sequence[int] = DEFAULT_SIZES
    incast_n: int = 0
    incast_size: int = 90_000
    incast_senders: int = 4
    fanout: int = 1  # responses per request (front_back friendliness runs)

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise ConfigError(f"unknown workload pattern {self.pattern!r}")
        if self.rate < 0:
            raise ConfigError("workload.rate must be >= 0")
        if not self.sizes or min(self.sizes) < 1:
            raise ConfigError("workload.sizes must be positive")
        if self.fanout < 1:
            raise ConfigError("workload.fanout must be >= 1")


@dataclass
class SchemeSpec:
    """Ablation point: FEC is always on; multipath and the tiny queue toggle.

    Without aggressive dropping the CloudBurst class still has its own
    queue, only a deep one. DCTCP puts every class in one shared FIFO.
    """

    name: str = "D"
    r: Optional[float] = None

    TABLE = {
        # name: (multipath, tiny cloudburst queue, default r)
        "A": (False, False, 1.0),
        "B": (True, False, 1.0),
        "C": (False, True, 1.0),
        "D": (True, True, 1.0),
        "DCTCP": (False, False, 1.0),
    }

    def __post_init__(self):
        if self.name not in self.TABLE:
            raise ConfigError(f"unknown scheme {self.name!r}; expected one of {sorted(self.TABLE)}")
        if self.r is not None and not 0 < self.r <= 1:
            raise ConfigError("scheme.r must be in (0, 1]")

    @property
    def multipath(self) -> bool:
        return self.TABLE[self.name][0]

    @property
    def cb_queue(self) -> bool:
        return self.TABLE[self.name][1]

    def switch_config(self, base: SwitchConfig) -> SwitchConfig:
        kw = dict(base.__dict__)
        if self.is_tcp:
            kw["cb_queue_enabled"] = False
        elif not self.cb_queue:
            kw["cb_queue_packets"] = base.deep_cb_queue_packets
        return SwitchConfig(**kw)

    @property
    def rate_share(self) -> float:
        return self.r if self.r is not None else self.TABLE[self.name][2]

    @property
    def is_tcp(self) -> bool:
        return self.name == "DCTCP"


@dataclass
class BackgroundSpec:
    """Long-lived DCTCP flows, restarted on completion."""

    flows: int = 0
    size: int = 10_000_000
    pairs: Optional[list[tuple[int, int]]] = None  # fixed (src, dst) per flow
    paths: Optional[list[int]] = None  # fixed spine per flow
    ecmp: bool = False

    # Unless fixed, flow i leaves host i of rack 0 toward a random host of
    # another rack on a random spine, both redrawn at every restart.


@dataclass
class _Slot:
    index: int
    src: int
    dst: int
    path: Optional[int]
    delivered: int = 0  # bytes over completed incarnations
    flow: object = None
    last: int = 0


def _arrivals(rng: random.Random, rate: float, duration: float) -> list[float]:
    out, t = [], 0.0
    if rate <= 0:
        return out
    while True:
        t += rng.expovariate(rate)
        if t >= duration:
            return out
        out.append(t)


def poisson_arrivals(rate: float, duration: float, seed: int = 0) -> list[float]:
    """Arrival times of a Poisson process on [0, duration)."""
    return _arrivals(random.Random(seed), rate, duration)


class _Runner:
    def __init__(self, topology: Topology, workload: WorkloadSpec, failures, seed: int,
                 duration: float, scheme: SchemeSpec, switch: Optional[SwitchConfig],
                 transport: Optional[TransportConfig], background: Optional[BackgroundSpec],
                 costs: Optional[CodecCosts], drain: float, throughput_window: Optional[float]):
        topology.validate()
        self.topo = topology
        self.workload = workload
        self.scheme = scheme
        self.duration = duration
        self.end = ps(duration + drain)
        self.net = Network(topology, scheme.switch_config(switch or SwitchConfig()), seed)
        base = transport or TransportConfig(link_capacity=topology.edge_rate)
        self.tcfg = TransportConfig(**{**base.__dict__, "r": scheme.rate_share})
        self.costs = costs if costs is not None else CodecCosts.host_default()
        # independent streams so every scheme sees the same arrivals
        self.rng_arrivals = random.Random(f"{seed}:arrivals")
        self.rng_bg = random.Random(f"{seed}:background")
        self.rng_codec = random.Random(f"{seed}:codec")
        self.blob = random.Random(f"{seed}:payload").randbytes(max(max(workload.sizes),
                                                                   workload.incast_size))
        self.records: dict[int, MessageRecord] = {}
        self.next_uid = 0
        self.tcp = TcpStack(self.net)
        self.hosts = [
            CloudBurstHost(self.net, h, self.tcfg, self.costs, self.rng_codec,
                           multipath=scheme.multipath, on_delivered=self._cb_delivered,
                           on_request=self._on_request, on_sender_done=self._cb_sender_done)
            for h in range(topology.hosts)
        ]
        for f in failures:
            self.net.apply_failure(f)
        self.slots: list[_Slot] = []
        self.samples: list[ThroughputSample] = []
        self.cb_window_bytes = 0
        self.window = ps(throughput_window) if throughput_window else 0
        self.requests_sent = 0
        self.requests_served = 0
        self.bg = background
        self._setup_background(background)
        self._setup_workload()
        if self.window:
            self.net.schedule(self.window, self._sample, 0)

    # -- workload ---------------------------------------------------------------------

    def _new_record(self, src: int, dst: int, size: int, start: int,
                    requested: Optional[int]) -> MessageRecord:
        uid = self.next_uid
        self.next_uid += 1
        k = -(-size // self.tcfg.budget.payload_len)
        rec = MessageRecord(uid, self.scheme.name, src, dst, size, k, start, requested)
        self.records[uid] = rec
        return rec

    def _setup_workload(self) -> None:
        w, t = self.workload, self.topo
        if w.pattern == "incast":
            rx = t.rack(1)[0] if t.leaves > 1 else t.hosts - 1
            senders = [h for h in t.rack(0) if h != rx][:w.incast_senders]
            if not senders:
                raise ConfigError("incast needs at least one sender")
            for i in range(w.incast_n):
                self._start_response(senders[i % len(senders)], rx, w.incast_size, None)
            return
        if w.pattern == "none" or w.rate <= 0:
            return
        if w.pattern == "all_to_all":
            clients = list(range(t.hosts))
            servers_of = {c: [s for s in range(t.hosts) if s != c] for c in clients}
        else:
            if t.leaves < 2:
                raise ConfigError("front_back needs two racks")
            clients = t.rack(0)
            servers_of = {c: t.rack(1) for c in clients}
        for c in clients:
            times = _arrivals(self.rng_arrivals, w.rate, self.duration)
            plan = [(ps(x), self.rng_arrivals.choice(servers_of[c]),
                     [self.rng_arrivals.choice(list(w.sizes)) for _ in range(w.fanout)])
                    for x in times]
            if plan:
                self.net.schedule(plan[0][0], self._issue, c, plan, 0)

    def _issue(self, client: int, plan: list, i: int) -> None:
        _, server, sizes = plan[i]
        for size in sizes:
            rec = self._new_record(server, client, size, 0, self.net.now)
            self.requests_sent += 1
            self.hosts[client].send_request(server, size, rec.uid)
        if i + 1 < len(plan):
            self.net.schedule(plan[i + 1][0], self._issue, client, plan, i + 1)

    def _on_request(self, server: int, client: int, size: int, uid: int) -> None:
        rec = self.records.get(uid)
        if rec is None or rec.status != "pending":
            return
        self.requests_served += 1
        rec.start = self.net.now
        rec.status = "sending"
        self._launch(rec)

    def _start_response(self, src: int, dst: int, size: int, requested: Optional[int]) -> None:
        rec = self._new_record(src, dst, size, self.net.now, requested)
        rec.status = "sending"
        self._launch(rec)

    def _launch(self, rec: MessageRecord) -> None:
        if self.scheme.is_tcp:
            flow = self.tcp.open(rec.src, rec.dst, rec.size, None, kind="message", start=False)
            flow.on_delivered = lambda f, uid=rec.uid: self._tcp_delivered(uid, f)
            flow.on_done = lambda f: self.tcp.close(f)
            flow.start()
            return
        reason = self.hosts[rec.src].send_message(rec.dst, self.blob[:rec.size], rec.uid)
        if reason is not None:
            rec.status = reason

    def _cb_delivered(self, uid, delivered, t: int) -> None:
        rec = self.records.get(uid)
        if rec is None or rec.completion is not None:
            return
        rec.completion = t
        rec.symbols_received = delivered.symbols_received
        rec.status = "delivered" if delivered.data == self.blob[:rec.size] else "corrupt"
        self.cb_window_bytes += rec.size

    def _cb_sender_done(self, ob) -> None:
        rec = self.records.get(ob.uid)
        if rec is None:
            return
        rec.symbols_sent = ob.session.symbols_sent
        if ob.session.failure and rec.completion is None:
            rec.status = ob.session.failure

    def _tcp_delivered(self, uid: int, flow) -> None:
        rec = self.records[uid]
        if rec.completion is None:
            rec.completion = self.net.now
            rec.status = "delivered"
            rec.symbols_sent = flow.high_tx + flow.retransmits
            rec.symbols_received = flow.npkts
            self.cb_window_bytes += rec.size

    # -- background -------------------------------------------------------------------

    def _setup_background(self, bg: Optional[BackgroundSpec]) -> None:
        if bg is None or bg.flows <= 0:
            return
        self.bg = bg
        t = self.topo
        for i in range(bg.flows):
            src = bg.pairs[i % len(bg.pairs)][0] if bg.pairs else t.rack(0)[i % t.hosts_per_leaf]
            slot = _Slot(i, src, src, None)
            self.slots.append(slot)
            self._bg_start(slot)

    def _bg_route(self, slot: _Slot) -> None:
        bg, t = self.bg, self.topo
        if bg.pairs:
            slot.dst = bg.pairs[slot.index % len(bg.pairs)][1]
        else:
            others = [h for h in range(t.hosts) if t.leaf_of(h) != t.leaf_of(slot.src)] or \
                     [h for h in range(t.hosts) if h != slot.src]
            slot.dst = self.rng_bg.choice(others)
        if bg.ecmp or t.leaf_of(slot.src) == t.leaf_of(slot.dst):
            slot.path = None
        elif bg.paths:
            slot.path = bg.paths[slot.index % len(bg.paths)]
        else:
            live = self.net.live_paths(slot.src, slot.dst)
            slot.path = self.rng_bg.choice(live) if live else None

    def _bg_start(self, slot: _Slot) -> None:
        def done(flow, slot=slot):
            slot.delivered += flow.rcv_bytes
            self.tcp.close(flow)
            self._bg_start(slot)

        self._bg_route(slot)
        slot.flow = self.tcp.open(slot.src, slot.dst, self.bg.size, slot.path, on_done=done,
                                  kind="background")

    def _slot_bytes(self, slot: _Slot) -> int:
        live = slot.flow.rcv_bytes if slot.flow is not None and slot.flow.finished is None else 0
        return slot.delivered + live

    def _sample(self, start: int) -> None:
        now = self.net.now
        for slot in self.slots:
            total = self._slot_bytes(slot)
            self.samples.append(ThroughputSample(slot.index, "background", slot.src, slot.dst,
                                                 start, now - start, total - slot.last))
            slot.last = total
        self.samples.append(ThroughputSample(-1, "messages", -1, -1, start, now - start,
                                             self.cb_window_bytes))
        self.cb_window_bytes = 0
        if now + self.window <= self.end:
            self.net.schedule(now + self.window, self._sample, now)

    # -- run --------------------------------------------------------------------------

    def go(self) -> TraceLog:
        self.net.run(self.end)
        for rec in self.records.values():
            if rec.completion is None and rec.status in ("pending", "sending"):
                rec.status = "unserved" if rec.status == "pending" else "incomplete"
            if not self.scheme.is_tcp and rec.symbols_sent == 0:
                for h in self.hosts:
                    for ob in h.sessions.values():
                        if ob.uid == rec.uid:
                            rec.symbols_sent = ob.session.symbols_sent
        net = self.net
        counters = {}
        for c, name in enumerate(CLASS_NAMES):
            counters[name] = {
                "injected": net.injected[c], "delivered": net.delivered[c],
                "dropped": net.dropped[c], "in_network": net.in_network(c),
            }
        log = TraceLog(
            messages=sorted(self.records.values(), key=lambda r: r.uid),
            port_stats=net.port_rows(),
            throughput=self.samples,
            class_counters=counters,
            meta={
                "scheme": self.scheme.name, "r": self.scheme.rate_share,
                "duration": self.duration, "end_ps": self.end,
                "requests_sent": self.requests_sent, "requests_served": self.requests_served,
                "drop_reasons": dict(sorted(net.drop_reasons.items())),
                "refused": sum(h.refused for h in self.hosts),
            },
        )
        return log


def run(topology: Topology, workload: WorkloadSpec, failures: Sequence[FailureSpec] = (),
        seed: int = 0, duration: float = 0.1, *, scheme: Optional[SchemeSpec] = None,
        switch: Optional[SwitchConfig] = None, transport: Optional[TransportConfig] = None,
        background: Optional[BackgroundSpec] = None, costs: Optional[CodecCosts] = None,
        drain: float = 0.05, throughput_window: Optional[float] = None) -> TraceLog:
    """Simulate ``duration`` seconds of workload plus ``drain`` seconds to finish.

    Identical arguments give an identical TraceLog.
    """
    if duration < 0 or drain < 0:
        raise ConfigError("duration and drain must be >= 0")
    return _Runner(topology, workload, list(failures), seed, duration, scheme or SchemeSpec(),
                   switch, transport, background, costs, drain, throughput_window).go()
