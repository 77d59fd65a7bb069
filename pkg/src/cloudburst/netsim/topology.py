from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

PS_PER_S = 10**12


class ConfigError(ValueError):
    pass


def ps(seconds: float) -> int:
    return int(round(seconds * PS_PER_S))


def seconds(t_ps: int) -> float:
    return t_ps / PS_PER_S


@dataclass
class Topology:
    """Two-tier leaf-spine fabric; every leaf connects to every spine."""

    hosts_per_leaf: int = 4
    leaves: int = 2
    spines: int = 4
    edge_rate: float = 1e9  # bits/s, host <-> leaf
    core_rate: float = 1e9  # bits/s, leaf <-> spine
    edge_delay: float = 1e-6  # seconds of propagation per link
    core_delay: float = 1e-6

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("hosts_per_leaf", "leaves", "spines"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"topology.{name} must be >= 1")
        for name in ("edge_rate", "core_rate"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"topology.{name} must be positive")
        for name in ("edge_delay", "core_delay"):
            if getattr(self, name) < 0:
                raise ConfigError(f"topology.{name} must be >= 0")

    @property
    def hosts(self) -> int:
        return self.hosts_per_leaf * self.leaves

    def leaf_of(self, host: int) -> int:
        return host // self.hosts_per_leaf

    def rack(self, leaf: int) -> list[int]:
        return list(range(leaf * self.hosts_per_leaf, (leaf + 1) * self.hosts_per_leaf))

    def path_count(self, src: int, dst: int) -> int:
        return 1 if self.leaf_of(src) == self.leaf_of(dst) else self.spines

    @property
    def oversubscription(self) -> float:
        """Uplink over downlink capacity per leaf (1.0 = full bisection)."""
        return (self.spines * self.core_rate) / (self.hosts_per_leaf * self.edge_rate)

    @classmethod
    def testbed(cls) -> "Topology":
        return cls(hosts_per_leaf=4, leaves=2, spines=4, edge_rate=1e9, core_rate=1e9)

    @classmethod
    def large_scale(cls) -> "Topology":
        # 20 us base RTT over 8 link traversals, serialization included
        return cls(hosts_per_leaf=16, leaves=9, spines=4, edge_rate=10e9, core_rate=40e9,
                   edge_delay=2e-6, core_delay=2e-6)


@dataclass
class SwitchConfig:
    cb_queue_packets: int = 10
    cb_queue_enabled: bool = True  # False: CloudBurst shares the background FIFO
    deep_cb_queue_packets: int = 66  # CloudBurst queue cap without aggressive dropping
    bg_queue_bytes: int = 100_000
    ecn_k_packets: int = 65
    w_bg: int = 1
    w_cb: int = 1
    quantum_bytes: int = 1500
    host_cb_queue_packets: Optional[int] = None  # None: same as switches
    host_bg_queue_bytes: Optional[int] = None

    def __post_init__(self):
        if self.cb_queue_packets < 1 or self.bg_queue_bytes < 1:
            raise ConfigError("queue capacities must be positive")
        if self.w_bg < 1 or self.w_cb < 1:
            raise ConfigError("WRR weights must be >= 1")


@dataclass
class FailureSpec:
    kind: str  # "link_down" or "link_degraded"
    leaf: int
    spine: int
    at: float = 0.0
    rate: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("link_down", "link_degraded"):
            raise ConfigError(f"unknown failure kind {self.kind!r}")
        if self.kind == "link_degraded" and not (self.rate and self.rate > 0):
            raise ConfigError("link_degraded needs a positive rate")


@dataclass
class CodecCosts:
    """Host en/decode latency charged to simulated messages, in microseconds.

    Tables are (k, microseconds) points, linearly interpolated and clamped.
    """

    encode_us: list[tuple[int, float]] = field(default_factory=lambda: [(1, 0.0)])
    decode_us: list[tuple[int, float]] = field(default_factory=lambda: [(1, 0.0)])

    @staticmethod
    def _interp(table, k: int) -> float:
        pts = sorted(table)
        if k <= pts[0][0]:
            return pts[0][1]
        for (k0, v0), (k1, v1) in zip(pts, pts[1:]):
            if k <= k1:
                return v0 + (v1 - v0) * (k - k0) / (k1 - k0)
        return pts[-1][1]

    def encode_ps(self, k: int) -> int:
        return ps(self._interp(self.encode_us, k) * 1e-6)

    def decode_ps(self, k: int) -> int:
        return ps(self._interp(self.decode_us, k) * 1e-6)

    @classmethod
    def host_default(cls) -> "CodecCosts":
        # measured with `cloudburst loopback-bench` on the development host:
        # encode = packetize + first round of symbols, decode = completing push
        return cls(
            encode_us=[(1, 17.0), (4, 22.0), (7, 37.0), (14, 59.0), (35, 78.0), (64, 114.0)],
            decode_us=[(1, 4.0), (4, 10.0), (7, 21.0), (14, 50.0), (35, 152.0), (64, 365.0)],
        )
