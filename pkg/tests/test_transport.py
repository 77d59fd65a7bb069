import hashlib
import random
import socket
from collections import Counter, deque
from fractions import Fraction

import pytest

from cloudburst.ltcodec import FixedDegree, RobustSoliton, mask_indices
from cloudburst.netsim import Network, SimChannel, SwitchConfig, Topology, attach_transport
from cloudburst.transport import (
    LossyChannel,
    MessageIdAllocator,
    ReceiverEndpoint,
    SenderSession,
    SessionState,
    SocketChannel,
    TransportConfig,
    cbrst_send,
    inter_round_delay,
    pacing_interval,
    receiver_poll,
    sender_on_feedback,
)
from cloudburst.wire import CbrstHeader, PacketType, bitmap_from_bytes, parse, serialize


class MemoryLink:
    """Sender-side channel wired straight into a ReceiverEndpoint.

    Time is virtual: ``sleep_until`` jumps the clock. Delivery is instant
    unless a path is listed in ``dead``; every send is logged.
    """

    def __init__(self, endpoint: ReceiverEndpoint, num_paths: int = 4, loss: float = 0.0,
                 seed: int = 0, dead=(), reply_loss: float = 0.0):
        self.endpoint = endpoint
        self.paths = list(range(num_paths))
        self.rng = random.Random(seed)
        self.loss = loss
        self.reply_loss = reply_loss
        self.dead = set(dead)
        self.clock = 0.0
        self.inbox: deque = deque()
        self.sent: list[tuple[float, int, bytes]] = []
        self.delivered = []
        self.stop_processed_at = None

    def send(self, path, octets, dest=None):
        self.sent.append((self.clock, path, octets))
        if path in self.dead or self.rng.random() < self.loss:
            return
        out = self.endpoint.on_datagram(octets, "sender", self.clock)
        self.delivered.extend(out.delivered)
        for reply in out.replies:
            if self.rng.random() >= self.reply_loss:
                self.inbox.append((reply, path, "receiver"))

    def receive(self, timeout=0.0):
        if not self.inbox:
            return None
        item = self.inbox.popleft()
        if item[0][0] & 0xF == PacketType.STOP and self.stop_processed_at is None:
            self.stop_processed_at = len(self.sent)
        return item

    def now(self):
        return self.clock

    def sleep_until(self, t):
        self.clock = max(self.clock, t)


def data_sends(link):
    return [(t, p, o) for t, p, o in link.sent if o[0] & 0xF == PacketType.DATA]


# -- pacing --------------------------------------------------------------------------------

def test_pacing_twelve_microseconds_exact():
    assert pacing_interval(0.5, 5, 1500, 10e9) == Fraction(12, 10**6)
    assert pacing_interval(Fraction(1, 2), 5, 1500, 10**10) == Fraction(12, 10**6)


def test_pacing_single_path_line_rate():
    assert pacing_interval(1, 1, 1500, 10**9) == Fraction(1500 * 8, 10**9)
    assert inter_round_delay(1.0, 1, 1500, 1e9) == 12e-6


def test_session_pacing_from_config():
    cfg = TransportConfig(r=0.5, link_capacity=10e9)
    s = SenderSession(b"x" * 5000, 1, 5, cfg, random.Random(0))
    assert s.pacing == Fraction(12, 10**6)


def test_memory_link_gaps_exact():
    ep = ReceiverEndpoint()
    link = MemoryLink(ep, num_paths=5, dead={0, 1, 2, 3, 4})
    cfg = TransportConfig(r=0.5, link_capacity=10e9, timeout=0.0125)
    res = cbrst_send(link, None, b"z" * 20000, config=cfg, rng=random.Random(1), record_rounds=True)
    assert not res.ok and res.reason == "timeout"
    assert len(res.round_times) >= 1000
    gaps = [b - a for a, b in zip(res.round_times, res.round_times[1:])]
    assert all(abs(g - 12e-6) < 1e-12 for g in gaps)


# -- sending -------------------------------------------------------------------------------

def test_lossless_k4_within_four_rounds():
    ok = 0
    for seed in range(300):
        ep = ReceiverEndpoint()
        link = MemoryLink(ep, num_paths=4, seed=seed)
        data = random.Random(seed).randbytes(5000)
        res = cbrst_send(link, None, data, config=TransportConfig(), rng=random.Random(seed))
        assert res.ok and link.delivered[0].data == data
        ok += res.symbols_sent <= 4 * 4
    assert ok >= 0.99 * 300


def test_round_robin_one_symbol_per_path_per_round():
    ep = ReceiverEndpoint()
    link = MemoryLink(ep, num_paths=3, loss=0.7, seed=5)
    res = cbrst_send(link, None, bytes(range(256)) * 200, config=TransportConfig(),
                     rng=random.Random(2))
    assert res.ok
    sends = data_sends(link)
    counts = Counter()
    for i, (_, p, _) in enumerate(sends):
        counts[p] += 1
        assert max(counts.values()) - min(counts.get(q, 0) for q in link.paths) <= 1
    rounds = {}
    for t, p, _ in sends:
        rounds.setdefault(t, []).append(p)
    assert all(sorted(ps) == link.paths for ps in rounds.values())


def test_no_data_after_stop_processed():
    ep = ReceiverEndpoint()
    link = MemoryLink(ep, num_paths=4, seed=1)
    res = cbrst_send(link, None, b"q" * 30000, config=TransportConfig(), rng=random.Random(1))
    assert res.ok
    assert link.stop_processed_at is not None
    assert not any(o[0] & 0xF == PacketType.DATA for _, _, o in link.sent[link.stop_processed_at:])


def test_oversize_fails_immediately():
    ep = ReceiverEndpoint()
    link = MemoryLink(ep)
    res = cbrst_send(link, None, bytes(93185), config=TransportConfig())
    assert not res.ok and res.reason == "oversize"
    assert link.sent == []
    assert cbrst_send(link, None, b"", config=TransportConfig()).reason == "oversize"


def test_timeout_when_everything_is_lost():
    ep = ReceiverEndpoint()
    link = MemoryLink(ep, loss=1.0)
    res = cbrst_send(link, None, b"a" * 3000, timeout=0.002, config=TransportConfig())
    assert not res.ok and res.reason == "timeout"
    assert 0.002 <= res.elapsed < 0.002 + 2 * 48e-6


def test_io_error_surfaces_as_failure():
    class Broken(MemoryLink):
        def send(self, path, octets, dest=None):
            raise OSError("network unreachable")

    res = cbrst_send(Broken(ReceiverEndpoint()), None, b"a" * 100, config=TransportConfig())
    assert not res.ok and res.reason == "io"


def test_no_paths():
    link = MemoryLink(ReceiverEndpoint(), num_paths=0)
    assert cbrst_send(link, None, b"a", config=TransportConfig()).reason == "no-paths"


@pytest.mark.parametrize("seed", range(10))
def test_liveness_under_heavy_loss(seed):
    ep = ReceiverEndpoint()
    link = MemoryLink(ep, num_paths=4, loss=0.6, reply_loss=0.5, seed=seed)
    data = random.Random(seed).randbytes(93184)
    res = cbrst_send(link, None, data, timeout=1.0, config=TransportConfig(), rng=random.Random(seed))
    assert res.ok
    assert [d.data for d in link.delivered] == [data]


def test_one_dead_path_still_completes():
    ep = ReceiverEndpoint()
    link = MemoryLink(ep, num_paths=4, dead={2})
    assert cbrst_send(link, None, b"m" * 50000, config=TransportConfig(), rng=random.Random(3)).ok


# -- feedback ------------------------------------------------------------------------------

def test_feedback_restricts_to_residual():
    s = SenderSession(bytes(64 * 1456), 3, 4, TransportConfig(), random.Random(0))
    decoded = (1 << 64) - 1 - ((1 << 5) | (1 << 40) | (1 << 63))
    sender_on_feedback(s, decoded)
    for _ in range(50):
        head, _ = parse(s.data_datagram())
        assert mask_indices(head.index_bitmap) and set(mask_indices(head.index_bitmap)) <= {5, 40, 63}


def test_stale_feedback_keeps_bursting():
    s = SenderSession(bytes(10 * 1456), 3, 4, TransportConfig(), random.Random(0))
    sender_on_feedback(s, (1 << 10) - 1)
    assert s.state is SessionState.BURSTING
    assert len(s.next_round()) == 4


def test_feedback_request_after_threshold():
    s = SenderSession(bytes(4 * 1456), 9, 2, TransportConfig(feedback_threshold=6), random.Random(0))
    assert s.poll_feedback() is None
    for _ in range(3):
        s.next_round()
    req = s.poll_feedback()
    assert req is not None and parse(req)[0].pkt_type == PacketType.FEEDBACK_REQ
    assert s.poll_feedback() is None


def test_feedback_loop_end_to_end():
    ep = ReceiverEndpoint()
    link = MemoryLink(ep, num_paths=4, loss=0.5, seed=4)
    cfg = TransportConfig(feedback_threshold=16)
    res = cbrst_send(link, None, random.Random(4).randbytes(64 * 1456), config=cfg,
                     rng=random.Random(4))
    assert res.ok and res.feedback_requests >= 1
    replies = [o for _, _, o in link.sent if o[0] & 0xF == PacketType.FEEDBACK_REQ]
    assert len(replies) == 4 * res.feedback_requests


# -- receiver ------------------------------------------------------------------------------

def _datagrams(data, mid=0, count=200, seed=0):
    s = SenderSession(data, mid, 1, TransportConfig(), random.Random(seed))
    return [s.data_datagram() for _ in range(count)]


def test_receiver_delivers_once_and_stops_every_later_datagram():
    data = random.Random(1).randbytes(9000)
    ep = ReceiverEndpoint()
    delivered, stops_after = [], 0
    for dg in _datagrams(data):
        out = ep.on_datagram(dg, "a", 0.0)
        if delivered:
            assert len(out.replies) == 1 and parse(out.replies[0])[0].pkt_type == PacketType.STOP
            stops_after += 1
        delivered += out.delivered
    assert [d.data for d in delivered] == [data]
    assert stops_after > 0


def test_receiver_answers_feedback_request_with_decoded_bitmap():
    data = random.Random(2).randbytes(20 * 1456)
    ep = ReceiverEndpoint()
    for dg in _datagrams(data, count=8):
        ep.on_datagram(dg, "a", 0.0)
    req = serialize(CbrstHeader(PacketType.FEEDBACK_REQ, 0, 20, len(data)))
    out = ep.on_datagram(req, "a", 0.0)
    head, payload = parse(out.replies[0])
    assert head.pkt_type == PacketType.FEEDBACK
    assert bitmap_from_bytes(payload) == ep.inbound[("a", 0)].decoder.decoded
    # unknown message: empty bitmap
    out = ep.on_datagram(serialize(CbrstHeader(PacketType.FEEDBACK_REQ, 9, 3, 100)), "a", 0.0)
    assert bitmap_from_bytes(parse(out.replies[0])[1]) == 0


def test_receiver_counts_malformed():
    ep = ReceiverEndpoint()
    for junk in (b"", b"\x10", b"\xff" * 40, serialize(CbrstHeader(PacketType.DATA, 0, 2, 10, 1), b"short")):
        assert ep.on_datagram(junk, "a", 0.0).replies == []
    assert ep.malformed == 4


def test_receiver_keys_by_source_and_id():
    d1, d2 = b"A" * 3000, b"B" * 3000
    ep = ReceiverEndpoint()
    got = []
    for a, b in zip(_datagrams(d1, 5, 40, 1), _datagrams(d2, 5, 40, 2)):
        got += ep.on_datagram(a, "h1", 0.0).delivered
        got += ep.on_datagram(b, "h2", 0.0).delivered
    assert sorted(d.data for d in got) == [d1, d2]


def test_receiver_expires_idle_decoders():
    ep = ReceiverEndpoint(TransportConfig(decoder_idle_timeout=0.010))
    ep.on_datagram(_datagrams(b"x" * 9000, count=1)[0], "a", 0.0)
    assert ep.expire(0.005) == 0
    assert ep.expire(0.0101) == 1
    assert ep.inbound == {}


def test_reused_id_after_delivery_starts_a_new_decoder():
    ep = ReceiverEndpoint()
    first = b"1" * 3000
    for dg in _datagrams(first, 7, 20):
        ep.on_datagram(dg, "a", 0.0)
    second = b"2" * 6000
    got = []
    for dg in _datagrams(second, 7, 40, seed=3):
        got += ep.on_datagram(dg, "a", 0.0).delivered
    assert [d.data for d in got] == [second]


def test_message_id_quarantine():
    alloc = MessageIdAllocator(quarantine=0.02)
    ids = [alloc.allocate("b", 0.0) for _ in range(256)]
    assert sorted(ids) == list(range(256))
    assert alloc.allocate("b", 0.0) is None
    alloc.release("b", 17, 1.0)
    assert alloc.allocate("b", 1.01) is None
    assert alloc.allocate("b", 1.02) == 17
    assert alloc.allocate("other", 0.0) == 0


def test_config_from_mapping():
    cfg = TransportConfig.from_mapping({"r": 0.5, "timeout_ms": 10, "decoder_idle_timeout_ms": 5,
                                        "link_capacity_gbps": 10, "degree": 7,
                                        "feedback_threshold": 100})
    assert (cfg.r, cfg.timeout, cfg.decoder_idle_timeout, cfg.link_capacity) == (0.5, 0.01, 0.005, 10e9)
    assert cfg.degree == FixedDegree(7) and cfg.feedback_threshold == 100
    rs = TransportConfig.from_mapping({"robust_soliton": {"c": 0.2, "delta": 0.1}})
    assert rs.degree == RobustSoliton(0.2, 0.1)
    with pytest.raises(ValueError):
        TransportConfig(r=0)


# -- simulated channel ---------------------------------------------------------------------

def test_sim_channel_routes_by_path_and_paces_exactly():
    topo = Topology.testbed()
    net = Network(topo, SwitchConfig(), 0)
    ep = ReceiverEndpoint()
    agent = attach_transport(net, 4, receiver=ep)
    chan = SimChannel(net, 0, [0, 1, 2, 3], peer=4)
    data = random.Random(0).randbytes(93184)
    res = cbrst_send(chan, 4, data, config=TransportConfig(), rng=random.Random(0), record_rounds=True)
    assert res.ok
    assert [d.data for d in agent.delivered] == [data]
    gaps = {round((b - a) * 1e12) for a, b in zip(res.round_times, res.round_times[1:])}
    assert gaps == {48_000_000}
    # every spine carried traffic: leaf 0 uplink to spine s saw packets for each s
    ups = [net.leaf_up[0][s].stats[1][0] + net.leaf_up[0][s].stats[0][0] for s in range(4)]
    assert all(u > 0 for u in ups)


# -- real sockets --------------------------------------------------------------------------

def _sink(n):
    socks = []
    for _ in range(n):
        s = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        s.bind(("127.0.0.1", 0))
        socks.append(s)
    return socks


def test_socket_pacing_attainable_rate():
    # 5 paths, r = 1, 0.5 Gb/s: 120 us rounds, about twice what one Python round costs
    sinks = _sink(2)
    try:
        ports = [s.getsockname()[1] for s in sinks]
        cfg = TransportConfig(r=1.0, link_capacity=0.5e9, timeout=0.1205)
        with SocketChannel([0] * 5, ports, rng=random.Random(0)) as chan:
            res = cbrst_send(chan, None, bytes(50000), config=cfg, rng=random.Random(0),
                             record_rounds=True)
    finally:
        for s in sinks:
            s.close()
    assert res.reason == "timeout"
    n = len(res.round_times)
    assert n >= 1000
    mean_gap = (res.round_times[-1] - res.round_times[0]) / (n - 1)
    assert abs(mean_gap - 120e-6) / 120e-6 <= 0.05


def test_socket_loopback_delivers():
    cfg = TransportConfig(timeout=1.0)
    with SocketChannel([0] * 4) as rx, \
            SocketChannel([0] * 4, rx.local_ports, rng=random.Random(1)) as tx:
        data = random.Random(1).randbytes(5000)
        endpoint = ReceiverEndpoint(cfg)
        session = SenderSession(data, 3, len(tx.paths), cfg, random.Random(1))
        got = []
        for _ in range(50):
            for path, dg in zip(tx.paths, session.next_round()):
                tx.send(path, dg)
            got += receiver_poll(endpoint, rx, timeout=0.01)
            reply = tx.receive(0.01)
            if reply is not None and session.handle(reply[0]) == PacketType.STOP:
                break
        assert session.state is SessionState.DONE
    assert [hashlib.sha256(d.data).digest() for d in got] == [hashlib.sha256(data).digest()]


def test_lossy_channel_only_drops_data():
    ep = ReceiverEndpoint()
    inner = MemoryLink(ep, num_paths=2)
    lossy = LossyChannel(inner, 1.0, seed=1)
    lossy.send(0, serialize(CbrstHeader(PacketType.STOP, 0, 1, 1)))
    lossy.send(0, serialize(CbrstHeader(PacketType.DATA, 0, 1, 1, 1), bytes(1456)))
    assert (lossy.sent, lossy.dropped) == (1, 1)
