import math
import random
import statistics

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from cloudburst.analytics import (
    INF,
    Empirical,
    Exponential,
    FecModelParams,
    Mixture,
    ModelUnderdetermined,
    Uniform,
    expected_fec_latency,
    expected_retx_latency,
    fec_completion_quantile,
    mct_values,
    nearest_rank,
    order_stat_cdf,
    order_stat_pdf,
    parametric,
    percentile,
    percentile_table,
    retx_latency_partial_sum,
    summarize,
    summary_csv,
    write_summary,
)
from cloudburst.netsim import FailureSpec, Network, SimChannel, SwitchConfig, Topology, attach_transport
from cloudburst.netsim.trace import MessageRecord, ThroughputSample, TraceLog
from cloudburst.transport import ReceiverEndpoint, TransportConfig, cbrst_send
from oracles import geometric_retx_mc

U01 = Uniform(0.0, 1.0)
EXP1 = Exponential(1.0)


# -- distributions ----------------------------------------------------------------------


families = st.one_of(
    st.builds(lambda a, w: Uniform(a, a + w), st.floats(-5, 5), st.floats(0.01, 10)),
    st.builds(Exponential, st.floats(0.05, 20), st.floats(0, 5)),
    st.builds(lambda r, a: Mixture([Exponential(r), Uniform(a, a + 1)], [0.7, 0.3]),
              st.floats(0.1, 5), st.floats(0, 10)),
    st.builds(Empirical, st.lists(st.floats(-100, 100), min_size=1, max_size=30)),
)


@given(families, st.lists(st.floats(-200, 200), min_size=2, max_size=20))
def test_cdf_is_a_cdf(F, xs):
    xs = sorted(xs)
    vals = [F.cdf(x) for x in xs]
    assert all(0.0 <= v <= 1.0 for v in vals)
    assert all(a <= b for a, b in zip(vals, vals[1:]))
    assert F.cdf(-1e9) == 0.0 and F.cdf(1e9) == 1.0


def test_parametric_families():
    assert parametric("uniform", a=1, b=3) == Uniform(1, 3)
    assert parametric("exponential", rate=2.0) == Exponential(2.0)
    with pytest.raises(ValueError):
        parametric("pareto", alpha=1)
    with pytest.raises(ValueError):
        Uniform(1, 1)
    with pytest.raises(ValueError):
        Exponential(0)
    with pytest.raises(TypeError):
        Empirical([1, 2]).pdf(1.5)


def test_mixture_sampling_matches_cdf():
    mix = Mixture([Uniform(0, 1), Uniform(10, 11)], [3, 1])
    xs = mix.sample(np.random.default_rng(0), 100_000)
    assert abs(np.mean(xs < 5) - mix.cdf(5)) < 0.005
    assert mix.cdf(5) == pytest.approx(0.75)


# -- order statistics -----------------------------------------------------------------


@given(st.floats(0, 10))
def test_single_sample_pdf_is_f(x):
    assert order_stat_pdf(1, 1, EXP1, EXP1.pdf, x) == pytest.approx(EXP1.pdf(x), rel=1e-12)


def test_median_of_three_uniform():
    assert order_stat_pdf(2, 3, U01, U01.pdf, 0.5) == pytest.approx(1.5, rel=1e-12)
    assert order_stat_cdf(2, 3, U01, 0.5) == pytest.approx(0.5, rel=1e-12)
    # Monte Carlo oracle: sorted triples of uniforms
    rng = np.random.default_rng(1)
    med = np.sort(rng.random((1_000_000, 3)), axis=1)[:, 1]
    h = 0.01
    density = np.mean(np.abs(med - 0.5) < h / 2) / h
    assert density == pytest.approx(1.5, rel=0.03)
    assert np.mean(med <= 0.5) == pytest.approx(0.5, abs=0.002)
    for x in (0.1, 0.3, 0.8):
        assert np.mean(med <= x) == pytest.approx(order_stat_cdf(2, 3, U01, x), abs=0.002)


@pytest.mark.parametrize("j,n", [(1, 5), (3, 5), (5, 5)])
@pytest.mark.parametrize("F", [U01, EXP1, Exponential(3.0, shift=2.0)], ids=["u", "e", "e-shift"])
def test_pdf_normalizes(j, n, F):
    total, _ = integrate.quad(lambda x: order_stat_pdf(j, n, F, F.pdf, x), F.lo,
                              F.hi if F.hi < INF else np.inf, epsabs=1e-12, limit=200)
    assert abs(total - 1.0) <= 1e-6


@pytest.mark.parametrize("j,n", [(1, 5), (3, 5), (5, 5), (7, 20)])
def test_cdf_matches_integral_of_pdf(j, n):
    for F in (U01, EXP1):
        for x in np.linspace(F.lo + 0.05, F.lo + 3, 9):
            x = min(x, F.hi)
            area, _ = integrate.quad(lambda t: order_stat_pdf(j, n, F, F.pdf, t), F.lo, x,
                                     epsabs=1e-12)
            assert abs(order_stat_cdf(j, n, F, x) - area) <= 1e-4


def test_cdf_derivative_is_pdf():
    h = 1e-6
    for j, n in [(1, 3), (2, 3), (4, 9)]:
        for x in (0.2, 0.7, 1.9):
            fd = (order_stat_cdf(j, n, EXP1, x + h) - order_stat_cdf(j, n, EXP1, x - h)) / (2 * h)
            assert fd == pytest.approx(order_stat_pdf(j, n, EXP1, EXP1.pdf, x), rel=1e-5)


def test_order_stat_edges():
    assert order_stat_cdf(4, 4, U01, 1.0) == 1.0
    assert order_stat_cdf(4, 4, U01, 2.0) == 1.0
    assert order_stat_cdf(1, 4, U01, 0.0) == 0.0
    # the j-th of n at extreme n stays finite in log space
    assert 0 < order_stat_pdf(500, 1000, U01, U01.pdf, 0.5) < 100
    for j, n in [(0, 3), (4, 3)]:
        with pytest.raises(ValueError):
            order_stat_cdf(j, n, U01, 0.5)
        with pytest.raises(ValueError):
            order_stat_pdf(j, n, U01, U01.pdf, 0.5)


def test_order_stat_accepts_plain_callable():
    assert order_stat_cdf(2, 3, lambda t: min(1, max(0, t)), 0.5) == pytest.approx(0.5)


@given(st.integers(1, 30), st.data(), st.floats(0, 5), st.floats(0, 5))
def test_cdf_monotone_in_x_and_j(n, data, x1, x2):
    j = data.draw(st.integers(1, n))
    lo, hi = sorted((x1, x2))
    assert order_stat_cdf(j, n, EXP1, lo) <= order_stat_cdf(j, n, EXP1, hi) + 1e-15
    if j < n:
        assert order_stat_cdf(j, n, EXP1, hi) >= order_stat_cdf(j + 1, n, EXP1, hi) - 1e-15


# -- percentiles -------------------------------------------------------------------------


def test_percentile_examples():
    assert percentile(U01, 0.99) == pytest.approx(0.99, rel=1e-9)
    assert percentile(Empirical(range(1, 101)), 0.99) == 99
    assert percentile(EXP1, 0.99) == pytest.approx(math.log(100), rel=1e-9)
    assert percentile(lambda t: 1 / (1 + math.exp(-t)), 0.5) == pytest.approx(0.0, abs=1e-9)
    for p in (0, 1, -0.1):
        with pytest.raises(ValueError):
            percentile(U01, p)


@given(st.floats(0.05, 20), st.floats(0, 5), st.floats(0.001, 0.999))
def test_percentile_inverts_cdf(rate, shift, p):
    F = Exponential(rate, shift)
    t = percentile(F, p)
    assert abs(t - (shift - math.log1p(-p) / rate)) <= 1e-9 * t
    # a relative error of 1e-9 in t moves F by at most f(t) * 1e-9 * t
    assert abs(F.cdf(t) - p) <= F.pdf(t) * 1e-9 * t + 1e-15


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=200), st.floats(0.001, 1.0))
def test_nearest_rank_matches_numpy_inverted_cdf(xs, p):
    assert nearest_rank(xs, p) == np.percentile(xs, p * 100, method="inverted_cdf")


def test_nearest_rank_with_failures():
    vals = [1.0] * 98 + [INF, INF]
    assert nearest_rank(vals, 0.98) == 1.0
    assert nearest_rank(vals, 0.99) == INF
    assert nearest_rank([3, 1, 2], 1.0) == 3
    with pytest.raises(ValueError):
        nearest_rank([], 0.5)
    with pytest.raises(ValueError):
        nearest_rank([1], 0)


# -- completion model -------------------------------------------------------------------


@pytest.mark.parametrize("F", [U01, EXP1, Empirical([3, 1, 4, 1, 5, 9, 2, 6])], ids=["u", "e", "emp"])
@pytest.mark.parametrize("p", [0.5, 0.9, 0.99])
def test_fec_k1_reduces_to_percentile(F, p):
    assert fec_completion_quantile(FecModelParams(1, 1.0, 1), F, p) == pytest.approx(percentile(F, p))


def test_fec_two_of_three_over_mixture():
    fast, slow = Uniform(10, 12), Uniform(100, 120)
    mix = Mixture([fast, fast, slow])
    params = FecModelParams(2, 1.5, 3)
    assert params.needed == 3  # k*s = 3 symbols needed at s = 1.5 ...
    two_of_three = FecModelParams(2, 1.0, 3)  # ... while any 2 of 3 finish a k=2 block
    rng = np.random.default_rng(2)
    second = np.sort(mix.sample(rng, 3 * 400_000).reshape(-1, 3), axis=1)[:, 1]
    for p in (0.5, 0.7, 0.9, 0.99):
        model = fec_completion_quantile(two_of_three, mix, p)
        assert model == pytest.approx(np.quantile(second, p), rel=0.01)
    # the slow path only matters when two of the three symbols took it
    p_two_slow = 3 * (1 / 3) ** 2 * (2 / 3) + (1 / 3) ** 3
    assert fec_completion_quantile(two_of_three, mix, 1 - p_two_slow - 0.01) < 12
    assert fec_completion_quantile(two_of_three, mix, 1 - p_two_slow + 0.01) > 100
    assert fec_completion_quantile(params, mix, 0.5) > 100


@given(st.integers(1, 12), st.floats(1.0, 2.0), st.integers(0, 10), st.floats(0.01, 0.99))
@settings(deadline=None)
def test_fec_quantile_nonincreasing_in_n_sent(k, s, extra, p):
    params = FecModelParams(k, s)
    j = params.needed
    a = fec_completion_quantile(FecModelParams(k, s, j + extra), EXP1, p)
    b = fec_completion_quantile(FecModelParams(k, s, j + extra + 1), EXP1, p)
    assert b <= a * (1 + 1e-8)


def test_fec_rounding_and_errors():
    assert FecModelParams(4, 1.25).needed == 5
    assert FecModelParams(3, 1.1).needed == 4
    assert FecModelParams(10, 1.2).needed == 12  # 10 * 1.2 is 12.000000000000002
    assert FecModelParams(4, 1.25).n_effective == 5
    with pytest.raises(ModelUnderdetermined):
        fec_completion_quantile(FecModelParams(4, 1.25, 4), EXP1, 0.99)
    with pytest.raises(ValueError):
        fec_completion_quantile(FecModelParams(1, 1.0), EXP1, 1.0)


# -- retransmission vs FEC ----------------------------------------------------------------


def test_retx_examples():
    assert expected_retx_latency(10, 2.0, 0.0) == 5.0
    assert expected_retx_latency(10, 1.0, 0.5) == 20.0
    mc = geometric_retx_mc(10, 1.0, 0.5, 200_000, np.random.default_rng(3))
    assert mc == pytest.approx(20.0, rel=0.01)
    for bad in [(0, 1, 0.1), (10, 0, 0.1), (10, 1, 1.0), (10, 1, -0.1)]:
        with pytest.raises(ValueError):
            expected_retx_latency(*bad)
    with pytest.raises(ValueError):
        expected_fec_latency(10, 1, 0.1, 0)


@given(st.floats(1, 1e6), st.floats(1e-3, 1e12), st.floats(0, 0.99), st.integers(1, 64))
def test_fec_is_retx_over_d(M, C, p_d, d):
    assert expected_fec_latency(M, C, p_d, d) * d == pytest.approx(expected_retx_latency(M, C, p_d),
                                                                   rel=1e-12)


@pytest.mark.parametrize("p_d", [0.0, 0.1, 0.5, 0.75, 0.9])
def test_partial_sums_converge(p_d):
    closed = expected_retx_latency(10, 1.0, p_d)
    assert abs(retx_latency_partial_sum(10, 1.0, p_d, 1000) - closed) <= 1e-9 * closed
    assert retx_latency_partial_sum(10, 1.0, p_d, 3) <= closed


# -- summaries ------------------------------------------------------------------------


def synthetic_trace():
    rng = random.Random(4)
    msgs = []
    for uid in range(300):
        size = (5000, 20000)[uid % 2]
        k = -(-size // 1456)
        rec = MessageRecord(uid, "D", 0, 4, size, k, start=uid * 10**9)
        roll = rng.random()
        if roll < 0.03:
            rec.status = "timeout"
        elif roll < 0.05:
            rec.status = "unserved"
        else:
            rec.completion = rec.start + rng.randint(50, 5000) * 10**6
            rec.symbols_sent = k + rng.randint(0, 8)
            rec.symbols_received = k + rng.randint(0, 3)
            rec.status = "delivered"
        msgs.append(rec)
    ports = [{"port": "l0->s0", "class": "cloudburst", "enqueued": 10, "dropped": 2, "marked": 0,
              "max_queue_delay_us": "1.0"},
             {"port": "l0->s1", "class": "cloudburst", "enqueued": 5, "dropped": 1, "marked": 0,
              "max_queue_delay_us": "2.0"},
             {"port": "l0->s1", "class": "background", "enqueued": 7, "dropped": 0, "marked": 3,
              "max_queue_delay_us": ""}]
    tput = [ThroughputSample(0, "background", 0, 4, i * 10**12, 10**12, n)
            for i, n in enumerate((10**8, 3 * 10**7))]
    return TraceLog(messages=msgs, port_stats=ports, throughput=tput)


def test_summarize_against_direct_computation():
    trace = synthetic_trace()
    s = summarize(trace)
    served = [m for m in trace.messages if m.status != "unserved"]
    assert s.unserved == len(trace.messages) - len(served)
    for size in (5000, 20000, 0):
        group = [m for m in served if size in (0, m.size)]
        vals = [INF if m.completion is None else (m.completion - m.start) / 1e12 for m in group]
        done = [v for v in vals if v != INF]
        row = s.row(size, "D")
        assert row.count == len(group) and row.failed == len(vals) - len(done)
        assert row.mean_us == pytest.approx(statistics.mean(done) * 1e6)
        for p, got in ((0.5, row.p50_us), (0.95, row.p95_us), (0.99, row.p99_us)):
            assert got == np.percentile(vals, p * 100, method="inverted_cdf") * 1e6
        ok = [m for m in group if m.completion is not None]
        assert row.coding_rate_sent == pytest.approx(statistics.mean(m.symbols_sent / m.k for m in ok))
        assert row.coding_rate_received == pytest.approx(
            statistics.mean(m.symbols_received / m.k for m in ok))
    assert s.drops["cloudburst"] == {"enqueued": 15, "dropped": 3, "marked": 0}
    assert s.drops["background"]["marked"] == 3
    assert s.throughput["background:0"] == pytest.approx((0.8 + 0.24) / 2)
    assert len(s.overall) == 1


def test_mct_values_skip_unserved():
    trace = synthetic_trace()
    vals = mct_values(trace.messages, 5000)
    assert len(vals) == sum(1 for m in trace.messages if m.size == 5000 and m.status != "unserved")
    assert INF in vals


def test_summary_outputs(tmp_path):
    s = summarize(synthetic_trace())
    csv_text = summary_csv(s)
    assert csv_text.splitlines()[0].startswith("scheme,size,count")
    assert len(csv_text.splitlines()) == 1 + len(s.rows)
    table = percentile_table(s)
    assert "p99_us" in table and "unserved requests" in table
    paths = write_summary(s, tmp_path)
    assert paths["summary"].read_text() == csv_text


def test_summarize_round_trips_through_csv(tmp_path):
    trace = synthetic_trace()
    trace.write(tmp_path)
    again = summarize(TraceLog.read(tmp_path))
    assert summary_csv(again) == summary_csv(summarize(trace))


# -- model against the simulator ------------------------------------------------------------


def model_vs_sim(size=5000, npaths=4, slow_rate=0.25e9, nmsg=400, seed=1):
    """p99 MCT of back-to-back single messages against the order-statistic model.

    F_P is the empirical distribution of symbol arrival offsets (from message
    start) for symbols launched before completion; n_sent is their mean count
    and s the mean receiver coding rate.
    """
    net = Network(Topology.testbed(), SwitchConfig(), seed)
    slow = npaths - 1
    net.apply_failure(FailureSpec("link_degraded", 0, slow, rate=slow_rate))
    net.apply_failure(FailureSpec("link_degraded", 1, slow, rate=slow_rate))
    ep = ReceiverEndpoint(TransportConfig())
    agent = attach_transport(net, 4, receiver=ep)
    inner, current = agent._arrive, []

    def tap(pkt):
        if pkt.data[0][0] & 0x0F == 0:
            current.append((pkt.born, net.now))
        inner(pkt)

    net.register(4, "cbrst", tap)
    chan = SimChannel(net, 0, list(range(npaths)), 4)
    rng = random.Random(seed)
    mcts, received, launched, offsets = [], [], [], []
    for i in range(nmsg):
        t0 = net.now
        current.clear()
        cbrst_send(chan, 4, rng.randbytes(size), config=TransportConfig(), message_id=i & 0xFF,
                   rng=rng)
        d = agent.delivered[-1]
        tc = round(d.completed_at * 1e12)
        mcts.append((tc - t0) / 1e12)
        received.append(d.symbols_received)
        # idle past the decoder timeout so message ids can be reused
        net.run(net.now + 11 * 10**9)
        ep.expire(net.now / 1e12)
        chan.inbox.clear()
        before = [(b, a) for b, a in current if b <= tc]
        launched.append(len(before))
        offsets += [(a - t0) / 1e12 for b, a in before]
    k = -(-size // 1456)
    s = statistics.mean(received) / k
    params = FecModelParams(k, s, max(round(statistics.mean(launched)), math.ceil(k * s)))
    model = fec_completion_quantile(params, Empirical(offsets), 0.99)
    return model, nearest_rank(mcts, 0.99)


def test_model_p99_tracks_simulator():
    model, sim = model_vs_sim()
    assert abs(model / sim - 1) <= 0.10
