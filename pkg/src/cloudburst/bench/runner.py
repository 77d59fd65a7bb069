"""Scenario execution: single runs, parameter sweeps and the loopback bench."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import multiprocessing as mp
import os
import platform
import random
import re
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from importlib import metadata
from pathlib import Path
from typing import Any, Optional, Sequence, Union

from ..analytics import summarize, summary_csv, write_summary, SUMMARY_FIELDS
from ..ltcodec import DecodeStatus, FixedDegree, LtEncoder, decoder_new, packetize
from ..netsim import TraceLog, run
from ..transport import (
    LossyChannel,
    ReceiverEndpoint,
    SocketChannel,
    TransportConfig,
    cbrst_send,
    receiver_poll,
)
from .config import Scenario, load, validate

log = logging.getLogger(__name__)

ScenarioLike = Union[str, Path, Scenario]


def versions() -> dict[str, str]:
    out = {"python": platform.python_version()}
    for dist in ("artifact", "numpy", "pydantic"):
        try:
            out[dist] = metadata.version(dist)
        except metadata.PackageNotFoundError:
            out[dist] = "unknown"
    return out


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _resolve(scenario: ScenarioLike, overrides: Optional[dict[str, Any]] = None) -> Scenario:
    sc = scenario if isinstance(scenario, Scenario) else load(scenario)
    if overrides:
        sc = sc.with_overrides(overrides)
    return sc


def simulate(sc: Scenario) -> TraceLog:
    return run(**sc.sim_kwargs())


def run_scenario(scenario: ScenarioLike, out_dir: Union[str, Path],
                 overrides: Optional[dict[str, Any]] = None) -> Path:
    """Run one scenario and write its artifacts; returns ``out_dir``.

    Output is a pure function of the validated config: trace.csv, drops.csv,
    throughput.csv, summary.csv, percentiles.txt and manifest.json. The
    manifest embeds the full config, so ``run --scenario manifest.json``
    reproduces the run.
    """
    sc = _resolve(scenario, overrides)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trace = simulate(sc)
    paths = trace.write(out)
    paths.update(write_summary(summarize(trace), out))
    manifest = {
        "name": sc.name,
        "seed": sc.seed,
        "config_hash": sc.config_hash(),
        "config": sc.canonical(),
        "versions": versions(),
        "trace_digest": trace.digest(),
        "meta": trace.meta,
        "class_counters": trace.class_counters,
        "outputs": {p.name: _sha256(p) for _, p in sorted(paths.items())},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def _slug(value: Any) -> str:
    text = json.dumps(value, sort_keys=True, separators=(",", ":"))
    return re.sub(r"[^A-Za-z0-9._-]+", "_", text).strip("_")[:40] or "value"


def _sweep_one(job: tuple[dict, str, Any, str]) -> tuple[Any, str]:
    data, param, value, out = job
    sc = validate(data).with_overrides({param: value})
    run_scenario(sc, out)
    return value, out


def sweep(param: str, values: Sequence[Any], base_config: ScenarioLike,
          out_dir: Union[str, Path], workers: Optional[int] = None,
          overrides: Optional[dict[str, Any]] = None) -> Path:
    """Run ``base_config`` once per value of the dotted ``param``.

    Each run lands in its own subdirectory; their summary rows are combined
    into ``sweep.csv`` with the swept value in the first column. Runs are
    independent processes when ``workers`` > 1.
    """
    base = _resolve(base_config, overrides)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = base.canonical()
    # validate every point up front so a bad value fails before any run
    for v in values:
        base.with_overrides({param: v})
    jobs = [(data, param, v, str(out / f"{i:03d}_{_slug(v)}")) for i, v in enumerate(values)]
    workers = workers if workers is not None else min(len(jobs), os.cpu_count() or 1)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_one, jobs))
    else:
        results = [_sweep_one(j) for j in jobs]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([param] + SUMMARY_FIELDS)
    for value, run_dir in results:
        with open(Path(run_dir) / "summary.csv", newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        label = value if isinstance(value, (int, float, str)) else json.dumps(value)
        for r in rows:
            w.writerow([label] + r)
    target = out / "sweep.csv"
    target.write_text(buf.getvalue())
    return target


def summarize_dir(path: Union[str, Path], out_dir: Optional[Union[str, Path]] = None) -> str:
    """Recompute summary.csv and percentiles.txt from a trace CSV or run directory."""
    trace = TraceLog.read(path)
    summary = summarize(trace)
    if out_dir is not None:
        write_summary(summary, out_dir)
    return summary_csv(summary)


# -- loopback bench --------------------------------------------------------------------

BENCH_FIELDS = ["size", "k", "drop_rate", "encode_us", "decode_us", "e2e_us", "ok",
                "symbols_sent", "rounds"]


def _codec_times(size: int, rng: random.Random, num_paths: int) -> tuple[int, float, float]:
    """Wall time to packetize plus emit one round, and of the push that completes."""
    data = rng.randbytes(size)
    t0 = time.perf_counter()
    msg = packetize(data, part_len=TransportConfig().budget.payload_len)
    enc = LtEncoder(msg, FixedDegree(5), rng)
    first = [enc.next_raw() for _ in range(num_paths)]
    enc_s = time.perf_counter() - t0
    dec = decoder_new(msg.k, msg.size, msg.part_len)
    symbols = first
    last = 0.0
    while True:
        for mask, payload in symbols:
            t = time.perf_counter()
            res = dec.push_raw(mask, payload)
            last = time.perf_counter() - t
            if res.status is DecodeStatus.COMPLETE:
                if res.data != data:
                    raise AssertionError("loopback bench decoded corrupt data")
                return msg.k, enc_s, last
        symbols = [enc.next_raw() for _ in range(num_paths)]


def _serve(conn, num_paths: int, config: TransportConfig, idle: float) -> None:
    """Receiver process: report bound ports, then deliver until told to stop."""
    rx = SocketChannel([0] * num_paths)
    endpoint = ReceiverEndpoint(config)
    conn.send(rx.local_ports)
    try:
        while not conn.poll():
            for d in receiver_poll(endpoint, rx, timeout=idle):
                conn.send((time.perf_counter(), hashlib.sha256(d.data).hexdigest(),
                           d.symbols_received))
    finally:
        rx.close()
        conn.close()


class LoopbackReceiver:
    """A ReceiverEndpoint on 127.0.0.1 in a child process.

    A separate process keeps the receiver off the sender's interpreter lock,
    so STOP timing reflects the sockets rather than thread switching.
    """

    def __init__(self, num_paths: int = 4, config: Optional[TransportConfig] = None,
                 idle: float = 0.001):
        ctx = mp.get_context("fork") if hasattr(os, "fork") else mp.get_context()
        self._conn, child = ctx.Pipe()
        self._proc = ctx.Process(target=_serve, args=(child, num_paths,
                                                      config or TransportConfig(), idle),
                                 daemon=True)
        self._proc.start()
        child.close()
        self.ports: list[int] = self._conn.recv()

    def wait(self, timeout: float = 1.0) -> Optional[tuple[float, str, int]]:
        """(receive time, sha256 of the message, symbols used) or None."""
        if self._conn.poll(timeout):
            return self._conn.recv()
        return None

    def close(self) -> None:
        if self._proc.is_alive():
            try:
                self._conn.send("stop")
            except (BrokenPipeError, OSError):
                pass
            self._proc.join(2.0)
            if self._proc.is_alive():
                self._proc.kill()
        self._conn.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _e2e(size: int, drop_rate: float, seed: int, num_paths: int,
         config: TransportConfig) -> tuple[bool, float, int, int]:
    rng = random.Random(seed)
    data = rng.randbytes(size)
    with LoopbackReceiver(num_paths, config) as rx:
        with SocketChannel([0] * num_paths, rx.ports, rng=random.Random(seed + 1)) as tx:
            chan = LossyChannel(tx, drop_rate, seed) if drop_rate > 0 else tx
            res = cbrst_send(chan, None, data, config=config, rng=random.Random(seed + 2))
        got = rx.wait(1.0)
    ok = bool(res) and got is not None and got[1] == hashlib.sha256(data).hexdigest()
    return ok, res.elapsed, res.symbols_sent, res.rounds


def loopback_bench(message_sizes: Sequence[int], drop_rate: float = 0.0, *,
                   repeats: int = 20, seed: int = 1, num_paths: int = 4,
                   link_capacity: float = 1e9, r: float = 1.0, e2e: bool = True,
                   out: Optional[Union[str, Path]] = None) -> str:
    """Median en/decode wall time and loopback end-to-end latency per size.

    Returns the CSV text (and writes it to ``out`` when given). The
    ``encode_us``/``decode_us`` columns are the numbers netsim's cost table
    takes, keyed by ``k``.
    """
    rng = random.Random(seed)
    config = TransportConfig(r=r, link_capacity=link_capacity, timeout=1.0)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCH_FIELDS)
    for size in message_sizes:
        encs, decs = [], []
        k = 0
        for _ in range(repeats):
            k, e, d = _codec_times(size, rng, num_paths)
            encs.append(e)
            decs.append(d)
        row = [size, k, drop_rate, f"{statistics.median(encs) * 1e6:.1f}",
               f"{statistics.median(decs) * 1e6:.1f}"]
        if e2e:
            runs = [_e2e(size, drop_rate, seed * 1000 + i, num_paths, config)
                    for i in range(max(1, repeats // 4))]
            row += [f"{statistics.median(x[1] for x in runs) * 1e6:.1f}",
                    sum(x[0] for x in runs) == len(runs),
                    round(statistics.mean(x[2] for x in runs), 1),
                    round(statistics.mean(x[3] for x in runs), 1)]
        else:
            row += ["", "", "", ""]
        w.writerow(row)
    text = buf.getvalue()
    if out is not None:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    return text
