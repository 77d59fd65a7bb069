from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .topology import PS_PER_S

MESSAGE_FIELDS = [
    "uid", "scheme", "src", "dst", "size", "k", "requested_us", "start_us",
    "completion_us", "mct_us", "symbols_sent", "symbols_received", "status",
]
DROP_FIELDS = ["port", "class", "enqueued", "dropped", "marked", "max_queue_delay_us"]
THROUGHPUT_FIELDS = ["flow", "kind", "src", "dst", "window_start_us", "window_us", "bytes", "gbps"]


def _us(t_ps: Optional[int]) -> str:
    if t_ps is None:
        return ""
    return f"{t_ps / 1e6:.6f}"


def _from_us(text: str) -> Optional[int]:
    if text == "":
        return None
    return int(round(float(text) * 1e6))


@dataclass
class MessageRecord:
    uid: int
    scheme: str
    src: int
    dst: int
    size: int
    k: int
    start: int  # ps
    requested: Optional[int] = None
    completion: Optional[int] = None
    symbols_sent: int = 0
    symbols_received: int = 0
    status: str = "pending"

    @property
    def mct(self) -> Optional[float]:
        """Completion time in seconds, None if never delivered."""
        if self.completion is None:
            return None
        return (self.completion - self.start) / PS_PER_S

    def row(self) -> dict:
        mct = None if self.completion is None else self.completion - self.start
        return {
            "uid": self.uid, "scheme": self.scheme, "src": self.src, "dst": self.dst,
            "size": self.size, "k": self.k, "requested_us": _us(self.requested),
            "start_us": _us(self.start), "completion_us": _us(self.completion),
            "mct_us": _us(mct), "symbols_sent": self.symbols_sent,
            "symbols_received": self.symbols_received, "status": self.status,
        }

    @classmethod
    def from_row(cls, row: dict) -> "MessageRecord":
        return cls(
            uid=int(row["uid"]), scheme=row["scheme"], src=int(row["src"]), dst=int(row["dst"]),
            size=int(row["size"]), k=int(row["k"]), start=_from_us(row["start_us"]),
            requested=_from_us(row["requested_us"]), completion=_from_us(row["completion_us"]),
            symbols_sent=int(row["symbols_sent"]), symbols_received=int(row["symbols_received"]),
            status=row["status"],
        )


@dataclass
class ThroughputSample:
    flow: int
    kind: str
    src: int
    dst: int
    window_start: int  # ps
    window: int  # ps
    nbytes: int

    @property
    def gbps(self) -> float:
        return self.nbytes * 8 / (self.window / PS_PER_S) / 1e9

    def row(self) -> dict:
        return {
            "flow": self.flow, "kind": self.kind, "src": self.src, "dst": self.dst,
            "window_start_us": _us(self.window_start), "window_us": _us(self.window),
            "bytes": self.nbytes, "gbps": f"{self.gbps:.6f}",
        }


@dataclass
class TraceLog:
    messages: list[MessageRecord] = field(default_factory=list)
    port_stats: list[dict] = field(default_factory=list)
    throughput: list[ThroughputSample] = field(default_factory=list)
    class_counters: dict[str, dict[str, int]] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def completed(self) -> list[MessageRecord]:
        return [m for m in self.messages if m.completion is not None]

    def _csv(self, fields, rows) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)
        return buf.getvalue()

    def messages_csv(self) -> str:
        return self._csv(MESSAGE_FIELDS, (m.row() for m in self.messages))

    def drops_csv(self) -> str:
        return self._csv(DROP_FIELDS, self.port_stats)

    def throughput_csv(self) -> str:
        return self._csv(THROUGHPUT_FIELDS, (s.row() for s in self.throughput))

    def digest(self) -> str:
        h = hashlib.sha256()
        for part in (self.messages_csv(), self.drops_csv(), self.throughput_csv()):
            h.update(part.encode())
        return h.hexdigest()

    def write(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "trace": out / "trace.csv",
            "drops": out / "drops.csv",
            "throughput": out / "throughput.csv",
        }
        paths["trace"].write_text(self.messages_csv())
        paths["drops"].write_text(self.drops_csv())
        paths["throughput"].write_text(self.throughput_csv())
        return paths

    @classmethod
    def read(cls, path) -> "TraceLog":
        """Load a trace CSV, or a directory holding trace.csv and friends."""
        p = Path(path)
        trace_file = p / "trace.csv" if p.is_dir() else p
        log = cls()
        with open(trace_file, newline="") as fh:
            log.messages = [MessageRecord.from_row(r) for r in csv.DictReader(fh)]
        base = trace_file.parent
        drops = base / "drops.csv"
        if drops.exists():
            with open(drops, newline="") as fh:
                log.port_stats = [
                    # the delay column stays text, exactly as written
                    {k: (int(v) if k in ("enqueued", "dropped", "marked") else v)
                     for k, v in r.items()}
                    for r in csv.DictReader(fh)
                ]
        tput = base / "throughput.csv"
        if tput.exists():
            with open(tput, newline="") as fh:
                log.throughput = [
                    ThroughputSample(int(r["flow"]), r["kind"], int(r["src"]), int(r["dst"]),
                                     _from_us(r["window_start_us"]), _from_us(r["window_us"]),
                                     int(r["bytes"]))
                    for r in csv.DictReader(fh)
                ]
        return log
