"""Scenario files: TOML text validated into simulator arguments.

A scenario is one TOML document. Top-level keys name the run; tables map
onto the simulator's dataclasses. Unknown keys are errors, and every error
carries the dotted field path plus the line it came from when that line
can be found.

    schema = 1
    name = "ablation"
    seed = 1
    duration = 2.0

    [topology]
    preset = "testbed"

    [workload]
    pattern = "all_to_all"
    rate = 250

    [scheme]
    name = "D"
    r = 0.5

    [sweep]
    param = "scheme.name"
    values = ["A", "B", "C", "D", "DCTCP"]
"""

from __future__ import annotations

import copy
import hashlib
import json
import re
import sys
from pathlib import Path
from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ..netsim import BackgroundSpec, CodecCosts, FailureSpec, SchemeSpec, SwitchConfig, Topology, WorkloadSpec
from ..netsim.topology import ConfigError as SimConfigError
from ..netsim.workload import DEFAULT_SIZES, PATTERNS
from ..transport import TransportConfig

SCHEMA_VERSION = 1


class ScenarioError(ValueError):
    """Invalid scenario file; ``problems`` lists (field path, line, message)."""

    def __init__(self, source: str, problems: list[tuple[str, Optional[int], str]]):
        self.source = source
        self.problems = problems
        lines = []
        for path, line, msg in problems:
            where = f"{source}:{line}" if line else source
            lines.append(f"{where}: {path or '<root>'}: {msg}")
        super().__init__("\n".join(lines))


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TopologyModel(_Strict):
    preset: Optional[Literal["testbed", "large_scale"]] = None
    hosts_per_leaf: Optional[int] = Field(None, ge=1)
    leaves: Optional[int] = Field(None, ge=1)
    spines: Optional[int] = Field(None, ge=1)
    edge_rate_gbps: Optional[float] = Field(None, gt=0)
    core_rate_gbps: Optional[float] = Field(None, gt=0)
    edge_delay_us: Optional[float] = Field(None, ge=0)
    core_delay_us: Optional[float] = Field(None, ge=0)

    def build(self) -> Topology:
        base = Topology.large_scale() if self.preset == "large_scale" else Topology.testbed()
        kw = dict(base.__dict__)
        for key in ("hosts_per_leaf", "leaves", "spines"):
            if getattr(self, key) is not None:
                kw[key] = getattr(self, key)
        if self.edge_rate_gbps is not None:
            kw["edge_rate"] = self.edge_rate_gbps * 1e9
        if self.core_rate_gbps is not None:
            kw["core_rate"] = self.core_rate_gbps * 1e9
        if self.edge_delay_us is not None:
            kw["edge_delay"] = self.edge_delay_us * 1e-6
        if self.core_delay_us is not None:
            kw["core_delay"] = self.core_delay_us * 1e-6
        return Topology(**kw)


class WorkloadModel(_Strict):
    pattern: str = "all_to_all"
    rate: float = Field(0.0, ge=0, description="requests per second per requesting server")
    sizes: list[int] = Field(default_factory=lambda: list(DEFAULT_SIZES))
    fanout: int = Field(1, ge=1)
    incast_n: int = Field(0, ge=0)
    incast_size: int = Field(90_000, ge=1)
    incast_senders: int = Field(4, ge=1)

    @field_validator("pattern")
    @classmethod
    def _pattern(cls, v: str) -> str:
        if v not in PATTERNS:
            raise ValueError(f"must be one of {list(PATTERNS)}")
        return v

    @field_validator("sizes")
    @classmethod
    def _sizes(cls, v: list[int]) -> list[int]:
        if not v or min(v) < 1:
            raise ValueError("must be a non-empty list of positive byte counts")
        return v

    def build(self) -> WorkloadSpec:
        return WorkloadSpec(pattern=self.pattern, rate=self.rate, sizes=tuple(self.sizes),
                            incast_n=self.incast_n, incast_size=self.incast_size,
                            incast_senders=self.incast_senders, fanout=self.fanout)


class SchemeModel(_Strict):
    name: Literal["A", "B", "C", "D", "DCTCP"] = "D"
    r: Optional[float] = Field(None, gt=0, le=1)

    def build(self) -> SchemeSpec:
        return SchemeSpec(self.name, self.r)


class SwitchModel(_Strict):
    cb_queue_packets: int = Field(10, ge=1)
    deep_cb_queue_packets: int = Field(66, ge=1)
    bg_queue_bytes: int = Field(100_000, ge=1)
    ecn_k_packets: int = Field(65, ge=1)
    w_bg: int = Field(1, ge=1)
    w_cb: int = Field(1, ge=1)
    quantum_bytes: int = Field(1500, ge=1)
    host_cb_queue_packets: Optional[int] = Field(None, ge=1)
    host_bg_queue_bytes: Optional[int] = Field(None, ge=1)

    def build(self) -> SwitchConfig:
        return SwitchConfig(**self.model_dump())


class TransportModel(_Strict):
    timeout_ms: float = Field(100.0, gt=0)
    decoder_idle_timeout_ms: float = Field(10.0, gt=0)
    feedback_threshold: Optional[int] = Field(None, ge=1)
    degree: int = Field(5, ge=1)
    x: int = Field(6, ge=1, le=9)
    mtu: int = Field(1500, ge=64)

    def build(self, link_capacity: float) -> TransportConfig:
        cfg = {k: v for k, v in self.model_dump().items() if v is not None}
        cfg["link_capacity_gbps"] = link_capacity / 1e9
        return TransportConfig.from_mapping(cfg)


class BackgroundModel(_Strict):
    flows: int = Field(0, ge=0)
    size: int = Field(10_000_000, ge=1)
    pairs: Optional[list[tuple[int, int]]] = None
    paths: Optional[list[int]] = None
    ecmp: bool = False

    def build(self) -> BackgroundSpec:
        return BackgroundSpec(self.flows, self.size,
                              [tuple(p) for p in self.pairs] if self.pairs else None,
                              list(self.paths) if self.paths else None, self.ecmp)


class FailureModel(_Strict):
    kind: Literal["link_down", "link_degraded"] = "link_down"
    leaf: int = Field(0, ge=0)
    spine: int = Field(ge=0)
    at: float = Field(0.0, ge=0)
    rate_gbps: Optional[float] = Field(None, gt=0)

    def build(self) -> FailureSpec:
        rate = self.rate_gbps * 1e9 if self.rate_gbps is not None else None
        return FailureSpec(self.kind, self.leaf, self.spine, self.at, rate)


class CostsModel(_Strict):
    preset: Literal["host", "zero"] = "host"
    encode_us: Optional[list[tuple[int, float]]] = None
    decode_us: Optional[list[tuple[int, float]]] = None

    def build(self) -> CodecCosts:
        base = CodecCosts() if self.preset == "zero" else CodecCosts.host_default()
        return CodecCosts(
            encode_us=[tuple(p) for p in self.encode_us] if self.encode_us else base.encode_us,
            decode_us=[tuple(p) for p in self.decode_us] if self.decode_us else base.decode_us,
        )


class SweepModel(_Strict):
    param: str
    values: list[Any] = Field(min_length=1)


class Scenario(_Strict):
    schema_: int = Field(SCHEMA_VERSION, alias="schema")
    name: str = "scenario"
    description: str = ""
    seed: int = 1
    duration: float = Field(1.0, ge=0, description="seconds of offered load")
    drain: float = Field(0.05, ge=0, description="extra simulated seconds to finish messages")
    throughput_window: Optional[float] = Field(None, gt=0)
    topology: TopologyModel = Field(default_factory=TopologyModel)
    workload: WorkloadModel = Field(default_factory=WorkloadModel)
    scheme: SchemeModel = Field(default_factory=SchemeModel)
    switch: SwitchModel = Field(default_factory=SwitchModel)
    transport: TransportModel = Field(default_factory=TransportModel)
    background: BackgroundModel = Field(default_factory=BackgroundModel)
    failures: list[FailureModel] = Field(default_factory=list)
    costs: CostsModel = Field(default_factory=CostsModel)
    sweep: Optional[SweepModel] = None

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    @field_validator("schema_")
    @classmethod
    def _schema(cls, v: int) -> int:
        if v != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema version {v}; this build reads {SCHEMA_VERSION}")
        return v

    @model_validator(mode="after")
    def _cross(self) -> "Scenario":
        topo = self.topology.build()
        for i, f in enumerate(self.failures):
            if f.leaf >= topo.leaves or f.spine >= topo.spines:
                raise ValueError(f"failures[{i}] names leaf {f.leaf} / spine {f.spine} "
                                 f"outside a {topo.leaves}-leaf, {topo.spines}-spine fabric")
        if self.background.pairs:
            for a, b in self.background.pairs:
                if not (0 <= a < topo.hosts and 0 <= b < topo.hosts) or a == b:
                    raise ValueError(f"background pair ({a}, {b}) is not two distinct hosts")
        if self.background.paths and max(self.background.paths) >= topo.spines:
            raise ValueError("background.paths names a spine that does not exist")
        return self

    # -- conversion -------------------------------------------------------------------

    def canonical(self) -> dict:
        return self.model_dump(mode="json", by_alias=True)

    def config_hash(self) -> str:
        text = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def sim_kwargs(self) -> dict[str, Any]:
        topo = self.topology.build()
        return {
            "topology": topo,
            "workload": self.workload.build(),
            "failures": [f.build() for f in self.failures],
            "seed": self.seed,
            "duration": self.duration,
            "scheme": self.scheme.build(),
            "switch": self.switch.build(),
            "transport": self.transport.build(topo.edge_rate),
            "background": self.background.build() if self.background.flows else None,
            "costs": self.costs.build(),
            "drain": self.drain,
            "throughput_window": self.throughput_window,
        }

    def with_overrides(self, overrides: dict[str, Any], source: str = "<override>") -> "Scenario":
        """Copy with dotted-path overrides applied, e.g. ``{"scheme.name": "A"}``."""
        data = copy.deepcopy(self.canonical())
        for path, value in overrides.items():
            set_path(data, path, value)
        return validate(data, source)


def set_path(data: dict, path: str, value: Any) -> None:
    keys = path.split(".")
    node = data
    for key in keys[:-1]:
        nxt = node.get(key)
        if nxt is None:
            nxt = node[key] = {}
        if not isinstance(nxt, dict):
            raise ScenarioError("<override>", [(path, None, f"{key} is not a table")])
        node = nxt
    node[keys[-1]] = value


def _line_of(text: Optional[str], loc: tuple) -> Optional[int]:
    """Best-effort line of the key at ``loc`` in TOML ``text``."""
    if not text:
        return None
    names = [p for p in loc if isinstance(p, str)]
    if not names:
        return None
    table_path = names[:-1]
    key = names[-1]
    current: list[str] = []
    fallback = None
    key_re = re.compile(rf"^\s*{re.escape(key)}\s*=")
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        m = re.match(r"^\[\[?\s*([^\]]+?)\s*\]\]?", line)
        if m:
            current = [s.strip().strip('"') for s in m.group(1).split(".")]
            if current == names:
                fallback = fallback or no
            continue
        if key_re.match(raw):
            if current == table_path:
                return no
            fallback = fallback or no
    return fallback


def validate(data: dict, source: str = "<scenario>", text: Optional[str] = None) -> Scenario:
    try:
        return Scenario.model_validate(data)
    except ValidationError as exc:
        problems = []
        for err in exc.errors():
            loc = tuple(err["loc"])
            path = ".".join(str(p) for p in loc)
            problems.append((path, _line_of(text, loc), err["msg"]))
        raise ScenarioError(source, problems) from None
    except SimConfigError as exc:
        raise ScenarioError(source, [("", None, str(exc))]) from None


def loads(text: str, source: str = "<string>") -> Scenario:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ScenarioError(source, [("", int(m.group(1)) if m else None,
                                      f"TOML syntax: {exc}")]) from None
    return validate(data, source, text)


def load(path) -> Scenario:
    p = Path(path)
    if not p.exists():
        bundled = bundled_path(str(path))
        if bundled is None:
            raise ScenarioError(str(path), [("", None, "no such file or bundled scenario")])
        p = bundled
    if p.suffix == ".json":
        # a run manifest: replay its embedded config
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ScenarioError(str(p), [("", exc.lineno, f"JSON syntax: {exc.msg}")]) from None
        return validate(data.get("config", data), str(p))
    return loads(p.read_text(), str(p))


SCENARIO_DIR = Path(__file__).with_name("scenarios")


def bundled_scenarios() -> dict[str, Path]:
    return {p.stem: p for p in sorted(SCENARIO_DIR.glob("*.toml"))}


def bundled_path(name: str) -> Optional[Path]:
    stem = Path(name).stem
    return bundled_scenarios().get(stem)
