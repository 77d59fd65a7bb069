"""Discrete-event leaf-spine simulator with CloudBurst and DCTCP hosts."""

from .core import (
    BACKGROUND,
    CLASS_NAMES,
    CLOUDBURST,
    CONTROL,
    DROPPED,
    MARKED,
    QUEUED,
    Network,
    Packet,
    Port,
    flow_hash,
)
from .dctcp import DctcpFlow, TcpStack
from .hosts import CloudBurstHost, EndpointAgent, SimChannel, attach_transport, sim_channel
from .topology import CodecCosts, ConfigError, FailureSpec, SwitchConfig, Topology, ps, seconds
from .trace import MessageRecord, ThroughputSample, TraceLog
from .workload import BackgroundSpec, SchemeSpec, WorkloadSpec, poisson_arrivals, run

__all__ = [
    "BACKGROUND", "CLASS_NAMES", "CLOUDBURST", "CONTROL", "DROPPED", "MARKED", "QUEUED",
    "BackgroundSpec", "CloudBurstHost", "CodecCosts", "ConfigError", "DctcpFlow",
    "EndpointAgent", "FailureSpec", "MessageRecord", "Network", "Packet", "Port",
    "SchemeSpec", "SimChannel", "SwitchConfig", "TcpStack", "ThroughputSample", "Topology",
    "TraceLog", "WorkloadSpec", "attach_transport", "flow_hash", "poisson_arrivals", "ps",
    "run", "seconds", "sim_channel",
]
