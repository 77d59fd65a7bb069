"""CloudBurst: rateless-coded multipath message transport.

Modules:

- ``ltcodec``: LT encoder and incremental GF(2) decoder
- ``wire``: datagram header format
- ``transport``: sender/receiver state machines and socket channels
- ``netsim``: discrete-event leaf-spine simulator
- ``analytics``: order-statistic latency models and trace summaries
- ``bench``: scenario files and the ``cloudburst`` CLI
"""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.0.0"

from .ltcodec import DecodeStatus, FixedDegree, LtEncoder, RobustSoliton, decoder_new, packetize
from .transport import ReceiverEndpoint, SenderSession, TransportConfig, cbrst_send
from .wire import CbrstHeader, PacketType, header_overhead, parse, serialize

__all__ = [
    "CbrstHeader", "DecodeStatus", "FixedDegree", "LtEncoder", "PacketType", "ReceiverEndpoint",
    "RobustSoliton", "SenderSession", "TransportConfig", "__version__", "cbrst_send",
    "decoder_new", "header_overhead", "packetize", "parse", "serialize",
]
