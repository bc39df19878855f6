"""Transports: a discrete-event NIC model and a threaded loopback."""

from .base import (
    CapabilityTable,
    Endpoint,
    IssuerContext,
    OpKind,
    Ticket,
    TraceEvent,
    Transport,
    TransportOp,
    query_capability,
)
from .loopback import LoopbackTransport
from .sim import PS_PER_US, SimNIC, us_to_ps

__all__ = [
    "CapabilityTable", "Endpoint", "IssuerContext", "LoopbackTransport", "OpKind",
    "PS_PER_US", "SimNIC", "Ticket", "TraceEvent", "Transport", "TransportOp",
    "query_capability", "us_to_ps",
]
