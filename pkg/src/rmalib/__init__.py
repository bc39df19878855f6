"""Simulated one-sided RMA runtime with thread-scoped flushes, ordered
operation streams, memory-handle windows and remote-completing requests."""

from .core import (
    CAS,
    MAX_MEMHANDLE_SIZE,
    MEMHANDLE_SIZE,
    Address,
    Datatype,
    InfoMap,
    LatencyParams,
    ReduceOp,
    RegistrationRecord,
    decode_memhandle,
    encode_memhandle,
    pack,
    parse_ops_string,
    unpack,
)
from .rma import (
    Completion,
    LockMode,
    OpDescriptor,
    Request,
    Verb,
    Window,
    WinKind,
    World,
)
from .simnet import CapabilityTable, LoopbackTransport, SimNIC

__all__ = [
    "CAS", "MAX_MEMHANDLE_SIZE", "MEMHANDLE_SIZE", "Address", "CapabilityTable", "Completion",
    "Datatype", "InfoMap", "LatencyParams", "LockMode", "LoopbackTransport", "OpDescriptor",
    "ReduceOp", "RegistrationRecord", "Request", "SimNIC", "Verb", "WinKind", "Window", "World",
    "decode_memhandle", "encode_memhandle", "pack", "parse_ops_string", "unpack",
]
