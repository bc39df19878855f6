"""Transport-neutral pieces: ops, tickets, endpoints, registrations, memory."""

from __future__ import annotations

import enum
import random
from collections import Counter, deque
from collections.abc import Callable
from dataclasses import dataclass
from typing import NamedTuple

from ..core import CAS, Address, AtomicOp, Datatype, RegistrationRecord, ReduceOp
from ..errors import (
    AlreadyReleased,
    InvalidArgument,
    OutOfArena,
    OutOfRange,
    PayloadTooLarge,
    StaleRkey,
    UnattachedMemory,
)

NIC_ATOMIC_MAX_BYTES = 8


class OpKind(enum.Enum):
    RDMA_PUT = "rdma_put"
    RDMA_GET = "rdma_get"
    NIC_ATOMIC = "nic_atomic"
    AM_PUT = "am_put"
    AM_GET = "am_get"
    AM_ACCUMULATE = "am_accumulate"
    RKEY_FETCH = "rkey_fetch"

    @property
    def is_am(self) -> bool:
        return self.value.startswith("am_")

    @property
    def path(self) -> str:
        return "am" if self.is_am else "rdma"


@dataclass(frozen=True)
class IssuerContext:
    """A thread-like issuer inside one rank. Id 0 is the rank's main context."""

    rank: int
    id: int


class Endpoint:
    """Connection from one issuer context to one peer rank."""

    __slots__ = (
        "id", "owner", "peer", "closed", "inflight",
        "segment", "floor", "max_remote", "last_path",
    )

    def __init__(self, ep_id: int, owner: IssuerContext, peer: int):
        self.id = ep_id
        self.owner = owner
        self.peer = peer
        self.closed = False
        # tickets submitted here and not yet retired by a remote flush
        self.inflight: list[Ticket] = []
        # simulator bookkeeping: swappable delivery slots since the last
        # fence, the lower bound fence imposes on later deliveries, and the
        # latest scheduled RDMA delivery
        self.segment: list = []
        self.floor = 0
        self.max_remote = 0
        self.last_path: str | None = None

    def __repr__(self):
        return f"<Endpoint {self.id} ctx={self.owner.rank}.{self.owner.id} -> {self.peer}>"


@dataclass(eq=False)
class TransportOp:
    """One operation handed to the transport.

    ``data`` is the payload of writes; ``update`` maps the old target bytes
    to the new ones for atomics and accumulates (returning the old bytes as
    the result); ``window_id`` scopes target-side address resolution.
    """

    kind: OpKind
    target: Address
    size: int
    rkey: int | None = None
    data: bytes | None = None
    update: Callable[[bytes], bytes | None] | None = None
    window_id: int = 0
    fence_before: bool = False
    # the origin needs data back, so local completion waits for the reply
    fetch: bool = False
    on_local: Callable | None = None
    on_remote: Callable | None = None

    def __post_init__(self):
        if self.kind is OpKind.NIC_ATOMIC and self.size > NIC_ATOMIC_MAX_BYTES:
            raise PayloadTooLarge(
                f"NIC atomics carry at most {NIC_ATOMIC_MAX_BYTES} bytes, got {self.size}"
            )
        if self.size < 0:
            raise InvalidArgument("negative payload size")


class Ticket:
    """Completion tracking for one submitted op."""

    __slots__ = (
        "id", "op", "ep", "issuer", "local_done", "remote_done", "acked",
        "fault", "fault_reported", "result", "waiters",
        "t_submit", "t_remote", "t_ack",
    )

    def __init__(self, ticket_id, op, ep, issuer):
        self.id = ticket_id
        self.op = op
        self.ep = ep
        self.issuer = issuer
        self.local_done = False
        self.remote_done = False
        # the origin has learned about remote completion (or the fault)
        self.acked = False
        self.fault: Exception | None = None
        self.fault_reported = False
        self.result: bytes | None = None
        self.waiters: list = []
        self.t_submit = 0
        self.t_remote = 0
        self.t_ack = 0

    def reached(self, remote: bool) -> bool:
        return self.acked if remote else self.local_done

    def __repr__(self):
        state = "acked" if self.acked else "remote" if self.remote_done else "local" if self.local_done else "pending"
        return f"<Ticket {self.id} {self.op.kind.value} {state}>"


class CapabilityTable:
    """Largest element count each (op, datatype) pair runs as a NIC atomic."""

    def __init__(self, entries: dict | None = None):
        self._max = dict(entries or {})
        for (op, _dt), count in self._max.items():
            if op in (CAS, ReduceOp.REPLACE) and count > 1:
                raise InvalidArgument(f"{op.value} can be intrinsic for at most one element")

    @classmethod
    def default(cls) -> "CapabilityTable":
        ops = [
            ReduceOp.SUM, ReduceOp.BAND, ReduceOp.BOR, ReduceOp.BXOR, ReduceOp.MIN,
            ReduceOp.MAX, ReduceOp.REPLACE, ReduceOp.NO_OP, CAS,
        ]
        return cls({(op, dt): 1 for op in ops for dt in (Datatype.INT32, Datatype.INT64)})

    def max_count(self, op: AtomicOp, datatype: Datatype) -> int:
        return self._max.get((op, datatype), 0)

    def query(self, op: AtomicOp, datatype: Datatype, count: int) -> bool:
        return count > 0 and self.max_count(op, datatype) >= count


def query_capability(table: CapabilityTable, op: AtomicOp, datatype: Datatype, count: int) -> bool:
    return table.query(op, datatype, count)


class TraceEvent(NamedTuple):
    time_ps: int
    kind: str
    rank: int
    context: int
    endpoint: int
    op_kind: str
    nbytes: int
    ticket: int


class Transport:
    """State common to every transport: arenas, registrations, contexts.

    Subclasses provide submission, completion and blocking primitives.
    """

    timed = False

    def __init__(self, nranks: int, arena_size: int = 1 << 20, seed: int = 42,
                 capabilities: CapabilityTable | None = None):
        if nranks <= 0:
            raise InvalidArgument("need at least one rank")
        self.nranks = nranks
        self.arena_size = arena_size
        self.seed = seed
        self.capabilities = capabilities or CapabilityTable.default()
        self.arenas = [bytearray(arena_size) for _ in range(nranks)]
        self._brk = [0] * nranks
        self._rkey_rng = random.Random(f"rkeys-{seed}")
        self._issued_rkeys: set[int] = set()
        self._live: list[dict[int, RegistrationRecord]] = [{} for _ in range(nranks)]
        self._dead: set[int] = set()
        self._next_ep = 0
        self._next_ticket = 0
        self.progressing = [True] * nranks
        self.inbox: list = [deque() for _ in range(nranks)]
        self.bytes_written = [0] * nranks
        self.write_observers: list[Callable] = []
        self.event_counts: Counter = Counter()
        self.record_trace = False
        self.trace: list[TraceEvent] = []

    # -- memory ---------------------------------------------------------

    def check_rank(self, rank: int) -> None:
        if not 0 <= rank < self.nranks:
            raise InvalidArgument(f"rank {rank} outside group of {self.nranks}")

    def alloc(self, rank: int, size: int, align: int = 8) -> int:
        """Bump-allocate ``size`` bytes in ``rank``'s arena; returns the vaddr."""
        self.check_rank(rank)
        base = -(-self._brk[rank] // align) * align
        if base + size > self.arena_size:
            raise OutOfArena(f"rank {rank} arena exhausted ({size} bytes requested)")
        self._brk[rank] = base + size
        return base

    def read(self, rank: int, vaddr: int, nbytes: int) -> bytes:
        self._check_span(rank, vaddr, nbytes)
        return bytes(self.arenas[rank][vaddr:vaddr + nbytes])

    def write(self, rank: int, vaddr: int, data: bytes) -> None:
        """Local (non-RMA) store into a rank's own memory."""
        self._check_span(rank, vaddr, len(data))
        self.arenas[rank][vaddr:vaddr + len(data)] = data

    def _check_span(self, rank, vaddr, nbytes):
        self.check_rank(rank)
        if vaddr < 0 or nbytes < 0 or vaddr + nbytes > self.arena_size:
            raise OutOfArena(f"[{vaddr}, {vaddr + nbytes}) outside rank {rank} arena")

    def _store(self, rank, vaddr, data):
        self.arenas[rank][vaddr:vaddr + len(data)] = data
        self.bytes_written[rank] += len(data)
        for observer in self.write_observers:
            observer(rank, vaddr, len(data))

    # -- registration ---------------------------------------------------

    def register_memory(self, rank: int, base: int, size: int, window_id: int = 0) -> RegistrationRecord:
        self.check_rank(rank)
        if size <= 0:
            raise InvalidArgument("cannot register an empty region")
        if base < 0 or base + size > self.arena_size:
            raise OutOfArena(f"[{base}, {base + size}) outside rank {rank} arena")
        rkey = self._rkey_rng.getrandbits(64)
        while rkey in self._issued_rkeys:
            rkey = self._rkey_rng.getrandbits(64)
        self._issued_rkeys.add(rkey)
        record = RegistrationRecord(rank, base, size, rkey, window_id)
        self._live[rank][rkey] = record
        return record

    def deregister_memory(self, record: RegistrationRecord) -> None:
        live = self._live[record.owner]
        if live.get(record.rkey) != record:
            if record.rkey in self._dead:
                raise AlreadyReleased(f"registration rkey={record.rkey:#x} already released")
            raise StaleRkey(f"rkey {record.rkey:#x} was never registered on rank {record.owner}")
        del live[record.rkey]
        self._dead.add(record.rkey)

    def is_live(self, record: RegistrationRecord) -> bool:
        return self._live[record.owner].get(record.rkey) == record

    def live_registrations(self, rank: int) -> list[RegistrationRecord]:
        return list(self._live[rank].values())

    def _check_rkey(self, rank, rkey, vaddr, nbytes):
        """Return the fault an RDMA access would raise, or None."""
        record = self._live[rank].get(rkey)
        if record is None:
            return StaleRkey(f"rkey {rkey:#x} is not live on rank {rank}")
        if not record.covers(vaddr, nbytes):
            return OutOfRange(f"[{vaddr:#x}, +{nbytes}) outside registration {record.base:#x}+{record.size}")
        return None

    def resolve(self, rank: int, window_id: int, vaddr: int, nbytes: int) -> RegistrationRecord | None:
        """Target-side lookup of the live registration covering an access."""
        for record in self._live[rank].values():
            if record.parent_window_id == window_id and record.covers(vaddr, nbytes):
                return record
        return None

    # -- endpoints and tickets -------------------------------------------

    def create_endpoint(self, owner: IssuerContext, peer: int) -> Endpoint:
        self.check_rank(peer)
        self._next_ep += 1
        return Endpoint(self._next_ep, owner, peer)

    def close_endpoint(self, ep: Endpoint) -> None:
        ep.closed = True

    def _new_ticket(self, op, ep, issuer):
        self._next_ticket += 1
        return Ticket(self._next_ticket, op, ep, issuer)

    # -- applying ops to target memory -----------------------------------

    def _begin(self, ticket: Ticket) -> bytes | None:
        """Validate ``ticket`` at its target and read what it needs.

        Returns the bytes to store at commit time (None when nothing is
        written). Unauthorized accesses record a fault on the ticket instead.
        """
        op = ticket.op
        rank, vaddr = op.target
        kind = op.kind
        if kind is OpKind.RKEY_FETCH:
            ticket.result = self.resolve(rank, op.window_id, vaddr, op.size)
            return None
        if kind.is_am:
            if self.resolve(rank, op.window_id, vaddr, op.size) is None:
                ticket.fault = UnattachedMemory(
                    f"no exposed memory at rank {rank} [{vaddr:#x}, +{op.size})"
                )
                return None
        else:
            fault = self._check_rkey(rank, op.rkey, vaddr, op.size)
            if fault is not None:
                ticket.fault = fault
                return None
        if kind in (OpKind.RDMA_PUT, OpKind.AM_PUT):
            return op.data
        old = bytes(self.arenas[rank][vaddr:vaddr + op.size])
        ticket.result = old
        if kind in (OpKind.RDMA_GET, OpKind.AM_GET):
            return None
        return op.update(old)

    def _commit(self, ticket: Ticket, data: bytes | None) -> None:
        if data is not None:
            rank, vaddr = ticket.op.target
            self._store(rank, vaddr, data)

    def _execute(self, ticket: Ticket) -> None:
        self._commit(ticket, self._begin(ticket))

    # -- tracing ---------------------------------------------------------

    def _event(self, kind, rank, ticket=None, ep=None, op_kind="", nbytes=0):
        self.event_counts[kind, op_kind] += 1
        if self.record_trace:
            ep = ep if ep is not None else (ticket.ep if ticket is not None else None)
            self.trace.append(TraceEvent(
                self.now_ps, kind, rank,
                ep.owner.id if ep is not None else -1,
                ep.id if ep is not None else -1,
                op_kind, nbytes,
                ticket.id if ticket is not None else -1,
            ))

    @property
    def now_ps(self) -> int:
        return 0

    @property
    def now_us(self) -> float:
        return self.now_ps / 1e6

    def dump_trace(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["time_us", "event_kind", "rank", "context", "endpoint", "op_kind", "bytes"])
            for ev in self.trace:
                writer.writerow([f"{ev.time_ps / 1e6:.6f}", ev.kind, ev.rank, ev.context,
                                 ev.endpoint, ev.op_kind, ev.nbytes])

    # -- subclass interface ------------------------------------------------

    def current_context(self, rank: int) -> IssuerContext:
        raise NotImplementedError

    def submit(self, ep: Endpoint, op: TransportOp) -> Ticket:
        raise NotImplementedError

    def fence(self, ep: Endpoint) -> None:
        raise NotImplementedError

    def flush_endpoint(self, ep: Endpoint, local_only: bool = False) -> None:
        raise NotImplementedError

    def wait(self, ticket: Ticket, remote: bool = True) -> None:
        raise NotImplementedError

    def poll(self) -> None:
        """Give the progress engine a chance to run without blocking."""

    def set_progress(self, rank: int, progressing: bool) -> None:
        raise NotImplementedError

    def charge(self, us: float, what: str = "", rank: int = -1) -> None:
        """Account ``us`` microseconds of issuer-side work (untimed: no-op)."""

    def charge_rkey_validate(self, ep: Endpoint) -> None:
        """Cost of revalidating a cached registration before reuse."""

    def charge_win_create(self, rank: int) -> None:
        """Cost of building a window from a memory handle."""

    def charge_endpoint_poll(self, ep: Endpoint) -> None:
        """Cost of draining another context's endpoint during a process-wide flush."""

    def condition(self):
        raise NotImplementedError

    def mutex(self):
        raise NotImplementedError

    def retire(self, ep: Endpoint, tickets) -> Exception | None:
        """Drop completed tickets from ``ep`` and return the first fault among
        them that has not been reported yet."""
        first = None
        done = set()
        for t in tickets:
            done.add(t.id)
            if t.fault is not None and not t.fault_reported:
                t.fault_reported = True
                if first is None:
                    first = t.fault
        ep.inflight = [t for t in ep.inflight if t.id not in done]
        return first
