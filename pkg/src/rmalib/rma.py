"""One-sided window API over a pluggable transport.

A :class:`World` wraps a transport and creates windows collectively: one
call returns the handle of every rank in the group. Windows created by
duplication or from a memory handle share the per-rank state (endpoints,
pending operations, epoch, registration cache) of the window they derive
from, and that state is reference counted.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass

from .core import (
    CAS,
    DYNAMIC_MODE_KEY,
    ORDER_KEY,
    SCOPE_KEY,
    ASSERT_INTRINSIC_KEY,
    Address,
    Datatype,
    InfoMap,
    ReduceOp,
    decode_memhandle,
    encode_memhandle,
    pack,
    parse_ops_string,
    reduce_bytes,
)
from .errors import (
    AssertionViolation,
    AttachOverlap,
    EpochError,
    InvalidArgument,
    InvalidHandle,
    InvalidTarget,
    MismatchedGroup,
    NoEpoch,
    OpenEpoch,
    OutOfRange,
    OutstandingRequests,
    StaleRkey,
    UnattachedMemory,
    UnknownBase,
    UnsupportedOperation,
)
from .simnet.base import IssuerContext, OpKind, Ticket, Transport, TransportOp


class WinKind(enum.Enum):
    ALLOCATED = "allocated"
    DYNAMIC = "dynamic"
    MEMHANDLE = "memhandle"
    DUPLICATE = "duplicate"


class Verb(enum.Enum):
    PUT = "put"
    GET = "get"
    ACCUMULATE = "accumulate"
    GET_ACCUMULATE = "get_accumulate"
    FETCH_AND_OP = "fetch_and_op"
    COMPARE_AND_SWAP = "compare_and_swap"

    @property
    def fetches(self) -> bool:
        return self not in (Verb.PUT, Verb.ACCUMULATE)

    @property
    def atomic(self) -> bool:
        return self not in (Verb.PUT, Verb.GET)


class Completion(enum.Enum):
    IMPLICIT = "implicit"
    LOCAL_REQUEST = "local_request"
    REMOTE_REQUEST = "remote_request"


class LockMode(enum.Enum):
    SHARED = "shared"
    EXCLUSIVE = "exclusive"


@dataclass
class OpDescriptor:
    """One RMA operation.

    ``data`` is the packed origin buffer (the operand for accumulates, the
    desired value for compare-and-swap). ``count`` is derived from it when
    omitted. Fetched bytes are copied into ``result`` when the op completes.
    """

    verb: Verb
    target: int
    disp: int
    datatype: Datatype = Datatype.BYTE
    count: int | None = None
    data: bytes | None = None
    op: ReduceOp | None = None
    compare: bytes | None = None
    result: bytearray | None = None
    completion: Completion = Completion.IMPLICIT

    def __post_init__(self):
        size = self.datatype.size_bytes
        if self.verb is Verb.GET:
            if self.count is None:
                raise InvalidArgument("get needs a count")
        else:
            if self.data is None:
                raise InvalidArgument(f"{self.verb.value} needs an origin buffer")
            self.data = pack(self.datatype, self.data)
            n = len(self.data) // size
            if self.count is None:
                self.count = n
            elif self.count != n:
                raise InvalidArgument(f"count {self.count} does not match {n} buffered elements")
        if self.count <= 0:
            raise InvalidArgument("operations move at least one element")
        if self.verb in (Verb.FETCH_AND_OP, Verb.COMPARE_AND_SWAP) and self.count != 1:
            raise InvalidArgument(f"{self.verb.value} works on exactly one element")
        if self.verb in (Verb.ACCUMULATE, Verb.GET_ACCUMULATE, Verb.FETCH_AND_OP):
            if not isinstance(self.op, ReduceOp):
                raise InvalidArgument(f"{self.verb.value} needs a reduce op")
            if not self.op.valid_for(self.datatype):
                raise InvalidArgument(f"{self.op.value} is undefined for {self.datatype.value}")
        if self.verb is Verb.COMPARE_AND_SWAP:
            if self.compare is None:
                raise InvalidArgument("compare_and_swap needs a compare value")
            self.compare = pack(self.datatype, self.compare)
            if len(self.compare) != size:
                raise InvalidArgument("compare value must be one element")
        if self.verb.fetches and self.result is None:
            self.result = bytearray(self.nbytes)

    @property
    def nbytes(self) -> int:
        return self.count * self.datatype.size_bytes

    @property
    def atomic_op(self):
        return CAS if self.verb is Verb.COMPARE_AND_SWAP else self.op


class Request:
    """Completion handle of a request-based op."""

    _ids = itertools.count(1)

    def __init__(self, transport: Transport, ticket: Ticket, remote: bool, result: bytearray | None):
        self.id = next(Request._ids)
        self._transport = transport
        self._ticket = ticket
        self.kind = "remote" if remote else "local"
        self._result = result

    @property
    def done(self) -> bool:
        return self._ticket.reached(self.kind == "remote")

    @property
    def state(self) -> str:
        if not self.done:
            return "pending"
        if self._ticket.acked and self._ticket.fault is not None:
            return "failed"
        return "complete"

    @property
    def error(self) -> Exception | None:
        return self._ticket.fault if self.state == "failed" else None

    @property
    def result(self) -> bytearray | None:
        return self._result

    def test(self) -> bool:
        if not self.done:
            self._transport.poll()
        return self.done

    def wait(self) -> None:
        self._transport.wait(self._ticket, remote=self.kind == "remote")
        if self.state == "failed":
            self._ticket.fault_reported = True
            raise self._ticket.fault

    def __repr__(self):
        return f"<Request {self.id} {self.kind} {self.state}>"


def request_test(req: Request) -> bool:
    return req.test()


def request_wait(req: Request) -> None:
    req.wait()


class EpochState:
    """Access epochs one rank has open on a window family."""

    def __init__(self):
        self.locks: dict[int, LockMode] = {}
        self.lock_all = False

    def is_open(self, target: int) -> bool:
        return self.lock_all or target in self.locks

    def any_open(self) -> bool:
        return self.lock_all or bool(self.locks)


class _TargetLock:
    __slots__ = ("exclusive", "shared")

    def __init__(self):
        self.exclusive: int | None = None
        self.shared = 0


class _Family:
    """Collective state of the windows created by one allocate/dynamic call."""

    def __init__(self, world: "World", win_id: int, kind: WinKind, group: list[int]):
        self.world = world
        self.id = win_id
        self.kind = kind
        self.group = group
        self.bases: dict[int, int] = {}
        self.sizes: dict[int, int] = {}
        self.disp_units: dict[int, int] = {}
        self.records: dict = {}
        self.target_locks = {r: _TargetLock() for r in group}
        self.lock_cond = world.transport.condition()

    def acquire(self, origin: int, target: int, mode: LockMode) -> None:
        tl = self.target_locks[target]
        with self.lock_cond:
            if mode is LockMode.EXCLUSIVE:
                self.lock_cond.wait_for(lambda: tl.exclusive is None and tl.shared == 0)
                tl.exclusive = origin
            else:
                self.lock_cond.wait_for(lambda: tl.exclusive is None)
                tl.shared += 1

    def release(self, target: int, mode: LockMode) -> None:
        tl = self.target_locks[target]
        with self.lock_cond:
            if mode is LockMode.EXCLUSIVE:
                tl.exclusive = None
            else:
                tl.shared -= 1
            self.lock_cond.notify_all()


class _RankState:
    """Origin-side state one rank shares among a window and its derivatives."""

    def __init__(self, family: _Family, rank: int):
        transport = family.world.transport
        self.family = family
        self.rank = rank
        self.epoch = EpochState()
        self.endpoints: dict[tuple[int, int], object] = {}
        self.pending: dict[tuple[int, int], list[Ticket]] = {}
        self.lock = transport.mutex()
        self.flush_mutex = transport.mutex()
        self.rkey_cache: dict[int, list] = {}
        self.attachments: dict[int, object] = {}
        self.refs = 0
        self.destroyed = False

    def endpoint(self, ctx: IssuerContext, peer: int):
        key = (ctx.id, peer)
        ep = self.endpoints.get(key)
        if ep is None:
            with self.lock:
                ep = self.endpoints.get(key)
                if ep is None:
                    ep = self.family.world.transport.create_endpoint(ctx, peer)
                    self.endpoints[key] = ep
        return ep

    def track(self, ctx: IssuerContext, target: int, ticket: Ticket) -> None:
        with self.lock:
            self.pending.setdefault((ctx.id, target), []).append(ticket)

    def prune(self, targets) -> None:
        with self.lock:
            for key, tickets in self.pending.items():
                if key[1] in targets:
                    self.pending[key] = [t for t in tickets if not t.acked]

    def destroy(self) -> None:
        transport = self.family.world.transport
        for ep in self.endpoints.values():
            transport.close_endpoint(ep)
        record = self.family.records.get(self.rank)
        if record is not None and transport.is_live(record):
            transport.deregister_memory(record)
        for record in self.attachments.values():
            if transport.is_live(record):
                transport.deregister_memory(record)
        self.attachments.clear()
        self.destroyed = True


class World:
    """A simulated process group over one transport.

    ``checked`` turns misuse the standard leaves undefined (violated
    intrinsic assertions, for one) into errors.
    """

    def __init__(self, transport: Transport, checked: bool = True):
        self.transport = transport
        self.checked = checked
        self._win_ids = itertools.count(1)

    @property
    def nranks(self) -> int:
        return self.transport.nranks

    def alloc(self, rank: int, size: int, align: int = 8) -> int:
        return self.transport.alloc(rank, size, align)

    def read(self, rank: int, vaddr: int, nbytes: int) -> bytes:
        return self.transport.read(rank, vaddr, nbytes)

    def write(self, rank: int, vaddr: int, data: bytes) -> None:
        self.transport.write(rank, vaddr, data)

    def set_progress(self, rank: int, progressing: bool) -> None:
        self.transport.set_progress(rank, progressing)

    def _next_id(self) -> int:
        return next(self._win_ids)

    def _group(self, group) -> list[int]:
        group = list(range(self.nranks)) if group is None else list(group)
        if not group or len(set(group)) != len(group):
            raise MismatchedGroup("group must list distinct ranks")
        for r in group:
            self.transport.check_rank(r)
        return group

    @staticmethod
    def _per_rank(value, group, what):
        if isinstance(value, int):
            return {r: value for r in group}
        values = list(value)
        if len(values) != len(group):
            raise MismatchedGroup(f"{len(values)} {what} values for a group of {len(group)}")
        return dict(zip(group, values))

    def win_allocate(self, size, disp_unit=1, info=None, group=None) -> list["Window"]:
        """Allocate and register ``size`` bytes on every rank of ``group``.

        ``size`` and ``disp_unit`` are an int or one value per group member.
        Returns the handles in group order.
        """
        group = self._group(group)
        sizes = self._per_rank(size, group, "size")
        units = self._per_rank(disp_unit, group, "disp_unit")
        info = InfoMap(info)
        fam = _Family(self, self._next_id(), WinKind.ALLOCATED, group)
        for r in group:
            if sizes[r] < 0 or units[r] <= 0:
                raise InvalidArgument("sizes must be >= 0 and displacement units positive")
            fam.bases[r] = self.alloc(r, sizes[r]) if sizes[r] else 0
            fam.sizes[r] = sizes[r]
            fam.disp_units[r] = units[r]
            fam.records[r] = (self.transport.register_memory(r, fam.bases[r], sizes[r], fam.id)
                              if sizes[r] else None)
        return [Window._root(self, fam, r, _strip_dynamic(info)) for r in group]

    def win_create_dynamic(self, info=None, group=None) -> list["Window"]:
        group = self._group(group)
        fam = _Family(self, self._next_id(), WinKind.DYNAMIC, group)
        for r in group:
            fam.disp_units[r] = 1
        info = InfoMap(info)
        return [Window._root(self, fam, r, info) for r in group]


def _strip_dynamic(info: InfoMap) -> InfoMap:
    # the dynamic-path selector only means something on dynamic windows
    if DYNAMIC_MODE_KEY in info:
        return InfoMap({k: v for k, v in info.items() if k != DYNAMIC_MODE_KEY})
    return info


class Window:
    """One rank's handle on a window."""

    def __init__(self, world: World, state: _RankState, kind: WinKind, info: InfoMap,
                 parent_id: int | None = None):
        self.world = world
        self._rs = state
        self.kind = kind
        self.id = state.family.id if kind in (WinKind.ALLOCATED, WinKind.DYNAMIC) else world._next_id()
        self.parent_id = parent_id
        self._info = info
        self._requests: list[Request] = []
        self._freed = False
        # memory-handle windows
        self._mh_record = None
        self._mh_size = 0
        self._mh_disp_unit = 1
        state.refs += 1

    @classmethod
    def _root(cls, world, family, rank, info):
        return cls(world, _RankState(family, rank), family.kind, info)

    # -- properties -----------------------------------------------------------

    @property
    def rank(self) -> int:
        return self._rs.rank

    @property
    def group(self) -> list[int]:
        if self.kind is WinKind.MEMHANDLE:
            return [self._mh_record.owner]
        return list(self._rs.family.group)

    @property
    def base_kind(self) -> WinKind:
        """Kind of the memory the window exposes (never DUPLICATE)."""
        return WinKind.MEMHANDLE if self.kind is WinKind.MEMHANDLE else self._rs.family.kind

    @property
    def info(self) -> InfoMap:
        return self._info

    @property
    def disp_unit(self) -> int:
        if self.kind is WinKind.MEMHANDLE:
            return self._mh_disp_unit
        return self._rs.family.disp_units[self.rank]

    @property
    def base(self) -> int:
        """Local vaddr of this rank's allocated segment."""
        return self._rs.family.bases.get(self.rank, 0)

    @property
    def size(self) -> int:
        if self.kind is WinKind.MEMHANDLE:
            return self._mh_size
        return self._rs.family.sizes.get(self.rank, 0)

    @property
    def freed(self) -> bool:
        return self._freed

    def __repr__(self):
        return f"<Window {self.id} {self.kind.value} rank={self.rank}>"

    @property
    def _transport(self) -> Transport:
        return self.world.transport

    def _check_live(self):
        if self._freed:
            raise InvalidHandle(f"window {self.id} has been freed")

    # -- info -------------------------------------------------------------------

    def get_info(self) -> InfoMap:
        self._check_live()
        entries = dict(self._info)
        for key in (SCOPE_KEY, ORDER_KEY, ASSERT_INTRINSIC_KEY):
            entries[key] = self._info.effective(key)
        if self.base_kind is WinKind.DYNAMIC:
            entries[DYNAMIC_MODE_KEY] = self._info.dynamic_mode
        return InfoMap(entries)

    def _apply_info(self, info) -> InfoMap:
        merged = self._info.merged(info)
        if self.base_kind is not WinKind.DYNAMIC:
            # rejected: the previous (absent) value stays in effect
            merged = _strip_dynamic(merged)
        return merged

    def set_info(self, info) -> None:
        self._check_live()
        self._info = self._apply_info(info)

    def dup_with_info(self, info=None) -> "Window":
        """Local duplicate sharing endpoints, registrations and epochs."""
        self._check_live()
        if self.kind is WinKind.MEMHANDLE:
            raise UnsupportedOperation("memory-handle windows cannot be duplicated")
        return Window(self.world, self._rs, WinKind.DUPLICATE, self._apply_info(info), parent_id=self.id)

    def op_intrinsic(self, ops: str, max_count: int, datatype: Datatype) -> bool:
        """Whether every op in ``ops`` runs on the NIC for up to ``max_count``
        elements of ``datatype`` through this window."""
        self._check_live()
        parsed = parse_ops_string(ops)
        if not parsed or not self._nic_route():
            return False
        caps = self._transport.capabilities
        return all(op.valid_for(datatype) and caps.query(op, datatype, max_count) for op in parsed)

    def _nic_route(self) -> bool:
        return not (self.base_kind is WinKind.DYNAMIC and self._info.dynamic_mode == "am")

    # -- dynamic memory ------------------------------------------------------------

    def _require_dynamic(self, what):
        self._check_live()
        if self.base_kind is not WinKind.DYNAMIC:
            raise UnsupportedOperation(f"{what} needs a dynamic window")

    def attach(self, base: int, size: int) -> None:
        self._require_dynamic("attach")
        rs = self._rs
        with rs.lock:
            for rec in rs.attachments.values():
                if base < rec.end and rec.base < base + size:
                    raise AttachOverlap(f"[{base:#x}, +{size}) overlaps attached [{rec.base:#x}, +{rec.size})")
            rs.attachments[base] = self._transport.register_memory(self.rank, base, size, rs.family.id)

    def detach(self, base: int) -> None:
        self._require_dynamic("detach")
        rs = self._rs
        with rs.lock:
            record = rs.attachments.pop(base, None)
        if record is None:
            raise UnknownBase(f"nothing attached at {base:#x}")
        self._transport.deregister_memory(record)

    # -- memory handles --------------------------------------------------------------

    def memhandle_create(self, base: int, size: int, info=None) -> bytes:
        """Register ``[base, base+size)`` of this rank and return its handle."""
        self._require_dynamic("memhandle_create")
        InfoMap(info)
        record = self._transport.register_memory(self.rank, base, size, self._rs.family.id)
        return encode_memhandle(record)

    def memhandle_release(self, blob: bytes) -> None:
        self._require_dynamic("memhandle_release")
        record = decode_memhandle(blob)
        if record.owner != self.rank or record.parent_window_id != self._rs.family.id:
            raise InvalidHandle("memory handle was not created through this window by this rank")
        self._transport.deregister_memory(record)

    def from_memhandle(self, blob: bytes, target: int, size: int | None = None,
                       disp_unit: int = 1, info=None) -> "Window":
        """Build a window exposing only the memory behind ``blob``."""
        self._require_dynamic("win_from_memhandle")
        record = decode_memhandle(blob)
        if record.owner != target:
            raise InvalidTarget(f"handle belongs to rank {record.owner}, not {target}")
        if record.parent_window_id != self._rs.family.id:
            raise InvalidHandle("handle was created through a different window")
        size = record.size if size is None else size
        if size < 0 or size > record.size:
            raise OutOfRange(f"window of {size} bytes over a {record.size}-byte handle")
        if disp_unit <= 0:
            raise InvalidArgument("displacement unit must be positive")
        win = Window(self.world, self._rs, WinKind.MEMHANDLE, _strip_dynamic(InfoMap(info)), parent_id=self.id)
        win._mh_record = record
        win._mh_size = size
        win._mh_disp_unit = disp_unit
        self._transport.charge_win_create(self.rank)
        return win

    # -- epochs -----------------------------------------------------------------------

    def _check_target(self, target: int) -> None:
        if self.kind is WinKind.MEMHANDLE:
            if target != self._mh_record.owner:
                raise InvalidTarget(f"this memory-handle window only reaches rank {self._mh_record.owner}")
        elif target not in self._rs.family.target_locks:
            raise InvalidTarget(f"rank {target} is not in the window group")

    def _no_memhandle(self, what):
        self._check_live()
        if self.kind is WinKind.MEMHANDLE:
            raise UnsupportedOperation(f"{what} must be applied to the parent window")

    def lock(self, target: int, mode: LockMode | str = LockMode.SHARED) -> None:
        self._no_memhandle("lock")
        self._check_target(target)
        mode = LockMode(mode)
        epoch = self._rs.epoch
        with self._rs.lock:
            if epoch.is_open(target):
                raise EpochError(f"an epoch to rank {target} is already open on this window or a duplicate")
            epoch.locks[target] = mode
        try:
            self._rs.family.acquire(self.rank, target, mode)
        except BaseException:
            epoch.locks.pop(target, None)
            raise

    def unlock(self, target: int) -> None:
        self._no_memhandle("unlock")
        epoch = self._rs.epoch
        if epoch.lock_all or target not in epoch.locks:
            raise EpochError(f"no lock on rank {target} to release")
        try:
            self._flush_process([target], local_only=False)
        finally:
            mode = epoch.locks.pop(target)
            self._rs.family.release(target, mode)

    def lock_all(self) -> None:
        self._no_memhandle("lock_all")
        epoch = self._rs.epoch
        with self._rs.lock:
            if epoch.any_open():
                raise EpochError("an epoch is already open on this window or a duplicate")
            epoch.lock_all = True
        for target in self._rs.family.group:
            self._rs.family.acquire(self.rank, target, LockMode.SHARED)

    def unlock_all(self) -> None:
        self._no_memhandle("unlock_all")
        epoch = self._rs.epoch
        if not epoch.lock_all:
            raise EpochError("lock_all was not called")
        try:
            self._flush_process(self._rs.family.group, local_only=False)
        finally:
            epoch.lock_all = False
            for target in self._rs.family.group:
                self._rs.family.release(target, LockMode.SHARED)

    # -- flushes -----------------------------------------------------------------------

    def flush(self, target: int) -> None:
        self._flush([target], local_only=False)

    def flush_all(self) -> None:
        self._flush(None, local_only=False)

    def flush_local(self, target: int) -> None:
        self._flush([target], local_only=True)

    def flush_local_all(self) -> None:
        self._flush(None, local_only=True)

    def _flush(self, targets, local_only):
        self._check_live()
        epoch = self._rs.epoch
        if targets is None:
            if not epoch.any_open():
                raise NoEpoch("flush outside an access epoch")
            targets = self.group
        else:
            self._check_target(targets[0])
            if not epoch.is_open(targets[0]):
                raise NoEpoch(f"no access epoch to rank {targets[0]}")
        if self._info.scope == "thread":
            self._flush_thread(targets, local_only)
        else:
            self._flush_process(targets, local_only)

    def _flush_thread(self, targets, local_only):
        """Complete only what the calling context issued."""
        transport = self._transport
        rs = self._rs
        ctx = transport.current_context(self.rank)
        first = None
        for target in targets:
            key = (ctx.id, target)
            with rs.lock:
                tickets = list(rs.pending.get(key, ()))
            if not tickets:
                continue
            for ticket in tickets:
                transport.wait(ticket, remote=not local_only)
            if local_only:
                continue
            by_ep: dict = {}
            for ticket in tickets:
                by_ep.setdefault(ticket.ep.id, (ticket.ep, []))[1].append(ticket)
            for ep, group in by_ep.values():
                fault = transport.retire(ep, group)
                first = first or fault
            done = {t.id for t in tickets}
            with rs.lock:
                rs.pending[key] = [t for t in rs.pending.get(key, ()) if t.id not in done]
        if first is not None:
            raise first

    def _flush_process(self, targets, local_only):
        """Walk every context's endpoints to the targets, as one at a time."""
        transport = self._transport
        rs = self._rs
        ctx = transport.current_context(self.rank)
        wanted = set(targets)
        first = None
        with rs.flush_mutex:
            with rs.lock:
                endpoints = sorted(
                    (ep for (cid, peer), ep in rs.endpoints.items() if peer in wanted),
                    key=lambda ep: (ep.owner.id, ep.peer),
                )
            for ep in endpoints:
                if ep.owner != ctx:
                    transport.charge_endpoint_poll(ep)
                try:
                    transport.flush_endpoint(ep, local_only=local_only)
                except Exception as exc:
                    first = first or exc
            if not local_only:
                rs.prune(wanted)
        if first is not None:
            raise first

    # -- operations ----------------------------------------------------------------------

    def issue(self, desc: OpDescriptor) -> Request | None:
        """Start ``desc``; returns a request unless completion is implicit."""
        self._check_live()
        target = desc.target
        self._check_target(target)
        rs = self._rs
        if not rs.epoch.is_open(target):
            raise NoEpoch(f"no access epoch to rank {target}")
        transport = self._transport
        ctx = transport.current_context(self.rank)
        nbytes = desc.nbytes
        vaddr, route, record = self._locate(target, desc.disp, nbytes)
        kind = self._choose_kind(desc, route)

        if self._info.ordered and self._info.scope == "process":
            ep = rs.endpoint(IssuerContext(self.rank, 0), target)
        else:
            ep = rs.endpoint(ctx, target)

        rkey = None
        if not kind.is_am and kind is not OpKind.RKEY_FETCH:
            if record is None:
                record = self._dynamic_record(ep, target, vaddr, nbytes)
            rkey = record.rkey

        fence = False
        if self._info.ordered:
            if ep.last_path is not None and ep.last_path != kind.path:
                # no fence spans both paths; drain the old one first
                transport.flush_endpoint(ep)
            ep.last_path = kind.path
            fence = True

        op = TransportOp(
            kind, Address(target, vaddr), nbytes, rkey=rkey,
            data=desc.data if desc.verb is Verb.PUT else None,
            update=_updater(desc), window_id=rs.family.id, fence_before=fence,
            fetch=desc.verb.fetches, on_remote=self._completion_hook(desc, target),
        )
        ticket = transport.submit(ep, op)
        rs.track(ctx, target, ticket)
        if desc.completion is Completion.IMPLICIT:
            return None
        remote = desc.completion is Completion.REMOTE_REQUEST and desc.verb is not Verb.GET
        req = Request(transport, ticket, remote, desc.result)
        self._requests = [r for r in self._requests if not r.done]
        self._requests.append(req)
        return req

    def _locate(self, target, disp, nbytes):
        """Target vaddr, transport path and (when known) registration of an access."""
        if disp < 0:
            raise OutOfRange(f"negative displacement {disp}")
        if self.kind is WinKind.MEMHANDLE:
            off = disp * self._mh_disp_unit
            if off + nbytes > self._mh_size:
                raise OutOfRange(f"[{off}, +{nbytes}) outside {self._mh_size}-byte memory-handle window")
            return self._mh_record.base + off, "rdma", self._mh_record
        fam = self._rs.family
        if fam.kind is WinKind.ALLOCATED:
            off = disp * fam.disp_units[target]
            if off + nbytes > fam.sizes[target]:
                raise OutOfRange(f"[{off}, +{nbytes}) outside rank {target}'s {fam.sizes[target]} bytes")
            return fam.bases[target] + off, "rdma", fam.records[target]
        return disp, ("am" if self._info.dynamic_mode == "am" else "rdma"), None

    def _choose_kind(self, desc, route) -> OpKind:
        verb = desc.verb
        if verb is Verb.PUT:
            return OpKind.RDMA_PUT if route == "rdma" else OpKind.AM_PUT
        if verb is Verb.GET:
            return OpKind.RDMA_GET if route == "rdma" else OpKind.AM_GET
        if self._info.assert_intrinsic:
            caps = self._transport.capabilities
            if route == "rdma" and caps.query(desc.atomic_op, desc.datatype, desc.count):
                return OpKind.NIC_ATOMIC
            if self.world.checked:
                raise AssertionViolation(
                    f"{desc.atomic_op.value} x{desc.count} {desc.datatype.value} is not intrinsic here"
                )
        return OpKind.AM_ACCUMULATE

    def _dynamic_record(self, ep, target, vaddr, nbytes):
        """Registration covering a dynamic-window access, cached per target."""
        rs = self._rs
        transport = self._transport
        for record in rs.rkey_cache.get(target, ()):
            if record.covers(vaddr, nbytes):
                transport.charge_rkey_validate(ep)
                return record
        ticket = transport.submit(ep, TransportOp(
            OpKind.RKEY_FETCH, Address(target, vaddr), nbytes,
            window_id=rs.family.id, fetch=True,
        ))
        transport.wait(ticket)
        transport.retire(ep, [ticket])
        record = ticket.result
        if record is None:
            raise UnattachedMemory(f"no memory attached at rank {target} [{vaddr:#x}, +{nbytes})")
        with rs.lock:
            rs.rkey_cache.setdefault(target, []).append(record)
        return record

    def _completion_hook(self, desc, target):
        rs = self._rs
        result = desc.result

        def hook(ticket):
            if isinstance(ticket.fault, StaleRkey):
                stale = ticket.op.rkey
                rs.rkey_cache[target] = [r for r in rs.rkey_cache.get(target, ()) if r.rkey != stale]
            elif result is not None and ticket.result is not None and ticket.fault is None:
                result[:] = ticket.result

        return hook

    def put(self, target: int, disp: int, data, datatype: Datatype = Datatype.BYTE,
            completion: Completion = Completion.IMPLICIT) -> Request | None:
        return self.issue(OpDescriptor(Verb.PUT, target, disp, datatype, data=data, completion=completion))

    def rput(self, target: int, disp: int, data, datatype: Datatype = Datatype.BYTE) -> Request:
        return self.put(target, disp, data, datatype, Completion.LOCAL_REQUEST)

    def rrput(self, target: int, disp: int, data, datatype: Datatype = Datatype.BYTE) -> Request:
        """Put whose request completes only once the data is at the target."""
        return self.put(target, disp, data, datatype, Completion.REMOTE_REQUEST)

    def get(self, target: int, disp: int, count: int, datatype: Datatype = Datatype.BYTE) -> bytearray:
        """Fetch into the returned buffer; valid after a flush."""
        desc = OpDescriptor(Verb.GET, target, disp, datatype, count=count)
        self.issue(desc)
        return desc.result

    def rget(self, target: int, disp: int, count: int, datatype: Datatype = Datatype.BYTE) -> Request:
        return self.issue(OpDescriptor(Verb.GET, target, disp, datatype, count=count,
                                       completion=Completion.LOCAL_REQUEST))

    def accumulate(self, target: int, disp: int, data, op: ReduceOp, datatype: Datatype = Datatype.INT64,
                   completion: Completion = Completion.IMPLICIT) -> Request | None:
        return self.issue(OpDescriptor(Verb.ACCUMULATE, target, disp, datatype, data=data, op=op,
                                       completion=completion))

    def raccumulate(self, target, disp, data, op, datatype=Datatype.INT64) -> Request:
        return self.accumulate(target, disp, data, op, datatype, Completion.LOCAL_REQUEST)

    def rraccumulate(self, target, disp, data, op, datatype=Datatype.INT64) -> Request:
        return self.accumulate(target, disp, data, op, datatype, Completion.REMOTE_REQUEST)

    def get_accumulate(self, target: int, disp: int, data, op: ReduceOp, datatype: Datatype = Datatype.INT64,
                       completion: Completion = Completion.IMPLICIT):
        """Returns the result buffer, or a request when one is asked for."""
        desc = OpDescriptor(Verb.GET_ACCUMULATE, target, disp, datatype, data=data, op=op, completion=completion)
        req = self.issue(desc)
        return desc.result if req is None else req

    def fetch_and_op(self, target: int, disp: int, value, op: ReduceOp,
                     datatype: Datatype = Datatype.INT64) -> bytearray:
        desc = OpDescriptor(Verb.FETCH_AND_OP, target, disp, datatype, data=value, op=op)
        self.issue(desc)
        return desc.result

    def compare_and_swap(self, target: int, disp: int, compare, desired,
                         datatype: Datatype = Datatype.INT64) -> bytearray:
        desc = OpDescriptor(Verb.COMPARE_AND_SWAP, target, disp, datatype, data=desired, compare=compare)
        self.issue(desc)
        return desc.result

    # -- teardown ---------------------------------------------------------------------------

    def free(self) -> None:
        self._check_live()
        if self.kind is not WinKind.MEMHANDLE and self._rs.epoch.any_open():
            raise OpenEpoch("close all access epochs before freeing")
        if any(not r.done for r in self._requests):
            raise OutstandingRequests("requests on this window are still pending")
        self._freed = True
        rs = self._rs
        rs.refs -= 1
        if rs.refs == 0:
            rs.destroy()


def _updater(desc: OpDescriptor):
    verb = desc.verb
    if not verb.atomic:
        return None
    operand = desc.data
    if verb is Verb.COMPARE_AND_SWAP:
        compare = desc.compare
        return lambda old: operand if old == compare else None
    op, dt = desc.op, desc.datatype
    return lambda old: reduce_bytes(op, dt, old, operand)


# call-style aliases

def win_dup_with_info(parent: Window, info=None) -> Window:
    return parent.dup_with_info(info)


def win_op_intrinsic(ops: str, max_count: int, datatype: Datatype, win: Window) -> bool:
    return win.op_intrinsic(ops, max_count, datatype)


def win_from_memhandle(blob: bytes, size: int, disp_unit: int, info, target: int, parentwin: Window) -> Window:
    return parentwin.from_memhandle(blob, target, size, disp_unit, info)


def memhandle_create(base: int, size: int, info, parentwin: Window) -> bytes:
    return parentwin.memhandle_create(base, size, info)


def memhandle_release(blob: bytes, parentwin: Window) -> None:
    parentwin.memhandle_release(blob)


def win_free(win: Window) -> None:
    win.free()
