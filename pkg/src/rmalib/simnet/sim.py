"""Deterministic discrete-event model of an RDMA NIC.

Virtual time is kept in integer picoseconds so that latency arithmetic is
exact and runs are bit-for-bit reproducible. Issuer contexts other than the
driver are greenlets: blocking calls (flush, wait, sleep) suspend the
calling greenlet and hand control to a hub that pops events in
``(time, sequence)`` order.
"""

from __future__ import annotations

import heapq
import random
from functools import partial

from greenlet import GreenletExit, getcurrent, greenlet

from ..core import LatencyParams
from ..errors import ClosedEndpoint, ContextMismatch, InvalidArgument, SimDeadlock
from .base import CapabilityTable, Endpoint, IssuerContext, OpKind, Ticket, Transport, TransportOp

PS_PER_US = 1_000_000


def us_to_ps(us: float) -> int:
    return round(us * PS_PER_US)


class _Timing:
    """LatencyParams converted to picoseconds."""

    def __init__(self, p: LatencyParams):
        self.inject = us_to_ps(p.t_inject)
        self.half_rtt = us_to_ps(p.t_rtt / 2)
        self.rtt = us_to_ps(p.t_rtt)
        self.atomic = us_to_ps(p.t_atomic_nic)
        self.am_handler = us_to_ps(p.t_am_handler)
        self.rkey_half = us_to_ps(p.t_rkey_fetch / 2)
        self.rkey_back = us_to_ps(p.t_rkey_fetch) - self.rkey_half
        self.win_create = us_to_ps(p.t_win_create)
        self._ps_per_byte = PS_PER_US / p.bandwidth

    def xfer(self, nbytes: int) -> int:
        return round(nbytes * self._ps_per_byte)


class _Slot:
    """A scheduled RDMA delivery. Unfenced writes may trade slots."""

    __slots__ = ("time", "ticket", "done")

    def __init__(self, time, ticket):
        self.time = time
        self.ticket = ticket
        self.done = False


class SimCondition:
    """Condition variable in virtual time. ``with`` is accepted for parity
    with :class:`threading.Condition` but nothing needs locking."""

    def __init__(self, sim: "SimNIC"):
        self._sim = sim
        self._waiters = []

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False

    def wait_for(self, predicate):
        while not predicate():
            self._waiters.append(getcurrent())
            self._sim._block()

    def notify_all(self):
        waiters, self._waiters = self._waiters, []
        for g in waiters:
            self._sim._wake(g)


class SimMutex:
    def __init__(self, sim: "SimNIC"):
        self._cond = SimCondition(sim)
        self.locked = False

    def acquire(self):
        self._cond.wait_for(lambda: not self.locked)
        self.locked = True

    def release(self):
        self.locked = False
        self._cond.notify_all()

    def __enter__(self):
        self.acquire()
        return self

    def __exit__(self, *exc):
        self.release()
        return False


class SimNIC(Transport):
    """Simulated RDMA network with virtual time.

    ``reorder`` enables the seeded exchange of delivery slots between
    unfenced writes on one endpoint; it never changes the set of delivery
    times, only which write lands in which slot.
    """

    timed = True

    def __init__(self, nranks: int = 2, arena_size: int = 1 << 20,
                 params: LatencyParams | None = None, seed: int = 42,
                 capabilities: CapabilityTable | None = None, reorder: bool = True):
        super().__init__(nranks, arena_size, seed, capabilities)
        self.params = params or LatencyParams()
        self._t = _Timing(self.params)
        self.reorder = reorder
        self._now = 0
        self._heap: list = []
        self._seq = 0
        self._rng = random.Random(seed)
        self._root = getcurrent()
        self._hub = greenlet(self._hub_main, parent=self._root)
        self._procs: dict = {}
        self._main_ctx = [IssuerContext(r, 0) for r in range(nranks)]
        self._next_ctx = [1] * nranks
        self._run_waiters: list = []
        self._failure: BaseException | None = None
        self._root_woken = False
        self._handler_busy = [False] * nranks
        self._handler_gen = [0] * nranks

    # -- virtual time & scheduling -----------------------------------------

    @property
    def now_ps(self) -> int:
        return self._now

    def _at(self, t: int, fn, *args) -> None:
        heapq.heappush(self._heap, (t, self._seq, fn, args))
        self._seq += 1

    def call_at(self, time_us: float, fn, *args) -> None:
        """Run ``fn(*args)`` from the event loop at absolute virtual time.
        ``fn`` must not block."""
        t = us_to_ps(time_us)
        if t < self._now:
            raise InvalidArgument("cannot schedule in the past")
        self._at(t, fn, *args)

    def _hub_main(self):
        heap = self._heap
        try:
            while True:
                if self._failure is not None:
                    exc, self._failure = self._failure, None
                    self._root.throw(exc)
                    continue
                if not heap:
                    self._root.throw(SimDeadlock("no pending events but contexts are still blocked"))
                    continue
                t, _, fn, args = heapq.heappop(heap)
                assert t >= self._now, "virtual time went backwards"
                self._now = t
                fn(*args)
        except GreenletExit:
            return

    def _block(self) -> None:
        cur = getcurrent()
        if cur is self._hub:
            raise RuntimeError("blocking call from inside the event loop")
        if cur is self._root and not self._procs:
            # nobody else can run: drive the loop inline
            self._root_woken = False
            heap = self._heap
            while not self._root_woken:
                if not heap:
                    raise SimDeadlock("no pending events but the driver is still blocked")
                t, _, fn, args = heapq.heappop(heap)
                assert t >= self._now, "virtual time went backwards"
                self._now = t
                fn(*args)
                if self._failure is not None:
                    exc, self._failure = self._failure, None
                    raise exc
            return
        if self._hub.dead:
            self._hub = greenlet(self._hub_main, parent=self._root)
        self._hub.switch()

    def _resume(self, g) -> None:
        if g is getcurrent():
            self._root_woken = True
        elif not g.dead:
            g.switch()

    def _wake(self, g) -> None:
        self._at(self._now, self._resume, g)

    def _sleep(self, dt: int) -> None:
        t = self._now + dt
        heap = self._heap
        if not heap or heap[0][0] > t:
            self._now = t
            return
        self._at(t, self._resume, getcurrent())
        while self._now < t:
            self._block()

    def sleep(self, us: float) -> None:
        """Advance the calling context's virtual time."""
        self._sleep(us_to_ps(us))

    def poll(self) -> None:
        self._sleep(0)

    def charge(self, us: float, what: str = "", rank: int = -1) -> None:
        if what:
            self._event(what, rank)
        self._sleep(us_to_ps(us))

    def charge_rkey_validate(self, ep: Endpoint) -> None:
        """Origin-side cost of revalidating a cached registration."""
        self._event("rkey_validate", ep.owner.rank, ep=ep)
        self._sleep(self._t.inject + self._t.half_rtt)

    def charge_win_create(self, rank: int) -> None:
        self._event("win_create", rank)
        self._sleep(self._t.win_create)

    def charge_endpoint_poll(self, ep: Endpoint) -> None:
        self._event("ep_poll", ep.owner.rank, ep=ep)
        self._sleep(self._t.inject)

    # -- modeled issuer contexts ----------------------------------------------

    def spawn(self, rank: int, fn, *args, **kwargs) -> IssuerContext:
        """Start ``fn`` as a new issuer context of ``rank`` at the current time."""
        self.check_rank(rank)
        ctx = IssuerContext(rank, self._next_ctx[rank])
        self._next_ctx[rank] += 1
        g = greenlet(partial(self._proc_main, fn, args, kwargs), parent=self._hub)
        self._procs[g] = ctx
        self._wake(g)
        return ctx

    def _proc_main(self, fn, args, kwargs):
        me = getcurrent()
        try:
            fn(*args, **kwargs)
        except Exception as exc:
            if self._failure is None:
                self._failure = exc
        finally:
            self._procs.pop(me, None)
            if not self._procs:
                waiters, self._run_waiters = self._run_waiters, []
                for g in waiters:
                    self._wake(g)

    def run(self) -> None:
        """Block the driver until every spawned context has finished."""
        if getcurrent() is not self._root:
            raise RuntimeError("run() is for the driver context")
        while self._procs:
            self._run_waiters.append(getcurrent())
            self._block()

    def advance(self, us: float) -> None:
        self.sleep(us)

    def current_context(self, rank: int) -> IssuerContext:
        ctx = self._procs.get(getcurrent())
        if ctx is None:
            return self._main_ctx[rank]
        if ctx.rank != rank:
            raise ContextMismatch(f"context of rank {ctx.rank} acting for rank {rank}")
        return ctx

    def condition(self) -> SimCondition:
        return SimCondition(self)

    def mutex(self) -> SimMutex:
        return SimMutex(self)

    # -- submission ----------------------------------------------------------

    def submit(self, ep: Endpoint, op: TransportOp) -> Ticket:
        if ep.closed:
            raise ClosedEndpoint(f"{ep!r} is closed")
        T = self._t
        # fence and submit form one step so no other context slips in between
        delay = T.inject if op.fence_before and self._raise_floor(ep) else 0
        now = self._now + delay
        kind = op.kind
        ticket = self._new_ticket(op, ep, ep.owner)
        ticket.t_submit = now
        self._event("submit", ep.owner.rank, ticket, op_kind=kind.value, nbytes=op.size)
        injected = now + T.inject
        if kind is OpKind.RKEY_FETCH:
            self._at(injected + T.rkey_half, self._deliver, ticket)
        elif kind is OpKind.RDMA_GET:
            t_remote = max(injected + T.half_rtt, ep.floor + 1)
            ep.max_remote = max(ep.max_remote, t_remote)
            self._at(t_remote, self._deliver, ticket)
        elif kind is OpKind.RDMA_PUT or kind is OpKind.NIC_ATOMIC:
            self._schedule_write(ep, ticket, injected)
        else:
            # the AM channel of an endpoint is FIFO
            arrival = max(injected + T.half_rtt + T.xfer(op.size), ep.floor + 1)
            self._at(arrival, self._am_arrive, ticket)
        ep.inflight.append(ticket)
        self._sleep(delay + T.inject)
        if not op.fetch and kind not in (OpKind.RDMA_GET, OpKind.AM_GET, OpKind.RKEY_FETCH):
            self._mark_local(ticket)
        return ticket

    def _schedule_write(self, ep, ticket, injected):
        T = self._t
        op = ticket.op
        atomic = op.kind is OpKind.NIC_ATOMIC
        t_remote = injected + T.half_rtt + T.xfer(op.size) + (T.atomic if atomic else 0)
        t_remote = max(t_remote, ep.floor + 1)
        segment = [s for s in ep.segment if not s.done]
        if atomic:
            # atomics on one endpoint land in issue order
            for s in segment:
                if s.ticket.op.kind is OpKind.NIC_ATOMIC and s.time >= t_remote:
                    t_remote = s.time + 1
        slot = _Slot(t_remote, ticket)
        if self.reorder and segment:
            earliest = self._now + T.inject
            if atomic:
                last_atomic = max((s.time for s in segment if s.ticket.op.kind is OpKind.NIC_ATOMIC), default=-1)
                candidates = [s for s in segment
                              if s.time >= earliest and s.time > last_atomic
                              and s.ticket.op.kind is OpKind.RDMA_PUT]
            else:
                candidates = [s for s in segment if s.time >= earliest and s.ticket.op.kind is OpKind.RDMA_PUT]
            if candidates and self._rng.random() < 0.5:
                other = self._rng.choice(candidates)
                slot.ticket, other.ticket = other.ticket, slot.ticket
        segment.append(slot)
        ep.segment = segment
        ep.max_remote = max(ep.max_remote, t_remote)
        self._at(t_remote, self._deliver_slot, slot, ep.floor)

    def fence(self, ep: Endpoint) -> None:
        """Order every later RDMA op on ``ep`` after every earlier one.

        Costs one injection slot when deliveries are still outstanding and
        nothing otherwise; never waits for completion.
        """
        if ep.closed:
            raise ClosedEndpoint(f"{ep!r} is closed")
        if self._raise_floor(ep):
            self._sleep(self._t.inject)

    def _raise_floor(self, ep: Endpoint) -> bool:
        """Apply a fence to ``ep``; True when it costs an injection slot."""
        ep.segment = []
        if ep.max_remote <= self._now and ep.floor <= self._now:
            return False
        self._event("fence", ep.owner.rank, ep=ep)
        ep.floor = max(ep.floor, ep.max_remote)
        return True

    # -- completion events -----------------------------------------------------

    def _deliver_slot(self, slot: _Slot, floor: int) -> None:
        slot.done = True
        assert self._now > floor, "fenced delivery overtook an earlier op"
        self._deliver(slot.ticket)

    def _deliver(self, ticket: Ticket) -> None:
        T = self._t
        op = ticket.op
        self._execute(ticket)
        ticket.remote_done = True
        ticket.t_remote = self._now
        self._event("fault" if ticket.fault else "deliver", op.target.rank, ticket,
                    op_kind=op.kind.value, nbytes=op.size)
        if op.kind is OpKind.RKEY_FETCH:
            back = T.rkey_back
        elif op.kind is OpKind.RDMA_GET:
            back = T.half_rtt + T.xfer(op.size)
        else:
            back = T.half_rtt
        self._at(self._now + back, self._ack, ticket)

    def _ack(self, ticket: Ticket) -> None:
        ticket.acked = True
        ticket.t_ack = self._now
        self._event("ack", ticket.ep.owner.rank, ticket, op_kind=ticket.op.kind.value)
        if not ticket.local_done:
            ticket.local_done = True
        if ticket.op.on_remote is not None:
            ticket.op.on_remote(ticket)
        self._wake_waiters(ticket)

    def _mark_local(self, ticket: Ticket) -> None:
        if not ticket.local_done:
            ticket.local_done = True
            self._wake_waiters(ticket)

    def _wake_waiters(self, ticket):
        if ticket.waiters:
            waiters, ticket.waiters = ticket.waiters, []
            for g in waiters:
                self._wake(g)

    # -- active messages -------------------------------------------------------

    def _am_arrive(self, ticket: Ticket) -> None:
        rank = ticket.op.target.rank
        self.inbox[rank].append(ticket)
        self._event("am_enqueue", rank, ticket, op_kind=ticket.op.kind.value, nbytes=ticket.op.size)
        self._am_pump(rank)

    def _am_pump(self, rank: int) -> None:
        if self._handler_busy[rank] or not self.progressing[rank] or not self.inbox[rank]:
            return
        ticket = self.inbox[rank].popleft()
        self._handler_busy[rank] = True
        ticket.fault = None
        pending = self._begin(ticket)
        self._at(self._now + self._t.am_handler, self._am_finish, rank, ticket, pending,
                 self._handler_gen[rank])

    def _am_finish(self, rank, ticket, pending, gen) -> None:
        self._handler_busy[rank] = False
        if gen != self._handler_gen[rank]:
            # progress was withdrawn while the handler ran: redo it later
            ticket.result = None
            self.inbox[rank].appendleft(ticket)
            self._am_pump(rank)
            return
        T = self._t
        self._commit(ticket, pending)
        ticket.remote_done = True
        ticket.t_remote = self._now
        op = ticket.op
        self._event("fault" if ticket.fault else "deliver", rank, ticket,
                    op_kind=op.kind.value, nbytes=op.size)
        # reply: injected by the target, handled by the origin
        back = T.inject + T.half_rtt + T.am_handler
        if op.kind is OpKind.AM_GET:
            back += T.xfer(op.size)
        self._at(self._now + back, self._ack, ticket)
        self._am_pump(rank)

    def set_progress(self, rank: int, progressing: bool) -> None:
        self.check_rank(rank)
        self.progressing[rank] = progressing
        self._event("progress_on" if progressing else "progress_off", rank)
        if progressing:
            self._am_pump(rank)
        elif self._handler_busy[rank]:
            self._handler_gen[rank] += 1

    # -- waiting -----------------------------------------------------------------

    def wait(self, ticket: Ticket, remote: bool = True) -> None:
        while not ticket.reached(remote):
            ticket.waiters.append(getcurrent())
            self._block()

    def flush_endpoint(self, ep: Endpoint, local_only: bool = False) -> None:
        if ep.closed:
            raise ClosedEndpoint(f"{ep!r} is closed")
        snapshot = list(ep.inflight)
        for ticket in snapshot:
            self.wait(ticket, remote=not local_only)
        if not local_only:
            fault = self.retire(ep, snapshot)
            if fault is not None:
                raise fault
