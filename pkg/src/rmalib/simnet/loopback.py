"""In-process transport for real threads.

Each OS thread acting for a rank is an issuer context. Operations take
effect immediately under a per-rank lock, so atomicity comes from real
mutual exclusion rather than from an event schedule. Active messages to a
rank that has progress switched off wait in its inbox.
"""

from __future__ import annotations

import threading

from ..errors import ClosedEndpoint
from .base import CapabilityTable, Endpoint, IssuerContext, Ticket, Transport, TransportOp


class LoopbackTransport(Transport):
    def __init__(self, nranks: int = 2, arena_size: int = 1 << 20, seed: int = 42,
                 capabilities: CapabilityTable | None = None):
        super().__init__(nranks, arena_size, seed, capabilities)
        self._rank_locks = [threading.Lock() for _ in range(nranks)]
        self._cv = threading.Condition(threading.RLock())
        self._main_thread = threading.get_ident()
        self._contexts: dict[tuple[int, int], IssuerContext] = {}
        self._next_ctx = [1] * nranks

    def current_context(self, rank: int) -> IssuerContext:
        self.check_rank(rank)
        tid = threading.get_ident()
        if tid == self._main_thread:
            return IssuerContext(rank, 0)
        with self._cv:
            ctx = self._contexts.get((rank, tid))
            if ctx is None:
                ctx = IssuerContext(rank, self._next_ctx[rank])
                self._next_ctx[rank] += 1
                self._contexts[rank, tid] = ctx
            return ctx

    def create_endpoint(self, owner: IssuerContext, peer: int) -> Endpoint:
        with self._cv:
            return super().create_endpoint(owner, peer)

    def condition(self):
        return threading.Condition()

    def mutex(self):
        return threading.Lock()

    def submit(self, ep: Endpoint, op: TransportOp) -> Ticket:
        if ep.closed:
            raise ClosedEndpoint(f"{ep!r} is closed")
        rank = op.target.rank
        with self._cv:
            ticket = self._new_ticket(op, ep, ep.owner)
            ep.inflight.append(ticket)
            self._event("submit", ep.owner.rank, ticket, op_kind=op.kind.value, nbytes=op.size)
            if op.kind.is_am and not self.progressing[rank]:
                self.inbox[rank].append(ticket)
                if not op.fetch and op.kind.value != "am_get":
                    ticket.local_done = True
                return ticket
        self._apply(ticket)
        return ticket

    def _apply(self, ticket: Ticket) -> None:
        rank = ticket.op.target.rank
        with self._rank_locks[rank]:
            self._execute(ticket)
        with self._cv:
            ticket.remote_done = ticket.acked = ticket.local_done = True
            self._event("fault" if ticket.fault else "deliver", rank, ticket,
                        op_kind=ticket.op.kind.value, nbytes=ticket.op.size)
            if ticket.op.on_remote is not None:
                ticket.op.on_remote(ticket)
            self._cv.notify_all()

    def fence(self, ep: Endpoint) -> None:
        # RDMA ops land at submission; queued AMs drain in FIFO order
        if ep.closed:
            raise ClosedEndpoint(f"{ep!r} is closed")

    def set_progress(self, rank: int, progressing: bool) -> None:
        self.check_rank(rank)
        with self._cv:
            self.progressing[rank] = progressing
            while progressing and self.inbox[rank]:
                self._apply(self.inbox[rank].popleft())

    def wait(self, ticket: Ticket, remote: bool = True) -> None:
        with self._cv:
            self._cv.wait_for(lambda: ticket.reached(remote))

    def flush_endpoint(self, ep: Endpoint, local_only: bool = False) -> None:
        if ep.closed:
            raise ClosedEndpoint(f"{ep!r} is closed")
        with self._cv:
            snapshot = list(ep.inflight)
        for ticket in snapshot:
            self.wait(ticket, remote=not local_only)
        if not local_only:
            fault = self.retire(ep, snapshot)
            if fault is not None:
                raise fault

    def retire(self, ep: Endpoint, tickets) -> Exception | None:
        with self._cv:
            return super().retire(ep, tickets)
