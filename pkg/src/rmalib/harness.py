"""Benchmark scenarios over the simulated NIC.

Every scenario checks the final target memory against what a sequential
execution would leave behind before it reports any timing, and raises
:class:`~rmalib.errors.OracleFailure` otherwise. Latencies are virtual.
"""

from __future__ import annotations

import csv
import io
import statistics
import sys
import threading
from dataclasses import dataclass, field, fields
from pathlib import Path

from .core import Datatype, LatencyParams, ReduceOp, pack, parse_flat_config, unpack
from .errors import InvalidArgument, OracleFailure
from .rma import World
from .simnet import LoopbackTransport, SimNIC
from .simnet.sim import PS_PER_US

PUT_KINDS = ("allocated", "dynamic_rkey", "dynamic_am", "memhandle", "memhandle_with_create")
PROGRESS_MODES = ("rdma", "am")
SCOPES = ("process", "thread")
ORDERING_MODES = ("flush_between", "ordered_no_flush", "unordered_unlock_only")
BENCHES = ("put", "progress", "mt_flush", "ordering")

CSV_HEADER = ["scenario", "kind", "size_bytes", "contexts", "scope", "ordered",
              "mean_us", "p50_us", "p99_us", "events_per_op"]


@dataclass
class Measurement:
    scenario: str
    kind: str
    size_bytes: int
    contexts: int
    scope: str
    ordered: bool
    mean_us: float
    p50_us: float
    p99_us: float
    events_per_op: float
    # iterations whose intermediate target state broke issue order
    reordered: int = 0

    def row(self) -> list[str]:
        return [self.scenario, self.kind, str(self.size_bytes), str(self.contexts), self.scope,
                "true" if self.ordered else "false", f"{self.mean_us:.6f}", f"{self.p50_us:.6f}",
                f"{self.p99_us:.6f}", f"{self.events_per_op:.6f}"]


def _summarize(name, kind, size, contexts, scope, ordered, samples_ps, events, ops, reordered=0):
    if len(samples_ps) > 1:
        q = statistics.quantiles(samples_ps, n=100, method="inclusive")
        p50, p99 = q[49], q[98]
    else:
        p50 = p99 = samples_ps[0]
    # interpolation rounding must not invert the percentiles
    p50, p99 = p50 / PS_PER_US, max(p50, p99) / PS_PER_US
    mean = statistics.fmean(samples_ps) / PS_PER_US
    return Measurement(name, kind, size, contexts, scope, ordered, mean, p50, p99, events / ops, reordered)


def _events(sim: SimNIC) -> int:
    return sum(sim.event_counts.values())


def _payloads(size: int) -> tuple[bytes, bytes]:
    a = bytes((i * 7 + 1) & 0xFF for i in range(size))
    b = bytes((i * 13 + 5) & 0xFF for i in range(size))
    return a, b


def _sim(params, seed, arena) -> SimNIC:
    return SimNIC(2, arena_size=max(arena, 1 << 16), params=params, seed=seed)


def _check_positive(**values):
    for name, value in values.items():
        if value <= 0:
            raise InvalidArgument(f"{name} must be positive")


# -- put latency ---------------------------------------------------------------


def bench_put_latency(kind: str, sizes, iters: int = 10000, seed: int = 42, warmup: int = 100,
                      params: LatencyParams | None = None, name: str | None = None) -> list[Measurement]:
    """Put+flush loop from rank 0 to rank 1 through a window of ``kind``."""
    if kind not in PUT_KINDS:
        raise InvalidArgument(f"unknown window kind {kind!r}; pick one of {PUT_KINDS}")
    _check_positive(iters=iters)
    sizes = list(sizes)
    if not sizes:
        raise InvalidArgument("at least one message size is needed")
    return [_put_latency_one(kind, size, iters, seed, warmup, params, name or f"put_{kind}") for size in sizes]


def _put_latency_one(kind, size, iters, seed, warmup, params, name):
    _check_positive(size=size)
    sim = _sim(params, seed, 2 * size + 4096)
    world = World(sim)
    origin_win, parent = None, None
    if kind == "allocated":
        wins = world.win_allocate(size)
        origin_win, lock_win, dest = wins[0], wins[0], wins[1].base
    else:
        mode = "am" if kind == "dynamic_am" else "rkey_fetch"
        wins = world.win_create_dynamic({"mpi_dynamic_mode": mode})
        dest = world.alloc(1, size)
        lock_win = wins[0]
        if kind.startswith("dynamic"):
            wins[1].attach(dest, size)
            origin_win = wins[0]
        else:
            blob = wins[1].memhandle_create(dest, size)
            parent = wins[0]
            if kind == "memhandle":
                origin_win = parent.from_memhandle(blob, 1)
    lock_win.lock_all()
    payloads = _payloads(size)
    samples = []
    disp = 0 if kind in ("allocated", "memhandle", "memhandle_with_create") else dest
    start_events = 0
    for i in range(warmup + iters):
        if i == warmup:
            start_events = _events(sim)
        t0 = sim.now_ps
        if kind == "memhandle_with_create":
            win = parent.from_memhandle(blob, 1)
            win.put(1, disp, payloads[i & 1])
            win.flush(1)
            win.free()
        else:
            origin_win.put(1, disp, payloads[i & 1])
            origin_win.flush(1)
        if i >= warmup:
            samples.append(sim.now_ps - t0)
    events = _events(sim) - start_events
    lock_win.unlock_all()
    expected = payloads[(warmup + iters - 1) & 1]
    if world.read(1, dest, size) != expected:
        raise OracleFailure(f"{kind}: target holds stale data after the last flush")
    return _summarize(name, kind, size, 1, lock_win.info.scope, False, samples, events, iters)


# -- progress ----------------------------------------------------------------------


def bench_progress(n_ops: int = 100_000, busy_time_s: float = 3.0, mode: str = "am", seed: int = 42,
                   params: LatencyParams | None = None, name: str | None = None) -> Measurement:
    """1-byte put+flush while the target computes outside the runtime for
    ``busy_time_s`` virtual seconds."""
    if mode not in PROGRESS_MODES:
        raise InvalidArgument(f"unknown progress mode {mode!r}; pick one of {PROGRESS_MODES}")
    _check_positive(n_ops=n_ops)
    if busy_time_s < 0:
        raise InvalidArgument("busy time cannot be negative")
    sim = _sim(params, seed, 4096)
    world = World(sim)
    if mode == "rdma":
        wins = world.win_allocate(8)
        dest, disp = wins[1].base, 0
    else:
        wins = world.win_create_dynamic({"mpi_dynamic_mode": "am"})
        dest = world.alloc(1, 8)
        wins[1].attach(dest, 8)
        disp = dest
    win = wins[0]
    win.lock_all()
    world.set_progress(1, False)
    sim.call_at(sim.now_us + busy_time_s * 1e6, world.set_progress, 1, True)
    samples = []
    start_events = _events(sim)
    for i in range(n_ops):
        t0 = sim.now_ps
        win.put(1, disp, bytes([i & 0xFF]))
        win.flush(1)
        samples.append(sim.now_ps - t0)
    events = _events(sim) - start_events
    win.unlock_all()
    if world.read(1, dest, 1) != bytes([(n_ops - 1) & 0xFF]):
        raise OracleFailure("progress benchmark: target byte differs from the last put")
    return _summarize(name or f"progress_{mode}", mode, 1, 1, win.info.scope, False, samples, events, n_ops)


# -- multi-context flush -------------------------------------------------------------


def bench_mt_flush(contexts: int, sizes, scope: str = "process", iters: int = 1000, seed: int = 42,
                   warmup: int = 10, params: LatencyParams | None = None,
                   name: str | None = None) -> list[Measurement]:
    """Each of ``contexts`` issuer contexts runs its own put+flush loop."""
    if scope not in SCOPES:
        raise InvalidArgument(f"unknown scope {scope!r}; pick one of {SCOPES}")
    _check_positive(contexts=contexts, iters=iters)
    sizes = list(sizes)
    if not sizes:
        raise InvalidArgument("at least one message size is needed")
    return [_mt_flush_one(contexts, size, scope, iters, seed, warmup, params, name or f"mt_flush_{scope}")
            for size in sizes]


def _mt_flush_one(contexts, size, scope, iters, seed, warmup, params, name):
    _check_positive(size=size)
    sim = _sim(params, seed, 2 * size * contexts + 4096)
    world = World(sim)
    wins = world.win_allocate(size * contexts, info={"mpi_win_scope": scope})
    win = wins[0]
    win.lock_all()
    # the main context has talked to the target too, so it owns an endpoint
    win.put(1, 0, bytes(size))
    win.flush(1)
    payloads = _payloads(size)
    samples = []

    def worker(slot):
        disp = slot * size
        for i in range(warmup + iters):
            t0 = sim.now_ps
            win.put(1, disp, payloads[i & 1])
            win.flush(1)
            if i >= warmup:
                samples.append(sim.now_ps - t0)

    start_events = _events(sim)
    for slot in range(contexts):
        sim.spawn(0, worker, slot)
    sim.run()
    events = _events(sim) - start_events
    win.unlock_all()
    expected = payloads[(warmup + iters - 1) & 1]
    base = wins[1].base
    for slot in range(contexts):
        if world.read(1, base + slot * size, size) != expected:
            raise OracleFailure(f"context {slot}: target slot differs from its last put")
    return _summarize(name, "allocated", size, contexts, scope, False, samples, events,
                      contexts * (warmup + iters))


# -- ordering ---------------------------------------------------------------------------


def bench_ordering(n_chain: int = 5, mode: str = "ordered_no_flush", seed: int = 42, iters: int = 1000,
                   warmup: int = 10, params: LatencyParams | None = None,
                   name: str | None = None) -> Measurement:
    """Chain of ``n_chain - 1`` overwriting puts and one accumulate signal.

    A write observer records, whenever the signal lands, whether the data
    word already holds the last put. ``flush_between`` and
    ``ordered_no_flush`` must never be caught out; ``unordered_unlock_only``
    only reports how often it was.
    """
    if mode not in ORDERING_MODES:
        raise InvalidArgument(f"unknown ordering mode {mode!r}; pick one of {ORDERING_MODES}")
    if n_chain < 2:
        raise InvalidArgument("a chain needs at least two operations")
    _check_positive(iters=iters)
    sim = _sim(params, seed, 4096)
    world = World(sim)
    ordered = mode == "ordered_no_flush"
    info = {"mpi_assert_accumulate_intrinsic": True, "mpi_win_order": ordered}
    wins = world.win_allocate(16, info=info)
    win = wins[0]
    data_addr, flag_addr = wins[1].base, wins[1].base + 8
    state = {"expected": 0, "early": False}
    reordered = 0

    def observe(rank, vaddr, nbytes):
        if rank == 1 and vaddr == flag_addr:
            if unpack(Datatype.INT64, world.read(1, data_addr, 8))[0] != state["expected"]:
                state["early"] = True

    sim.write_observers.append(observe)
    samples = []
    start_events = 0
    try:
        for i in range(warmup + iters):
            if i == warmup:
                start_events = _events(sim)
            values = [i * n_chain + k for k in range(n_chain - 1)]
            state["expected"] = values[-1]
            state["early"] = False
            win.lock(1)
            t0 = sim.now_ps
            for v in values:
                win.put(1, 0, pack(Datatype.INT64, v))
                if mode == "flush_between":
                    win.flush(1)
            win.accumulate(1, 8, 1, ReduceOp.SUM)
            if mode == "flush_between":
                win.flush(1)
            win.unlock(1)
            elapsed = sim.now_ps - t0
            final = unpack(Datatype.INT64, world.read(1, data_addr, 8))[0]
            flag = unpack(Datatype.INT64, world.read(1, flag_addr, 8))[0]
            broken = state["early"] or final != values[-1]
            if flag != i + 1:
                raise OracleFailure(f"iteration {i}: signal count {flag}, expected {i + 1}")
            if broken:
                if mode != "unordered_unlock_only":
                    raise OracleFailure(
                        f"{mode}, iteration {i}: signal observed before the chain's last put"
                        if state["early"] else
                        f"{mode}, iteration {i}: final data {final}, sequential order gives {values[-1]}"
                    )
                if i >= warmup:
                    reordered += 1
            if i >= warmup:
                samples.append(elapsed)
    finally:
        sim.write_observers.remove(observe)
    events = _events(sim) - start_events
    return _summarize(name or f"ordering_{mode}", mode, 8, 1, win.info.scope, ordered,
                      samples, events, iters * n_chain, reordered)


# -- loopback stress ------------------------------------------------------------------------


def stress_loopback(threads: int = 4, ops: int = 1000, seed: int = 42) -> int:
    """Real threads hammer one int64 with fetch_and_op(sum, +1).

    Returns the final value after checking it against ``threads * ops``.
    Wall-clock behaviour only; nothing is timed.
    """
    _check_positive(threads=threads, ops=ops)
    world = World(LoopbackTransport(2, arena_size=4096, seed=seed))
    wins = world.win_allocate(8)
    win = wins[0]
    win.lock_all()
    errors = []

    def worker():
        try:
            for _ in range(ops):
                win.fetch_and_op(1, 0, 1, ReduceOp.SUM)
                win.flush(1)
        except Exception as exc:  # surfaced below
            errors.append(exc)

    pool = [threading.Thread(target=worker) for _ in range(threads)]
    for t in pool:
        t.start()
    for t in pool:
        t.join()
    win.unlock_all()
    if errors:
        raise errors[0]
    value = unpack(Datatype.INT64, world.read(1, wins[1].base, 8))[0]
    if value != threads * ops:
        raise OracleFailure(f"counter ended at {value}, expected {threads * ops}")
    return value


# -- scenarios and output ---------------------------------------------------------------------


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise InvalidArgument(f"not a boolean: {text!r}")


def parse_sizes(text: str) -> list[int]:
    """``"8,64,4k,1M"`` -> ``[8, 64, 4096, 1048576]``."""
    out = []
    for token in text.split(","):
        token = token.strip()
        if not token:
            continue
        scale = 1
        if token[-1] in "kK":
            scale, token = 1024, token[:-1]
        elif token[-1] in "mM":
            scale, token = 1024 * 1024, token[:-1]
        try:
            value = int(token) * scale
        except ValueError:
            raise InvalidArgument(f"bad message size {token!r}") from None
        if value <= 0:
            raise InvalidArgument("message sizes must be positive")
        out.append(value)
    if not out:
        raise InvalidArgument("no message sizes given")
    return out


@dataclass
class Scenario:
    """A benchmark run described in flat key=value form.

    ``kind`` is the window kind for ``put``, the path for ``progress`` and
    the chain mode for ``ordering``.
    """

    name: str
    bench: str = "put"
    kind: str = "allocated"
    sizes: list[int] = field(default_factory=lambda: [8])
    iterations: int = 10000
    warmup: int = 100
    contexts: int = 1
    scope: str = "process"
    ordered: bool = False
    dynamic_mode: str = "rkey_fetch"
    seed: int = 42
    busy_time_s: float = 3.0
    n_chain: int = 5

    def __post_init__(self):
        if self.bench not in BENCHES:
            raise InvalidArgument(f"unknown bench {self.bench!r}; pick one of {BENCHES}")
        if self.iterations <= 0:
            raise InvalidArgument("iterations must be positive")
        if self.warmup < 0:
            raise InvalidArgument("warmup cannot be negative")
        if not self.sizes:
            raise InvalidArgument("sizes must not be empty")
        if self.scope not in SCOPES:
            raise InvalidArgument(f"unknown scope {self.scope!r}")
        if self.dynamic_mode not in ("rkey_fetch", "am"):
            raise InvalidArgument(f"unknown dynamic mode {self.dynamic_mode!r}")
        if self.bench == "put" and self.kind == "dynamic":
            self.kind = "dynamic_am" if self.dynamic_mode == "am" else "dynamic_rkey"
        if self.bench == "ordering" and self.kind == "allocated":
            self.kind = "ordered_no_flush" if self.ordered else "unordered_unlock_only"
        allowed = {"put": PUT_KINDS, "progress": PROGRESS_MODES, "ordering": ORDERING_MODES,
                   "mt_flush": ("allocated",)}[self.bench]
        if self.kind not in allowed:
            raise InvalidArgument(f"kind {self.kind!r} does not fit bench {self.bench!r}")

    @classmethod
    def from_mapping(cls, entries) -> "Scenario":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, value in entries.items():
            if key not in known:
                raise InvalidArgument(f"unknown scenario key {key!r}")
            if key == "sizes":
                kwargs[key] = parse_sizes(value)
            elif key == "ordered":
                kwargs[key] = _parse_bool(value)
            elif key == "busy_time_s":
                kwargs[key] = float(value)
            elif key in ("iterations", "warmup", "contexts", "seed", "n_chain"):
                try:
                    kwargs[key] = int(value)
                except ValueError:
                    raise InvalidArgument(f"{key} must be an integer, got {value!r}") from None
            else:
                kwargs[key] = value
        if "name" not in kwargs:
            raise InvalidArgument("scenario needs a name")
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "Scenario":
        return cls.from_mapping(parse_flat_config(Path(path).read_text()))


def run_scenario(scenario: Scenario, params: LatencyParams | None = None) -> list[Measurement]:
    s = scenario
    if s.bench == "put":
        return bench_put_latency(s.kind, s.sizes, s.iterations, s.seed, s.warmup, params, s.name)
    if s.bench == "progress":
        return [bench_progress(s.iterations, s.busy_time_s, s.kind, s.seed, params, s.name)]
    if s.bench == "mt_flush":
        return bench_mt_flush(s.contexts, s.sizes, s.scope, s.iterations, s.seed, s.warmup, params, s.name)
    return [bench_ordering(s.n_chain, s.kind, s.seed, s.iterations, s.warmup, params, s.name)]


def format_csv(measurements) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for m in measurements:
        writer.writerow(m.row())
    return buf.getvalue()


def emit_csv(measurements, path=None) -> None:
    """Write measurements as CSV to ``path`` (stdout when None or "-")."""
    text = format_csv(measurements)
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)
