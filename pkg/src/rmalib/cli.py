"""``rmalib`` command line: benchmarks and walk-through demos.

Exit status: 0 on success, 1 on usage errors, 2 when a correctness oracle
rejects a run.
"""

from __future__ import annotations

import argparse
import contextlib
import os
import sys

from . import harness
from .core import Datatype, LatencyParams, ReduceOp, unpack
from .errors import OracleFailure, RMAError, StaleRkey
from .rma import World
from .simnet import SimNIC

DEFAULT_SEED = 42
SEED_ENV = "RMALIB_SEED"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--params", metavar="FILE", help="latency parameters as key=value lines")
    p.add_argument("--seed", type=int, default=None,
                   help=f"simulation seed (default: ${SEED_ENV} or {DEFAULT_SEED})")
    p.add_argument("-o", "--output", default="-", metavar="PATH", help="output file (default: stdout)")
    p.add_argument("--unchecked", action="store_true",
                   help="leave undefined behaviour unchecked instead of raising")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="rmalib", description="Simulated RMA runtime benchmarks and demos.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("bench-put", parents=[common], help="put+flush latency per window kind")
    p.add_argument("--kind", choices=harness.PUT_KINDS, default="allocated")
    p.add_argument("--sizes", default="8", help="comma list, k/M suffixes allowed (default: 8)")
    p.add_argument("--iters", type=int, default=10000)
    p.add_argument("--warmup", type=int, default=100)

    p = sub.add_parser("bench-progress", parents=[common], help="latency while the target is busy")
    p.add_argument("--mode", choices=harness.PROGRESS_MODES, default="am")
    p.add_argument("--n-ops", type=int, default=100_000)
    p.add_argument("--busy-time", type=float, default=3.0, help="virtual seconds (default: 3)")

    p = sub.add_parser("bench-mt-flush", parents=[common], help="multi-context put+flush latency")
    p.add_argument("--contexts", default="1,32", help="comma list of context counts (default: 1,32)")
    p.add_argument("--sizes", default="1")
    p.add_argument("--scope", choices=harness.SCOPES + ("both",), default="both")
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--warmup", type=int, default=10)

    p = sub.add_parser("bench-ordering", parents=[common], help="dependent put chains")
    p.add_argument("--mode", choices=harness.ORDERING_MODES + ("all",), default="all")
    p.add_argument("--n-chain", type=int, default=5)
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--warmup", type=int, default=10)

    sub.add_parser("demo-memhandle", parents=[common], help="memory-handle window lifecycle, step by step")

    p = sub.add_parser("demo-chain", parents=[common], help="data put chained to a signal without a flush")
    p.add_argument("--unordered", action="store_true", help="drop ordering to show the hazard")

    p = sub.add_parser("run-scenario", parents=[common], help="run a key=value scenario file")
    p.add_argument("scenario", metavar="FILE")
    return parser


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env is None:
        return DEFAULT_SEED
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None


def _params(args) -> LatencyParams | None:
    return LatencyParams.from_file(args.params) if args.params else None


def _int_list(text: str) -> list[int]:
    try:
        values = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"expected a comma list of integers, got {text!r}") from None
    if not values:
        raise UsageError("empty list")
    return values


@contextlib.contextmanager
def _output(path):
    if path in (None, "-"):
        yield sys.stdout
    else:
        with open(path, "w", newline="") as fh:
            yield fh


def _bench(args, seed, params) -> list[harness.Measurement]:
    cmd = args.command
    if cmd == "bench-put":
        return harness.bench_put_latency(args.kind, harness.parse_sizes(args.sizes), args.iters, seed,
                                         args.warmup, params)
    if cmd == "bench-progress":
        return [harness.bench_progress(args.n_ops, args.busy_time, args.mode, seed, params)]
    if cmd == "bench-mt-flush":
        scopes = harness.SCOPES if args.scope == "both" else (args.scope,)
        sizes = harness.parse_sizes(args.sizes)
        return [m for scope in scopes for c in _int_list(args.contexts)
                for m in harness.bench_mt_flush(c, sizes, scope, args.iters, seed, args.warmup, params)]
    if cmd == "bench-ordering":
        modes = harness.ORDERING_MODES if args.mode == "all" else (args.mode,)
        return [harness.bench_ordering(args.n_chain, mode, seed, args.iters, args.warmup, params)
                for mode in modes]
    scenario = harness.Scenario.from_file(args.scenario)
    if args.seed is not None or os.environ.get(SEED_ENV) is not None:
        scenario.seed = seed
    return harness.run_scenario(scenario, params)


def demo_memhandle(out, seed: int = DEFAULT_SEED, params: LatencyParams | None = None,
                   checked: bool = True) -> None:
    """Expose a buffer through a handle, write it remotely, signal, release."""
    sim = SimNIC(2, arena_size=1 << 16, params=params, seed=seed)
    world = World(sim, checked=checked)

    def say(text):
        print(f"[{sim.now_us:9.5f} us] {text}", file=out)

    wins = world.win_create_dynamic()
    say(f"ranks 0 and 1 create dynamic window {wins[0].id}")
    flag = world.alloc(1, 8)
    wins[1].attach(flag, 8)
    say(f"rank 1 attaches an 8-byte completion flag at {flag:#x}")
    buf = world.alloc(1, 64)
    blob = wins[1].memhandle_create(buf, 64)
    say(f"rank 1 exposes 64 bytes at {buf:#x}; handle = {blob.hex()} ({len(blob)} bytes)")
    say("rank 1 sends the handle to rank 0 out of band")
    wins[0].lock_all()
    say("rank 0 opens an epoch on the parent window (lock_all)")
    mh = wins[0].from_memhandle(blob, 1)
    say(f"rank 0 builds memory-handle window {mh.id} targeting rank 1")
    payload = bytes(range(32))
    mh.put(1, 0, payload)
    mh.accumulate(1, 32, 5, ReduceOp.SUM)
    req = mh.rrput(1, 40, b"\x07" * 8)
    say("rank 0 issues put(32 B), accumulate(sum,+5) and a remote-completing put(8 B)")
    mh.flush(1)
    req.wait()
    say("rank 0 flushes; all operations are complete at rank 1")
    wins[0].put(1, flag, b"\x01")
    wins[0].flush(1)
    say("rank 0 sets the completion flag through the parent window")
    mh.free()
    say("rank 0 frees the memory-handle window")
    if world.read(1, flag, 1) != b"\x01":
        raise OracleFailure("memory-handle demo: completion flag not set")
    wins[1].memhandle_release(blob)
    say("rank 1 sees the flag and releases the handle; the registration is gone")
    got = world.read(1, buf, 64)
    expected = bytearray(64)
    expected[:32] = payload
    expected[32:40] = (5).to_bytes(8, "little")
    expected[40:48] = b"\x07" * 8
    if got != bytes(expected):
        raise OracleFailure("memory-handle demo: target buffer differs from the sequential result")
    say(f"rank 1 memory: {got[:48].hex()}")
    late = wins[0].from_memhandle(blob, 1)
    late.put(1, 0, b"\xff")
    try:
        late.flush(1)
    except StaleRkey:
        say("a put through the released handle faults with stale-rkey, memory untouched")
    else:
        raise OracleFailure("memory-handle demo: write through a released handle succeeded")
    late.free()
    if world.read(1, buf, 64) != got:
        raise OracleFailure("memory-handle demo: released memory was modified")
    say("rank 0 closes its epoch; done")


def demo_chain(out, seed: int = DEFAULT_SEED, params: LatencyParams | None = None,
               checked: bool = True, ordered: bool = True, rounds: int = 20) -> None:
    """Data put followed by an accumulate signal with no flush in between."""
    sim = SimNIC(2, arena_size=1 << 16, params=params, seed=seed)
    world = World(sim, checked=checked)
    info = {"mpi_win_order": ordered, "mpi_assert_accumulate_intrinsic": True}
    wins = world.win_allocate(16, info=info)
    win = wins[0]
    data_addr, flag_addr = wins[1].base, wins[1].base + 8
    early = []

    def observe(rank, vaddr, nbytes):
        if rank == 1 and vaddr == flag_addr:
            data = unpack(Datatype.INT64, world.read(1, data_addr, 8))[0]
            flag = unpack(Datatype.INT64, world.read(1, flag_addr, 8))[0]
            ok = data == flag * 100
            print(f"[{sim.now_us:9.5f} us]   rank 1 sees signal {flag}, data {data}"
                  f"{'' if ok else '  <-- signal overtook its data'}", file=out)
            if not ok:
                early.append(flag)

    sim.write_observers.append(observe)
    print(f"mpi_win_order={'true' if ordered else 'false'}; {rounds} rounds of put(data) + "
          f"accumulate(flag,+1) with no flush between them", file=out)
    win.lock(1)
    for i in range(1, rounds + 1):
        win.put(1, 0, (i * 100).to_bytes(8, "little", signed=True))
        win.accumulate(1, 8, 1, ReduceOp.SUM)
        win.flush(1)
    win.unlock(1)
    if early:
        print(f"{len(early)} of {rounds} signals arrived before their data", file=out)
        if ordered:
            raise OracleFailure("ordered chain delivered a signal before its data")
    else:
        print(f"all {rounds} signals arrived after their data", file=out)


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    try:
        seed = _seed(args)
        params = _params(args)
        if args.command == "demo-memhandle":
            with _output(args.output) as out:
                demo_memhandle(out, seed, params, checked=not args.unchecked)
        elif args.command == "demo-chain":
            with _output(args.output) as out:
                demo_chain(out, seed, params, checked=not args.unchecked, ordered=not args.unordered)
        else:
            measurements = _bench(args, seed, params)
            with _output(args.output) as out:
                out.write(harness.format_csv(measurements))
    except OracleFailure as exc:
        print(f"rmalib: correctness check failed: {exc}", file=sys.stderr)
        return 2
    except (UsageError, RMAError, OSError, ValueError) as exc:
        print(f"rmalib: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())
