"""Acceptance gate: one PASS/FAIL line per criterion, at the stated tolerances."""

import random
import threading
import time

import pytest

from rmalib import (
    Datatype,
    LoopbackTransport,
    ReduceOp,
    RegistrationRecord,
    SimNIC,
    World,
    decode_memhandle,
    encode_memhandle,
    harness,
    pack,
    unpack,
)
from rmalib.errors import StaleRkey, UnattachedMemory

i64 = Datatype.INT64


@pytest.fixture
def report(capsys):
    def emit(number, title, ok, detail):
        with capsys.disabled():
            print(f"\n[acceptance {number:2d}] {'PASS' if ok else 'FAIL'}  {title}: {detail}")
        assert ok, detail
    return emit


def _put_means(kinds, size=8):
    return {k: harness.bench_put_latency(k, [size])[0].mean_us for k in kinds}


def test_01_dynamic_window_penalty(report):
    t0 = time.perf_counter()
    means = _put_means(["allocated", "dynamic_rkey", "dynamic_am"])
    elapsed = time.perf_counter() - t0
    r_rkey = means["dynamic_rkey"] / means["allocated"]
    r_am = means["dynamic_am"] / means["allocated"]
    ok = r_rkey >= 1.5 and r_am >= 1.5 and elapsed < 10
    report(1, "dynamic-window penalty", ok,
           f"rkey/alloc={r_rkey:.3f}, am/alloc={r_am:.3f} (need >=1.5), runtime {elapsed:.1f}s (<10s)")


def test_02_memhandle_parity(report):
    means = _put_means(["allocated", "memhandle", "memhandle_with_create"])
    parity = abs(means["memhandle"] - means["allocated"]) / means["allocated"]
    overhead = means["memhandle_with_create"] - means["memhandle"]

    sim = SimNIC(2, 1 << 16)
    world = World(sim)
    dyn = world.win_create_dynamic()
    base = world.alloc(1, 64)
    mh = dyn[0].from_memhandle(dyn[1].memhandle_create(base, 64), 1)
    dyn[0].lock_all()
    sim.record_trace = True
    for _ in range(100):
        mh.put(1, 0, b"x" * 8)
        mh.flush(1)
    fetches = sum(e.op_kind == "rkey_fetch" for e in sim.trace)

    tick = 1e-6  # one picosecond in microseconds
    ok = parity < 0.05 and fetches == 0 and abs(overhead - 1.0) <= tick
    report(2, "memhandle parity", ok,
           f"|mh-alloc|/alloc={parity:.4f} (<0.05), rkey_fetch events={fetches} (0), "
           f"create overhead={overhead:.6f}us (1.0 +- 1 tick)")


def test_03_progress_gating(report):
    t0 = time.perf_counter()
    am = harness.bench_progress(100_000, 3.0, "am")
    rdma = harness.bench_progress(100_000, 3.0, "rdma")
    elapsed = time.perf_counter() - t0
    ok = am.mean_us >= 30 and rdma.mean_us < 30 and elapsed < 60
    report(3, "progress gating", ok,
           f"am mean={am.mean_us:.2f}us (>=30), rdma mean={rdma.mean_us:.2f}us (<30), runtime {elapsed:.1f}s (<60s)")


def test_04_thread_scope_flush(report):
    counts = [1, 2, 4, 8, 16, 32]
    thread = {c: harness.bench_mt_flush(c, [1], "thread")[0].mean_us for c in counts}
    proc32 = harness.bench_mt_flush(32, [1], "process")[0].mean_us
    spread = (max(thread.values()) - min(thread.values())) / thread[1]
    ok = thread[32] <= proc32 / 2 and spread <= 0.10
    report(4, "thread-scope flush", ok,
           f"32 ctx thread={thread[32]:.3f}us vs process={proc32:.3f}us (need <= half), "
           f"thread spread 1..32 = {spread:.2%} (<=10%)")


def _chain_final_ok(seed):
    """Overwriting puts followed by an accumulate signal, all unflushed."""
    sim = SimNIC(2, 4096, seed=seed)
    world = World(sim)
    wins = world.win_allocate(16, info={"mpi_win_order": True, "mpi_assert_accumulate_intrinsic": True})
    data, flag = wins[1].base, wins[1].base + 8
    seen = []

    def observe(rank, vaddr, nbytes):
        if rank == 1 and vaddr == flag:
            seen.append(unpack(i64, world.read(1, data, 8))[0])

    sim.write_observers.append(observe)
    win = wins[0]
    win.lock(1)
    win.put(1, 0, pack(i64, 1), i64)
    win.put(1, 0, pack(i64, 2), i64)
    win.put(1, 0, pack(i64, 3), i64)
    win.put(1, 0, pack(i64, 4), i64)
    win.accumulate(1, 8, 1, ReduceOp.SUM)
    win.unlock(1)
    final = unpack(i64, world.read(1, data, 16))
    return seen == [4] and final == [4, 1]


def test_05_ordering(report):
    means = {m: harness.bench_ordering(5, m).mean_us for m in harness.ORDERING_MODES}
    between = means["unordered_unlock_only"] < means["ordered_no_flush"] < means["flush_between"]
    passed = sum(_chain_final_ok(seed) for seed in range(1000))
    ok = between and passed == 1000
    report(5, "ordering", ok,
           f"unordered={means['unordered_unlock_only']:.3f} < ordered={means['ordered_no_flush']:.3f} "
           f"< flush={means['flush_between']:.3f}us: {between}; oracle {passed}/1000 seeds")


def _sim_counter(seed, intrinsic, contexts=4, ops=1000):
    sim = SimNIC(2, 4096, seed=seed)
    world = World(sim)
    wins = world.win_allocate(8, info={"mpi_assert_accumulate_intrinsic": intrinsic})
    win = wins[0]
    win.lock_all()

    def worker():
        for _ in range(ops):
            win.fetch_and_op(1, 0, 1, ReduceOp.SUM)
        win.flush(1)

    for _ in range(contexts):
        sim.spawn(0, worker)
    sim.run()
    win.unlock_all()
    return unpack(i64, world.read(1, wins[1].base, 8))[0]


def _loopback_counter(contexts=4, ops=1000):
    world = World(LoopbackTransport(2, 4096))
    wins = world.win_allocate(8)
    win = wins[0]
    win.lock_all()

    def worker():
        for _ in range(ops):
            win.fetch_and_op(1, 0, 1, ReduceOp.SUM)
        win.flush(1)

    threads = [threading.Thread(target=worker) for _ in range(contexts)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    win.unlock_all()
    return unpack(i64, world.read(1, wins[1].base, 8))[0]


def test_06_atomicity(report):
    software = [s for s in range(200) if _sim_counter(s, False) != 4000]
    nic = [s for s in range(200) if _sim_counter(s, True) != 4000]
    loop = [_loopback_counter() for _ in range(5)]
    ok = not software and not nic and loop == [4000] * 5
    report(6, "atomicity", ok,
           f"SimNIC software path bad seeds={software}, NIC path bad seeds={nic} (200 each); "
           f"loopback finals={loop}")


def test_07_stale_rkey_safety(report):
    slots, width = 16, 16
    sim = SimNIC(2, 1 << 14, seed=7)
    world = World(sim)
    win = world.win_create_dynamic()
    base = world.alloc(1, slots * width)
    win[0].lock_all()
    rng = random.Random(2024)
    shadow = bytearray(slots * width)
    attached, cached, stale = set(), set(), set()
    ops = faults = expected_faults = silent = wrong = 0

    while ops < 10_000:
        slot = rng.randrange(slots)
        addr = base + slot * width
        roll = rng.random()
        if roll < 0.2:
            if slot in attached:
                win[1].detach(addr)
                attached.discard(slot)
                if slot in cached:
                    stale.add(slot)
            else:
                win[1].attach(addr, width)
                attached.add(slot)
            continue
        ops += 1
        payload = bytes([rng.randrange(1, 256)]) * 4
        try:
            win[0].put(1, addr, payload)
            win[0].flush(1)
        except StaleRkey:
            faults += 1
            expected_faults += slot in stale
            wrong += slot not in stale
            stale.discard(slot)
            cached.discard(slot)
        except UnattachedMemory:
            wrong += slot in attached or slot in stale
        else:
            if slot in stale or slot not in attached:
                silent += 1
            cached.add(slot)
            shadow[slot * width:slot * width + 4] = payload
        if world.read(1, base, len(shadow)) != bytes(shadow):
            silent += 1

    ok = silent == 0 and wrong == 0 and faults == expected_faults > 0
    report(7, "stale-rkey safety", ok,
           f"{ops} ops, {faults} stale-rkey faults (all post-detach cached uses), "
           f"silent writes={silent}, misclassified={wrong}")


def test_08_remote_completing_requests(report):
    bad = 0
    for seed in range(1000):
        sim = SimNIC(2, 4096, seed=seed)
        world = World(sim)
        wins = world.win_allocate(64)
        wins[0].lock_all()
        for k in range(3):
            wins[0].put(1, 8 * k, bytes([k + 1]) * 8)
        payload = seed.to_bytes(8, "little")
        req = wins[0].rrput(1, 32, payload)
        req.wait()
        bad += world.read(1, wins[1].base + 32, 8) != payload
        wins[0].unlock_all()

    stale_seed = None
    for seed in range(1000):
        sim = SimNIC(2, 4096, seed=seed)
        world = World(sim)
        wins = world.win_allocate(8)
        wins[0].lock_all()
        wins[0].rput(1, 0, b"\xaa" * 8).wait()
        if world.read(1, wins[1].base, 8) != b"\xaa" * 8:
            stale_seed = seed
            break
    ok = bad == 0 and stale_seed is not None
    report(8, "remote-completing requests", ok,
           f"rrput mismatches {bad}/1000 seeds; rput without flush stale at seed {stale_seed}")


def test_09_determinism(report):
    def all_csv():
        rows = []
        for kind in harness.PUT_KINDS:
            rows += harness.bench_put_latency(kind, [8, 4096], iters=500, seed=11)
        for mode in harness.PROGRESS_MODES:
            rows.append(harness.bench_progress(2000, 0.01, mode, seed=11))
        for scope in harness.SCOPES:
            rows += harness.bench_mt_flush(8, [1, 64], scope, iters=100, seed=11)
        for mode in harness.ORDERING_MODES:
            rows.append(harness.bench_ordering(5, mode, seed=11, iters=200))
        return harness.format_csv(rows)

    first, second = all_csv(), all_csv()
    ok = first == second
    report(9, "determinism", ok, f"{first.count(chr(10)) - 1} rows across all benches, byte-identical={ok}")


def test_10_blob_format(report):
    rng = random.Random(10)
    failures = 0
    for _ in range(10_000):
        rec = RegistrationRecord(rng.getrandbits(32), rng.getrandbits(64), rng.randrange(1, 2**64),
                                 rng.getrandbits(64), rng.getrandbits(64))
        blob = encode_memhandle(rec)
        failures += len(blob) != 44 or decode_memhandle(blob) != rec
    vector = bytes.fromhex(
        "4d48444c" "01" "00" "0000" "00000003"
        "0000000000001000" "0000000000001000" "0000000000000007" "0000000000000002")
    matches = encode_memhandle(RegistrationRecord(3, 0x1000, 4096, 7, 2)) == vector
    ok = failures == 0 and matches
    report(10, "blob format", ok, f"round-trip failures {failures}/10000; fixed vector matches={matches}")
