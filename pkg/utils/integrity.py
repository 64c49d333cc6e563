"""Randomized operation driver that keeps an engine and a shadow device in step."""

import random
from dataclasses import dataclass, field

from bench.aging import AgingSpec, aged_fill, inject_aging
from ftl import engine
from ftl.errors import GcAbortedError
from utils.assert_ftl import assert_audit_clean, assert_matches_shadow
from utils.random_data import get_random_lsn, get_stamped_sector
from utils.shadow import ShadowDevice

# cumulative weights of write, read, flush one page, flush all, daemon tick, forced gc, clean and dirty restart
OPERATIONS = (
    ("write", 45),
    ("read", 65),
    ("flush-lpn", 75),
    ("flush-all", 80),
    ("tick", 88),
    ("gc", 95),
    ("clean-restart", 98),
    ("dirty-restart", 100),
)


@dataclass
class ExerciseLog:
    seed: int
    counts: dict = field(default_factory=dict)
    mismatches: list = field(default_factory=list)
    collections: int = 0
    restarts: int = 0

    def note(self, op):
        self.counts[op] = self.counts.get(op, 0) + 1


def pick_operation(rng):
    roll = rng.randrange(100)
    for name, bound in OPERATIONS:
        if roll < bound:
            return name
    return OPERATIONS[-1][0]


def force_collection(handle, rng):
    """Collect one victim of a random bank at a random level; returns True when a block was freed."""
    gc = handle.gc
    state = handle.state
    bank = rng.randrange(state.geometry.num_banks)
    victim = gc.select_victim(bank, rng.randrange(len(gc.levels)))
    if victim is None:
        victim = gc.emergency_victim(bank)
    if victim is None or not state.try_set_gc_active(bank):
        return False
    try:
        gc.collect_block(bank, victim)
        return True
    except GcAbortedError as error:
        print(f"forced collection of ({bank}, {victim}) aborted: {error}")
        return False
    finally:
        state.clear_gc_active(bank)


def age(handle, shadow, seed):
    """Age a fresh engine and preload the shadow with every synthesized valid page."""
    result = inject_aging(handle, AgingSpec(valid_mean=0.4, seed=seed))
    spp = handle.config.sectors_per_page
    fill = aged_fill(handle.io.sector_size)
    for lpn in result.mapped_lpns:
        for lsn in range(int(lpn) * spp, int(lpn) * spp + spp):
            shadow.preload(lsn, fill)
    return result


def restart(handle, shadow, clean):
    if clean:
        handle.shutdown(clean=True)
        shadow.flush()
    else:
        handle.shutdown(clean=False)
        shadow.crash()
    restarted = engine.start(handle.config, device=handle.device)
    assert_audit_clean(restarted.audit(), f"after {'clean' if clean else 'dirty'} restart")
    return restarted


def exercise(config, seed, operations, aged=False):
    """
    Run ``operations`` random requests against a fresh engine and its shadow.

    Reads are compared as they happen; the whole touched range is compared
    at the end, before and after a final clean restart, with an audit at
    every quiescent point.

    param config: EngineConfig of the engine under test.
    param seed: drives the operation mix, the sectors and the runtime scheduler.
    param operations: number of operations to draw.
    param aged: age the card before the first operation.
    """
    rng = random.Random(seed)
    handle = engine.start(config)
    spp = config.sectors_per_page
    capacity = config.logical_sectors
    shadow = ShadowDevice(handle.io.sector_size, spp, capacity)
    log = ExerciseLog(seed)
    version = 0
    try:
        if aged:
            age(handle, shadow, seed)
        for step in range(operations):
            op = pick_operation(rng)
            log.note(op)
            if op == "write":
                lsn = get_random_lsn(rng, capacity, hot_sectors=capacity // 4)
                count = min(rng.randint(1, 3), capacity - lsn)
                version += 1
                sectors = [get_stamped_sector(lsn + i, version, handle.io.sector_size) for i in range(count)]
                handle.write(lsn, b"".join(sectors))
                for i, data in enumerate(sectors):
                    shadow.write(lsn + i, data)
            elif op == "read":
                lsn = get_random_lsn(rng, capacity, hot_sectors=capacity // 4)
                if not shadow.reconcile(lsn, handle.read(lsn)):
                    log.mismatches.append((step, lsn))
            elif op == "flush-lpn":
                lpn = get_random_lsn(rng, capacity, hot_sectors=capacity // 4) // spp
                handle.flush(lpn)
                shadow.flush(lpn)
            elif op == "flush-all":
                handle.flush()
                shadow.flush()
            elif op == "tick":
                handle.runtime.sleep(rng.choice((2_000.0, 20_000.0, 80_000.0)))
            elif op == "gc":
                log.collections += force_collection(handle, rng)
            else:
                handle = restart(handle, shadow, clean=op == "clean-restart")
                log.restarts += 1
        print(f"seed {seed}: {log.counts}, {log.collections} forced collections, {log.restarts} restarts")
        assert_matches_shadow(handle, shadow)
        handle.quiesce()
        shadow.flush()
        assert_audit_clean(handle.audit(), f"seed {seed} quiesced")
        handle = restart(handle, shadow, clean=True)
        assert_matches_shadow(handle, shadow)
    finally:
        if handle.live:
            handle.shutdown(clean=False)
    return log
