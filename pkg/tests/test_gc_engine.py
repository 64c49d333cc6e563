import io
import random

import numpy as np
import pytest
from assertpy import assert_that

from ftl import engine
from ftl.config import EngineConfig, GcConfig, GcLevel, GcPolicy, IoConfig, default_levels
from ftl.errors import ConfigurationError, GcAbortedError
from ftl.ftl_state import PPN_MASK, UNMAPPED, FtlState
from ftl.gc_engine import EVENT_LOG_HEADER, GcEngine
from ftl.runtime import Runtime
from ftl.sim_flash import SimFlashDevice
from ftl.spare import BlockType, SpareMetadata
from profiles.device_profiles import SMALL
from utils.assert_ftl import assert_audit_clean, assert_mapping_consistent, assert_sector
from utils.configs import churn_config, tiny_config
from utils.random_data import get_random_lsn, get_stamped_sector

SECTOR = 4096


def bare_gc(policy=GcPolicy.PLLGC, max_gc_threads=8, queues=64):
    config = EngineConfig(profile=SMALL, io=IoConfig(num_queues=queues),
                          gc=GcConfig(policy=policy, max_gc_threads=max_gc_threads))
    rt = Runtime(seed=0)
    device = SimFlashDevice(SMALL, runtime=rt)
    state = FtlState(SMALL.geometry, config.logical_pages, 4, rt, scan_window=2)
    return GcEngine(config, device, state, rt)


def occupy(state, bank, block, valid):
    state.occupy_block(bank, block, BlockType.DATA)
    for page in range(valid):
        state.mark_valid(state.ppn(bank, block, page))


def churn(handle, writes, seed, spp):
    """Single-sector overwrites of random pages, each flushed; returns the latest version per lsn."""
    rng = random.Random(seed)
    latest = {}
    for version in range(1, writes + 1):
        lsn = get_random_lsn(rng, handle.config.logical_sectors, hot_sectors=handle.config.logical_sectors // 3)
        data = get_stamped_sector(lsn, version, SECTOR)
        handle.write(lsn, data)
        handle.flush(lsn // spp)
        latest[lsn] = data
    return latest


def test_default_levels_for_the_small_card():
    levels = default_levels(SMALL.geometry)
    print(levels)

    assert_that(levels).is_equal_to((GcLevel(4, 0), GcLevel(2, 2), GcLevel(1, 4)))
    assert_that(GcConfig().resolved_panic(SMALL.geometry)).is_equal_to(1)


@pytest.mark.parametrize("levels", [
    ((4, 1), (2, 2)),
    ((4, 0), (4, 2)),
    ((4, 0), (2, 3), (1, 2)),
    ((16, 0),),
    ((4, 0), (2, 2), (1, 8)),
])
def test_invalid_level_tables_are_refused(levels):
    with pytest.raises(ConfigurationError):
        EngineConfig(profile=SMALL, gc=GcConfig(levels=levels))


@pytest.mark.parametrize("free,level", [(16, None), (5, None), (4, 0), (3, 0), (2, 1), (1, 2), (0, 2)])
def test_current_level(free, level):
    gc = bare_gc()
    gc.state.bank_free[1] = free

    assert_that(gc.current_level(1)).is_equal_to(level)


def test_victim_selection_respects_the_level_threshold():
    gc = bare_gc()
    state = gc.state
    occupy(state, 0, 3, 5)
    occupy(state, 0, 4, 2)
    occupy(state, 0, 5, 3)
    state.occupy_block(0, 6, BlockType.CHECKPOINT)
    occupy(state, 0, 7, 0)
    state.set_current(0, 7, 1)
    print(f"valid per block: {state.block_valid[0].tolist()}")

    assert_that(gc.select_victim(0, None)).is_none()
    assert_that(gc.select_victim(0, 0)).described_as("current and checkpoint blocks excluded").is_none()
    assert_that(gc.select_victim(0, 1)).is_equal_to(4)
    assert_that(gc.select_victim(0, 2)).is_equal_to(4)
    assert_that(gc.emergency_victim(0)).is_equal_to(4)


def test_fully_valid_blocks_are_never_emergency_victims():
    gc = bare_gc()
    occupy(gc.state, 2, 3, 8)

    assert_that(gc.emergency_victim(2)).is_none()


@pytest.mark.parametrize("active,permitted", [
    (64, 1), (49, 1), (48, 2), (33, 2), (32, 4), (17, 4), (16, 8), (0, 8)])
def test_throttle_map_for_64_queues(active, permitted):
    assert_that(bare_gc().permitted_for(active)).is_equal_to(permitted)


@pytest.mark.parametrize("active,permitted", [(8, 1), (7, 1), (6, 2), (4, 4), (2, 8), (0, 8)])
def test_throttle_map_scales_to_the_queue_count(active, permitted):
    assert_that(bare_gc(queues=8).permitted_for(active)).is_equal_to(permitted)


def test_throttle_never_exceeds_the_thread_limit():
    gc = bare_gc(max_gc_threads=2)

    assert_that([gc.permitted_for(a) for a in (0, 20, 40, 64)]).is_equal_to([2, 2, 2, 1])


def test_master_flags_the_worst_bank_exclusive_with_hysteresis():
    gc = bare_gc(policy=GcPolicy.PLLGC_ADAPTIVE)
    state = gc.state
    state.bank_free[:] = [9, 9, 0, 9]
    gc.master_tick()
    assert_that(state.exclusive_gc.tolist()).is_equal_to([False, False, True, False])

    state.bank_free[2] = 2
    gc.master_tick()
    assert_that(bool(state.exclusive_gc[2])).described_as("still inside the hysteresis band").is_true()

    state.bank_free[2] = 3
    gc.master_tick()
    assert_that(state.exclusive_gc.any()).is_false()

    out = io.StringIO()
    gc.export_events(out)
    lines = out.getvalue().splitlines()
    print(lines)
    assert_that(lines[0]).is_equal_to(",".join(EVENT_LOG_HEADER))
    assert_that([line.split(",")[1] for line in lines[1:]]).contains("exclusive-set", "exclusive-clear")


def test_master_records_throttle_samples():
    gc = bare_gc(policy=GcPolicy.PLLGC_ADAPTIVE, max_gc_threads=4)
    gc.master_tick()

    assert_that(gc.throttle_log).is_length(1)
    assert_that(gc.throttle_log[0].active_io).is_equal_to(0)
    assert_that(gc.throttle_log[0].permitted).is_equal_to(4)


def test_collect_block_moves_valid_pages_and_frees_the_block():
    handle = engine.start(tiny_config(seed=1))
    spp = handle.config.sectors_per_page
    try:
        latest = churn(handle, 40, seed=1, spp=spp)
        gc = handle.gc
        state = handle.state
        found = [(bank, gc.emergency_victim(bank)) for bank in range(handle.device.geometry.num_banks)]
        bank, victim = next((b, v) for b, v in found if v is not None)
        valid = int(state.block_valid[bank, victim])
        erases = handle.device.block_state(bank, victim).erase_count
        collected_before = gc.stats.blocks_collected
        assert_that(state.try_set_gc_active(bank)).is_true()
        try:
            delta = gc.collect_block(bank, victim)
        finally:
            state.clear_gc_active(bank)
        print(f"collected ({bank}, {victim}) with {valid} valid pages: {delta}")

        assert_that(delta.valid_pages_copied).is_equal_to(valid)
        assert_that(gc.stats.blocks_collected).is_equal_to(collected_before + 1)
        assert_that(bool(state.free_bitmap[bank, victim])).is_true()
        assert_that(handle.device.block_state(bank, victim).erase_count).is_equal_to(erases + 1)
        for lsn, data in latest.items():
            assert_sector(handle.read(lsn), data, lsn)
        handle.quiesce()
        assert_audit_clean(handle.audit(), "after collection")
        assert_mapping_consistent(state, handle.device)
    finally:
        handle.shutdown(clean=False)


def program(gc, ppn, lpn, tag):
    data = bytes([tag]) * SMALL.geometry.page_size
    spare = SpareMetadata(BlockType.DATA, lpn, gc.state.next_sequence()).pack()
    gc.device.write_page(gc.device.address_of(ppn), data, spare)
    return data


def publish(state, lpn, ppn):
    with state.entry(lpn):
        old = state.map_update(lpn, ppn)
    state.mark_valid(ppn)
    state.settle_page(ppn)
    if old != UNMAPPED:
        state.mark_invalid(old)


def test_block_with_a_page_in_flight_is_not_collected():
    gc = bare_gc()
    state = gc.state
    pages = SMALL.geometry.pages_per_block
    slow_ppn = state.take_page(0)
    slow_data = program(gc, slow_ppn, 0, 0x5A)
    _, block, _ = state.split(slow_ppn)
    for lpn in range(1, pages + 1):
        ppn = state.take_page(0)
        program(gc, ppn, lpn, lpn)
        publish(state, lpn, ppn)
    rewrite = state.take_page(0)
    program(gc, rewrite, 1, 0x11)
    publish(state, 1, rewrite)
    print(f"block {block}: valid {state.block_valid[0, block]}, in flight {state.block_pending[0, block]}, "
          f"current {state.current_block[0]}")

    assert_that(int(state.current_block[0])).is_not_equal_to(block)
    assert_that(gc.emergency_victim(0)).is_none()
    assert_that(gc.select_victim(0, len(gc.levels) - 1)).is_none()

    publish(state, 0, slow_ppn)
    assert_that(gc.emergency_victim(0)).is_equal_to(block)
    delta = gc.collect_block(0, block)
    moved, _, _ = gc.device.read_page(gc.device.address_of(state.map_lookup(0)))

    assert_that(delta.valid_pages_copied).is_equal_to(pages - 1)
    assert_that(moved == slow_data).described_as("page of the late writer after collection").is_true()
    assert_audit_clean(state.audit(gc.device), "after collecting the settled block")


def test_worker_round_counts_a_failed_collection_as_aborted():
    gc = bare_gc()
    state = gc.state
    occupy(state, 0, 3, 2)
    state.bank_free[0] = 2
    delta = gc.gc_worker_round(thread_id=0)
    print(f"round delta: {delta}, events: {[e.event for e in gc.events]}")

    assert_that(delta.aborted).is_equal_to(1)
    assert_that(gc.stats.aborted).is_equal_to(1)
    assert_that(bool(state.gc_active[0])).described_as("bank released after the abort").is_false()
    assert_that(bool(state.free_bitmap[0, 3])).is_false()
    assert_that(gc.round_log[0].bank).is_equal_to(0)


def test_non_blocking_collection_aborts_on_a_busy_entry():
    handle = engine.start(tiny_config(seed=2))
    try:
        churn(handle, 30, seed=2, spp=handle.config.sectors_per_page)
        handle.quiesce()
        gc = handle.gc
        state = handle.state
        bank, victim = next(
            (b, v) for b in range(2) for v in range(state.geometry.blocks_per_bank)
            if state.block_kind[b, v] == BlockType.DATA and state.block_valid[b, v] and state.current_block[b] != v)
        aborted = gc.stats.aborted
        page = int(np.flatnonzero(state.valid_bitmap[bank, victim])[0])
        busy_lpn = int(np.flatnonzero((state.map_table & PPN_MASK) == state.ppn(bank, victim, page))[0])
        state.acquire_entry(busy_lpn)
        try:
            with pytest.raises(GcAbortedError):
                gc.collect_block(bank, victim, blocking=False)
        finally:
            state.release_entry(busy_lpn)
        print(f"aborted collections: {gc.stats.aborted}")

        assert_that(gc.stats.aborted).is_equal_to(aborted + 1)
        assert_that(bool(state.free_bitmap[bank, victim])).is_false()
        assert_audit_clean(handle.audit(), "after abort")
    finally:
        handle.shutdown(clean=False)


def test_inline_policy_collects_in_the_write_path():
    handle = engine.start(tiny_config(policy=GcPolicy.NPGC, seed=4))
    try:
        latest = churn(handle, 150, seed=4, spp=handle.config.sectors_per_page)
        stats = handle.stats()
        print(f"npgc invocations {stats.npgc_invocations}, blocks collected {stats.gc_blocks_collected}")

        assert_that(stats.npgc_invocations).is_greater_than(0)
        assert_that(stats.gc_blocks_collected).is_greater_than(0)
        assert_that(handle.gc.running).is_false()
        for lsn, data in latest.items():
            assert_sector(handle.read(lsn), data, lsn)
        handle.quiesce()
        assert_audit_clean(handle.audit(), "after inline gc")
    finally:
        handle.shutdown(clean=False)


@pytest.mark.parametrize("policy", [GcPolicy.PLLGC, GcPolicy.PLLGC_ADAPTIVE])
def test_background_workers_keep_banks_above_exhaustion(policy):
    handle = engine.start(churn_config(policy=policy, seed=5))
    try:
        latest = churn(handle, 300, seed=5, spp=handle.config.sectors_per_page)
        stats = handle.stats()
        rounds = handle.gc.round_log
        print(f"{policy.value}: {stats.gc_blocks_collected} blocks collected in {len(rounds)} rounds, "
              f"write amplification {stats.write_amplification:.3f}")

        assert_that(stats.gc_blocks_collected).is_greater_than(0)
        assert_that(stats.npgc_invocations).is_equal_to(0)
        assert_that({r.thread_id for r in rounds}.issubset({0, 1})).is_true()
        for lsn, data in latest.items():
            assert_sector(handle.read(lsn), data, lsn)
        handle.quiesce()
        assert_audit_clean(handle.audit(), f"after {policy.value}")
        assert_that(handle.state.gc_active.any()).is_false()
        assert_that(handle.state.exclusive_gc.any()).is_false()
    finally:
        handle.shutdown(clean=False)
