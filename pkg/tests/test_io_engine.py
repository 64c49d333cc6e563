import random

import pytest
from assertpy import assert_that

from ftl import engine
from ftl.errors import AddressError, BackpressureError, FlushError, LifecycleError
from ftl.ftl_state import UNMAPPED
from ftl.io_engine import IoKind, IoRequest, SlotState
from utils.assert_ftl import assert_audit_clean, assert_sector
from utils.configs import small_config
from utils.fetch import fetch_flush, fetch_read, fetch_write
from utils.random_data import get_random_sector, get_stamped_sector

SECTOR = 4096
SECTORS_PER_PAGE = 8


@pytest.fixture
def handle():
    handle = engine.start(small_config(seed=3))
    yield handle
    if handle.live:
        handle.shutdown(clean=False)


def small_handle(**kwargs):
    return engine.start(small_config(**kwargs))


def test_unwritten_sector_reads_zero(handle):
    _, body = fetch_read(handle, 17)

    assert_sector(body[0], bytes(SECTOR), 17)


def test_buffered_write_is_read_back_from_the_buffer(handle):
    data = get_stamped_sector(5, 1, SECTOR)
    handle.write(5, data)
    _, body = fetch_read(handle, 5)
    stats = handle.stats()
    print(f"cache hits {stats.cache_hits}, flash pages {stats.flash_pages_written}")

    assert_sector(body[0], data, 5)
    assert_that(stats.flash_pages_written).is_equal_to(0).described_as("nothing reaches flash before a flush")
    assert_that(handle.state.lookup_buffer(0)).is_not_none()


def test_flush_of_one_page_programs_it(handle):
    data = get_stamped_sector(9, 1, SECTOR)
    handle.write(9, data)
    _, error = fetch_flush(handle, lpn=1)
    stats = handle.stats()

    assert_that(error).is_none()
    assert_that(handle.state.lookup_buffer(1)).is_none()
    assert_that(handle.state.map_lookup(1)).is_not_equal_to(UNMAPPED)
    assert_that(stats.flash_pages_written).is_equal_to(1)
    assert_that(stats.user_sectors_flushed).is_equal_to(1)
    assert_sector(handle.read(9), data, 9)


def test_partial_page_merges_with_flash(handle):
    first = get_stamped_sector(0, 1, SECTOR)
    second = get_stamped_sector(1, 1, SECTOR)
    handle.write(0, first)
    handle.flush(0)
    handle.write(1, second)
    handle.flush(0)
    stats = handle.stats()
    print(f"merge reads: {stats.merge_reads}")

    assert_that(stats.merge_reads).is_equal_to(1)
    assert_that(stats.flash_pages_written).is_equal_to(2)
    assert_sector(handle.read(0), first, 0)
    assert_sector(handle.read(1), second, 1)
    assert_sector(handle.read(2), bytes(SECTOR), 2)
    handle.quiesce()
    assert_audit_clean(handle.audit(), "after merge")


def test_full_page_needs_no_merge_read(handle):
    page = b"".join(get_stamped_sector(lsn, 1, SECTOR) for lsn in range(8, 16))
    handle.write(8, page)
    handle.write(8, get_stamped_sector(8, 2, SECTOR))
    handle.flush(1)

    assert_that(handle.stats().merge_reads).is_equal_to(0)
    assert_that(handle.read(8, 8)).is_equal_to(get_stamped_sector(8, 2, SECTOR) + page[SECTOR:])


def test_eviction_prefers_full_then_least_recent_partial():
    handle = small_handle(buffers=2)
    try:
        handle.write(0, b"".join(get_stamped_sector(lsn, 1, SECTOR) for lsn in range(8)))
        handle.write(8, get_stamped_sector(8, 1, SECTOR))
        print(f"slots before eviction: {[s.value for s in handle.io.slot_states()]}")
        handle.write(16, get_stamped_sector(16, 1, SECTOR))
        state = handle.state

        assert_that(state.lookup_buffer(0)).described_as("full buffer evicted first").is_none()
        assert_that(state.lookup_buffer(1)).is_not_none()
        assert_that(state.map_lookup(0)).is_not_equal_to(UNMAPPED)

        handle.write(24, get_stamped_sector(24, 1, SECTOR))
        assert_that(state.lookup_buffer(1)).described_as("older partial buffer evicted").is_none()
        assert_that(state.lookup_buffer(2)).is_not_none()
        assert_that(handle.stats().evictions).is_equal_to(2)
        for lsn in (0, 7, 8, 16, 24):
            assert_sector(handle.read(lsn), get_stamped_sector(lsn, 1, SECTOR), lsn)
    finally:
        handle.shutdown(clean=False)


def test_claimed_buffer_flushed_meanwhile_stays_out_of_the_pools():
    handle = small_handle(buffers=2)
    io = handle.io
    try:
        handle.write(0, b"".join(get_stamped_sector(lsn, 1, SECTOR) for lsn in range(8)))
        handle.write(8, get_stamped_sector(8, 1, SECTOR))
        claimed = io.slots[io.select_buffer()]
        handle.flush(0)
        print(f"claimed slot {claimed.index}: lpn {claimed.lpn}, problems {io.audit_buffers()}")

        assert_that(handle.state.map_lookup(0)).is_not_equal_to(UNMAPPED)
        assert_that(claimed.lpn).is_none()
        assert_that(io.pools.indexes(SlotState.EMPTY)).is_empty()
        assert_that(io.audit_buffers()).is_equal_to([f"slot {claimed.index} is still claimed"])

        other = io.slots[io.select_buffer()]
        assert_that(other.index).is_not_equal_to(claimed.index)
        assert_that(other.lpn).is_equal_to(1)

        for slot in (claimed, other):
            with slot.lock:
                slot.claimed = False
        io.pools.push(claimed, SlotState.EMPTY)
        assert_that(io.audit_buffers()).is_empty()
        assert_sector(handle.read(8), get_stamped_sector(8, 1, SECTOR), 8)
    finally:
        handle.shutdown(clean=False)


def test_slot_states_follow_dirty_sectors(handle):
    handle.write(0, b"".join(get_stamped_sector(lsn, 1, SECTOR) for lsn in range(8)))
    handle.write(8, get_stamped_sector(8, 1, SECTOR))
    states = handle.io.slot_states()
    print([s.value for s in states])

    assert_that(states.count(SlotState.FULL)).is_equal_to(1)
    assert_that(states.count(SlotState.PARTIAL)).is_equal_to(1)
    assert_that(states.count(SlotState.EMPTY)).is_equal_to(6)
    assert_that(handle.io.audit_buffers()).is_empty()


def test_idle_buffers_are_flushed_by_the_daemon(handle):
    data = get_stamped_sector(3, 1, SECTOR)
    handle.write(3, data)
    handle.runtime.sleep(700_000.0)
    stats = handle.stats()
    print(f"idle flushes {stats.idle_flushes} at {handle.runtime.now()}us")

    assert_that(stats.idle_flushes).is_equal_to(1)
    assert_that(handle.state.lookup_buffer(0)).is_none()
    assert_that(handle.state.map_lookup(0)).is_not_equal_to(UNMAPPED)
    assert_sector(handle.read(3), data, 3)


def test_recently_touched_buffers_stay(handle):
    handle.write(3, get_stamped_sector(3, 1, SECTOR))
    handle.runtime.sleep(300_000.0)

    assert_that(handle.stats().idle_flushes).is_equal_to(0)
    assert_that(handle.state.lookup_buffer(0)).is_not_none()


def test_dispatch_by_lpn(handle):
    io = handle.io
    queues = [io.dispatch(IoRequest(IoKind.WRITE, lsn=lsn)) for lsn in (0, 7, 8, 16, 40)]

    assert_that(queues).is_equal_to([0, 0, 1, 2, 1])
    assert_that(io.dispatch(IoRequest(IoKind.FLUSH, lpn=6))).is_equal_to(2)
    assert_that(io.dispatch(IoRequest(IoKind.FLUSH))).is_equal_to(0)


def test_dispatch_round_robin():
    handle = small_handle(dispatch="round-robin")
    try:
        queues = [handle.io.dispatch(IoRequest(IoKind.WRITE, lsn=0)) for _ in range(6)]
        assert_that(queues).is_equal_to([0, 1, 2, 3, 0, 1])
    finally:
        handle.shutdown(clean=False)


def test_sector_outside_capacity_is_refused(handle):
    capacity = handle.config.logical_sectors
    with pytest.raises(AddressError):
        handle.submit(IoKind.READ, capacity)
    with pytest.raises(AddressError):
        handle.submit(IoKind.WRITE, -1, bytes(SECTOR))


def test_short_sector_write_fails_its_completion(handle):
    completion = handle.submit(IoKind.WRITE, 4, b"short")
    with pytest.raises(AddressError):
        completion.wait()


def test_requests_after_quiesce_are_refused(handle):
    handle.quiesce()
    with pytest.raises(LifecycleError):
        handle.submit(IoKind.READ, 0)


def test_choose_bank_skips_banks_under_gc(handle):
    state = handle.state
    state.gc_active[0] = True
    state.exclusive_gc[1] = True
    chosen = {handle.io.choose_bank() for _ in range(6)}
    print(f"banks chosen: {chosen}")

    assert_that(chosen).is_equal_to({2, 3})
    state.gc_active[2] = state.gc_active[3] = True
    fallback = {handle.io.choose_bank() for _ in range(20)}
    assert_that(fallback.issubset({0, 1, 2, 3})).is_true()
    state.gc_active[:] = False
    state.exclusive_gc[:] = False


def test_backpressure_is_retried(handle, monkeypatch):
    real = handle.device.issue_write
    refusals = {"left": 3}

    def busy_then_real(addr, data, spare=None):
        if refusals["left"]:
            refusals["left"] -= 1
            raise BackpressureError("queue full")
        return real(addr, data, spare)

    monkeypatch.setattr(handle.device, "issue_write", busy_then_real)
    data = get_stamped_sector(0, 1, SECTOR)
    handle.write(0, data)
    handle.flush(0)
    stats = handle.stats()
    print(f"retries: {stats.backpressure_retries}")

    assert_that(stats.backpressure_retries).is_equal_to(3)
    assert_sector(handle.read(0), data, 0)
    handle.quiesce()
    assert_audit_clean(handle.audit(), "after backpressure")


def test_power_cut_parks_the_page_until_power_returns(handle):
    data = get_stamped_sector(40, 1, SECTOR)
    handle.write(40, data)
    handle.device.power_cut()
    _, error = fetch_flush(handle)

    assert_that(error).is_instance_of(FlushError)
    assert_that(error.unflushed_lpns).is_equal_to([5])
    assert_that(handle.stats().flush_failures).is_equal_to(2)
    assert_sector(handle.read(40), data, 40)

    handle.device.restore_power()
    handle.flush()
    assert_that(handle.state.map_lookup(5)).is_not_equal_to(UNMAPPED)
    assert_that(handle.io._parked).is_empty()
    assert_sector(handle.read(40), data, 40)
    handle.quiesce()
    assert_audit_clean(handle.audit(), "after power returns")


def test_parked_page_keeps_sectors_written_later(handle):
    handle.write(40, get_stamped_sector(40, 1, SECTOR))
    handle.device.power_cut()
    fetch_flush(handle)
    handle.write(41, get_stamped_sector(41, 1, SECTOR))
    handle.device.restore_power()
    handle.flush(5)

    assert_sector(handle.read(40), get_stamped_sector(40, 1, SECTOR), 40)
    assert_sector(handle.read(41), get_stamped_sector(41, 1, SECTOR), 41)


def test_concurrent_clients_keep_their_sectors():
    handle = small_handle(seed=8, queues=4, buffers=4)
    rt = handle.runtime
    sector_rng = random.Random(8)
    expected = {}

    def client(first):
        lsns = list(range(first, first + 24))
        payloads = [get_random_sector(sector_rng, SECTOR) for _ in lsns]
        _, errors = fetch_write(handle, first, payloads)
        expected.update(zip(lsns, payloads))
        handle.flush()
        return errors

    try:
        actors = [rt.spawn(client, t * 64, name=f"client-{t}") for t in range(4)]
        errors = [rt.join(actor) for actor in actors]
        print(f"{len(expected)} sectors written by 4 clients, {handle.stats().evictions} evictions")

        assert_that(errors).is_equal_to([[], [], [], []])
        for lsn, data in expected.items():
            assert_sector(handle.read(lsn), data, lsn)
        handle.quiesce()
        assert_audit_clean(handle.audit(), "after concurrent clients")
    finally:
        handle.shutdown(clean=False)
