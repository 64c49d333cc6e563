"""
Multi-queue front end, buffer cache and the sector write/read paths.

Requests are dispatched to one of Q FIFO queues, each drained by its own
worker actor. Writes land in page-sized buffer slots; a slot is written to
flash when it is evicted to make room, when it idles past the flush
threshold, or on a flush barrier.

Lock order: allocation claim -> slot lock -> map entry bit -> bank lock.
The entry bit of an evicted LPN is taken while its slot lock is still held
and kept until the map update, so flushes of one LPN reach flash in order.
"""

from __future__ import annotations

import collections
import enum
import itertools
import logging
import threading
from dataclasses import dataclass, field

import numpy as np

from ftl.config import DispatchPolicy, GcPolicy
from ftl.errors import (
    AddressError,
    BackpressureError,
    ExhaustionError,
    FlashError,
    FlushError,
    FtlError,
    LifecycleError,
)
from ftl.ftl_state import UNMAPPED
from ftl.spare import BlockType, SpareMetadata

LOGGER = logging.getLogger(__name__)


class IoKind(enum.Enum):
    READ = "read"
    WRITE = "write"
    FLUSH = "flush-barrier"


class SlotState(enum.Enum):
    EMPTY = "empty"
    PARTIAL = "partial"
    FULL = "full"


@dataclass
class IoRequest:
    kind: IoKind
    lsn: int | None = None
    payload: bytes | None = None
    completion: object = None
    submit_ts: float = 0.0
    # flush-barrier target; None flushes everything
    lpn: int | None = None


@dataclass
class IoCounters:
    user_sectors_written: int = 0
    user_sectors_flushed: int = 0
    user_pages_flushed: int = 0
    flash_pages_written: int = 0
    merge_reads: int = 0
    cache_hits: int = 0
    cache_misses: int = 0
    reads_served: int = 0
    evictions: int = 0
    idle_flushes: int = 0
    backpressure_retries: int = 0
    flush_failures: int = 0
    requests_completed: int = 0
    per_queue: list = field(default_factory=list)


class BufferSlot:
    __slots__ = ("index", "data", "lpn", "dirty", "last_access", "lock", "pool", "claimed")

    def __init__(self, index, page_size, lock):
        self.index = index
        self.data = bytearray(page_size)
        self.lpn = None
        self.dirty = 0
        self.last_access = 0.0
        self.lock = lock
        self.pool = None
        self.claimed = False

    def state(self, full_mask):
        if self.lpn is None:
            return SlotState.EMPTY
        return SlotState.FULL if self.dirty == full_mask else SlotState.PARTIAL


class BufferPools:
    """
    Empty and full index queues in FIFO order; a slot in neither is partial.

    A slot handed out by ``pop`` or ``claim_lru`` is claimed until its new owner
    retargets it, and a claimed slot is never queued.
    """

    def __init__(self, slots):
        self._lock = threading.Lock()
        self._pools = {SlotState.EMPTY: collections.OrderedDict(), SlotState.FULL: collections.OrderedDict()}
        for slot in slots:
            self._pools[SlotState.EMPTY][slot.index] = slot
            slot.pool = SlotState.EMPTY

    def push(self, slot, pool):
        with self._lock:
            if slot.claimed:
                return
            if slot.pool is pool:
                return
            if slot.pool is not None:
                self._pools[slot.pool].pop(slot.index, None)
            self._pools[pool][slot.index] = slot
            slot.pool = pool

    def pop(self, pool):
        with self._lock:
            if not self._pools[pool]:
                return None
            _, slot = self._pools[pool].popitem(last=False)
            slot.pool = None
            slot.claimed = True
            return slot

    def claim_lru(self, slots):
        """Claim the least recently used unclaimed slot, preferring partial ones; None when all are claimed."""
        with self._lock:
            free = [s for s in slots if not s.claimed]
            if not free:
                return None
            partials = [s for s in free if s.lpn is not None and s.pool is None]
            slot = min(partials or free, key=lambda s: s.last_access)
            if slot.pool is not None:
                self._pools[slot.pool].pop(slot.index, None)
                slot.pool = None
            slot.claimed = True
            return slot

    def indexes(self, pool):
        with self._lock:
            return list(self._pools[pool])


class IoEngine:
    def __init__(self, config, device, state, runtime):
        self.config = config
        self.io = config.io
        self.device = device
        self.state = state
        self.runtime = runtime
        self.gc = None
        geometry = device.geometry
        self.page_size = geometry.page_size
        self.sector_size = config.io.sector_size
        self.sectors_per_page = config.sectors_per_page
        self.full_mask = (1 << self.sectors_per_page) - 1
        self.zero_sector = bytes(self.sector_size)
        self.slots = [
            BufferSlot(i, self.page_size, runtime.mutex(f"slot-{i}")) for i in range(config.io.num_buffers)]
        self.pools = BufferPools(self.slots)
        self.counters = IoCounters(per_queue=[0] * config.io.num_queues)
        self.writers_active = np.zeros(geometry.num_banks, dtype=np.int32)
        self._queues = []
        self._workers = []
        self._daemon = None
        self._daemon_wakeup = None
        self._running = False
        self._active = 0
        self._active_lock = threading.Lock()
        self._rr = itertools.count()
        self._bank_cursor = 0
        self._bank_rng = runtime.random("bank-choice")
        self._parked = {}
        self._inflight = set()
        self._inflight_ids = itertools.count(1)
        self._inflight_cond = runtime.condition()

    # lifecycle

    @property
    def running(self):
        return self._running

    @property
    def active_workers(self):
        return self._active

    def start(self):
        rt = self.runtime
        self._running = True
        self._queues = [rt.channel(f"ioq-{i}") for i in range(self.io.num_queues)]
        self._workers = [
            rt.spawn(self._worker, i, name=f"ftl-io-{i}") for i in range(self.io.num_queues)]
        self._daemon_wakeup = rt.channel("flush-daemon")
        self._daemon = rt.spawn(self._flush_daemon, name="ftl-flushd")
        LOGGER.info("io engine started with %d queues and %d buffers", self.io.num_queues, self.io.num_buffers)

    def stop(self, drop_buffers=False):
        """Stop accepting requests and join every worker; queued requests still drain unless dropped."""
        if not self._running:
            return
        self._running = False
        if drop_buffers:
            for channel in self._queues:
                while True:
                    req = channel.get(timeout=0)
                    if req is None:
                        break
                    req.completion.set_error(LifecycleError("engine crashed before serving request"))
        for channel in self._queues:
            channel.close()
        self._daemon_wakeup.close()
        for actor in self._workers:
            self.runtime.join(actor, reraise=False)
        self.runtime.join(self._daemon, reraise=False)
        if drop_buffers:
            self.drop_buffers()

    def drop_buffers(self):
        for slot in self.slots:
            slot.claimed = False
            slot.lpn = None
            slot.dirty = 0
            self.state.set_buffer(slot.index, None)
            self.pools.push(slot, SlotState.EMPTY)
        self._parked.clear()

    # submission

    def dispatch(self, req):
        if self.io.dispatch is DispatchPolicy.ROUND_ROBIN:
            return next(self._rr) % self.io.num_queues
        if req.kind is IoKind.FLUSH:
            return 0 if req.lpn is None else req.lpn % self.io.num_queues
        return (req.lsn // self.sectors_per_page) % self.io.num_queues

    def submit(self, req):
        if not self._running:
            raise LifecycleError("engine is not running")
        if req.kind is not IoKind.FLUSH:
            self._check_lsn(req.lsn)
        req.completion = self.runtime.completion()
        req.submit_ts = self.runtime.now()
        queue = self.dispatch(req)
        self.counters.per_queue[queue] += 1
        self._queues[queue].put(req)
        return req.completion

    def _check_lsn(self, lsn):
        if lsn is None or not 0 <= lsn < self.state.logical_pages * self.sectors_per_page:
            raise AddressError(f"sector {lsn} outside exported capacity")

    def _worker(self, index):
        channel = self._queues[index]
        rt = self.runtime
        while True:
            req = channel.get()
            if req is None:
                return
            with self._active_lock:
                self._active += 1
            try:
                rt.advance(self.io.request_cpu_us)
                req.completion.set_result(self._execute(req))
            except FtlError as error:
                LOGGER.error("request %s on sector %s failed: %s", req.kind.value, req.lsn, error)
                req.completion.set_error(error)
            except Exception as error:
                LOGGER.exception("worker %d crashed serving %s", index, req.kind.value)
                req.completion.set_error(error)
            finally:
                with self._active_lock:
                    self._active -= 1
                self.counters.requests_completed += 1

    def _execute(self, req):
        if req.kind is IoKind.WRITE:
            return self.ftl_write_sector(req.lsn, req.payload)
        if req.kind is IoKind.READ:
            return self.ftl_read_sector(req.lsn)
        if req.lpn is None:
            return self.flush_all()
        return self.flush_lpn(req.lpn)

    # write path

    def ftl_write_sector(self, lsn, data):
        if len(data) != self.sector_size:
            raise AddressError(f"sector write of {len(data)} bytes, expected {self.sector_size}")
        self._check_lsn(lsn)
        lpn, sector = divmod(lsn, self.sectors_per_page)
        state = self.state
        while True:
            index = state.lookup_buffer(lpn)
            if index is not None:
                slot = self.slots[index]
                with slot.lock:
                    if slot.lpn == lpn:
                        self._write_into(slot, sector, data)
                        self.counters.cache_hits += 1
                        return
                continue
            detached = None
            with state.claim(lpn):
                if state.lookup_buffer(lpn) is not None:
                    continue
                slot = self.slots[self.select_buffer()]
                with slot.lock:
                    try:
                        if slot.lpn is not None:
                            detached = self._detach(slot)
                            self.counters.evictions += 1
                        slot.lpn = lpn
                        slot.dirty = 0
                        state.set_buffer(slot.index, lpn)
                    finally:
                        slot.claimed = False
                    self._write_into(slot, sector, data)
                self.counters.cache_misses += 1
            if detached is not None:
                self._flush_detached(*detached)
            return

    def _write_into(self, slot, sector, data):
        offset = sector * self.sector_size
        slot.data[offset:offset + self.sector_size] = data
        slot.dirty |= 1 << sector
        slot.last_access = self.runtime.now()
        self.counters.user_sectors_written += 1
        if slot.dirty == self.full_mask:
            self.pools.push(slot, SlotState.FULL)

    def _detach(self, slot):
        """Take the slot's content out for flushing; called with the slot lock held."""
        lpn = slot.lpn
        self.state.acquire_entry(lpn)
        detached = (lpn, bytearray(slot.data), slot.dirty)
        slot.lpn = None
        slot.dirty = 0
        self.state.set_buffer(slot.index, None)
        return detached

    def select_buffer(self):
        """
        Claim a buffer: empty first, then the oldest full one, then the least recently used partial one.

        The caller retargets the claimed slot and clears ``claimed`` under its lock.
        """
        delay = self.io.backoff_start_us
        while True:
            slot = (self.pools.pop(SlotState.EMPTY) or self.pools.pop(SlotState.FULL)
                    or self.pools.claim_lru(self.slots))
            if slot is not None:
                return slot.index
            self.runtime.sleep(delay)
            delay = min(delay * 2, self.io.backoff_cap_us)

    # flushing

    def _flush_detached(self, lpn, data, dirty):
        """Write a detached page to flash; the caller passed in the held entry bit of ``lpn``."""
        token = self._begin_inflight()
        try:
            try:
                dirty = self._merge(lpn, data, dirty)
                ppn = self.program_page(bytes(data), lpn, BlockType.DATA)
            except FtlError as error:
                self._park(lpn, data, dirty)
                self.counters.flush_failures += 1
                LOGGER.error("flush of lpn %d failed, parked for retry: %s", lpn, error)
                return False
            try:
                old = self.state.map_update(lpn, ppn)
                self.state.mark_valid(ppn)
            finally:
                self.state.settle_page(ppn)
            if old != UNMAPPED:
                self.state.mark_invalid(old)
            self._parked.pop(lpn, None)
            self.counters.user_sectors_flushed += bin(dirty).count("1")
            self.counters.user_pages_flushed += 1
            return True
        finally:
            self.state.release_entry(lpn)
            self._end_inflight(token)

    def _park(self, lpn, data, dirty):
        previous = self._parked.get(lpn)
        if previous is not None:
            ss = self.sector_size
            for sector in range(self.sectors_per_page):
                bit = 1 << sector
                if previous[1] & bit and not dirty & bit:
                    data[sector * ss:(sector + 1) * ss] = previous[0][sector * ss:(sector + 1) * ss]
            dirty |= previous[1]
        self._parked[lpn] = (data, dirty)

    def _merge(self, lpn, data, dirty):
        """
        Fill clean sectors from a parked copy, then from flash (or zeros); returns the dirty mask.

        The flash read comes first so a failed read leaves ``data`` untouched.
        """
        ss = self.sector_size
        parked = self._parked.get(lpn)
        merged = dirty | (parked[1] if parked is not None else 0)
        flash = None
        if merged != self.full_mask:
            ppn = self.state.map_lookup(lpn)
            if ppn != UNMAPPED:
                flash, _, _ = self.device.read_page(self.device.address_of(ppn))
                self.counters.merge_reads += 1
        for sector in range(self.sectors_per_page):
            bit = 1 << sector
            if dirty & bit:
                continue
            span = slice(sector * ss, (sector + 1) * ss)
            if parked is not None and parked[1] & bit:
                data[span] = parked[0][span]
            elif flash is not None:
                data[span] = flash[span]
            else:
                data[span] = self.zero_sector
        return merged

    def _begin_inflight(self):
        token = next(self._inflight_ids)
        with self._inflight_cond:
            self._inflight.add(token)
        return token

    def _end_inflight(self, token):
        with self._inflight_cond:
            self._inflight.discard(token)
            self._inflight_cond.notify_all()

    def _wait_inflight(self, tokens):
        with self._inflight_cond:
            while tokens & self._inflight:
                self._inflight_cond.wait()

    def _flush_slot(self, slot, lpn=None, idle_before=None):
        with slot.lock:
            if slot.lpn is None or (lpn is not None and slot.lpn != lpn):
                return False
            if idle_before is not None and slot.last_access >= idle_before:
                return False
            detached = self._detach(slot)
            self.pools.push(slot, SlotState.EMPTY)
        return self._flush_detached(*detached)

    def _retry_parked(self, lpns=None):
        for lpn in list(self._parked if lpns is None else lpns):
            if lpn not in self._parked:
                continue
            self.state.acquire_entry(lpn)
            parked = self._parked.get(lpn)
            if parked is None:
                self.state.release_entry(lpn)
                continue
            data, dirty = parked
            self._flush_detached(lpn, bytearray(data), dirty)

    def flush_lpn(self, lpn):
        """Barrier for one logical page: its buffered sectors and any flush in flight reach flash."""
        index = self.state.lookup_buffer(lpn)
        if index is not None:
            self._flush_slot(self.slots[index], lpn=lpn)
        self._retry_parked([lpn])
        with self.state.entry(lpn):
            pass
        if lpn in self._parked:
            raise FlushError(f"lpn {lpn} could not be flushed", [lpn])

    def flush_all(self):
        """Persist every dirty slot and wait for flushes already in flight."""
        for slot in self.slots:
            self._flush_slot(slot)
        with self._inflight_cond:
            pending = set(self._inflight)
        self._wait_inflight(pending)
        self._retry_parked()
        if self._parked:
            raise FlushError(f"{len(self._parked)} logical pages could not be flushed", self._parked)

    def flush_daemon_tick(self, now):
        """Flush every slot not touched for longer than the idle threshold."""
        threshold = now - self.io.idle_flush_seconds * 1e6
        flushed = 0
        for slot in self.slots:
            if slot.lpn is not None and slot.last_access < threshold:
                if self._flush_slot(slot, idle_before=threshold):
                    flushed += 1
        if self._parked:
            self._retry_parked()
        self.counters.idle_flushes += flushed
        return flushed

    def _flush_daemon(self):
        tick = self.io.flush_tick_seconds * 1e6
        while self._running:
            self._daemon_wakeup.get(timeout=tick)
            if not self._running:
                return
            try:
                self.flush_daemon_tick(self.runtime.now())
            except FtlError as error:
                LOGGER.error("idle flush tick failed: %s", error)

    # physical pages

    def choose_bank(self, exclusions=()):
        """Round-robin over banks not under GC; a random bank when every candidate is flagged."""
        state = self.state
        banks = self.device.geometry.num_banks
        start = self._bank_cursor
        flagged = []
        for step in range(banks):
            bank = (start + step) % banks
            if bank in exclusions or not state.room_in_bank(bank):
                continue
            if state.gc_active[bank] or state.exclusive_gc[bank]:
                flagged.append(bank)
                continue
            self._bank_cursor = (bank + 1) % banks
            return bank
        if flagged:
            return self._bank_rng.choice(flagged)
        raise ExhaustionError("no bank has room for a user write")

    def get_physical_page(self, exclusions=(), bank=None):
        """Take the next page of a bank's current-writing block; returns (PageAddress, bank)."""
        if bank is None:
            bank = self.choose_bank(exclusions)
        ppn = self.state.take_page(bank)
        return self.device.address_of(ppn), bank

    def program_page(self, data, lpn, block_type=BlockType.DATA, exclusions=()):
        """Write one page on a bank chosen by the allocation policy; returns its ppn."""
        rt = self.runtime
        delay = self.io.backoff_start_us
        attempts = 0
        excluded = set(exclusions)
        reclaimed = False
        while True:
            try:
                bank = self.choose_bank(excluded)
            except ExhaustionError:
                if reclaimed or self.gc is None:
                    raise
                self.gc.reclaim_for_write()
                reclaimed = True
                excluded = set(exclusions)
                continue
            if self.gc is not None and self.gc.policy is GcPolicy.NPGC:
                self.gc.npgc_before_write(bank)
            spare = SpareMetadata(block_type, lpn, self.state.next_sequence()).pack()
            self.writers_active[bank] += 1
            try:
                with self.state.bank_lock(bank):
                    try:
                        addr, _ = self.get_physical_page(bank=bank)
                    except ExhaustionError:
                        excluded.add(bank)
                        continue
                    try:
                        desc = self.device.issue_write(addr, data, spare)
                    except BackpressureError:
                        self.state.untake_page(self.device.ppn(addr))
                        desc = None
                    except FlashError:
                        self.state.untake_page(self.device.ppn(addr))
                        raise
                if desc is None:
                    attempts += 1
                    self.counters.backpressure_retries += 1
                    if attempts >= self.io.backoff_attempts:
                        raise BackpressureError(f"bank {bank} stayed busy after {attempts} attempts")
                    LOGGER.debug("backpressure on bank %d, retry in %.0fus", bank, delay)
                    rt.sleep(delay)
                    delay = min(delay * 2, self.io.backoff_cap_us)
                    continue
                rt.advance_to(desc.complete_ts)
            finally:
                self.writers_active[bank] -= 1
            self.counters.flash_pages_written += 1
            return self.device.ppn(addr)

    # read path

    def ftl_read_sector(self, lsn):
        self._check_lsn(lsn)
        lpn, sector = divmod(lsn, self.sectors_per_page)
        ss = self.sector_size
        self.counters.reads_served += 1
        index = self.state.lookup_buffer(lpn)
        if index is not None:
            slot = self.slots[index]
            with slot.lock:
                if slot.lpn == lpn and slot.dirty & (1 << sector):
                    slot.last_access = self.runtime.now()
                    self.counters.cache_hits += 1
                    return bytes(slot.data[sector * ss:(sector + 1) * ss])
        self.counters.cache_misses += 1
        with self.state.entry(lpn):
            parked = self._parked.get(lpn)
            if parked is not None and parked[1] & (1 << sector):
                return bytes(parked[0][sector * ss:(sector + 1) * ss])
            ppn = self.state.map_lookup(lpn)
            if ppn == UNMAPPED:
                return self.zero_sector
            data, _, _ = self.device.read_page(self.device.address_of(ppn), sector * ss, ss)
            return data

    # inspection

    def slot_states(self):
        return [slot.state(self.full_mask) for slot in self.slots]

    def audit_buffers(self):
        problems = []
        empties = set(self.pools.indexes(SlotState.EMPTY))
        fulls = set(self.pools.indexes(SlotState.FULL))
        if empties & fulls:
            problems.append("a buffer index sits in both pools")
        for slot in self.slots:
            state = slot.state(self.full_mask)
            if state is SlotState.EMPTY and slot.dirty:
                problems.append(f"slot {slot.index} is empty with dirty sectors")
            if slot.index in empties and state is not SlotState.EMPTY:
                problems.append(f"slot {slot.index} in empty pool holds lpn {slot.lpn}")
            if slot.index in fulls and state is not SlotState.FULL:
                problems.append(f"slot {slot.index} in full pool is {state.value}")
            if slot.claimed:
                problems.append(f"slot {slot.index} is still claimed")
            held = self.state.buf_lookup[slot.index]
            if (slot.lpn is None and held != -1) or (slot.lpn is not None and held != slot.lpn):
                problems.append(f"lookup entry of slot {slot.index} is {held}, slot holds {slot.lpn}")
        return problems
