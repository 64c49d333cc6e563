"""
Bank-local greedy garbage collection.

A bank is collected once its free-block count breaches a level of the level
table; the level decides how many valid pages a victim may still hold. Three
invocation policies share the same victim selection and collection code:

* npgc: collection runs inline in the write path, on the bank about to be
  written.
* pllgc: up to ``max_gc_threads`` worker actors co-run with IO and pick banks
  nobody is writing.
* pllgc-adaptive: as pllgc, with worker 0 acting as master. It throttles the
  other workers by IO activity and flags the worst bank exclusive so writers
  leave it alone.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from ftl.config import DEFAULT_ADAPTIVE_WORKERS, GcPolicy
from ftl.errors import BackpressureError, FlashError, FtlError, GcAbortedError
from ftl.ftl_state import NO_BLOCK
from ftl.spare import BlockType, SpareMetadata

LOGGER = logging.getLogger(__name__)

EVENT_LOG_HEADER = ("timestamp_us", "event", "bank", "block")


@dataclass
class GcStats:
    blocks_collected: int = 0
    valid_pages_copied: int = 0
    erases_performed: int = 0
    aborted: int = 0
    rounds: int = 0
    busy_us: float = 0.0

    def add(self, other):
        self.blocks_collected += other.blocks_collected
        self.valid_pages_copied += other.valid_pages_copied
        self.erases_performed += other.erases_performed
        self.aborted += other.aborted
        self.rounds += other.rounds
        self.busy_us += other.busy_us
        return self


@dataclass(frozen=True)
class GcEvent:
    timestamp_us: float
    event: str
    bank: int
    block: int


@dataclass(frozen=True)
class ThrottleSample:
    timestamp_us: float
    active_io: int
    permitted: int


@dataclass(frozen=True)
class RoundStart:
    timestamp_us: float
    thread_id: int
    permitted: int
    bank: int


class GcEngine:
    def __init__(self, config, device, state, runtime, io_engine=None):
        self.config = config
        self.gc = config.gc
        self.policy = config.gc.policy
        self.device = device
        self.state = state
        self.runtime = runtime
        self.io = io_engine
        geometry = device.geometry
        self.levels = config.gc.resolved_levels(geometry)
        self.panic = config.gc.resolved_panic(geometry)
        self.pages_per_block = geometry.pages_per_block
        self.stats = GcStats()
        self.events = []
        self.throttle_log = []
        self.round_log = []
        self.npgc_invocations = 0
        self.permitted = self.gc.max_gc_threads
        self._workers = []
        self._running = False
        self._wakeup = runtime.condition()

    # levels and victims

    def current_level(self, bank):
        """Highest level whose free-block threshold the bank breaches, or None."""
        free = int(self.state.bank_free[bank])
        level = None
        for index, row in enumerate(self.levels):
            if free <= row.free_blocks:
                level = index
        return level

    def _candidates(self, bank):
        state = self.state
        mask = ~state.free_bitmap[bank] & ~state.bad[bank] & (state.block_kind[bank] == BlockType.DATA)
        mask &= state.block_pending[bank] == 0
        current = int(state.current_block[bank])
        if current != NO_BLOCK:
            mask[current] = False
        return mask

    def _pick(self, bank, mask):
        if not mask.any():
            return None
        counts = np.where(mask, self.state.block_valid[bank], np.iinfo(np.int32).max)
        return int(np.argmin(counts))

    def select_victim(self, bank, level):
        """Occupied non-current block with the fewest valid pages within the level's threshold."""
        if level is None:
            return None
        mask = self._candidates(bank) & (self.state.block_valid[bank] <= self.levels[level].valid_pages)
        return self._pick(bank, mask)

    def emergency_victim(self, bank):
        """Any occupied block that is not fully valid; used when a bank has no room at all."""
        mask = self._candidates(bank) & (self.state.block_valid[bank] < self.pages_per_block)
        return self._pick(bank, mask)

    def _victim_for(self, bank):
        victim = self.select_victim(bank, self.current_level(bank))
        if victim is None and not self.state.room_in_bank(bank):
            victim = self.emergency_victim(bank)
        return victim

    # collection

    def _log(self, event, bank, block=-1):
        self.events.append(GcEvent(self.runtime.now(), event, int(bank), int(block)))

    def collect_block(self, bank, block, blocking=True):
        """
        Move the victim's valid pages to the bank's current block, erase it and free it.

        param blocking: wait for busy map entries; otherwise retry a few times and abort
        """
        state = self.state
        rt = self.runtime
        started = rt.now()
        delta = GcStats(rounds=1)
        self._log("victim-selected", bank, block)
        LOGGER.debug("collecting block (%d, %d) with %d valid pages", bank, block, state.block_valid[bank, block])
        try:
            for page in np.flatnonzero(state.valid_bitmap[bank, block]):
                if self._move_page(bank, block, int(page), blocking):
                    delta.valid_pages_copied += 1
            if state.block_valid[bank, block]:
                raise GcAbortedError(
                    f"block ({bank}, {block}) still holds {state.block_valid[bank, block]} valid pages")
            self._erase(bank, block)
        except FtlError as error:
            delta.aborted += 1
            self._log("abort", bank, block)
            LOGGER.warning("gc of block (%d, %d) aborted: %s", bank, block, error)
            self._account(delta, started)
            if isinstance(error, GcAbortedError):
                raise
            raise GcAbortedError(f"gc of block ({bank}, {block}) aborted: {error}") from error
        state.release_block(bank, block)
        delta.blocks_collected += 1
        delta.erases_performed += 1
        self._account(delta, started)
        return delta

    def _account(self, delta, started):
        delta.busy_us = self.runtime.now() - started
        self.stats.add(delta)

    def _move_page(self, bank, block, page, blocking):
        state = self.state
        ppn = state.ppn(bank, block, page)
        addr = self.device.address_of(ppn)
        # programmed pages are immutable until this erase, so reading before the entry bit is safe
        data, spare, _ = self.device.read_page(addr, want_spare=True)
        meta = SpareMetadata.unpack(spare)
        if meta is None or meta.block_type is not BlockType.DATA:
            raise GcAbortedError(f"valid page {addr} has unreadable metadata")
        lpn = meta.lpn
        if not self._take_entry(lpn, blocking):
            raise GcAbortedError(f"entry of lpn {lpn} stayed busy")
        try:
            if state.map_lookup(lpn) != ppn:
                return False
            new_ppn = self._program_copy(bank, lpn, data)
            try:
                state.map_update(lpn, new_ppn)
                state.mark_valid(new_ppn)
            finally:
                state.settle_page(new_ppn)
            state.mark_invalid(ppn)
            self._log("copy", bank, block)
            return True
        finally:
            state.release_entry(lpn)

    def _take_entry(self, lpn, blocking):
        if blocking:
            self.state.acquire_entry(lpn)
            return True
        delay = self.config.io.backoff_start_us
        for _ in range(self.gc.entry_retry_limit):
            if self.state.try_acquire_entry(lpn):
                return True
            self.runtime.sleep(delay)
            delay = min(delay * 2, self.config.io.backoff_cap_us)
        return False

    def _program_copy(self, bank, lpn, data):
        state = self.state
        io = self.config.io
        spare = SpareMetadata(BlockType.DATA, lpn, state.next_sequence()).pack()
        delay = io.backoff_start_us
        for _ in range(io.backoff_attempts):
            with state.bank_lock(bank):
                ppn = state.take_page(bank, for_gc=True)
                try:
                    desc = self.device.issue_write(self.device.address_of(ppn), data, spare)
                except BackpressureError:
                    state.untake_page(ppn)
                    desc = None
                except FlashError:
                    state.untake_page(ppn)
                    raise
            if desc is not None:
                self.runtime.advance_to(desc.complete_ts)
                if self.io is not None:
                    self.io.counters.flash_pages_written += 1
                return ppn
            self.runtime.sleep(delay)
            delay = min(delay * 2, io.backoff_cap_us)
        raise BackpressureError(f"bank {bank} refused gc copies")

    def _erase(self, bank, block):
        io = self.config.io
        delay = io.backoff_start_us
        for _ in range(io.backoff_attempts):
            try:
                self.device.erase_block(bank, block)
            except BackpressureError:
                self.runtime.sleep(delay)
                delay = min(delay * 2, io.backoff_cap_us)
                continue
            self._log("erase", bank, block)
            return
        raise BackpressureError(f"bank {bank} refused the erase of block {block}")

    # inline policy

    def npgc_before_write(self, bank):
        """Collect the bank inline until it leaves the threshold it breaches now."""
        level = self.current_level(bank)
        if level is None:
            return GcStats()
        if not self.state.try_set_gc_active(bank):
            return GcStats()
        self.npgc_invocations += 1
        delta = GcStats()
        target = self.levels[level].free_blocks
        limit = self.gc.max_npgc_rounds or (target - int(self.state.bank_free[bank]) + 1)
        try:
            while self.state.bank_free[bank] <= target and delta.rounds < limit:
                victim = self._victim_for(bank)
                if victim is None:
                    break
                try:
                    delta.add(self.collect_block(bank, victim, blocking=False))
                except GcAbortedError:
                    break
        finally:
            self.state.clear_gc_active(bank)
        return delta

    def reclaim_for_write(self):
        """Emergency collection when no bank has room for a user write; returns True on progress."""
        state = self.state
        for _ in range(self.gc.entry_retry_limit):
            for bank in np.argsort(state.bank_free, kind="stable"):
                bank = int(bank)
                if self._victim_for(bank) is None or not state.try_set_gc_active(bank):
                    continue
                try:
                    victim = self._victim_for(bank)
                    if victim is None:
                        continue
                    self.collect_block(bank, victim, blocking=False)
                    return True
                except GcAbortedError:
                    continue
                finally:
                    state.clear_gc_active(bank)
            self.runtime.sleep(self.gc.idle_poll_us)
        LOGGER.warning("no bank could be reclaimed for a user write")
        return False

    # background policies

    def start(self):
        if self.policy is GcPolicy.NPGC:
            return
        self._running = True
        self._workers = [
            self.runtime.spawn(self._worker, i, name=f"ftl-gc-{i}") for i in range(self.gc.max_gc_threads)]
        LOGGER.info("started %d %s gc workers", self.gc.max_gc_threads, self.policy.value)

    def stop(self):
        if not self._running:
            return
        self._running = False
        with self._wakeup:
            self._wakeup.notify_all()
        for actor in self._workers:
            self.runtime.join(actor, reraise=False)
        self._workers = []
        for bank in np.flatnonzero(self.state.exclusive_gc):
            self.state.set_exclusive_gc(int(bank), False)

    @property
    def running(self):
        return self._running

    def _claim_bank(self):
        state = self.state
        banks = [b for b in range(len(state.bank_free)) if self.current_level(b) is not None]
        if not banks:
            return None
        writers = self.io.writers_active if self.io is not None else np.zeros(len(state.bank_free))
        banks.sort(key=lambda b: (not state.exclusive_gc[b], bool(writers[b]), int(state.bank_free[b]), b))
        for bank in banks:
            if self._victim_for(bank) is None:
                continue
            if state.try_set_gc_active(bank):
                return bank
        return None

    def gc_worker_round(self, thread_id):
        """Claim one breaching bank and collect one victim on it; returns the stats delta or None."""
        bank = self._claim_bank()
        if bank is None:
            return None
        try:
            self.round_log.append(RoundStart(self.runtime.now(), thread_id, self.permitted, bank))
            victim = self._victim_for(bank)
            if victim is None:
                return GcStats()
            return self.collect_block(bank, victim, blocking=True)
        except GcAbortedError:
            return GcStats(aborted=1)
        finally:
            self.state.clear_gc_active(bank)

    def permitted_for(self, active_io):
        """Map the active IO worker count through the range map, scaled to the queue count."""
        queues = self.config.io.num_queues
        for low, permitted in self.gc.adaptive_map:
            if active_io * DEFAULT_ADAPTIVE_WORKERS >= low * queues:
                return min(permitted, self.gc.max_gc_threads)
        return 1

    def master_tick(self):
        active = self.io.active_workers if self.io is not None else 0
        permitted = self.permitted_for(active)
        if permitted != self.permitted:
            LOGGER.info("gc threads permitted %d -> %d (%d io workers active)", self.permitted, permitted, active)
            self._log("throttle-change", -1, permitted)
            self.permitted = permitted
            with self._wakeup:
                self._wakeup.notify_all()
        self.throttle_log.append(ThrottleSample(self.runtime.now(), active, permitted))
        self._update_exclusive()
        return permitted

    def _update_exclusive(self):
        state = self.state
        flagged = np.flatnonzero(state.exclusive_gc)
        if flagged.size:
            bank = int(flagged[0])
            if state.bank_free[bank] >= self.panic + self.gc.exclusive_hysteresis:
                state.set_exclusive_gc(bank, False)
                self._log("exclusive-clear", bank)
                LOGGER.info("bank %d left exclusive gc with %d free blocks", bank, state.bank_free[bank])
            return
        worst = int(np.argmin(state.bank_free))
        if state.bank_free[worst] < self.panic:
            state.set_exclusive_gc(worst, True)
            self._log("exclusive-set", worst)
            LOGGER.info("bank %d flagged for exclusive gc at %d free blocks", worst, state.bank_free[worst])

    def _sleep(self, timeout):
        with self._wakeup:
            if self._running:
                self._wakeup.wait(timeout)

    def _worker(self, thread_id):
        adaptive = self.policy is GcPolicy.PLLGC_ADAPTIVE
        while self._running:
            if adaptive:
                if thread_id == 0:
                    self.master_tick()
                elif thread_id >= self.permitted:
                    self._sleep(self.gc.idle_poll_us)
                    continue
            delta = self.gc_worker_round(thread_id)
            if delta is None or not delta.blocks_collected:
                self._sleep(self.gc.idle_poll_us)

    # export

    def export_events(self, path_or_handle):
        rows = [(f"{e.timestamp_us:.3f}", e.event, e.bank, e.block) for e in self.events]
        if hasattr(path_or_handle, "write"):
            _write_events(path_or_handle, rows)
            return
        with open(path_or_handle, "w", newline="", encoding="utf-8") as handle:
            _write_events(handle, rows)


def _write_events(handle, rows):
    writer = csv.writer(handle)
    writer.writerow(EVENT_LOG_HEADER)
    writer.writerows(rows)
