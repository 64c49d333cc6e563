"""
In-memory FTL tables and their lock disciplines.

* map table: one uint32 per logical page; the top bit is the per-entry
  exclusion bit, the low 31 bits the physical page (all-ones = unmapped)
* free-block bitmap, guarded per bank
* block info: valid-page bitmap and valid count per block
* bank info: free blocks, valid pages, current-writing block and page,
  gc_active and exclusive_gc flags
* buffer lookup table: the LPN held by each buffer slot, read without locks
* allocation bitmap: one claim bit per LPN
* the global write sequence counter
"""

from __future__ import annotations

import contextlib
import logging
import struct
import threading

import numpy as np

from ftl.errors import AddressError, CheckpointError, ContractViolation, ExhaustionError
from ftl.spare import BlockType

LOGGER = logging.getLogger(__name__)

ENTRY_BIT = 0x80000000
PPN_MASK = 0x7FFFFFFF
UNMAPPED = PPN_MASK
NO_BLOCK = -1
SNAPSHOT_VERSION = 1
SNAPSHOT_REGIONS = (
    "maptable", "freebitmap", "blkinfo.valid", "blkinfo.count", "blkinfo.kind",
    "bankinfo", "buflookup", "sequence",
)
_SEQUENCE = struct.Struct("<Q")


def scan_window_blocks(blocks_per_bank, window):
    return list(range(window)) + list(range(blocks_per_bank - window, blocks_per_bank))


class FtlState:
    def __init__(self, geometry, logical_pages, num_buffers, runtime, bad_mask=None,
                 scan_window=4, reserve_blocks=1, debug=False, lock_stripes=256):
        self.geometry = geometry
        self.logical_pages = logical_pages
        self.runtime = runtime
        self.reserve_blocks = reserve_blocks
        self.scan_window = scan_window
        self.debug = debug
        banks, blocks, pages = geometry.num_banks, geometry.blocks_per_bank, geometry.pages_per_block
        self.bad = np.zeros((banks, blocks), dtype=bool) if bad_mask is None else bad_mask.astype(bool)
        self.map_table = np.full(logical_pages, UNMAPPED, dtype=np.uint32)
        self.free_bitmap = ~self.bad
        self.block_kind = np.zeros((banks, blocks), dtype=np.int8)
        self.valid_bitmap = np.zeros((banks, blocks, pages), dtype=bool)
        self.block_valid = np.zeros((banks, blocks), dtype=np.int32)
        self.block_pending = np.zeros((banks, blocks), dtype=np.int32)
        self.bank_free = self.free_bitmap.sum(axis=1).astype(np.int32)
        self.bank_valid = np.zeros(banks, dtype=np.int64)
        self.current_block = np.full(banks, NO_BLOCK, dtype=np.int32)
        self.next_page = np.zeros(banks, dtype=np.int32)
        self.gc_active = np.zeros(banks, dtype=bool)
        self.exclusive_gc = np.zeros(banks, dtype=bool)
        self.buf_lookup = np.full(num_buffers, -1, dtype=np.int64)
        self.alloc_bits = np.zeros(logical_pages, dtype=bool)
        window = set(scan_window_blocks(blocks, scan_window))
        self.alloc_order = np.array(
            [b for b in range(blocks) if b not in window] + sorted(window), dtype=np.int32)
        self._bank_locks = [threading.RLock() for _ in range(banks)]
        self._flag_lock = threading.Lock()
        self._seq_lock = threading.Lock()
        self._sequence = 0
        self._entry_stripes = [runtime.condition() for _ in range(lock_stripes)]
        self._alloc_stripes = [runtime.condition() for _ in range(lock_stripes)]
        self._owners = {}
        self.mark_valid_calls = 0
        self.mark_invalid_calls = 0
        self.double_invalidations = 0

    # addressing

    def ppn(self, bank, block, page):
        g = self.geometry
        return (bank * g.blocks_per_bank + block) * g.pages_per_block + page

    def split(self, ppn):
        g = self.geometry
        block_index, page = divmod(int(ppn), g.pages_per_block)
        bank, block = divmod(block_index, g.blocks_per_bank)
        return bank, block, page

    def _check_lpn(self, lpn):
        if not 0 <= lpn < self.logical_pages:
            raise AddressError(f"lpn {lpn} outside exported capacity {self.logical_pages}")

    # map table

    def map_lookup(self, lpn):
        """Current physical page of ``lpn`` or UNMAPPED."""
        self._check_lpn(lpn)
        return int(self.map_table[lpn]) & PPN_MASK

    def map_update(self, lpn, new_ppn):
        """Swap the entry; the caller must hold its exclusion bit. Returns the old ppn."""
        self._check_lpn(lpn)
        entry = int(self.map_table[lpn])
        if not entry & ENTRY_BIT:
            raise ContractViolation(f"map_update of lpn {lpn} without its entry bit")
        if self.debug and self._owners.get(lpn) is not self.runtime.current():
            raise ContractViolation(f"map_update of lpn {lpn} by a non-owner")
        self.map_table[lpn] = (int(new_ppn) & PPN_MASK) | ENTRY_BIT
        return entry & PPN_MASK

    def acquire_entry(self, lpn):
        self._check_lpn(lpn)
        cond = self._entry_stripes[lpn % len(self._entry_stripes)]
        with cond:
            while int(self.map_table[lpn]) & ENTRY_BIT:
                cond.wait()
            self.map_table[lpn] = int(self.map_table[lpn]) | ENTRY_BIT
        if self.debug:
            self._owners[lpn] = self.runtime.current()

    def try_acquire_entry(self, lpn):
        self._check_lpn(lpn)
        cond = self._entry_stripes[lpn % len(self._entry_stripes)]
        with cond:
            if int(self.map_table[lpn]) & ENTRY_BIT:
                return False
            self.map_table[lpn] = int(self.map_table[lpn]) | ENTRY_BIT
        if self.debug:
            self._owners[lpn] = self.runtime.current()
        return True

    def release_entry(self, lpn):
        cond = self._entry_stripes[lpn % len(self._entry_stripes)]
        if self.debug:
            owner = self._owners.pop(lpn, None)
            if owner is not self.runtime.current():
                raise ContractViolation(f"entry bit of lpn {lpn} released by a non-owner")
        with cond:
            self.map_table[lpn] = int(self.map_table[lpn]) & PPN_MASK
            cond.notify_all()

    def entry_held(self, lpn):
        return bool(int(self.map_table[lpn]) & ENTRY_BIT)

    @contextlib.contextmanager
    def entry(self, lpn):
        self.acquire_entry(lpn)
        try:
            yield
        finally:
            self.release_entry(lpn)

    def set_mapping(self, lpn, ppn):
        """Direct assignment for state synthesis and recovery; requires quiescence."""
        self._check_lpn(lpn)
        self.map_table[lpn] = int(ppn) & PPN_MASK

    # free blocks

    def bank_lock(self, bank):
        return self._bank_locks[bank]

    def alloc_free_block(self, bank, kind=BlockType.DATA, allow_reserve=True):
        """Take a free block out of the bitmap under the bank lock."""
        with self._bank_locks[bank]:
            limit = 0 if allow_reserve else self.reserve_blocks
            if self.bank_free[bank] <= limit:
                raise ExhaustionError(f"bank {bank} has no free block", bank=bank)
            order = self.alloc_order
            free = np.flatnonzero(self.free_bitmap[bank, order])
            block = int(order[free[0]])
            self.free_bitmap[bank, block] = False
            self.block_kind[bank, block] = int(kind)
            self.bank_free[bank] -= 1
            return block

    def occupy_block(self, bank, block, kind=BlockType.DATA):
        """Mark a specific free block occupied (state synthesis, recovery, checkpoint windows)."""
        with self._bank_locks[bank]:
            if not self.free_bitmap[bank, block]:
                raise ContractViolation(f"block ({bank}, {block}) is not free")
            self.free_bitmap[bank, block] = False
            self.block_kind[bank, block] = int(kind)
            self.bank_free[bank] -= 1

    def release_block(self, bank, block):
        """Return an erased block to the free bitmap."""
        with self._bank_locks[bank]:
            if self.free_bitmap[bank, block]:
                raise ContractViolation(f"block ({bank}, {block}) released twice")
            if self.block_valid[bank, block]:
                raise ContractViolation(
                    f"block ({bank}, {block}) released with {self.block_valid[bank, block]} valid pages")
            if self.block_pending[bank, block]:
                raise ContractViolation(
                    f"block ({bank}, {block}) released with {self.block_pending[bank, block]} pages in flight")
            if self.current_block[bank] == block:
                self.current_block[bank] = NO_BLOCK
                self.next_page[bank] = 0
            self.valid_bitmap[bank, block] = False
            self.free_bitmap[bank, block] = True
            self.block_kind[bank, block] = 0
            self.bank_free[bank] += 1

    def room_in_bank(self, bank, for_gc=False):
        cur = self.current_block[bank]
        if cur != NO_BLOCK and self.next_page[bank] < self.geometry.pages_per_block:
            return True
        return self.bank_free[bank] > (0 if for_gc else self.reserve_blocks)

    def take_page(self, bank, for_gc=False):
        """
        Next page of the bank's current-writing block, opening a new block when it fills.

        Hold ``bank_lock(bank)`` across this call and the device program so pages
        of a block are issued in order.

        The page counts as in flight until ``settle_page`` or ``untake_page``;
        a block with pages in flight is never a gc victim.
        """
        with self._bank_locks[bank]:
            if self.current_block[bank] == NO_BLOCK or self.next_page[bank] >= self.geometry.pages_per_block:
                block = self.alloc_free_block(bank, BlockType.DATA, allow_reserve=for_gc)
                self.current_block[bank] = block
                self.next_page[bank] = 0
            page = int(self.next_page[bank])
            self.next_page[bank] = page + 1
            self.block_pending[bank, self.current_block[bank]] += 1
            return self.ppn(bank, int(self.current_block[bank]), page)

    def set_current(self, bank, block, next_page):
        """Re-establish a partially written block as the bank's current block (recovery)."""
        with self._bank_locks[bank]:
            if block != NO_BLOCK and self.free_bitmap[bank, block]:
                raise ContractViolation(f"block ({bank}, {block}) is free and cannot be current")
            self.current_block[bank] = block
            self.next_page[bank] = next_page if block != NO_BLOCK else 0

    def untake_page(self, ppn):
        """Give back the page from the last take_page when its program was refused."""
        bank, block, page = self.split(ppn)
        with self._bank_locks[bank]:
            self.block_pending[bank, block] -= 1
            if self.current_block[bank] == block and self.next_page[bank] == page + 1:
                self.next_page[bank] = page

    def settle_page(self, ppn):
        """End the in-flight window of a taken page once its map entry and valid bit are set."""
        bank, block, _ = self.split(ppn)
        with self._bank_locks[bank]:
            self.block_pending[bank, block] -= 1

    # block and bank info

    def mark_valid(self, ppn):
        bank, block, page = self.split(ppn)
        with self._bank_locks[bank]:
            if self.valid_bitmap[bank, block, page]:
                LOGGER.debug("ppn %d already valid", ppn)
                return
            self.valid_bitmap[bank, block, page] = True
            self.block_valid[bank, block] += 1
            self.bank_valid[bank] += 1
            self.mark_valid_calls += 1

    def mark_invalid(self, ppn):
        bank, block, page = self.split(ppn)
        with self._bank_locks[bank]:
            if not self.valid_bitmap[bank, block, page]:
                self.double_invalidations += 1
                LOGGER.debug("double invalidation of ppn %d ignored", ppn)
                return
            self.valid_bitmap[bank, block, page] = False
            self.block_valid[bank, block] -= 1
            self.bank_valid[bank] -= 1
            self.mark_invalid_calls += 1

    def is_valid(self, ppn):
        bank, block, page = self.split(ppn)
        return bool(self.valid_bitmap[bank, block, page])

    def try_set_gc_active(self, bank):
        """Test-and-set claim of a bank for garbage collection."""
        with self._flag_lock:
            if self.gc_active[bank]:
                return False
            self.gc_active[bank] = True
            return True

    def clear_gc_active(self, bank):
        with self._flag_lock:
            self.gc_active[bank] = False

    def set_exclusive_gc(self, bank, value):
        with self._flag_lock:
            self.exclusive_gc[bank] = value

    # buffer lookup table

    def lookup_buffer(self, lpn):
        """Lock-free search; confirm under the slot lock before trusting it."""
        hits = np.flatnonzero(self.buf_lookup == lpn)
        return int(hits[0]) if hits.size else None

    def set_buffer(self, index, lpn):
        self.buf_lookup[index] = -1 if lpn is None else lpn

    # allocation claims

    def claim_alloc(self, lpn):
        cond = self._alloc_stripes[lpn % len(self._alloc_stripes)]
        with cond:
            while self.alloc_bits[lpn]:
                cond.wait()
            self.alloc_bits[lpn] = True
        return lpn

    def release_alloc(self, token):
        cond = self._alloc_stripes[token % len(self._alloc_stripes)]
        with cond:
            self.alloc_bits[token] = False
            cond.notify_all()

    @contextlib.contextmanager
    def claim(self, lpn):
        token = self.claim_alloc(lpn)
        try:
            yield token
        finally:
            self.release_alloc(token)

    # sequence numbers

    def next_sequence(self):
        with self._seq_lock:
            self._sequence += 1
            return self._sequence

    @property
    def sequence(self):
        return self._sequence

    def raise_sequence(self, floor):
        with self._seq_lock:
            self._sequence = max(self._sequence, int(floor))

    # audit, requires quiescence

    def audit(self, device=None):
        """Full recount of every table; returns a list of problems (empty when consistent)."""
        problems = []
        g = self.geometry
        free_pop = self.free_bitmap.sum(axis=1)
        for bank in np.flatnonzero(free_pop != self.bank_free):
            problems.append(f"bank {bank}: free_blocks {self.bank_free[bank]} != popcount {free_pop[bank]}")
        recount = self.valid_bitmap.sum(axis=2)
        for bank, block in np.argwhere(recount != self.block_valid):
            problems.append(f"block ({bank}, {block}): valid_pages {self.block_valid[bank, block]} "
                            f"!= bitmap {recount[bank, block]}")
        bank_sum = self.block_valid.sum(axis=1)
        for bank in np.flatnonzero(bank_sum != self.bank_valid):
            problems.append(f"bank {bank}: valid_pages {self.bank_valid[bank]} != sum {bank_sum[bank]}")
        if (self.free_bitmap & self.bad).any():
            problems.append("a bad block is marked free")
        if (self.block_valid[self.free_bitmap] != 0).any():
            problems.append("a free block holds valid pages")
        for bank, block in enumerate(self.current_block):
            if block != NO_BLOCK and self.free_bitmap[bank, block]:
                problems.append(f"bank {bank}: current-writing block {block} is free")
        held = np.flatnonzero(self.map_table & ENTRY_BIT)
        if held.size:
            problems.append(f"{held.size} entry bits still held")
        if self.alloc_bits.any():
            problems.append("allocation claims still held")
        if self.block_pending.any():
            problems.append(f"{int(self.block_pending.sum())} taken pages never settled")
        entries = self.map_table & PPN_MASK
        mapped_lpns = np.flatnonzero(entries != UNMAPPED)
        mapped = entries[mapped_lpns].astype(np.int64)
        if np.unique(mapped).size != mapped.size:
            problems.append("two lpns map to one physical page")
        if mapped.size and (mapped >= g.total_pages).any():
            problems.append("map entry beyond physical capacity")
        else:
            flat_valid = self.valid_bitmap.reshape(-1)
            if mapped.size and not flat_valid[mapped].all():
                problems.append("a mapped page is not marked valid")
            if int(flat_valid.sum()) != mapped.size:
                problems.append(f"{int(flat_valid.sum())} valid pages but {mapped.size} mapped lpns")
        if self.mark_valid_calls - self.mark_invalid_calls != int(self.block_valid.sum()):
            problems.append("mark_valid - mark_invalid does not equal the valid page total")
        lookups = self.buf_lookup[self.buf_lookup >= 0]
        if np.unique(lookups).size != lookups.size:
            problems.append("two buffers claim one lpn")
        if device is not None:
            problems.extend(self._audit_against_device(device, mapped_lpns, mapped))
        return problems

    def _audit_against_device(self, device, lpns, ppns):
        from ftl.spare import SpareMetadata

        problems = []
        written = device.written_page_counts()
        banks, blocks, _ = np.nonzero(self.valid_bitmap)
        pages = np.nonzero(self.valid_bitmap)[2]
        if (pages >= written[banks, blocks]).any():
            problems.append("a valid page was never written")
        for lpn, ppn in zip(lpns, ppns):
            meta = SpareMetadata.unpack(device.page_state(device.address_of(ppn)).spare)
            if meta is None or meta.lpn != lpn:
                problems.append(f"lpn {lpn} maps to ppn {ppn} whose spare names {meta}")
                if len(problems) > 20:
                    break
        return problems

    def reset_call_counters(self):
        self.mark_valid_calls = int(self.block_valid.sum())
        self.mark_invalid_calls = 0
        self.double_invalidations = 0

    # snapshot / restore

    def snapshot(self):
        """Versioned byte regions of every persistent table."""
        bank_info = np.concatenate([
            self.bank_free.astype("<i8"), self.bank_valid.astype("<i8"),
            self.current_block.astype("<i8"), self.next_page.astype("<i8"),
        ])
        return {
            "maptable": (self.map_table & PPN_MASK).astype("<u4").tobytes(),
            "freebitmap": np.packbits(self.free_bitmap.reshape(-1)).tobytes(),
            "blkinfo.valid": np.packbits(self.valid_bitmap.reshape(-1)).tobytes(),
            "blkinfo.count": self.block_valid.astype("<i4").tobytes(),
            "blkinfo.kind": self.block_kind.astype("i1").tobytes(),
            "bankinfo": bank_info.tobytes(),
            "buflookup": self.buf_lookup.astype("<i8").tobytes(),
            "sequence": _SEQUENCE.pack(self._sequence),
        }

    def restore(self, regions):
        missing = set(SNAPSHOT_REGIONS) - set(regions)
        if missing:
            raise CheckpointError(f"snapshot lacks regions {sorted(missing)}")
        g = self.geometry
        banks, blocks, pages = g.num_banks, g.blocks_per_bank, g.pages_per_block
        try:
            map_table = np.frombuffer(regions["maptable"], dtype="<u4")
            free = np.unpackbits(np.frombuffer(regions["freebitmap"], dtype=np.uint8))[:banks * blocks]
            valid = np.unpackbits(np.frombuffer(regions["blkinfo.valid"], dtype=np.uint8))
            valid = valid[:banks * blocks * pages]
            counts = np.frombuffer(regions["blkinfo.count"], dtype="<i4")
            kinds = np.frombuffer(regions["blkinfo.kind"], dtype="i1")
            bank_info = np.frombuffer(regions["bankinfo"], dtype="<i8").reshape(4, banks)
            buf_lookup = np.frombuffer(regions["buflookup"], dtype="<i8")
            (sequence,) = _SEQUENCE.unpack(regions["sequence"])
        except (ValueError, struct.error) as error:
            raise CheckpointError(f"snapshot region malformed: {error}") from None
        if (map_table.size != self.logical_pages or free.size != banks * blocks
                or valid.size != banks * blocks * pages or counts.size != banks * blocks
                or buf_lookup.size != self.buf_lookup.size):
            raise CheckpointError("snapshot does not match this geometry")
        self.map_table[:] = map_table
        self.free_bitmap[:] = free.reshape(banks, blocks).astype(bool)
        self.valid_bitmap[:] = valid.reshape(banks, blocks, pages).astype(bool)
        self.block_valid[:] = counts.reshape(banks, blocks)
        self.block_kind[:] = kinds.reshape(banks, blocks)
        self.bank_free[:] = bank_info[0]
        self.bank_valid[:] = bank_info[1]
        self.current_block[:] = bank_info[2]
        self.next_page[:] = bank_info[3]
        self.buf_lookup[:] = buf_lookup
        self.gc_active[:] = False
        self.exclusive_gc[:] = False
        self.alloc_bits[:] = False
        self.block_pending[:] = 0
        self._sequence = sequence
        self.reset_call_counters()

    def tables(self):
        """Copies of the persistent tables, for comparing two loaders."""
        return {
            "map_table": (self.map_table & PPN_MASK).copy(),
            "free_bitmap": self.free_bitmap.copy(),
            "valid_bitmap": self.valid_bitmap.copy(),
            "block_valid": self.block_valid.copy(),
            "bank_free": self.bank_free.copy(),
            "bank_valid": self.bank_valid.copy(),
        }
