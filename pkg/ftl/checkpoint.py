"""
Checkpoint chains and the full-scan recovery path.

At shutdown the FTL tables are serialized into tagged sections, each with its
own CRC-32, and written into a chain of blocks flagged CHECKPOINT in their
spare area. Page 0 of every chain block starts with a header naming its
position and the next block. The head block always sits in the top or bottom
``scan_window`` blocks of some bank, so a load only probes page 0 of those
blocks, in parallel across banks, and follows the chain from there.

When no intact chain is found, ``recovery_scan`` reads every written page and
rebuilds the tables from the spare metadata, the highest sequence number per
LPN winning.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from ftl.errors import (
    CheckpointError,
    CorruptImageError,
    ExhaustionError,
    FlashError,
    GcAbortedError,
    ParityError,
)
from ftl.ftl_state import NO_BLOCK, SNAPSHOT_REGIONS, SNAPSHOT_VERSION, scan_window_blocks
from ftl.sim_flash import PageAddress
from ftl.spare import NO_LPN, BlockType, SpareMetadata, crc32

LOGGER = logging.getLogger(__name__)

__all__ = [
    "BLOCK_HEADER",
    "CHAIN_END",
    "CHAIN_MAGIC",
    "CheckpointBlockHeader",
    "Checkpointer",
    "LoadResult",
    "RecoveryResult",
    "SpareMetadata",
    "decode_sections",
    "encode_sections",
]

CHAIN_MAGIC = b"FTLCHAIN"
CHAIN_VERSION = 1
CHAIN_END = -1

# magic, version, position, next block (global index or CHAIN_END), payload bytes, sequence, crc
BLOCK_HEADER = struct.Struct("<8sHIiIQI")
SECTION_COUNT = struct.Struct("<I")
# tag, version, payload bytes, crc
SECTION_HEADER = struct.Struct("<16sHII")


@dataclass(frozen=True)
class CheckpointBlockHeader:
    position: int
    next_block: int
    payload_length: int
    sequence: int
    checksum: int = 0
    version: int = CHAIN_VERSION

    def pack(self, payload):
        body = BLOCK_HEADER.pack(
            CHAIN_MAGIC, self.version, self.position, self.next_block, self.payload_length, self.sequence, 0)
        checksum = crc32(body[:-4] + payload)
        return body[:-4] + struct.pack("<I", checksum)

    @classmethod
    def unpack(cls, raw):
        """Parse a header; returns None when the magic or version does not match."""
        if len(raw) < BLOCK_HEADER.size:
            return None
        magic, version, position, next_block, length, sequence, checksum = BLOCK_HEADER.unpack_from(raw)
        if magic != CHAIN_MAGIC or version != CHAIN_VERSION:
            return None
        return cls(position, next_block, length, sequence, checksum, version)

    def verify(self, raw, payload):
        return crc32(bytes(raw[:BLOCK_HEADER.size - 4]) + payload) == self.checksum


def encode_sections(regions):
    parts = [SECTION_COUNT.pack(len(regions))]
    for tag in SNAPSHOT_REGIONS:
        payload = regions[tag]
        parts.append(SECTION_HEADER.pack(tag.encode("ascii"), SNAPSHOT_VERSION, len(payload), crc32(payload)))
        parts.append(payload)
    return b"".join(parts)


def decode_sections(blob):
    """Split a checkpoint blob back into regions; raises CheckpointError on any damage."""
    try:
        (count,) = SECTION_COUNT.unpack_from(blob)
        offset = SECTION_COUNT.size
        regions = {}
        for _ in range(count):
            raw_tag, version, length, checksum = SECTION_HEADER.unpack_from(blob, offset)
            offset += SECTION_HEADER.size
            payload = bytes(blob[offset:offset + length])
            offset += length
            tag = raw_tag.rstrip(b"\x00").decode("ascii")
            if version != SNAPSHOT_VERSION:
                raise CheckpointError(f"section {tag} has version {version}")
            if len(payload) != length or crc32(payload) != checksum:
                raise CheckpointError(f"section {tag} fails its checksum")
            regions[tag] = payload
    except (struct.error, UnicodeDecodeError) as error:
        raise CheckpointError(f"checkpoint blob truncated: {error}") from None
    return regions


@dataclass
class LoadResult:
    found: bool
    head: PageAddress | None = None
    sequence: int = 0
    chain_blocks: list = field(default_factory=list)
    probe_reads: int = 0
    chain_pages_read: int = 0
    reason: str = ""

    @property
    def pages_read(self):
        return self.probe_reads + self.chain_pages_read


@dataclass
class RecoveryResult:
    pages_read: int = 0
    torn_pages: int = 0
    lpns_recovered: int = 0
    erased_blocks: int = 0
    max_sequence: int = 0


@dataclass
class _BankScan:
    pages_read: int = 0
    torn_pages: int = 0
    written: dict = field(default_factory=dict)
    data_pages: list = field(default_factory=list)
    checkpoint_only: list = field(default_factory=list)
    last_sequence: dict = field(default_factory=dict)
    max_sequence: int = 0


class Checkpointer:
    def __init__(self, config, device, state, runtime, gc=None):
        self.config = config
        self.device = device
        self.state = state
        self.runtime = runtime
        self.gc = gc
        self.geometry = device.geometry
        self.window = config.checkpoint.scan_window
        self.relocations = 0

    # save

    def _block_index(self, bank, block):
        return bank * self.geometry.blocks_per_bank + block

    def _block_of(self, index):
        return divmod(index, self.geometry.blocks_per_bank)

    def _free_window_block(self):
        state = self.state
        for bank in range(self.geometry.num_banks):
            for block in scan_window_blocks(self.geometry.blocks_per_bank, self.window):
                if state.free_bitmap[bank, block]:
                    return bank, block
        return None

    def _relocate_window_block(self):
        """Empty one occupied window block by collecting it; returns (bank, block)."""
        state = self.state
        if self.gc is None:
            raise CheckpointError("no free window block and no collector to make one")
        best = None
        for bank in range(self.geometry.num_banks):
            for block in scan_window_blocks(self.geometry.blocks_per_bank, self.window):
                if (state.bad[bank, block] or state.block_kind[bank, block] != BlockType.DATA
                        or state.current_block[bank] == block):
                    continue
                key = (int(state.block_valid[bank, block]), bank, block)
                if best is None or key < best:
                    best = key
        if best is None:
            raise CheckpointError("every window block is bad, current or already a checkpoint")
        _, bank, block = best
        LOGGER.info("relocating window block (%d, %d) to make room for the checkpoint head", bank, block)
        try:
            self.gc.collect_block(bank, block, blocking=True)
        except (GcAbortedError, FlashError) as error:
            raise CheckpointError(f"window relocation failed: {error}") from error
        self.relocations += 1
        return bank, block

    def _chain_capacity(self):
        g = self.geometry
        return g.pages_per_block * g.page_size - BLOCK_HEADER.size

    def _allocate_tail(self, count, head_bank):
        state = self.state
        banks = self.geometry.num_banks
        blocks = []
        for i in range(count):
            order = sorted(range(banks), key=lambda b: (-int(state.bank_free[b]), (b - head_bank - 1 - i) % banks))
            bank = order[0]
            blocks.append((bank, state.alloc_free_block(bank, BlockType.CHECKPOINT, allow_reserve=True)))
        return blocks

    def checkpoint_save(self):
        """Write the tables as a chain of checkpoint blocks; returns the head address. Requires quiescence."""
        state = self.state
        slot = self._free_window_block() or self._relocate_window_block()
        sequence = state.next_sequence()
        blob = encode_sections(state.snapshot())
        capacity = self._chain_capacity()
        count = max(1, math.ceil(len(blob) / capacity))
        head_bank, head_block = slot
        state.occupy_block(head_bank, head_block, BlockType.CHECKPOINT)
        try:
            chain = [slot] + self._allocate_tail(count - 1, head_bank)
        except ExhaustionError as error:
            raise CheckpointError(f"no room for a {count}-block checkpoint chain: {error}") from error
        spare = SpareMetadata(BlockType.CHECKPOINT, NO_LPN, sequence).pack()
        for position, (bank, block) in enumerate(chain):
            chunk = blob[position * capacity:(position + 1) * capacity]
            following = CHAIN_END if position == len(chain) - 1 else self._block_index(*chain[position + 1])
            header = CheckpointBlockHeader(position, following, len(chunk), sequence)
            self._write_block(bank, block, header.pack(chunk) + chunk, spare)
        LOGGER.info("checkpoint %d written to %d blocks, head at (%d, %d)", sequence, len(chain), *slot)
        return PageAddress(head_bank, head_block, 0)

    def _write_block(self, bank, block, content, spare):
        page_size = self.geometry.page_size
        for page in range(math.ceil(len(content) / page_size)):
            data = content[page * page_size:(page + 1) * page_size]
            data += bytes(page_size - len(data))
            self.device.write_page(PageAddress(bank, block, page), data, spare)

    # load

    def _probe_bank(self, bank):
        """Read the spare of page 0 in every window block; returns (reads, [(seq, header, address)])."""
        heads = []
        reads = 0
        bad = self.device.bad_block_mask()
        for block in scan_window_blocks(self.geometry.blocks_per_bank, self.window):
            if bad[bank, block]:
                continue
            addr = PageAddress(bank, block, 0)
            _, spare, _ = self.device.read_page(addr, 0, 0, want_spare=True)
            reads += 1
            meta = SpareMetadata.unpack(spare)
            if meta is None or meta.block_type is not BlockType.CHECKPOINT:
                continue
            try:
                raw, _, _ = self.device.read_page(addr, 0, self.geometry.read_unit)
            except ParityError:
                continue
            reads += 1
            header = CheckpointBlockHeader.unpack(raw)
            if header is not None and header.position == 0:
                heads.append((header.sequence, header, addr))
        return reads, heads

    def _fan_out(self, target):
        rt = self.runtime
        actors = [rt.spawn(target, bank, name=f"ftl-scan-{bank}") for bank in range(self.geometry.num_banks)]
        return [rt.join(actor) for actor in actors]

    def _read_block(self, bank, block, first, length):
        """Read the pages holding ``length`` bytes, page 0 already in hand as ``first``."""
        page_size = self.geometry.page_size
        pages = math.ceil(length / page_size)
        chunks = [first]
        for page in range(1, pages):
            data, _, _ = self.device.read_page(PageAddress(bank, block, page))
            chunks.append(data)
        return b"".join(chunks), pages

    def _walk(self, head, result):
        """Follow the chain from ``head``; returns the blob or raises CheckpointError."""
        total_blocks = self.geometry.total_blocks
        visited = set()
        parts = []
        bank, block = head.bank, head.block
        position = 0
        while True:
            index = self._block_index(bank, block)
            if index in visited or len(visited) >= total_blocks:
                raise CheckpointError(f"checkpoint chain loops at block ({bank}, {block})")
            visited.add(index)
            first, _, _ = self.device.read_page(PageAddress(bank, block, 0))
            result.chain_pages_read += 1
            header = CheckpointBlockHeader.unpack(first)
            if header is None or header.position != position or header.sequence != result.sequence:
                raise CheckpointError(f"block ({bank}, {block}) is not chain position {position}")
            raw, pages = self._read_block(bank, block, first, BLOCK_HEADER.size + header.payload_length)
            result.chain_pages_read += pages - 1
            payload = raw[BLOCK_HEADER.size:BLOCK_HEADER.size + header.payload_length]
            if not header.verify(raw, payload):
                raise CheckpointError(f"checkpoint block ({bank}, {block}) fails its checksum")
            parts.append(payload)
            result.chain_blocks.append((bank, block))
            if header.next_block == CHAIN_END:
                return b"".join(parts)
            if not 0 <= header.next_block < total_blocks:
                raise CheckpointError(f"chain link {header.next_block} outside the device")
            bank, block = self._block_of(header.next_block)
            position += 1

    def checkpoint_load(self):
        """Find the newest chain through the scan windows and restore it; erases the consumed chain."""
        result = LoadResult(found=False)
        heads = []
        for reads, found in self._fan_out(self._probe_bank):
            result.probe_reads += reads
            heads.extend(found)
        if not heads:
            result.reason = "no checkpoint head in any scan window"
            LOGGER.info(result.reason)
            return result
        sequence, _, head = max(heads, key=lambda item: (item[0], item[2]))
        result.head = head
        result.sequence = sequence
        try:
            regions = decode_sections(self._walk(head, result))
        except (CheckpointError, ParityError) as error:
            result.reason = str(error)
            LOGGER.warning("checkpoint %d unusable, falling back to a page scan: %s", sequence, error)
            return result
        try:
            self.state.restore(regions)
        except CheckpointError as error:
            raise CorruptImageError(f"checkpoint {sequence} does not fit this configuration: {error}") from error
        for bank, block in result.chain_blocks:
            self.device.erase_block(bank, block)
        self._drop_stale_checkpoint_blocks()
        result.found = True
        LOGGER.info("restored checkpoint %d from %d blocks after %d probe reads",
                    sequence, len(result.chain_blocks), result.probe_reads)
        return result

    def _drop_stale_checkpoint_blocks(self):
        state = self.state
        for bank, block in np.argwhere(state.block_kind == BlockType.CHECKPOINT):
            bank, block = int(bank), int(block)
            self.device.erase_block(bank, block)
            state.release_block(bank, block)

    # full scan

    def _scan_bank(self, bank):
        g = self.geometry
        scan = _BankScan()
        bad = self.device.bad_block_mask()
        erased_spare = b"\xff" * g.spare_per_page
        for block in range(g.blocks_per_bank):
            if bad[bank, block]:
                continue
            written = 0
            kinds = set()
            for page in range(g.pages_per_block):
                addr = PageAddress(bank, block, page)
                try:
                    _, spare, _ = self.device.read_page(addr, want_spare=True)
                except ParityError:
                    scan.pages_read += 1
                    scan.torn_pages += 1
                    written = page + 1
                    continue
                scan.pages_read += 1
                if spare == erased_spare:
                    break
                written = page + 1
                meta = SpareMetadata.unpack(spare)
                if meta is None:
                    scan.torn_pages += 1
                    continue
                kinds.add(meta.block_type)
                scan.max_sequence = max(scan.max_sequence, meta.sequence)
                if meta.block_type is BlockType.DATA:
                    scan.data_pages.append((meta.lpn, meta.sequence, page, block))
                if meta.block_type is not BlockType.CHECKPOINT:
                    scan.last_sequence[block] = max(scan.last_sequence.get(block, 0), meta.sequence)
            if not written:
                continue
            if kinds == {BlockType.CHECKPOINT}:
                scan.checkpoint_only.append(block)
            scan.written[block] = written
        return scan

    def recovery_scan(self):
        """Rebuild every table from the spare area of every written page."""
        state = self.state
        g = self.geometry
        result = RecoveryResult()
        scans = self._fan_out(self._scan_bank)
        best = {}
        for bank, scan in enumerate(scans):
            result.pages_read += scan.pages_read
            result.torn_pages += scan.torn_pages
            result.max_sequence = max(result.max_sequence, scan.max_sequence)
            for lpn, sequence, page, block in scan.data_pages:
                if lpn >= state.logical_pages:
                    continue
                known = best.get(lpn)
                if known is None or sequence > known[0]:
                    best[lpn] = (sequence, state.ppn(bank, block, page))
        for bank, scan in enumerate(scans):
            for block in scan.checkpoint_only:
                self.device.erase_block(bank, block)
                result.erased_blocks += 1
            for block in scan.written:
                if block not in scan.checkpoint_only:
                    state.occupy_block(bank, block, BlockType.DATA)
        for lpn, (_, ppn) in best.items():
            state.set_mapping(lpn, ppn)
            state.mark_valid(ppn)
        for bank, scan in enumerate(scans):
            partial = [b for b, n in scan.written.items()
                       if n < g.pages_per_block and b not in scan.checkpoint_only]
            if partial:
                block = max(partial, key=lambda b: (scan.last_sequence.get(b, 0), b))
                state.set_current(bank, block, scan.written[block])
            else:
                state.set_current(bank, NO_BLOCK, 0)
        state.raise_sequence(result.max_sequence)
        state.reset_call_counters()
        result.lpns_recovered = len(best)
        LOGGER.info("page scan read %d pages, recovered %d lpns, skipped %d torn pages",
                    result.pages_read, result.lpns_recovered, result.torn_pages)
        return result
