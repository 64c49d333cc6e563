"""
Artificial aging: synthesize the tables and flash pages of a long-used card.

Free blocks per bank follow a normal distribution, valid pages per occupied
block another one. Valid pages get distinct LPNs; invalid pages either repeat
an LPN that is valid elsewhere with an older sequence number, or carry a
FILLER tag. Every page holds the same fill so a large aged card stays cheap.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ftl.errors import AgingError
from ftl.ftl_state import PPN_MASK, UNMAPPED
from ftl.sim_flash import PageAddress
from ftl.spare import NO_LPN, BlockType, SpareMetadata

LOGGER = logging.getLogger(__name__)

AGED_FILL = b"\xa5" * 32 * 1024


@dataclass(frozen=True)
class AgingSpec:
    free_mean: float = 0.35
    free_spread: float = 0.08
    valid_mean: float = 0.5
    valid_spread: float = 0.25
    erase_count_mean: int = 1000
    erase_count_spread: int = 200
    stale_share: float = 0.5
    seed: int = 0

    def validate(self):
        for name in ("free_mean", "valid_mean", "stale_share"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise AgingError(f"aging {name} must be in [0, 1], got {value}")
        if self.free_spread < 0 or self.valid_spread < 0 or self.erase_count_spread < 0:
            raise AgingError("aging spreads must be >= 0")


@dataclass
class AgingResult:
    free_per_bank: np.ndarray
    valid_pages: int
    synthesized_pages: int
    mapped_lpns: np.ndarray


def aged_fill(page_size):
    return AGED_FILL[:page_size] if page_size <= len(AGED_FILL) else b"\xa5" * page_size


def inject_aging(handle, spec):
    """
    Rewrite the quiesced engine's tables and flash to the aged shape in ``spec``.

    param handle: EngineHandle with an empty mapping and no request in flight.
    param spec: AgingSpec with fractions of blocks_per_bank and pages_per_block.
    """
    spec.validate()
    state = handle.state
    device = handle.device
    g = device.geometry
    if ((state.map_table & PPN_MASK) != UNMAPPED).any() or device.pages_written:
        raise AgingError("aging needs a freshly started engine")
    rng = np.random.default_rng(spec.seed)
    floor = state.reserve_blocks + 1
    good = (~state.bad).sum(axis=1)
    free = np.rint(rng.normal(spec.free_mean * g.blocks_per_bank, spec.free_spread * g.blocks_per_bank,
                              g.num_banks)).astype(int)
    free = np.clip(free, np.minimum(floor, good), good)
    occupied = good - free
    valid = [np.clip(np.rint(rng.normal(spec.valid_mean * g.pages_per_block,
                                        spec.valid_spread * g.pages_per_block, n)), 0, g.pages_per_block).astype(int)
             for n in occupied]
    total_valid = int(sum(v.sum() for v in valid))
    if total_valid > state.logical_pages:
        raise AgingError(f"aging asks for {total_valid} valid pages, only {state.logical_pages} lpns exist")
    lpns = rng.permutation(state.logical_pages)[:total_valid]
    fill = aged_fill(g.page_size)
    stale_seq = 0
    fresh_seq = g.total_pages
    cursor = 0
    pages = 0
    for bank in range(g.num_banks):
        blocks = [int(b) for b in state.alloc_order if not state.bad[bank, b]][:occupied[bank]]
        for block, count in zip(blocks, valid[bank]):
            state.occupy_block(bank, block, BlockType.DATA)
            live = set(rng.choice(g.pages_per_block, size=count, replace=False).tolist())
            for page in range(g.pages_per_block):
                addr = PageAddress(bank, block, page)
                if page in live:
                    lpn = int(lpns[cursor])
                    cursor += 1
                    fresh_seq += 1
                    meta = SpareMetadata(BlockType.DATA, lpn, fresh_seq)
                    ppn = state.ppn(bank, block, page)
                    state.set_mapping(lpn, ppn)
                    state.mark_valid(ppn)
                elif total_valid and rng.random() < spec.stale_share:
                    stale_seq += 1
                    meta = SpareMetadata(BlockType.DATA, int(lpns[rng.integers(total_valid)]), stale_seq)
                else:
                    stale_seq += 1
                    meta = SpareMetadata(BlockType.FILLER, NO_LPN, stale_seq)
                device.inject_page(addr, fill, meta.pack())
                pages += 1
            device.set_erase_count(bank, block, max(0, int(rng.normal(spec.erase_count_mean,
                                                                      spec.erase_count_spread))))
    state.raise_sequence(fresh_seq)
    state.reset_call_counters()
    problems = state.audit(device)
    if problems:
        raise AgingError(f"aged state fails its audit: {problems[:3]}")
    LOGGER.info("aged card: %d pages synthesized, %d valid, free blocks per bank %s",
                pages, total_valid, free.tolist())
    return AgingResult(free.copy(), total_valid, pages, np.sort(lpns))
