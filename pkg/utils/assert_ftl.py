import numpy as np
from assertpy import assert_that

from ftl.ftl_state import UNMAPPED
from ftl.sim_flash import PageAddress
from ftl.spare import SpareMetadata
from utils.fetch import fetch_read


def assert_audit_clean(problems, when=""):
    """
    Asserts that an audit found nothing.

    param problems: list returned by FtlState.audit or EngineHandle.audit.
    param when: label of the checkpoint in the test, printed with the result.
    """
    print(f"audit {when}: {len(problems)} problems")
    for problem in problems[:10]:
        print(f"  {problem}")
    assert_that(problems).described_as(f"audit {when} should be clean").is_empty()


def assert_sector(actual, expected, lsn):
    """Asserts that a sector read back holds the expected bytes."""
    assert_that(actual).described_as(f"sector {lsn} content").is_not_none()
    assert_that(actual == expected).described_as(
        f"sector {lsn}: got {actual[:16].hex()}..., expected {expected[:16].hex()}...").is_true()


def assert_matches_shadow(handle, shadow, lsns=None):
    """
    Read sectors through the engine and compare every one with the shadow device.

    param handle: live EngineHandle.
    param shadow: ShadowDevice fed with the same writes and flushes.
    param lsns: sectors to check, defaults to every sector the shadow has seen.
    """
    lsns = shadow.touched() if lsns is None else list(lsns)
    mismatches = []
    for lsn in lsns:
        _, body = fetch_read(handle, lsn)
        if body[0] is None or not shadow.reconcile(lsn, body[0]):
            mismatches.append(lsn)
    print(f"checked {len(lsns)} sectors against the shadow, {len(mismatches)} mismatches")
    assert_that(mismatches).described_as("sectors that differ from the shadow device").is_empty()


def assert_write_amplification(stats):
    """
    Validate that flash writes never fall below the user pages they persisted.

    param stats: EngineStats from EngineHandle.stats().
    """
    print(f"write amplification: {stats.write_amplification:.4f} "
          f"({stats.flash_pages_written} flash pages for {stats.user_sectors_flushed} sectors)")
    if stats.user_sectors_flushed:
        assert_that(stats.write_amplification).is_greater_than_or_equal_to(1.0)


def assert_sequential_prefix(device):
    """
    Validate that every block holds a written prefix followed only by erased pages.

    param device: SimFlashDevice to inspect.
    """
    g = device.geometry
    counts = device.written_page_counts()
    for bank in range(g.num_banks):
        for block in range(g.blocks_per_bank):
            written = int(counts[bank, block])
            for page in range(g.pages_per_block):
                state = device.page_state(PageAddress(bank, block, page))
                assert_that(state.written).described_as(
                    f"page ({bank}, {block}, {page}) with prefix {written}").is_equal_to(page < written)


def assert_tables_equal(actual, expected, label=""):
    """
    Validate that two FtlState.tables() dictionaries hold the same arrays.

    param actual: tables of the state under test.
    param expected: reference tables.
    """
    for name, reference in expected.items():
        same = np.array_equal(actual[name], reference)
        if not same:
            diff = np.argwhere(actual[name] != reference)[:5].tolist()
            print(f"{label} {name} differs at {diff}")
        assert_that(same).described_as(f"{label} table {name}").is_true()


def assert_mapping_consistent(state, device):
    """Every mapped lpn points at a valid page whose spare names it."""
    mapped = 0
    for lpn in range(state.logical_pages):
        ppn = state.map_lookup(lpn)
        if ppn == UNMAPPED:
            continue
        mapped += 1
        meta = SpareMetadata.unpack(device.page_state(device.address_of(ppn)).spare)
        assert_that(state.is_valid(ppn)).described_as(f"lpn {lpn} maps to invalid ppn {ppn}").is_true()
        assert_that(meta.lpn).described_as(f"spare of ppn {ppn}").is_equal_to(lpn)
    print(f"{mapped} mapped lpns consistent with flash")
    assert_that(int(state.bank_valid.sum())).is_equal_to(mapped)
