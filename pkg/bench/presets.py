"""
Desk-scale versions of the experiments.

Sizes from the original GB-scale setups are divided by ``size_scale`` and
think times by ``think_scale``; bank, buffer and queue counts keep their
proportions.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

from ftl import engine
from ftl.checkpoint import Checkpointer
from ftl.config import CheckpointConfig, EngineConfig, GcConfig, GcPolicy, IoConfig, RuntimeConfig
from ftl.errors import UnknownPresetError
from ftl.ftl_state import FtlState
from ftl.runtime import Runtime
from ftl.sim_flash import PageAddress, SimFlashDevice
from profiles.device_profiles import DESK_64BANK, DESK_ADAPTIVE, DESK_NPGC

from bench.aging import AgingSpec, inject_aging
from bench.workload import AccessPattern, WorkloadSpec, run

LOGGER = logging.getLogger(__name__)

MB = 1024 * 1024
QUEUE_SWEEP = (1, 2, 4, 8, 16, 32, 64)


@dataclass(frozen=True)
class Preset:
    name: str
    description: str
    workload: WorkloadSpec
    config: EngineConfig
    aging: AgingSpec | None
    policy: GcPolicy
    compare: tuple = ()
    sweep: tuple = ()
    extra: dict = field(default_factory=dict)


def _npgc_vs_pllgc(seed, think_scale, size_scale):
    # one writer overwriting 1GB sixteen times, fsync per 32KB, one GC thread
    workload = WorkloadSpec(
        num_client_threads=1, bytes_per_thread=1024 * MB // size_scale, io_size=32 * 1024,
        pattern=AccessPattern.OVERWRITE, passes=16, sync_every=32 * 1024, seed=seed)
    config = EngineConfig(
        profile=DESK_NPGC,
        io=IoConfig(num_queues=8, num_buffers=32),
        gc=GcConfig(policy=GcPolicy.PLLGC, max_gc_threads=1),
        runtime=RuntimeConfig(deterministic=True, seed=seed),
        record_requests=False)
    return Preset("npgc-vs-pllgc", "aged 8-bank card, single writer overwriting its region 16 times",
                  workload, config, AgingSpec(seed=seed), GcPolicy.PLLGC, compare=(GcPolicy.NPGC, GcPolicy.PLLGC))


def _adaptive_vs_pllgc(seed, think_scale, size_scale):
    # 128 writers of 4MB x16, 20ms after each 32KB and 10s after each 2MB
    scale = max(size_scale // 4, 1)
    workload = WorkloadSpec(
        num_client_threads=128, bytes_per_thread=4 * MB // scale, io_size=32 * 1024,
        pattern=AccessPattern.OVERWRITE, passes=16,
        small_write_sleep_us=20_000 / think_scale,
        large_write_every=2 * MB // scale, large_write_sleep_us=10_000_000 / think_scale, seed=seed)
    config = EngineConfig(
        profile=DESK_ADAPTIVE,
        io=IoConfig(num_queues=64, num_buffers=256 // scale),
        gc=GcConfig(policy=GcPolicy.PLLGC_ADAPTIVE, max_gc_threads=8),
        runtime=RuntimeConfig(deterministic=True, seed=seed),
        record_requests=False)
    return Preset("adaptive-vs-pllgc", "aged 8-bank card, 128 think-time writers, up to 8 GC threads",
                  workload, config, AgingSpec(seed=seed), GcPolicy.PLLGC_ADAPTIVE,
                  compare=(GcPolicy.PLLGC, GcPolicy.PLLGC_ADAPTIVE))


def _queue_scaling(seed, think_scale, size_scale):
    workload = WorkloadSpec(
        num_client_threads=64, bytes_per_thread=32 * MB // size_scale, io_size=32 * 1024,
        pattern=AccessPattern.SEQUENTIAL, read_back=True, seed=seed)
    config = EngineConfig(
        profile=DESK_64BANK,
        io=IoConfig(num_queues=64, num_buffers=64),
        gc=GcConfig(policy=GcPolicy.PLLGC, max_gc_threads=1),
        runtime=RuntimeConfig(deterministic=True, seed=seed),
        record_requests=False)
    return Preset("queue-scaling", "64-bank card, 64 sequential writers, queue count swept",
                  workload, config, None, GcPolicy.PLLGC, sweep=QUEUE_SWEEP)


def _init_scan(seed, think_scale, size_scale):
    config = EngineConfig(
        profile=DESK_NPGC,
        io=IoConfig(num_queues=8, num_buffers=32),
        gc=GcConfig(policy=GcPolicy.PLLGC, max_gc_threads=1),
        checkpoint=CheckpointConfig(scan_window=4),
        runtime=RuntimeConfig(deterministic=True, seed=seed),
        record_requests=False)
    threads = 8
    half = config.logical_sectors * config.io.sector_size // 2
    per_thread = half // threads // (32 * 1024) * (32 * 1024)
    workload = WorkloadSpec(num_client_threads=threads, bytes_per_thread=per_thread, seed=seed)
    return Preset("init-scan", "half-full 8-bank card: checkpoint load vs full page scan",
                  workload, config, None, GcPolicy.PLLGC)


def _driver_speed(seed, think_scale, size_scale):
    config = EngineConfig(profile=DESK_NPGC, runtime=RuntimeConfig(deterministic=True, seed=seed))
    workload = WorkloadSpec(num_client_threads=2, bytes_per_thread=2 * MB, seed=seed)
    bank_sets = {
        "shared-read-queue": (0, 1),
        "same-interface": (0, 2),
        "across-interfaces": (0, 4),
    }
    return Preset("driver-speed", "raw device bandwidth of bank pairs", workload, config, None,
                  GcPolicy.PLLGC, extra={"bank_sets": bank_sets})


PRESETS = {
    "npgc-vs-pllgc": _npgc_vs_pllgc,
    "adaptive-vs-pllgc": _adaptive_vs_pllgc,
    "queue-scaling": _queue_scaling,
    "init-scan": _init_scan,
    "driver-speed": _driver_speed,
}


def preset(name, seed=0, think_scale=100.0, size_scale=64):
    """
    Build a preset by name.

    param name: one of PRESETS
    param think_scale: divisor applied to think times
    param size_scale: divisor applied to GB-scale byte counts
    """
    try:
        factory = PRESETS[name]
    except KeyError:
        raise UnknownPresetError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None
    return factory(seed, think_scale, size_scale)


# runners


def run_with_policy(chosen, policy=None, queues=None, seed=None, label=None):
    """Start a fresh engine for the preset, age it if asked, run the workload; returns the RunReport."""
    config = chosen.config
    gc = config.gc if policy is None else dataclasses.replace(config.gc, policy=policy)
    io = config.io if queues is None else dataclasses.replace(config.io, num_queues=queues)
    runtime = config.runtime if seed is None else RuntimeConfig(config.runtime.deterministic, seed)
    config = config.replace(gc=gc, io=io, runtime=runtime)
    workload = chosen.workload
    if seed is not None:
        workload = dataclasses.replace(workload, seed=seed)
    handle = engine.start(config)
    try:
        if chosen.aging is not None:
            aging = chosen.aging if seed is None else dataclasses.replace(chosen.aging, seed=seed)
            inject_aging(handle, aging)
        report = run(handle, workload, label=label or f"{chosen.name}-{gc.policy.value}")
        handle.quiesce()
        report.stats["audit_problems"] = handle.audit()
    finally:
        handle.shutdown(clean=False)
    return report


def run_queue_sweep(chosen, seed=None, queues=None):
    """One report per queue count, each with write and read throughput."""
    reports = []
    for count in queues or chosen.sweep:
        reports.append(run_with_policy(chosen, queues=count, seed=seed, label=f"queues-{count}"))
    return reports


def run_init_scan(chosen, seed=None):
    """Fill half the card, shut down cleanly, then count the reads of both loaders."""
    config = chosen.config
    if seed is not None:
        config = config.replace(runtime=RuntimeConfig(config.runtime.deterministic, seed))
    handle = engine.start(config)
    run(handle, chosen.workload, label="init-scan-fill")
    handle.shutdown(clean=True)
    restarted = engine.start(config, device=handle.device)
    load_reads = restarted.load_result.pages_read
    restarted.shutdown(clean=True)
    # the page scan runs over the same card into a blank set of tables
    device = restarted.device
    blank = FtlState(config.geometry, config.logical_pages, config.io.num_buffers, device.runtime,
                     bad_mask=device.bad_block_mask(), scan_window=config.checkpoint.scan_window,
                     reserve_blocks=config.gc.reserve_blocks)
    scan = Checkpointer(config, device, blank, device.runtime).recovery_scan()
    result = {
        "load_path": restarted.load_path,
        "checkpoint_reads": load_reads,
        "window_probe_bound": 2 * config.checkpoint.scan_window * config.geometry.num_banks,
        "chain_blocks": len(restarted.load_result.chain_blocks),
        "scan_reads": scan.pages_read,
        "ratio": scan.pages_read / load_reads if load_reads else float("inf"),
    }
    LOGGER.info("init scan: checkpoint %d reads, page scan %d reads", load_reads, scan.pages_read)
    return result


def _raw_client(device, bank, pages, payload):
    rt = device.runtime
    written = []
    block = 0
    page = 0
    started = rt.now()
    for _ in range(pages):
        addr = PageAddress(bank, block, page)
        device.write_page(addr, payload)
        written.append(addr)
        page += 1
        if page == device.geometry.pages_per_block:
            block, page = block + 1, 0
    write_done = rt.now()
    for addr in written:
        device.read_page(addr)
    return write_done - started, rt.now() - write_done


def run_driver_speed(chosen, seed=None):
    """Aggregate write and read bandwidth of two clients pinned to each bank pair."""
    profile = chosen.config.profile
    g = profile.geometry
    pages = chosen.workload.bytes_per_thread // g.page_size
    payload = b"\x5a" * g.page_size
    rows = []
    for label, banks in chosen.extra["bank_sets"].items():
        runtime = Runtime(deterministic=True, seed=chosen.workload.seed if seed is None else seed)
        device = SimFlashDevice(profile, runtime=runtime, record_requests=False)
        actors = [runtime.spawn(_raw_client, device, bank, pages, payload, name=f"raw-{bank}") for bank in banks]
        timings = [runtime.join(actor) for actor in actors]
        moved = len(banks) * pages * g.page_size
        write_us = max(t[0] for t in timings)
        read_us = max(t[1] for t in timings)
        rows.append({
            "bank_set": label,
            "banks": list(banks),
            "write_mb_s": moved / write_us / 1.048576,
            "read_mb_s": moved / read_us / 1.048576,
        })
    return rows
