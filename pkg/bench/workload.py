"""Client workloads driven through an engine handle."""

from __future__ import annotations

import enum
import logging
import random
import struct
from dataclasses import dataclass

from ftl.errors import ConfigurationError, FtlError
from ftl.io_engine import IoKind

from bench.report import LatencySample, RunReport

LOGGER = logging.getLogger(__name__)

SAMPLE_UNIT = 32 * 1024
_STAMP = struct.Struct("<QQ")


class AccessPattern(enum.Enum):
    SEQUENTIAL = "sequential"
    RANDOM = "random"
    OVERWRITE = "overwrite"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigurationError(f"unknown access pattern {value!r}") from None


@dataclass(frozen=True)
class WorkloadSpec:
    num_client_threads: int = 1
    bytes_per_thread: int = 1024 * 1024
    io_size: int = 32 * 1024
    pattern: AccessPattern = AccessPattern.SEQUENTIAL
    passes: int = 1
    # flush the written lpns after this many bytes; None never syncs
    sync_every: int | None = None
    small_write_sleep_us: float = 0.0
    large_write_every: int | None = None
    large_write_sleep_us: float = 0.0
    read_back: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "pattern", AccessPattern.parse(self.pattern))
        if self.io_size <= 0 or self.io_size % 4096:
            raise ConfigurationError(f"io_size {self.io_size} must be a positive multiple of 4KB")
        if self.num_client_threads < 0 or self.bytes_per_thread < 0 or self.passes < 1:
            raise ConfigurationError("workload thread count, size and passes must be non-negative")
        if self.bytes_per_thread % self.io_size:
            raise ConfigurationError("bytes_per_thread must be a multiple of io_size")
        if self.sync_every is not None and self.sync_every <= 0:
            raise ConfigurationError("sync_every must be positive")

    @property
    def total_bytes(self):
        return self.num_client_threads * self.bytes_per_thread * self.passes


def sector_payload(lsn, version, sector_size):
    """Deterministic sector content stamped with its address and write version."""
    return _STAMP.pack(lsn, version) * (sector_size // _STAMP.size)


class _Client:
    def __init__(self, handle, spec, thread, report):
        self.handle = handle
        self.spec = spec
        self.thread = thread
        self.report = report
        self.sector_size = handle.io.sector_size
        self.spp = handle.config.sectors_per_page
        self.first_lsn = thread * spec.bytes_per_thread // self.sector_size
        self.rng = random.Random(f"{spec.seed}:{thread}")
        self.since_sync = 0
        self.since_large = 0
        self.pending_lpns = set()

    def offsets(self):
        units = list(range(self.spec.bytes_per_thread // self.spec.io_size))
        if self.spec.pattern is AccessPattern.RANDOM:
            self.rng.shuffle(units)
        return units

    def run(self):
        rt = self.handle.runtime
        for version in range(1, self.spec.passes + 1):
            for unit in self.offsets():
                self.write_unit(unit, version)
                if self.spec.small_write_sleep_us:
                    rt.sleep(self.spec.small_write_sleep_us)
                self.since_large += self.spec.io_size
                if self.spec.large_write_every and self.since_large >= self.spec.large_write_every:
                    self.since_large = 0
                    rt.sleep(self.spec.large_write_sleep_us)
        if self.spec.read_back:
            for unit in range(self.spec.bytes_per_thread // self.spec.io_size):
                self.read_unit(unit)

    def write_unit(self, unit, version):
        rt = self.handle.runtime
        ss = self.sector_size
        base = self.first_lsn + unit * self.spec.io_size // ss
        for chunk in range(0, self.spec.io_size, SAMPLE_UNIT):
            size = min(SAMPLE_UNIT, self.spec.io_size - chunk)
            lsn = base + chunk // ss
            started = rt.now()
            pending = [self.handle.submit(IoKind.WRITE, lsn + i, sector_payload(lsn + i, version, ss))
                       for i in range(size // ss)]
            self.pending_lpns.update((lsn + i) // self.spp for i in range(size // ss))
            ok = self.wait_all(pending)
            self.since_sync += size
            if ok and self.spec.sync_every and self.since_sync >= self.spec.sync_every:
                ok = self.sync()
            self.record(IoKind.WRITE, size, started, ok)

    def read_unit(self, unit):
        rt = self.handle.runtime
        ss = self.sector_size
        base = self.first_lsn + unit * self.spec.io_size // ss
        for chunk in range(0, self.spec.io_size, SAMPLE_UNIT):
            size = min(SAMPLE_UNIT, self.spec.io_size - chunk)
            lsn = base + chunk // ss
            started = rt.now()
            pending = [self.handle.submit(IoKind.READ, lsn + i) for i in range(size // ss)]
            self.record(IoKind.READ, size, started, self.wait_all(pending))

    def sync(self):
        self.since_sync = 0
        pending = [self.handle.submit(IoKind.FLUSH, lpn=lpn) for lpn in sorted(self.pending_lpns)]
        self.pending_lpns.clear()
        return self.wait_all(pending)

    def wait_all(self, pending):
        ok = True
        for completion in pending:
            try:
                completion.wait()
            except FtlError as error:
                ok = False
                self.report.errors.append(f"thread {self.thread}: {error}")
        return ok

    def record(self, kind, size, started, ok):
        if not ok:
            return
        now = self.handle.runtime.now()
        self.report.samples.append(LatencySample(
            len(self.report.samples), self.thread, kind.value, size, now - started, started))
        if kind is IoKind.WRITE:
            self.report.bytes_written += size
        else:
            self.report.bytes_read += size


def run(handle, spec, label="run"):
    """
    Drive ``spec`` through a live engine and collect one latency sample per 32KB unit.

    param handle: EngineHandle returned by ftl.start
    param spec: WorkloadSpec; client thread t owns the byte range starting at t * bytes_per_thread
    """
    needed = spec.num_client_threads * spec.bytes_per_thread
    capacity = handle.config.logical_sectors * handle.io.sector_size
    if needed > capacity:
        raise ConfigurationError(f"workload needs {needed} bytes, the engine exports {capacity}")
    rt = handle.runtime
    report = RunReport(label=label, threshold_us=2000.0)
    gc_before = handle.gc.stats.blocks_collected
    started = rt.now()
    actors = [rt.spawn(_Client(handle, spec, t, report).run, name=f"client-{t}")
              for t in range(spec.num_client_threads)]
    for actor in actors:
        rt.join(actor)
    report.elapsed_us = rt.now() - started
    stats = handle.stats()
    report.gc_blocks = stats.gc_blocks_collected - gc_before
    report.write_amplification = stats.write_amplification
    report.stats = stats.as_dict()
    LOGGER.info("%s: %d samples in %.3f s, %d blocks collected",
                label, len(report.samples), report.elapsed_us / 1e6, report.gc_blocks)
    return report
