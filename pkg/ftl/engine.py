"""Engine lifecycle: open the card, load or recover the tables, serve requests, shut down."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

from ftl.checkpoint import Checkpointer
from ftl.errors import CheckpointError, ConfigurationError, FlushError, FtlError, LifecycleError
from ftl.ftl_state import FtlState
from ftl.gc_engine import GcEngine
from ftl.io_engine import IoEngine, IoKind, IoRequest
from ftl.runtime import Runtime
from ftl.sim_flash import SimFlashDevice

LOGGER = logging.getLogger(__name__)


@dataclass
class EngineStats:
    load_path: str = ""
    elapsed_us: float = 0.0
    user_sectors_written: int = 0
    user_sectors_flushed: int = 0
    user_pages_flushed: int = 0
    flash_pages_written: int = 0
    write_amplification: float = 0.0
    gc_blocks_collected: int = 0
    gc_pages_copied: int = 0
    gc_aborted: int = 0
    gc_busy_us: float = 0.0
    npgc_invocations: int = 0
    erases: int = 0
    pages_read: int = 0
    merge_reads: int = 0
    cache_hits: int = 0
    cache_misses: int = 0
    reads_served: int = 0
    evictions: int = 0
    idle_flushes: int = 0
    backpressure_retries: int = 0
    flush_failures: int = 0
    requests_completed: int = 0
    active_workers: int = 0
    free_blocks: int = 0
    valid_pages: int = 0

    def as_dict(self):
        return asdict(self)


@dataclass
class ShutdownReport:
    clean: bool
    checkpoint_head: object = None
    error: FtlError | None = None


class EngineHandle:
    def __init__(self, config, runtime, device, state, io, gc, checkpointer):
        self.config = config
        self.runtime = runtime
        self.device = device
        self.state = state
        self.io = io
        self.gc = gc
        self.checkpointer = checkpointer
        self.load_result = None
        self.recovery_result = None
        self.load_path = ""
        self._live = False
        self._quiesced = False
        self._flush_error = None
        self._baseline = {}

    # lifecycle

    @property
    def live(self):
        return self._live

    def _require_live(self):
        if not self._live:
            raise LifecycleError("engine handle used after shutdown")

    def _open(self):
        self.load_result = self.checkpointer.checkpoint_load()
        if self.load_result.found:
            self.load_path = "checkpoint"
        else:
            self.recovery_result = self.checkpointer.recovery_scan()
            self.load_path = "recovery"
        self._baseline = {"pages_written": self.device.pages_written, "erases": self.device.erases,
                          "pages_read": self.device.pages_read}
        self.io.start()
        self.gc.start()
        self._live = True
        LOGGER.info("engine serving %d logical pages after %s", self.state.logical_pages, self.load_path)

    def quiesce(self):
        """
        Drain the queues, flush every buffer and stop GC.

        The handle stays usable for stats and audit but rejects new requests.
        """
        self._require_live()
        if self._quiesced:
            return
        self._quiesced = True
        self.io.stop()
        try:
            self.io.flush_all()
        except FlushError as error:
            self._flush_error = error
            LOGGER.error("quiesce left %d lpns unflushed", len(error.unflushed_lpns))
        self.gc.stop()

    def shutdown(self, clean=True):
        """Clean: quiesce and write a checkpoint. Dirty: drop buffers like a power loss."""
        self._require_live()
        report = ShutdownReport(clean=clean)
        if not clean:
            self._live = False
            self.io.stop(drop_buffers=True)
            self.gc.stop()
            LOGGER.info("engine crashed on request, buffers dropped")
            return report
        self.quiesce()
        self._live = False
        report.error = self._flush_error
        try:
            report.checkpoint_head = self.checkpointer.checkpoint_save()
        except FtlError as error:
            LOGGER.warning("checkpoint failed, the next start will scan pages: %s", error)
            raise CheckpointError(f"checkpoint failed at shutdown: {error}") from error
        if report.error is not None:
            raise report.error
        LOGGER.info("engine shut down cleanly, checkpoint head at %s", report.checkpoint_head)
        return report

    # requests

    def submit(self, kind, lsn=None, payload=None, lpn=None):
        """Queue one request; returns its completion handle."""
        self._require_live()
        return self.io.submit(IoRequest(IoKind(kind) if not isinstance(kind, IoKind) else kind,
                                        lsn=lsn, payload=payload, lpn=lpn))

    def write(self, lsn, data):
        """Write whole sectors starting at ``lsn`` and wait for every one of them."""
        size = self.io.sector_size
        if len(data) % size:
            raise ConfigurationError(f"write of {len(data)} bytes is not a multiple of {size}")
        pending = [self.submit(IoKind.WRITE, lsn + i, bytes(data[i * size:(i + 1) * size]))
                   for i in range(len(data) // size)]
        for completion in pending:
            completion.wait()

    def read(self, lsn, count=1):
        pending = [self.submit(IoKind.READ, lsn + i) for i in range(count)]
        return b"".join(completion.wait() for completion in pending)

    def flush(self, lpn=None):
        """Barrier: returns once the buffered data (of one lpn, or all) is on flash."""
        return self.submit(IoKind.FLUSH, lpn=lpn).wait()

    # inspection

    def stats(self):
        self._require_live()
        io = self.io.counters
        gc = self.gc.stats
        state = self.state
        flash_written = self.device.pages_written - self._baseline["pages_written"]
        user_pages = io.user_sectors_flushed / self.config.sectors_per_page
        return EngineStats(
            load_path=self.load_path,
            elapsed_us=self.runtime.horizon,
            user_sectors_written=io.user_sectors_written,
            user_sectors_flushed=io.user_sectors_flushed,
            user_pages_flushed=io.user_pages_flushed,
            flash_pages_written=flash_written,
            write_amplification=flash_written / user_pages if user_pages else 0.0,
            gc_blocks_collected=gc.blocks_collected,
            gc_pages_copied=gc.valid_pages_copied,
            gc_aborted=gc.aborted,
            gc_busy_us=gc.busy_us,
            npgc_invocations=self.gc.npgc_invocations,
            erases=self.device.erases - self._baseline["erases"],
            pages_read=self.device.pages_read - self._baseline["pages_read"],
            merge_reads=io.merge_reads,
            cache_hits=io.cache_hits,
            cache_misses=io.cache_misses,
            reads_served=io.reads_served,
            evictions=io.evictions,
            idle_flushes=io.idle_flushes,
            backpressure_retries=io.backpressure_retries,
            flush_failures=io.flush_failures,
            requests_completed=io.requests_completed,
            active_workers=self.io.active_workers,
            free_blocks=int(state.bank_free.sum()),
            valid_pages=int(state.bank_valid.sum()),
        )

    def audit(self):
        """Cross-check every table against the flash; meaningful only while no request is in flight."""
        return self.state.audit(self.device) + self.io.audit_buffers()


def start(config, device=None, image=None, runtime=None):
    """
    Open a card and start serving.

    param config: EngineConfig
    param device: an existing SimFlashDevice, modelling a restart on the same card
    param image: path of a saved flash image to open instead
    param runtime: Runtime to run in; defaults to the device's or a new one from config.runtime
    """
    if device is not None and image is not None:
        raise ConfigurationError("pass either a device or an image, not both")
    if runtime is None:
        runtime = device.runtime if device is not None else Runtime(
            deterministic=config.runtime.deterministic, seed=config.runtime.seed)
    if image is not None:
        device = SimFlashDevice.load_image(image, runtime=runtime)
    elif device is None:
        device = SimFlashDevice(config.profile, runtime=runtime, record_requests=config.record_requests)
    if device.geometry != config.geometry:
        raise ConfigurationError(f"device geometry {device.geometry} does not match the configuration")
    state = FtlState(
        config.geometry, config.logical_pages, config.io.num_buffers, runtime,
        bad_mask=device.bad_block_mask(), scan_window=config.checkpoint.scan_window,
        reserve_blocks=config.gc.reserve_blocks, debug=config.debug_checks)
    io = IoEngine(config, device, state, runtime)
    gc = GcEngine(config, device, state, runtime, io)
    io.gc = gc
    handle = EngineHandle(config, runtime, device, state, io, gc, Checkpointer(config, device, state, runtime, gc))
    handle._open()
    return handle
