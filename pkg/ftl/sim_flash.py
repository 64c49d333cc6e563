"""
Simulated multi-bank NAND flash card.

Geometry is interfaces x banks x blocks x pages with a spare area per page.
NAND rules are enforced: pages of a block are programmed strictly in order,
a written page cannot be rewritten before its block is erased, erased pages
read as all-ones and bad blocks refuse every operation.

Timing is a set of FIFO servers with virtual clocks. Every interface owns one
write queue and one erase queue; read queues each cover two consecutive banks
of an interface. Writes pay the queue overhead plus the page transfer on the
write queue and then the program time on the bank; erases pay the overhead on
the erase queue and the erase time on the bank; a read queue serves one
request at a time for its whole sense and transfer time. Every bank has a
busy-until clock.
"""

from __future__ import annotations

import csv
import enum
import heapq
import io
import itertools
import logging
import threading
from dataclasses import dataclass, field

import numpy as np
import yaml

from ftl.config import DeviceProfile, LatencyModel, profile_from_mapping, profile_to_mapping
from ftl.errors import (
    AddressError,
    BackpressureError,
    BadBlockError,
    CorruptImageError,
    DeviceHaltedError,
    OverwriteError,
    ParityError,
    SequencingError,
)
from ftl.runtime import Runtime

LOGGER = logging.getLogger(__name__)

QUEUE_DEPTH = 256
COMPLETION_QUEUE_DEPTH = 1024
IMAGE_VERSION = 1
REQUEST_LOG_HEADER = ("request_id", "kind", "bank", "block", "page", "submit_ts_us", "complete_ts_us")


class RequestKind(enum.Enum):
    READ = "read"
    WRITE = "write"
    ERASE = "erase"


@dataclass(frozen=True, order=True)
class PageAddress:
    bank: int
    block: int
    page: int = 0


@dataclass(frozen=True)
class PageState:
    written: bool
    data: bytes
    spare: bytes


@dataclass(frozen=True)
class BlockSimState:
    erase_count: int
    next_writable_page: int
    is_bad: bool


@dataclass
class DmaRequest:
    kind: RequestKind
    address: PageAddress
    payload: bytes | None = None
    spare: bytes | None = None
    offset: int = 0
    length: int | None = None
    want_spare: bool = False
    request_id: int | None = None


@dataclass
class CompletionDescriptor:
    request_id: int
    kind: RequestKind
    address: PageAddress
    status: str
    submit_ts: float
    complete_ts: float
    queue: tuple = ()
    data: bytes | None = None
    spare: bytes | None = None

    @property
    def service_latency(self):
        return self.complete_ts - self.submit_ts


@dataclass(frozen=True)
class RequestRecord:
    request_id: int
    kind: str
    bank: int
    block: int
    page: int
    submit_ts_us: float
    complete_ts_us: float


@dataclass
class DeviceStats:
    erase_counts: np.ndarray
    pages_written: int = 0
    pages_read: int = 0
    units_read: int = 0
    spare_reads: int = 0
    erases: int = 0
    pages_injected: int = 0
    requests_accepted: int = 0
    completions_delivered: int = 0
    worn_blocks: list = field(default_factory=list)

    @property
    def wear_out(self):
        return bool(self.worn_blocks)

    @property
    def max_erase_count(self):
        return int(self.erase_counts.max()) if self.erase_counts.size else 0

    @property
    def min_erase_count(self):
        return int(self.erase_counts.min()) if self.erase_counts.size else 0


def parity_word(data):
    """XOR of the page as 64-bit words, standing in for the card's parity chip."""
    return int(np.bitwise_xor.reduce(np.frombuffer(data, dtype="<u8")))


class _QueueClock:
    __slots__ = ("name", "clock", "pending")

    def __init__(self, name):
        self.name = name
        self.clock = 0.0
        self.pending = 0


class SimFlashDevice:
    def __init__(self, profile: DeviceProfile, runtime: Runtime | None = None, record_requests=True):
        self.profile = profile
        self.geometry = profile.geometry
        self.latency: LatencyModel = profile.latency
        self.runtime = runtime or Runtime()
        self.record_requests = record_requests
        g = self.geometry
        shape = (g.num_banks, g.blocks_per_bank)
        self._data = {}
        self._spare = {}
        self._parity = {}
        self._next_page = np.zeros(shape, dtype=np.int32)
        self._erase_count = np.zeros(shape, dtype=np.int64)
        self._bad = np.zeros(shape, dtype=bool)
        for bank, block in profile.bad_blocks:
            self._bad[bank, block] = True
        self._worn = set()
        self._bank_locks = [threading.Lock() for _ in range(g.num_banks)]
        self._bank_busy = [0.0] * g.num_banks
        self._queue_lock = threading.Lock()
        self._write_queues = [_QueueClock(("write", i)) for i in range(g.num_interfaces)]
        self._erase_queues = [_QueueClock(("erase", i)) for i in range(g.num_interfaces)]
        self._read_per_iface = (g.banks_per_interface + 1) // 2
        self._read_queues = [
            _QueueClock(("read", i)) for i in range(g.num_interfaces * self._read_per_iface)]
        self._completions = []
        self._request_ids = itertools.count(1)
        self._log = []
        self._halted = False
        self._erased_page = b"\xff" * g.page_size
        self._erased_spare = b"\xff" * g.spare_per_page
        self.pages_written = 0
        self.pages_read = 0
        self.units_read = 0
        self.spare_reads = 0
        self.erases = 0
        self.pages_injected = 0
        self.requests_accepted = 0
        self.completions_delivered = 0

    # addressing

    @property
    def queue_counts(self):
        return {
            "write": len(self._write_queues),
            "erase": len(self._erase_queues),
            "read": len(self._read_queues),
        }

    def ppn(self, addr):
        g = self.geometry
        return (addr.bank * g.blocks_per_bank + addr.block) * g.pages_per_block + addr.page

    def address_of(self, ppn):
        g = self.geometry
        block_index, page = divmod(int(ppn), g.pages_per_block)
        bank, block = divmod(block_index, g.blocks_per_bank)
        return PageAddress(bank, block, page)

    def read_queue_of(self, bank):
        per_iface = self.geometry.banks_per_interface
        iface, local = divmod(bank, per_iface)
        return iface * self._read_per_iface + local // 2

    def _check_block(self, bank, block):
        g = self.geometry
        if not (0 <= bank < g.num_banks and 0 <= block < g.blocks_per_bank):
            raise AddressError(f"block ({bank}, {block}) outside geometry", (bank, block))
        if self._halted:
            raise DeviceHaltedError("device lost power", (bank, block))
        if self._bad[bank, block]:
            raise BadBlockError(f"block ({bank}, {block}) is bad", (bank, block))

    def _check_page(self, addr):
        self._check_block(addr.bank, addr.block)
        if not 0 <= addr.page < self.geometry.pages_per_block:
            raise AddressError(f"page {addr} outside geometry", addr)

    def _queue_for(self, kind, bank):
        iface = self.geometry.interface_of(bank)
        if kind is RequestKind.WRITE:
            return self._write_queues[iface]
        if kind is RequestKind.ERASE:
            return self._erase_queues[iface]
        return self._read_queues[self.read_queue_of(bank)]

    def _admit(self, queue):
        if queue.pending >= QUEUE_DEPTH:
            raise BackpressureError(f"queue {queue.name} holds {queue.pending} requests")
        if len(self._completions) >= COMPLETION_QUEUE_DEPTH:
            raise BackpressureError("completion queue full")

    # timing, called with the bank lock held

    def _schedule(self, kind, bank, now, units=1):
        lat = self.latency
        with self._queue_lock:
            queue = self._queue_for(kind, bank)
            self._admit(queue)
            if kind is RequestKind.WRITE:
                queue.clock = max(now, queue.clock) + lat.queue_overhead_us + lat.write_xfer_us
                done = max(queue.clock, self._bank_busy[bank]) + lat.write_page_us
            elif kind is RequestKind.ERASE:
                queue.clock = max(now, queue.clock) + lat.queue_overhead_us
                done = max(queue.clock, self._bank_busy[bank]) + lat.erase_block_us
            else:
                start = max(now, queue.clock, self._bank_busy[bank]) + lat.queue_overhead_us
                done = start + units * (lat.read_unit_us + lat.read_xfer_unit_us)
                queue.clock = done
            self._bank_busy[bank] = done
            self.requests_accepted += 1
            return queue, next(self._request_ids), done

    def _record(self, request_id, kind, addr, submit_ts, complete_ts):
        if self.record_requests:
            self._log.append(RequestRecord(
                request_id, kind.value, addr.bank, addr.block, addr.page, submit_ts, complete_ts))

    # state changes

    def _apply_write(self, addr, data, spare):
        g = self.geometry
        if len(data) != g.page_size:
            raise AddressError(f"write of {len(data)} bytes to a {g.page_size}-byte page", addr)
        if spare is not None and len(spare) > g.spare_per_page:
            raise AddressError(f"spare of {len(spare)} bytes exceeds {g.spare_per_page}", addr)
        expected = int(self._next_page[addr.bank, addr.block])
        if addr.page < expected:
            raise OverwriteError(f"page {addr} already written since last erase", addr)
        if addr.page > expected:
            raise SequencingError(f"page {addr} written out of order, next writable is {expected}", addr)

    def _store(self, addr, data, spare):
        ppn = self.ppn(addr)
        data = bytes(data)
        self._data[ppn] = data
        self._parity[ppn] = parity_word(data)
        self._spare[ppn] = bytes(spare) if spare else b""
        self._next_page[addr.bank, addr.block] = addr.page + 1

    def _apply_erase(self, bank, block):
        g = self.geometry
        first = (bank * g.blocks_per_bank + block) * g.pages_per_block
        for ppn in range(first, first + int(self._next_page[bank, block])):
            self._data.pop(ppn, None)
            self._spare.pop(ppn, None)
            self._parity.pop(ppn, None)
        self._next_page[bank, block] = 0
        self._erase_count[bank, block] += 1
        if self._erase_count[bank, block] > g.erase_cycles_limit and (bank, block) not in self._worn:
            self._worn.add((bank, block))
            LOGGER.warning("block (%d, %d) passed %d erase cycles", bank, block, g.erase_cycles_limit)

    def _fetch(self, addr, offset, length, want_spare):
        g = self.geometry
        if length is None:
            length = g.page_size - offset
        if offset < 0 or length < 0 or offset + length > g.page_size:
            raise AddressError(f"read [{offset}, {offset + length}) outside page", addr)
        if offset % g.read_unit or length % g.read_unit:
            raise AddressError(f"read [{offset}, {offset + length}) not aligned to {g.read_unit}", addr)
        ppn = self.ppn(addr)
        stored = self._data.get(ppn)
        if stored is None:
            data = self._erased_page[:length]
            spare = self._erased_spare if want_spare else None
        else:
            if length and parity_word(stored) != self._parity[ppn]:
                raise ParityError(f"parity mismatch reading {addr}", addr)
            data = stored[offset:offset + length]
            spare = None
            if want_spare:
                raw = self._spare[ppn]
                spare = raw + self._erased_spare[len(raw):]
        return data, spare, max(length // g.read_unit, 1)

    # synchronous-issue path

    def issue_write(self, addr, data, spare=None):
        """Program a page now; the returned descriptor says when it completes."""
        self._check_page(addr)
        now = self.runtime.now()
        with self._bank_locks[addr.bank]:
            self._apply_write(addr, data, spare)
            _, request_id, done = self._schedule(RequestKind.WRITE, addr.bank, now)
            self._store(addr, data, spare)
            self.pages_written += 1
        self._record(request_id, RequestKind.WRITE, addr, now, done)
        return CompletionDescriptor(request_id, RequestKind.WRITE, addr, "ok", now, done)

    def issue_read(self, addr, offset=0, length=None, want_spare=False):
        self._check_page(addr)
        now = self.runtime.now()
        with self._bank_locks[addr.bank]:
            data, spare, units = self._fetch(addr, offset, length, want_spare)
            _, request_id, done = self._schedule(RequestKind.READ, addr.bank, now, units)
            self.pages_read += 1
            self.units_read += units
            if want_spare:
                self.spare_reads += 1
        self._record(request_id, RequestKind.READ, addr, now, done)
        return CompletionDescriptor(request_id, RequestKind.READ, addr, "ok", now, done, data=data, spare=spare)

    def issue_erase(self, bank, block):
        self._check_block(bank, block)
        now = self.runtime.now()
        addr = PageAddress(bank, block, 0)
        with self._bank_locks[bank]:
            _, request_id, done = self._schedule(RequestKind.ERASE, bank, now)
            self._apply_erase(bank, block)
            self.erases += 1
        self._record(request_id, RequestKind.ERASE, addr, now, done)
        return CompletionDescriptor(request_id, RequestKind.ERASE, addr, "ok", now, done)

    # synchronous path

    def write_page(self, addr, data, spare=None):
        desc = self.issue_write(addr, data, spare)
        self.runtime.advance_to(desc.complete_ts)
        return desc

    def read_page(self, addr, offset=0, length=None, want_spare=False):
        desc = self.issue_read(addr, offset, length, want_spare)
        self.runtime.advance_to(desc.complete_ts)
        return desc.data, desc.spare, desc

    def erase_block(self, bank, block):
        desc = self.issue_erase(bank, block)
        self.runtime.advance_to(desc.complete_ts)
        return desc

    # asynchronous DMA path

    def submit_dma(self, req: DmaRequest):
        """Queue a request; its completion descriptor is delivered by poll_completions."""
        addr = req.address
        kind = req.kind
        if kind is RequestKind.WRITE:
            desc = self.issue_write(addr, req.payload, req.spare)
        elif kind is RequestKind.READ:
            desc = self.issue_read(addr, req.offset, req.length, req.want_spare)
        else:
            desc = self.issue_erase(addr.bank, addr.block)
        with self._queue_lock:
            queue = self._queue_for(kind, addr.bank)
            queue.pending += 1
            desc.queue = queue.name
            heapq.heappush(self._completions, (desc.complete_ts, desc.request_id, desc))
        req.request_id = desc.request_id
        return desc.request_id

    def poll_completions(self, max_count=None, wait=False):
        """Deliver completed descriptors in completion order; ``wait`` sleeps until one is due."""
        rt = self.runtime
        while True:
            now = rt.now()
            delivered = []
            with self._queue_lock:
                while self._completions and (max_count is None or len(delivered) < max_count):
                    complete_ts, _, desc = self._completions[0]
                    if complete_ts > now:
                        break
                    heapq.heappop(self._completions)
                    kind, index = desc.queue
                    queues = {"write": self._write_queues, "erase": self._erase_queues,
                              "read": self._read_queues}[kind]
                    queues[index].pending -= 1
                    delivered.append(desc)
                self.completions_delivered += len(delivered)
                earliest = self._completions[0][0] if self._completions else None
            if delivered or not wait or earliest is None:
                return delivered
            rt.advance_to(earliest)

    def pending_completions(self):
        return len(self._completions)

    # inspection and fault injection

    def page_state(self, addr):
        ppn = self.ppn(addr)
        stored = self._data.get(ppn)
        if stored is None:
            return PageState(False, self._erased_page, self._erased_spare)
        raw = self._spare[ppn]
        return PageState(True, stored, raw + self._erased_spare[len(raw):])

    def block_state(self, bank, block):
        return BlockSimState(
            int(self._erase_count[bank, block]), int(self._next_page[bank, block]), bool(self._bad[bank, block]))

    def written_pages(self, bank, block):
        return int(self._next_page[bank, block])

    def written_page_counts(self):
        """Programmed-page count of every block, shaped (banks, blocks)."""
        return self._next_page.copy()

    def bad_block_mask(self):
        return self._bad.copy()

    def inject_page(self, addr, data, spare=None):
        """Program a page without timing or logging (state synthesis for aging)."""
        self._check_page(addr)
        with self._bank_locks[addr.bank]:
            self._apply_write(addr, data, spare)
            self._store(addr, data, spare)
            self.pages_injected += 1

    def set_erase_count(self, bank, block, count):
        self._erase_count[bank, block] = count

    def corrupt_page(self, addr, data=True, spare=False):
        """Flip bytes of a written page the way a torn program would."""
        ppn = self.ppn(addr)
        if ppn not in self._data:
            raise AddressError(f"page {addr} is not written", addr)
        if data:
            torn = bytearray(self._data[ppn])
            torn[len(torn) // 2:] = b"\xff" * (len(torn) - len(torn) // 2)
            torn[0] ^= 0x5A
            self._data[ppn] = bytes(torn)
        if spare and self._spare[ppn]:
            raw = bytearray(self._spare[ppn])
            raw[-1] ^= 0xFF
            self._spare[ppn] = bytes(raw)

    def power_cut(self):
        self._halted = True
        LOGGER.info("device power cut")

    def restore_power(self):
        self._halted = False

    @property
    def halted(self):
        return self._halted

    def device_stats(self):
        with self._queue_lock:
            return DeviceStats(
                erase_counts=self._erase_count.sum(axis=1),
                pages_written=self.pages_written,
                pages_read=self.pages_read,
                units_read=self.units_read,
                spare_reads=self.spare_reads,
                erases=self.erases,
                pages_injected=self.pages_injected,
                requests_accepted=self.requests_accepted,
                completions_delivered=self.completions_delivered,
                worn_blocks=sorted(self._worn),
            )

    def erase_counts(self):
        return self._erase_count.copy()

    # request log

    @property
    def request_log(self):
        return list(self._log)

    def export_request_log(self, path_or_handle):
        rows = [(r.request_id, r.kind, r.bank, r.block, r.page, r.submit_ts_us, r.complete_ts_us)
                for r in self._log]
        if isinstance(path_or_handle, io.TextIOBase):
            _write_log(path_or_handle, rows)
            return
        with open(path_or_handle, "w", newline="", encoding="utf-8") as handle:
            _write_log(handle, rows)

    # image persistence

    def save_image(self, path):
        g = self.geometry
        ppns = np.array(sorted(self._data), dtype=np.int64)
        data = np.frombuffer(b"".join(self._data[p] for p in ppns), dtype=np.uint8)
        spares = np.full((len(ppns), g.spare_per_page), 0xFF, dtype=np.uint8)
        for row, ppn in enumerate(ppns):
            raw = self._spare[int(ppn)]
            spares[row, :len(raw)] = np.frombuffer(raw, dtype=np.uint8)
        header = yaml.safe_dump({
            "version": IMAGE_VERSION,
            "profile": profile_to_mapping(self.profile),
            "counters": {
                "pages_written": self.pages_written,
                "pages_read": self.pages_read,
                "erases": self.erases,
            },
        })
        np.savez_compressed(
            path,
            header=np.frombuffer(header.encode("utf-8"), dtype=np.uint8),
            ppns=ppns,
            data=data,
            spares=spares,
            erase_count=self._erase_count,
            bad=self._bad,
        )
        LOGGER.info("saved flash image with %d written pages to %s", len(ppns), path)

    @classmethod
    def load_image(cls, path, runtime=None):
        try:
            archive = np.load(path)
            header = yaml.safe_load(archive["header"].tobytes().decode("utf-8"))
        except (OSError, ValueError, KeyError, yaml.YAMLError) as error:
            raise CorruptImageError(f"cannot read flash image {path}: {error}") from None
        if not isinstance(header, dict) or header.get("version") != IMAGE_VERSION:
            raise CorruptImageError(f"flash image {path} has unsupported version")
        device = cls(profile_from_mapping(header["profile"]), runtime=runtime)
        g = device.geometry
        device._bad = archive["bad"].astype(bool)
        device._erase_count = archive["erase_count"].astype(np.int64)
        device._worn = {(int(bank), int(block))
                        for bank, block in np.argwhere(device._erase_count > g.erase_cycles_limit)}
        data = archive["data"].tobytes()
        spares = archive["spares"]
        ppns = archive["ppns"]
        for row, ppn in enumerate(ppns):
            addr = device.address_of(ppn)
            page = data[row * g.page_size:(row + 1) * g.page_size]
            spare = spares[row].tobytes()
            device._store(addr, page, spare)
        counters = header.get("counters", {})
        device.pages_written = counters.get("pages_written", 0)
        device.pages_read = counters.get("pages_read", 0)
        device.erases = counters.get("erases", 0)
        LOGGER.info("loaded flash image with %d written pages from %s", len(ppns), path)
        return device


def _write_log(handle, rows):
    writer = csv.writer(handle)
    writer.writerow(REQUEST_LOG_HEADER)
    writer.writerows(rows)


def create_device(geometry, model=None, bad_blocks=(), runtime=None, name="custom"):
    """
    Build a fresh device: every page erased, erase counts zero, bad blocks flagged.

    param geometry: FlashGeometry of the card.
    param model: LatencyModel, defaults to the stock timings.
    param bad_blocks: iterable of (bank, block) pairs.
    """
    profile = DeviceProfile(name, geometry, model or LatencyModel(), tuple(bad_blocks))
    return SimFlashDevice(profile, runtime=runtime)


def replay_stats(records, geometry):
    """Recompute erase counts per bank and page counters from a request log."""
    erase_counts = np.zeros(geometry.num_banks, dtype=np.int64)
    written = read = 0
    for record in records:
        if record.kind == RequestKind.ERASE.value:
            erase_counts[record.bank] += 1
        elif record.kind == RequestKind.WRITE.value:
            written += 1
        else:
            read += 1
    return {"erase_counts": erase_counts, "pages_written": written, "pages_read": read}


def read_request_log(path):
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        return [
            RequestRecord(int(row["request_id"]), row["kind"], int(row["bank"]), int(row["block"]),
                          int(row["page"]), float(row["submit_ts_us"]), float(row["complete_ts_us"]))
            for row in reader
        ]
