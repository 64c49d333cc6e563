"""Configuration dataclasses and YAML loading for devices and engines."""

from __future__ import annotations

import dataclasses
import enum
import logging
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ftl.errors import ConfigurationError

LOGGER = logging.getLogger(__name__)

# [type:1][lpn:4][seq:8][crc:4]
SPARE_METADATA_SIZE = 17
MAX_PHYSICAL_PAGES = 2 ** 31 - 1


class GcPolicy(enum.Enum):
    NPGC = "npgc"
    PLLGC = "pllgc"
    PLLGC_ADAPTIVE = "pllgc-adaptive"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigurationError(f"unknown GC policy {value!r}") from None


class DispatchPolicy(enum.Enum):
    LPN = "lpn"
    ROUND_ROBIN = "round-robin"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigurationError(f"unknown dispatch policy {value!r}") from None


def _require_positive(owner, **values):
    for name, value in values.items():
        if value is None or value <= 0:
            raise ConfigurationError(f"{owner}.{name} must be positive, got {value!r}")


@dataclass(frozen=True)
class FlashGeometry:
    num_interfaces: int
    banks_per_interface: int
    blocks_per_bank: int
    pages_per_block: int
    page_size: int = 32 * 1024
    spare_per_page: int = 512
    read_unit: int = 4 * 1024
    erase_cycles_limit: int = 100_000

    def __post_init__(self):
        _require_positive(
            "geometry",
            num_interfaces=self.num_interfaces,
            banks_per_interface=self.banks_per_interface,
            blocks_per_bank=self.blocks_per_bank,
            pages_per_block=self.pages_per_block,
            page_size=self.page_size,
            read_unit=self.read_unit,
            erase_cycles_limit=self.erase_cycles_limit,
        )
        if self.page_size % self.read_unit:
            raise ConfigurationError(
                f"page_size {self.page_size} is not a multiple of read_unit {self.read_unit}")
        if self.spare_per_page < SPARE_METADATA_SIZE:
            raise ConfigurationError(
                f"spare_per_page {self.spare_per_page} cannot hold {SPARE_METADATA_SIZE} metadata bytes")
        if self.total_pages > MAX_PHYSICAL_PAGES:
            raise ConfigurationError(f"{self.total_pages} physical pages exceed the 31-bit map entry")

    @property
    def num_banks(self):
        return self.num_interfaces * self.banks_per_interface

    @property
    def total_blocks(self):
        return self.num_banks * self.blocks_per_bank

    @property
    def total_pages(self):
        return self.total_blocks * self.pages_per_block

    @property
    def capacity_bytes(self):
        return self.total_pages * self.page_size

    @property
    def units_per_page(self):
        return self.page_size // self.read_unit

    @property
    def block_bytes(self):
        return self.pages_per_block * self.page_size

    def interface_of(self, bank):
        return bank // self.banks_per_interface


@dataclass(frozen=True)
class LatencyModel:
    write_page_us: float = 200.0
    read_unit_us: float = 100.0
    erase_block_us: float = 2000.0
    # per-request queue overhead bound (the epsilon of the parallel-speedup property)
    queue_overhead_us: float = 5.0
    write_xfer_us: float = 25.0
    read_xfer_unit_us: float = 3.0

    def __post_init__(self):
        _require_positive(
            "latency",
            write_page_us=self.write_page_us,
            read_unit_us=self.read_unit_us,
            erase_block_us=self.erase_block_us,
        )
        if self.queue_overhead_us < 0 or self.write_xfer_us < 0 or self.read_xfer_unit_us < 0:
            raise ConfigurationError("latency transfer and overhead terms must be >= 0")


@dataclass(frozen=True)
class DeviceProfile:
    name: str
    geometry: FlashGeometry
    latency: LatencyModel = field(default_factory=LatencyModel)
    bad_blocks: tuple = ()

    def __post_init__(self):
        cleaned = []
        for entry in self.bad_blocks:
            try:
                bank, block = (int(v) for v in entry)
            except (TypeError, ValueError):
                raise ConfigurationError(f"bad block entry {entry!r} is not a (bank, block) pair") from None
            if not (0 <= bank < self.geometry.num_banks and 0 <= block < self.geometry.blocks_per_bank):
                raise ConfigurationError(f"bad block {(bank, block)} outside geometry")
            cleaned.append((bank, block))
        object.__setattr__(self, "bad_blocks", tuple(sorted(set(cleaned))))


@dataclass(frozen=True)
class IoConfig:
    num_queues: int = 64
    num_buffers: int = 256
    buffer_size: int | None = None
    sector_size: int = 4 * 1024
    idle_flush_seconds: float = 60.0
    flush_tick_seconds: float = 1.0
    dispatch: DispatchPolicy = DispatchPolicy.LPN
    request_cpu_us: float = 2.0
    overprovision: float = 0.125
    backoff_start_us: float = 50.0
    backoff_cap_us: float = 10_000.0
    backoff_attempts: int = 40

    def __post_init__(self):
        object.__setattr__(self, "dispatch", DispatchPolicy.parse(self.dispatch))
        _require_positive(
            "io",
            num_queues=self.num_queues,
            num_buffers=self.num_buffers,
            sector_size=self.sector_size,
            idle_flush_seconds=self.idle_flush_seconds,
            flush_tick_seconds=self.flush_tick_seconds,
            backoff_start_us=self.backoff_start_us,
            backoff_cap_us=self.backoff_cap_us,
            backoff_attempts=self.backoff_attempts,
        )
        if self.num_queues > 1024:
            raise ConfigurationError(f"io.num_queues {self.num_queues} exceeds 1024")
        if not 0.0 <= self.overprovision < 1.0:
            raise ConfigurationError(f"io.overprovision must be in [0, 1), got {self.overprovision}")
        if self.request_cpu_us < 0:
            raise ConfigurationError("io.request_cpu_us must be >= 0")


@dataclass(frozen=True)
class GcLevel:
    free_blocks: int
    valid_pages: int


# (lowest active IO worker count, permitted GC threads) for 64 workers / 8 GC threads
DEFAULT_ADAPTIVE_MAP = ((49, 1), (33, 2), (17, 4), (0, 8))
DEFAULT_ADAPTIVE_WORKERS = 64


def default_levels(geometry):
    blocks = geometry.blocks_per_bank
    pages = geometry.pages_per_block
    return (
        GcLevel(free_blocks=max(blocks // 4, 3), valid_pages=0),
        GcLevel(free_blocks=max(blocks // 8, 2), valid_pages=pages // 4),
        GcLevel(free_blocks=max(blocks // 16, 1), valid_pages=pages // 2),
    )


def validate_levels(levels, geometry):
    if not levels:
        raise ConfigurationError("gc.levels must not be empty")
    if levels[0].valid_pages != 0:
        raise ConfigurationError("level 0 must only admit victims with zero valid pages")
    for previous, current in zip(levels, levels[1:]):
        if current.free_blocks >= previous.free_blocks:
            raise ConfigurationError("gc level free-block thresholds must strictly decrease")
        if current.valid_pages < previous.valid_pages:
            raise ConfigurationError("gc level valid-page thresholds must not decrease")
    if levels[0].free_blocks >= geometry.blocks_per_bank:
        raise ConfigurationError("gc level 0 threshold must be below blocks_per_bank")
    if levels[-1].free_blocks < 1 or levels[-1].valid_pages >= geometry.pages_per_block:
        raise ConfigurationError("gc highest level must keep free_blocks >= 1 and valid_pages < pages_per_block")


@dataclass(frozen=True)
class GcConfig:
    policy: GcPolicy = GcPolicy.PLLGC
    max_gc_threads: int = 1
    levels: tuple | None = None
    adaptive_map: tuple = DEFAULT_ADAPTIVE_MAP
    panic_free_blocks: int | None = None
    exclusive_hysteresis: int = 2
    idle_poll_us: float = 2000.0
    max_npgc_rounds: int | None = None
    reserve_blocks: int = 1
    entry_retry_limit: int = 8

    def __post_init__(self):
        object.__setattr__(self, "policy", GcPolicy.parse(self.policy))
        if self.levels is not None:
            levels = tuple(
                level if isinstance(level, GcLevel) else GcLevel(*level) for level in self.levels)
            object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "adaptive_map", tuple(
            sorted(((int(low), int(n)) for low, n in self.adaptive_map), reverse=True)))
        _require_positive("gc", max_gc_threads=self.max_gc_threads, idle_poll_us=self.idle_poll_us)
        if self.reserve_blocks < 0 or self.exclusive_hysteresis < 0:
            raise ConfigurationError("gc.reserve_blocks and gc.exclusive_hysteresis must be >= 0")
        if not self.adaptive_map or self.adaptive_map[-1][0] != 0:
            raise ConfigurationError("gc.adaptive_map must cover zero active workers")
        if any(n < 1 for _, n in self.adaptive_map):
            raise ConfigurationError("gc.adaptive_map must permit at least one GC thread")

    def resolved_levels(self, geometry):
        levels = self.levels if self.levels is not None else default_levels(geometry)
        validate_levels(levels, geometry)
        return levels

    def resolved_panic(self, geometry):
        if self.panic_free_blocks is not None:
            return self.panic_free_blocks
        return self.resolved_levels(geometry)[-1].free_blocks


@dataclass(frozen=True)
class CheckpointConfig:
    scan_window: int = 4


@dataclass(frozen=True)
class RuntimeConfig:
    deterministic: bool = True
    seed: int = 0


@dataclass(frozen=True)
class EngineConfig:
    profile: DeviceProfile
    io: IoConfig = field(default_factory=IoConfig)
    gc: GcConfig = field(default_factory=GcConfig)
    checkpoint: CheckpointConfig = field(default_factory=CheckpointConfig)
    runtime: RuntimeConfig = field(default_factory=RuntimeConfig)
    debug_checks: bool = True
    record_requests: bool = True

    def __post_init__(self):
        geometry = self.profile.geometry
        if self.io.buffer_size is not None and self.io.buffer_size != geometry.page_size:
            raise ConfigurationError(
                f"io.buffer_size {self.io.buffer_size} must equal the flash page size {geometry.page_size}")
        if geometry.page_size % self.io.sector_size:
            raise ConfigurationError("flash page size must be a multiple of io.sector_size")
        if not 1 <= self.checkpoint.scan_window <= geometry.blocks_per_bank // 2:
            raise ConfigurationError(
                f"checkpoint.scan_window must be in [1, {geometry.blocks_per_bank // 2}]")
        self.gc.resolved_levels(geometry)
        if self.gc.reserve_blocks >= geometry.blocks_per_bank // 2:
            raise ConfigurationError("gc.reserve_blocks leaves no room for user writes")
        if self.logical_pages < 1:
            raise ConfigurationError("overprovisioning leaves no logical capacity")

    @property
    def geometry(self):
        return self.profile.geometry

    @property
    def sectors_per_page(self):
        return self.geometry.page_size // self.io.sector_size

    @property
    def logical_pages(self):
        geometry = self.geometry
        good_blocks = geometry.total_blocks - len(self.profile.bad_blocks)
        usable = good_blocks - geometry.num_banks * (self.gc.reserve_blocks + 1)
        return int(usable * geometry.pages_per_block * (1.0 - self.io.overprovision))

    @property
    def logical_sectors(self):
        return self.logical_pages * self.sectors_per_page

    def replace(self, **sections):
        return dataclasses.replace(self, **sections)


def _build(cls, mapping, section):
    if mapping is None:
        return cls()
    if not isinstance(mapping, dict):
        raise ConfigurationError(f"section {section!r} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(mapping) - known
    if unknown:
        raise ConfigurationError(f"unknown keys in {section!r}: {', '.join(sorted(unknown))}")
    try:
        return cls(**mapping)
    except TypeError as error:
        raise ConfigurationError(f"bad {section!r} section: {error}") from None


def _read_yaml(path):
    try:
        with open(path, encoding="utf-8") as handle:
            data = yaml.safe_load(handle)
    except OSError as error:
        raise ConfigurationError(f"cannot read {path}: {error}") from None
    except yaml.YAMLError as error:
        raise ConfigurationError(f"{path} is not valid YAML: {error}") from None
    return data or {}


def profile_from_mapping(data, default_name="custom"):
    known = {"name", "geometry", "latency", "bad_blocks"}
    unknown = set(data) - known
    if unknown:
        raise ConfigurationError(f"unknown keys in device profile: {', '.join(sorted(unknown))}")
    if "geometry" not in data:
        raise ConfigurationError("device profile has no geometry section")
    geometry = _build(FlashGeometry, data["geometry"], "geometry")
    latency = _build(LatencyModel, data.get("latency"), "latency")
    return DeviceProfile(
        name=data.get("name", default_name),
        geometry=geometry,
        latency=latency,
        bad_blocks=tuple(tuple(entry) for entry in data.get("bad_blocks") or ()),
    )


def profile_to_mapping(profile):
    return {
        "name": profile.name,
        "geometry": dataclasses.asdict(profile.geometry),
        "latency": dataclasses.asdict(profile.latency),
        "bad_blocks": [list(entry) for entry in profile.bad_blocks],
    }


def load_profile(path):
    """
    Load a device profile from a YAML key-value file.

    param path: profile file holding ``geometry``, ``latency`` and ``bad_blocks``.
    """
    data = _read_yaml(path)
    LOGGER.info("loaded device profile from %s", path)
    return profile_from_mapping(data, default_name=Path(path).stem)


def resolve_profile(reference, base_dir=None):
    """Accept a preset name, a profile file path, an inline mapping or a DeviceProfile."""
    if isinstance(reference, DeviceProfile):
        return reference
    if isinstance(reference, dict):
        return profile_from_mapping(reference)
    from profiles.device_profiles import PROFILES

    if reference in PROFILES:
        return PROFILES[reference]
    path = Path(reference)
    if base_dir is not None and not path.is_absolute():
        path = Path(base_dir) / path
    if path.exists():
        return load_profile(path)
    raise ConfigurationError(f"unknown device profile {reference!r}")


def config_from_mapping(data, base_dir=None):
    known = {"profile", "io", "gc", "checkpoint", "runtime", "debug_checks", "record_requests"}
    unknown = set(data) - known
    if unknown:
        raise ConfigurationError(f"unknown keys in engine config: {', '.join(sorted(unknown))}")
    if "profile" not in data:
        raise ConfigurationError("engine config names no device profile")
    gc_section = dict(data.get("gc") or {})
    if "adaptive_map" in gc_section:
        gc_section["adaptive_map"] = tuple(tuple(row) for row in gc_section["adaptive_map"])
    return EngineConfig(
        profile=resolve_profile(data["profile"], base_dir=base_dir),
        io=_build(IoConfig, data.get("io"), "io"),
        gc=_build(GcConfig, gc_section, "gc"),
        checkpoint=_build(CheckpointConfig, data.get("checkpoint"), "checkpoint"),
        runtime=_build(RuntimeConfig, data.get("runtime"), "runtime"),
        debug_checks=bool(data.get("debug_checks", True)),
        record_requests=bool(data.get("record_requests", True)),
    )


def load_engine_config(path):
    """
    Load an engine configuration file.

    param path: YAML file with a ``profile`` reference and optional
        ``io``, ``gc``, ``checkpoint`` and ``runtime`` sections.
    """
    data = _read_yaml(path)
    return config_from_mapping(data, base_dir=Path(path).parent)
