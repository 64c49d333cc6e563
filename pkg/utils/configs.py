"""Engine configurations shared by the test suites."""

from ftl.config import (
    CheckpointConfig,
    DeviceProfile,
    EngineConfig,
    FlashGeometry,
    GcConfig,
    GcPolicy,
    IoConfig,
    RuntimeConfig,
)
from profiles.device_profiles import SMALL, TINY

# 2 banks of 16 blocks, 4 pages of two 4KB sectors: small enough for GC to run within a few hundred writes
CHURN = DeviceProfile(
    name="churn",
    geometry=FlashGeometry(num_interfaces=1, banks_per_interface=2, blocks_per_bank=16, pages_per_block=4,
                           page_size=8 * 1024),
)


def small_config(policy=GcPolicy.PLLGC, seed=0, queues=4, buffers=8, gc_threads=2, scan_window=2, **io):
    return EngineConfig(
        profile=SMALL,
        io=IoConfig(num_queues=queues, num_buffers=buffers, idle_flush_seconds=0.5, flush_tick_seconds=0.1, **io),
        gc=GcConfig(policy=policy, max_gc_threads=gc_threads),
        checkpoint=CheckpointConfig(scan_window=scan_window),
        runtime=RuntimeConfig(deterministic=True, seed=seed),
    )


def churn_config(policy=GcPolicy.PLLGC, seed=0, queues=2, buffers=4, gc_threads=2, deterministic=True):
    return EngineConfig(
        profile=CHURN,
        io=IoConfig(num_queues=queues, num_buffers=buffers, idle_flush_seconds=0.05, flush_tick_seconds=0.01,
                    overprovision=0.25),
        gc=GcConfig(policy=policy, max_gc_threads=gc_threads),
        checkpoint=CheckpointConfig(scan_window=1),
        runtime=RuntimeConfig(deterministic=deterministic, seed=seed),
    )


def tiny_config(policy=GcPolicy.NPGC, seed=0):
    return EngineConfig(
        profile=TINY,
        io=IoConfig(num_queues=2, num_buffers=4, overprovision=0.25),
        gc=GcConfig(policy=policy, max_gc_threads=1),
        checkpoint=CheckpointConfig(scan_window=1),
        runtime=RuntimeConfig(deterministic=True, seed=seed),
    )
