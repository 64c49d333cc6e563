"""Device profile presets, looked up by name from configs and the bench CLI."""

from ftl.config import DeviceProfile, FlashGeometry, LatencyModel

STOCK_LATENCY = LatencyModel()

# 4 interfaces x 16 banks, 4096 blocks of 64 pages of 32KB
CARD_512GB = DeviceProfile(
    name="card-512gb",
    geometry=FlashGeometry(num_interfaces=4, banks_per_interface=16, blocks_per_bank=4096, pages_per_block=64),
    latency=STOCK_LATENCY,
)

# the 8GB card of the GC experiments, 64 blocks per bank
CARD_8GB = DeviceProfile(
    name="card-8gb",
    geometry=FlashGeometry(num_interfaces=4, banks_per_interface=16, blocks_per_bank=64, pages_per_block=64),
    latency=STOCK_LATENCY,
)

DESK_NPGC = DeviceProfile(
    name="desk-npgc",
    geometry=FlashGeometry(num_interfaces=2, banks_per_interface=4, blocks_per_bank=64, pages_per_block=16),
    latency=STOCK_LATENCY,
)

DESK_ADAPTIVE = DeviceProfile(
    name="desk-adaptive",
    geometry=FlashGeometry(num_interfaces=2, banks_per_interface=4, blocks_per_bank=64, pages_per_block=16),
    latency=STOCK_LATENCY,
)

DESK_64BANK = DeviceProfile(
    name="desk-64bank",
    geometry=FlashGeometry(num_interfaces=4, banks_per_interface=16, blocks_per_bank=16, pages_per_block=8),
    latency=STOCK_LATENCY,
)

SMALL = DeviceProfile(
    name="small",
    geometry=FlashGeometry(num_interfaces=2, banks_per_interface=2, blocks_per_bank=16, pages_per_block=8),
    latency=STOCK_LATENCY,
)

TINY = DeviceProfile(
    name="tiny",
    geometry=FlashGeometry(num_interfaces=1, banks_per_interface=2, blocks_per_bank=8, pages_per_block=4),
    latency=STOCK_LATENCY,
)

PROFILES = {profile.name: profile for profile in (
    CARD_512GB, CARD_8GB, DESK_NPGC, DESK_ADAPTIVE, DESK_64BANK, SMALL, TINY)}
