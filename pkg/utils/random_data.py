import random

from bench.workload import sector_payload


def get_random_seed():
    return random.randint(0, 2 ** 31 - 1)


def get_random_sector(rng, sector_size):
    """Random sector content that never equals the all-zero unwritten sector."""
    data = bytearray(rng.getrandbits(8) for _ in range(16)) * (sector_size // 16)
    data[0] |= 1
    return bytes(data)


def get_stamped_sector(lsn, version, sector_size):
    return sector_payload(lsn, version, sector_size)


def get_random_lsn(rng, logical_sectors, hot_sectors=None):
    """
    Pick a sector, biased towards the first ``hot_sectors`` when given.

    param rng: random.Random of the test.
    param logical_sectors: exported capacity in sectors.
    param hot_sectors: size of the hot region taking 80% of the picks.
    """
    if hot_sectors and rng.random() < 0.8:
        return rng.randrange(min(hot_sectors, logical_sectors))
    return rng.randrange(logical_sectors)
