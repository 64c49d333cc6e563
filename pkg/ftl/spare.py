"""Out-of-band metadata written with every flash page."""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import crcmod.predefined

# [type:1][lpn:4][seq:8][crc:4], little-endian
SPARE_FORMAT = struct.Struct("<BIQ")
SPARE_CRC = struct.Struct("<I")
SPARE_SIZE = SPARE_FORMAT.size + SPARE_CRC.size

crc32 = crcmod.predefined.mkCrcFun("crc-32")

NO_LPN = 0xFFFFFFFF


class BlockType(enum.IntEnum):
    DATA = 1
    CHECKPOINT = 2
    # synthesized stale pages with no logical owner
    FILLER = 3


@dataclass(frozen=True)
class SpareMetadata:
    block_type: BlockType
    lpn: int
    sequence: int

    def pack(self):
        body = SPARE_FORMAT.pack(int(self.block_type), self.lpn, self.sequence)
        return body + SPARE_CRC.pack(crc32(body))

    @classmethod
    def unpack(cls, spare):
        """Decode a spare area; returns None for erased or torn metadata."""
        if spare is None or len(spare) < SPARE_SIZE:
            return None
        body = bytes(spare[:SPARE_FORMAT.size])
        (stored,) = SPARE_CRC.unpack_from(spare, SPARE_FORMAT.size)
        if body == b"\xff" * SPARE_FORMAT.size and stored == 0xFFFFFFFF:
            return None
        if crc32(body) != stored:
            return None
        block_type, lpn, sequence = SPARE_FORMAT.unpack(body)
        try:
            return cls(BlockType(block_type), lpn, sequence)
        except ValueError:
            return None
