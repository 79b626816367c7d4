"""
CodedScene container.

Byte layout, all integers little-endian::

    magic        b"NIFI"
    u16          version (1)
    u8           rate level
    u32          primitive count N
    u8           SH degree
    C x {f32 min, f32 step}          per-channel dequantization
    C x 256 x u32                    per-channel frequency tables
    u64          payload length
    payload                          range-coded symbols, channel after channel
    u32          CRC32 of every preceding byte

C = 11 + 3 * (deg+1)^2 channels, ordered as in ``compression.quantization``.
"""

import logging
import struct
import zlib
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Union

import numpy as np

from splatrestore.binary import ByteReader
from splatrestore.errors import CorruptStreamError, InputError
from splatrestore.scene import GaussianSet

from .quantization import QuantParams, channel_count, dequantize, quantize
from .range_coder import ALPHABET, RangeDecoder, RangeEncoder, build_frequency_table, check_table, cumulative

logger = logging.getLogger(__name__)

MAGIC = b"NIFI"
VERSION = 1
FILE_SUFFIX = ".gsrc"


def encode_payload(symbols: np.ndarray, tables: np.ndarray) -> bytes:
    encoder = RangeEncoder()
    for channel, table in zip(symbols, tables):
        freqs = [int(f) for f in table]
        cum = cumulative(freqs)
        for s in channel.tolist():
            encoder.encode(s, freqs, cum)
    return encoder.finish()


def decode_payload(payload: bytes, tables: np.ndarray, count: int) -> np.ndarray:
    decoder = RangeDecoder(payload)
    symbols = np.empty((len(tables), count), dtype=np.uint8)
    for c, table in enumerate(tables):
        freqs = [int(f) for f in table]
        cum = cumulative(freqs)
        row = symbols[c]
        for i in range(count):
            row[i] = decoder.decode(freqs, cum)
    if decoder.overrun():
        raise CorruptStreamError("payload ended before every symbol was decoded", len(payload))
    return symbols


@dataclass(frozen=True, eq=False)
class CodedScene:
    """One compressed rate level: quantized symbols plus everything needed to decode them."""

    level: int
    count: int
    sh_degree: int
    params: QuantParams
    freq_tables: np.ndarray
    symbols: np.ndarray

    def __post_init__(self):
        channels = channel_count(self.sh_degree)
        if self.symbols.shape != (channels, self.count):
            raise InputError(f"symbols have shape {self.symbols.shape}, expected {(channels, self.count)}")
        if self.freq_tables.shape != (channels, ALPHABET):
            raise InputError(f"frequency tables have shape {self.freq_tables.shape}")
        if self.params.channels != channels:
            raise InputError(f"{self.params.channels} quantization channels, expected {channels}")
        if not 0 <= self.level <= 255:
            raise InputError(f"level {self.level} does not fit in a byte")
        for table in self.freq_tables:
            check_table(table)

    @classmethod
    def encode(cls, gs: GaussianSet, level: int) -> "CodedScene":
        """Quantize ``gs`` and build one frequency table per channel."""
        symbols, params = quantize(gs.validate())
        tables = np.stack([build_frequency_table(channel) for channel in symbols])
        return cls(level=level, count=gs.count, sh_degree=gs.sh_degree, params=params,
                   freq_tables=tables, symbols=symbols)

    @cached_property
    def payload(self) -> bytes:
        return encode_payload(self.symbols, self.freq_tables)

    def gaussians(self) -> GaussianSet:
        """The dequantized primitive set."""
        return dequantize(self.symbols, self.params, self.sh_degree)

    def to_bytes(self) -> bytes:
        buf = bytearray(MAGIC)
        buf += struct.pack("<HBIB", VERSION, self.level, self.count, self.sh_degree)
        for mn, step in zip(self.params.mins, self.params.steps):
            buf += struct.pack("<ff", float(mn), float(step))
        buf += np.ascontiguousarray(self.freq_tables, dtype="<u4").tobytes()
        payload = self.payload
        buf += struct.pack("<Q", len(payload)) + payload
        buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
        return bytes(buf)

    @property
    def size_bytes(self) -> int:
        return len(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "CodedScene":
        """Parse and entropy-decode a container.

        Raises:
            CorruptStreamError: Bad magic, unknown version, checksum mismatch or truncation
        """
        reader = ByteReader(data, "coded scene", CorruptStreamError)
        reader.expect(MAGIC)
        (version,) = reader.unpack("H")
        if version != VERSION:
            raise CorruptStreamError(f"unsupported coded scene version {version}", 4)
        if len(data) < reader.offset + 4:
            raise CorruptStreamError("coded scene too short for a checksum", len(data))
        (stored_crc,) = struct.unpack("<I", data[-4:])
        if zlib.crc32(data[:-4]) & 0xFFFFFFFF != stored_crc:
            raise CorruptStreamError("checksum mismatch", len(data) - 4)

        level, count, sh_degree = reader.unpack("BIB")
        if sh_degree > 3:
            raise CorruptStreamError(f"invalid SH degree {sh_degree}", reader.offset - 1)
        channels = channel_count(sh_degree)
        pairs = np.array(reader.unpack(f"{2 * channels}f"), dtype=np.float32).reshape(channels, 2)
        tables = np.frombuffer(reader.take(4 * ALPHABET * channels), dtype="<u4")
        tables = tables.reshape(channels, ALPHABET).astype(np.uint32)
        (payload_len,) = reader.unpack("Q")
        payload = reader.take(payload_len)
        reader.take(4)
        reader.finish()
        try:
            params = QuantParams(mins=pairs[:, 0], steps=pairs[:, 1])
            for table in tables:
                check_table(table)
        except InputError as e:
            raise CorruptStreamError(f"invalid coded scene header: {e}") from None
        symbols = decode_payload(payload, tables, count)
        return cls(level=level, count=count, sh_degree=sh_degree, params=params,
                   freq_tables=tables, symbols=symbols)


def write_coded_scene(coded: CodedScene, path: Union[str, Path]) -> int:
    """Write the container and return its size in bytes."""
    data = coded.to_bytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return len(data)


def read_coded_scene(path: Union[str, Path]) -> CodedScene:
    return CodedScene.from_bytes(Path(path).read_bytes())
