"""
Static-model byte-oriented range coder.

A carry-less range coder with 32-bit state: the interval is renormalized a
byte at a time whenever its top byte settles or the range drops below 2^16.
Frequency totals must therefore stay at or below 2^16.
"""

import bisect
import logging
from typing import List, Sequence

import numpy as np

from splatrestore.errors import FormatError, InputError

logger = logging.getLogger(__name__)

ALPHABET = 256
STATE_BITS = 32
MASK = (1 << STATE_BITS) - 1
TOP = 1 << (STATE_BITS - 8)
BOT = 1 << 16
MAX_TOTAL = BOT


def build_frequency_table(symbols: np.ndarray) -> np.ndarray:
    """Order-0 counts with +1 smoothing, rescaled so the total stays <= 2^16.

    Every entry of the returned table is at least 1.
    """
    counts = np.bincount(np.asarray(symbols, dtype=np.int64).reshape(-1), minlength=ALPHABET)[:ALPHABET]
    counts = counts.astype(np.int64) + 1
    total = int(counts.sum())
    if total > MAX_TOTAL:
        budget = MAX_TOTAL - ALPHABET
        counts = np.maximum(1, counts * budget // total)
    return counts.astype(np.uint32)


def cumulative(freqs: Sequence[int]) -> List[int]:
    cum = [0]
    for f in freqs:
        cum.append(cum[-1] + int(f))
    return cum


def check_table(freqs: np.ndarray) -> None:
    if len(freqs) != ALPHABET:
        raise InputError(f"frequency table must have {ALPHABET} entries, got {len(freqs)}")
    total = int(np.sum(freqs, dtype=np.int64))
    if total <= 0 or total > MAX_TOTAL:
        raise InputError(f"frequency total {total} outside 1..{MAX_TOTAL}")


def cross_entropy_bits(symbols: np.ndarray, freqs: np.ndarray) -> float:
    """Ideal code length of ``symbols`` under the static model, in bits."""
    probs = np.asarray(freqs, dtype=np.float64) / float(np.sum(freqs, dtype=np.float64))
    return float(-np.log2(probs[np.asarray(symbols, dtype=np.int64)]).sum())


class RangeEncoder:
    """Encode symbols under one or more static frequency tables into a byte string."""

    def __init__(self):
        self.low = 0
        self.range = MASK
        self.out = bytearray()

    def _normalize(self) -> None:
        while True:
            if (self.low ^ (self.low + self.range)) >= TOP:
                if self.range >= BOT:
                    return
                self.range = -self.low & (BOT - 1)
            self.out.append(self.low >> (STATE_BITS - 8))
            self.low = (self.low << 8) & MASK
            self.range = (self.range << 8) & MASK

    def encode(self, symbol: int, freqs: Sequence[int], cum: Sequence[int]) -> None:
        freq = int(freqs[symbol])
        if freq == 0:
            raise InputError(f"symbol {symbol} has zero modeled frequency")
        r = self.range // cum[-1]
        self.low += cum[symbol] * r
        self.range = freq * r
        self._normalize()

    def finish(self) -> bytes:
        for _ in range(STATE_BITS // 8):
            self.out.append(self.low >> (STATE_BITS - 8))
            self.low = (self.low << 8) & MASK
        return bytes(self.out)


class RangeDecoder:
    """Inverse of ``RangeEncoder`` over the same sequence of tables."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.low = 0
        self.range = MASK
        self.code = 0
        for _ in range(STATE_BITS // 8):
            self.code = (self.code << 8) | self._next_byte()

    def _next_byte(self) -> int:
        if self.pos < len(self.data):
            byte = self.data[self.pos]
        else:
            byte = 0
        self.pos += 1
        return byte

    def _normalize(self) -> None:
        while True:
            if (self.low ^ (self.low + self.range)) >= TOP:
                if self.range >= BOT:
                    return
                self.range = -self.low & (BOT - 1)
            self.code = ((self.code << 8) | self._next_byte()) & MASK
            self.low = (self.low << 8) & MASK
            self.range = (self.range << 8) & MASK

    def decode(self, freqs: Sequence[int], cum: Sequence[int]) -> int:
        total = cum[-1]
        r = self.range // total
        value = ((self.code - self.low) & MASK) // r
        if value >= total:
            raise FormatError("range decoder ran outside the modeled interval", self.pos)
        symbol = bisect.bisect_right(cum, value) - 1
        self.low += cum[symbol] * r
        self.range = int(freqs[symbol]) * r
        self._normalize()
        return symbol

    def overrun(self) -> bool:
        return self.pos > len(self.data)


def entropy_encode(symbols: np.ndarray, freqs: np.ndarray) -> bytes:
    """Range-code a symbol sequence under one static table."""
    check_table(freqs)
    table = [int(f) for f in freqs]
    cum = cumulative(table)
    encoder = RangeEncoder()
    for s in np.asarray(symbols, dtype=np.int64).reshape(-1).tolist():
        encoder.encode(s, table, cum)
    return encoder.finish()


def entropy_decode(data: bytes, freqs: np.ndarray, count: int) -> np.ndarray:
    """Decode ``count`` symbols produced by ``entropy_encode`` with the same table."""
    check_table(freqs)
    table = [int(f) for f in freqs]
    cum = cumulative(table)
    decoder = RangeDecoder(data)
    out = np.empty(count, dtype=np.uint8)
    for i in range(count):
        out[i] = decoder.decode(table, cum)
    return out
