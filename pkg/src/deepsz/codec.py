"""Error-bounded lossy codec for 1-D float32 arrays.

Pipeline: 1-D Lorenzo prediction (previous reconstructed value) ->
linear-scaling quantization against an absolute error bound ->
canonical Huffman coding of the quantization codes -> optional lossless
pass over the payload bytes.

Guarantees:
  * every reconstructed value differs from its input by at most `eb`;
    values the quantizer cannot hold within the bound are stored raw
    ("escapes", quantization code 0);
  * compression is bit-deterministic for fixed inputs and backend set;
  * compressing already-decompressed data reproduces it exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from . import lossless
from ._kernels import lorenzo_quantize, lorenzo_reconstruct, pack_bits, unpack_bits
from .errors import DecodeError, FormatError

DEFAULT_QUANT_BINS = 65536
ESCAPE_CODE = 0
BLOCK_MAGIC = b"SZB1"

_MAX_CODE_LEN = 64

# Table entry: little-endian u32 symbol id + u8 canonical code length.
_TABLE_ENTRY = np.dtype([("sym", "<u4"), ("len", "u1")])


@dataclass
class CompressedBlock:
    """Serialized form of one lossy-compressed array.

    `payload` holds the Huffman bitstream, possibly shrunk further by the
    lossless backend identified by `post_lossless_tag` (0 = stored as-is).
    `payload_bits` counts Huffman bits before that pass.
    """

    element_count: int
    error_bound: float
    quant_bins: int
    huffman_table: bytes
    payload: bytes
    payload_bits: int
    escape_positions: np.ndarray = field(default_factory=lambda: np.empty(0, np.uint32))
    escape_values: np.ndarray = field(default_factory=lambda: np.empty(0, np.float32))
    post_lossless_tag: int = 0

    def to_bytes(self) -> bytes:
        if self.escape_positions.size:
            esc = np.empty(2 * self.escape_positions.size, dtype=np.uint32)
            esc[0::2] = self.escape_positions
            esc[1::2] = self.escape_values.view(np.uint32)
            esc_bytes = esc.tobytes()
        else:
            esc_bytes = b""
        head = struct.pack(
            "<4sIdIB",
            BLOCK_MAGIC,
            self.element_count,
            self.error_bound,
            self.quant_bins,
            self.post_lossless_tag,
        )
        return b"".join(
            [
                head,
                struct.pack("<I", len(self.huffman_table)),
                self.huffman_table,
                struct.pack("<I", self.escape_positions.size),
                esc_bytes,
                struct.pack("<Q", self.payload_bits),
                self.payload,
            ]
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "CompressedBlock":
        if len(data) < 25:
            raise FormatError("block too short")
        magic, count, eb, bins, tag = struct.unpack_from("<4sIdIB", data, 0)
        if magic != BLOCK_MAGIC:
            raise FormatError(f"bad block magic {magic!r}")
        off = 21
        (table_len,) = struct.unpack_from("<I", data, off)
        off += 4
        table = bytes(data[off : off + table_len])
        if len(table) != table_len:
            raise FormatError("truncated huffman table")
        off += table_len
        (esc_count,) = struct.unpack_from("<I", data, off)
        off += 4
        esc_bytes = data[off : off + 8 * esc_count]
        if len(esc_bytes) != 8 * esc_count:
            raise FormatError("truncated escape list")
        off += 8 * esc_count
        if esc_count:
            esc = np.frombuffer(esc_bytes, dtype=np.uint32)
            positions = esc[0::2].copy()
            values = esc[1::2].copy().view(np.float32)
        else:
            positions = np.empty(0, np.uint32)
            values = np.empty(0, np.float32)
        if positions.size and (
            np.any(positions[1:] <= positions[:-1]) or positions[-1] >= count
        ):
            raise FormatError("escape positions not strictly increasing / out of range")
        (payload_bits,) = struct.unpack_from("<Q", data, off)
        off += 8
        payload = bytes(data[off:])
        return cls(
            element_count=count,
            error_bound=eb,
            quant_bins=bins,
            huffman_table=table,
            payload=payload,
            payload_bits=payload_bits,
            escape_positions=positions,
            escape_values=values,
            post_lossless_tag=tag,
        )


def _check_input(values: np.ndarray, eb: float, quant_bins: int) -> None:
    if not (eb > 0):
        raise ValueError(f"error bound must be positive, got {eb}")
    if quant_bins < 4 or quant_bins % 2:
        raise ValueError(f"quant_bins must be even and >= 4, got {quant_bins}")
    if values.size >= 2**32:
        raise ValueError("arrays beyond 2^32 elements are not supported")
    if values.size and not np.all(np.isfinite(values)):
        raise ValueError("non-finite values cannot be compressed under an absolute bound")


def predict_quantize(
    values, eb: float, quant_bins: int = DEFAULT_QUANT_BINS
) -> Tuple[np.ndarray, Tuple[np.ndarray, np.ndarray], np.ndarray]:
    """Quantize `values` against bound `eb`.

    Returns (codes, (escape_positions, escape_values), reconstructed).
    Code 0 marks an escape; its raw float32 value is carried separately.
    """
    values = np.ascontiguousarray(values, dtype=np.float32)
    _check_input(values, eb, quant_bins)
    codes = np.empty(values.size, dtype=np.uint32)
    recon = np.empty(values.size, dtype=np.float32)
    lorenzo_quantize(values, float(eb), quant_bins, codes, recon)
    positions = np.flatnonzero(codes == ESCAPE_CODE).astype(np.uint32)
    return codes, (positions, recon[positions].copy()), recon


def entropy_encode(codes: np.ndarray) -> Tuple[bytes, bytes, int]:
    """Huffman-code a stream of quantization codes.

    Returns (table_bytes, payload_bytes, payload_bit_count). The table
    stores canonical code lengths, one (u32 symbol, u8 length) entry per
    occurring symbol in ascending symbol order.
    """
    codes = np.ascontiguousarray(codes, dtype=np.uint32)
    if codes.size == 0:
        return b"", b"", 0
    freqs = np.bincount(codes)
    symbols = np.flatnonzero(freqs)
    lengths = _code_lengths(symbols, freqs[symbols])
    entries = np.empty(len(symbols), dtype=_TABLE_ENTRY)
    entries["sym"] = symbols
    entries["len"] = [lengths[int(s)] for s in symbols]
    table = struct.pack("<I", len(symbols)) + entries.tobytes()
    codewords, lens = _canonical_codewords(lengths, int(symbols[-1]) + 1)
    total_bits = int(np.sum(lens[codes].astype(np.int64)))
    out = np.zeros((total_bits + 7) // 8, dtype=np.uint8)
    pack_bits(codes, codewords, lens, out)
    return bytes(table), out.tobytes(), total_bits


def entropy_decode(
    table: bytes, payload: bytes, payload_bits: int, element_count: int
) -> np.ndarray:
    """Inverse of entropy_encode. Raises DecodeError on malformed input."""
    if element_count == 0:
        if payload_bits or table:
            raise DecodeError("nonempty table/payload for empty stream")
        return np.empty(0, dtype=np.uint32)
    syms, lens = _parse_table(table)
    first_code, counts, offsets, canonical_syms, max_len = _decode_tables(syms, lens)
    if payload_bits > 8 * len(payload):
        raise DecodeError("payload shorter than its declared bit count")
    buf = np.frombuffer(payload, dtype=np.uint8)
    out = np.empty(element_count, dtype=np.uint32)
    status = unpack_bits(
        buf, payload_bits, first_code, counts, offsets, canonical_syms, max_len, out
    )
    if status == 1:
        raise DecodeError("invalid Huffman code in payload")
    if status == 2:
        raise DecodeError("payload truncated before the full stream was decoded")
    if status == 3:
        raise DecodeError("trailing bits after the full stream was decoded")
    return out


def compress(
    values,
    eb: float,
    quant_bins: int = DEFAULT_QUANT_BINS,
    backends: Optional[Dict[int, lossless.LosslessBackend]] = None,
) -> CompressedBlock:
    """Run the full pipeline and return a CompressedBlock."""
    codes, (esc_pos, esc_vals), _ = predict_quantize(values, eb, quant_bins)
    table, payload, payload_bits = entropy_encode(codes)
    tag, payload = lossless.select(payload, backends) if payload else (lossless.TAG_RAW, payload)
    return CompressedBlock(
        element_count=codes.size,
        error_bound=float(eb),
        quant_bins=quant_bins,
        huffman_table=table,
        payload=payload,
        payload_bits=payload_bits,
        escape_positions=esc_pos,
        escape_values=esc_vals,
        post_lossless_tag=tag,
    )


def decompress(block: CompressedBlock) -> np.ndarray:
    """Reconstruct the float32 array held by `block`."""
    payload = lossless.decode(block.post_lossless_tag, block.payload)
    codes = entropy_decode(
        block.huffman_table, payload, block.payload_bits, block.element_count
    )
    actual_esc = np.flatnonzero(codes == ESCAPE_CODE).astype(np.uint32)
    if not np.array_equal(actual_esc, block.escape_positions):
        raise DecodeError("escape positions inconsistent with the code stream")
    out = np.empty(block.element_count, dtype=np.float32)
    bad = lorenzo_reconstruct(
        codes, block.escape_values, block.error_bound, block.quant_bins, out
    )
    if bad >= 0:
        raise DecodeError(f"missing escape value for element {bad}")
    return out


def _code_lengths(symbols: np.ndarray, freqs: np.ndarray) -> Dict[int, int]:
    """Huffman code lengths per symbol; ties resolved toward lower ids."""
    import heapq

    if symbols.size == 1:
        # Degenerate alphabet: one bit per symbol avoids zero-length codes.
        return {int(symbols[0]): 1}
    # Node ids: 0..n-1 are leaves (in ascending symbol order, which makes
    # equal-frequency ties resolve toward the lower symbol id), later ids
    # are merge nodes.
    children: list = [None] * symbols.size
    heap = [(int(freq), order, order) for order, freq in enumerate(freqs)]
    heapq.heapify(heap)
    while len(heap) > 1:
        fa, _, a = heapq.heappop(heap)
        fb, _, b = heapq.heappop(heap)
        children.append((a, b))
        node = len(children) - 1
        heapq.heappush(heap, (fa + fb, node, node))
    root = heap[0][2]
    lengths: Dict[int, int] = {}
    stack = [(root, 0)]
    while stack:
        node, depth = stack.pop()
        if children[node] is None:
            lengths[int(symbols[node])] = depth
        else:
            left, right = children[node]
            stack.append((left, depth + 1))
            stack.append((right, depth + 1))
    return lengths


def _canonical_codewords(lengths: Dict[int, int], size: int):
    """Dense (codeword, length) lookup tables for the encoder."""
    codewords = np.zeros(size, dtype=np.uint64)
    lens = np.zeros(size, dtype=np.uint8)
    code = 0
    prev_len = 0
    for sym, length in sorted(lengths.items(), key=lambda kv: (kv[1], kv[0])):
        code <<= length - prev_len
        prev_len = length
        codewords[sym] = code
        lens[sym] = length
        code += 1
    return codewords, lens


def _parse_table(table: bytes) -> Tuple[np.ndarray, np.ndarray]:
    if len(table) < 4:
        raise DecodeError("huffman table too short")
    (count,) = struct.unpack_from("<I", table, 0)
    if len(table) != 4 + 5 * count:
        raise DecodeError("huffman table length mismatch")
    if count == 0:
        raise DecodeError("empty huffman table for nonempty stream")
    entries = np.frombuffer(table, dtype=_TABLE_ENTRY, offset=4)
    syms = entries["sym"].astype(np.int64)
    lens = entries["len"].astype(np.int64)
    if np.any(syms[1:] <= syms[:-1]):
        raise DecodeError("huffman table symbols not strictly increasing")
    if np.any(lens < 1) or np.any(lens > _MAX_CODE_LEN):
        raise DecodeError("huffman code length out of range")
    return syms, lens


def _decode_tables(syms: np.ndarray, lens: np.ndarray):
    """Canonical-decode tables: first code, symbol count and offset per length."""
    order = np.lexsort((syms, lens))
    canonical_syms = np.ascontiguousarray(syms[order].astype(np.uint32))
    sorted_lens = lens[order]
    max_len = int(sorted_lens[-1])
    counts = np.zeros(max_len + 1, dtype=np.int64)
    for length in sorted_lens:
        counts[length] += 1
    first_code = np.zeros(max_len + 1, dtype=np.int64)
    offsets = np.zeros(max_len + 1, dtype=np.int64)
    code = 0
    seen = 0
    for length in range(1, max_len + 1):
        code = (code + counts[length - 1]) << 1
        first_code[length] = code
        offsets[length] = seen
        seen += counts[length]
        if counts[length] and first_code[length] + counts[length] > (1 << length):
            raise DecodeError("huffman table violates the Kraft inequality")
    return first_code, counts, offsets, canonical_syms, max_len
