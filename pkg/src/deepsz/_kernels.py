"""Numba kernels for the hot sequential loops of the lossy codec.

The prediction chain is inherently sequential (each element is predicted
from the previous *reconstructed* value), so these loops cannot be
vectorized with numpy. All chain arithmetic is float64; only the stored
reconstructions are float32. The decoder mirrors the encoder's chain
expression exactly, which is what makes re-compression of decompressed
data bit-stable.
"""

import numba
import numpy as np


@numba.njit(cache=True)
def lorenzo_quantize(values, eb, bins, codes, recon):
    """Quantize `values` in place into `codes` (0 = escape) and `recon`.

    Returns the number of escapes. `values` and `recon` are float32,
    `codes` is uint32.
    """
    mid = bins // 2
    step = 2.0 * eb
    prev = 0.0
    n_esc = 0
    for i in range(values.size):
        v = np.float64(values[i])
        q = np.rint((v - prev) / step)
        escaped = True
        # Float compare before the int cast so huge residuals cannot overflow.
        if 1.0 - mid <= q < np.float64(bins - mid):
            r = prev + q * step
            rf = np.float32(r)
            # The quantizer itself guarantees |r - v| <= eb in exact
            # arithmetic; the cast to float32 can push it over, in which
            # case the value is stored raw instead.
            if abs(np.float64(rf) - v) <= eb:
                codes[i] = np.uint32(np.int64(q) + mid)
                recon[i] = rf
                prev = r
                escaped = False
        if escaped:
            codes[i] = 0
            recon[i] = values[i]
            prev = np.float64(values[i])
            n_esc += 1
    return n_esc


@numba.njit(cache=True)
def lorenzo_reconstruct(codes, escape_values, eb, bins, out):
    """Inverse of lorenzo_quantize. `escape_values` are consumed in order.

    Returns -1 on success, else the index of an inconsistency (more
    escape codes than stored escape values).
    """
    mid = bins // 2
    step = 2.0 * eb
    prev = 0.0
    e = 0
    for i in range(codes.size):
        c = codes[i]
        if c == 0:
            if e >= escape_values.size:
                return i
            out[i] = escape_values[e]
            prev = np.float64(escape_values[e])
            e += 1
        else:
            r = prev + (np.float64(c) - mid) * step
            out[i] = np.float32(r)
            prev = r
    return -1


@numba.njit(cache=True)
def pack_bits(codes, codewords, lengths, out):
    """Pack Huffman codewords for `codes` into `out`, MSB first.

    `out` must be zero-filled and large enough. Returns total bit count.
    """
    bitpos = 0
    for i in range(codes.size):
        c = codes[i]
        cw = codewords[c]
        length = lengths[c]
        for b in range(length - 1, -1, -1):
            if (cw >> np.uint64(b)) & np.uint64(1):
                out[bitpos >> 3] |= np.uint8(1 << (7 - (bitpos & 7)))
            bitpos += 1
    return bitpos


@numba.njit(cache=True)
def unpack_bits(payload, bit_count, first_code, counts, offsets, symbols, max_len, out):
    """Canonical Huffman decode of `bit_count` bits from `payload` into `out`.

    Returns 0 on success, 1 on invalid code, 2 on truncated payload,
    3 on trailing bits after the last symbol.
    """
    n_out = 0
    code = np.int64(0)
    length = 0
    want = out.size
    bitpos = 0
    while bitpos < bit_count:
        byte = payload[bitpos >> 3]
        bit = (byte >> (7 - (bitpos & 7))) & 1
        bitpos += 1
        code = (code << 1) | bit
        length += 1
        if length > max_len:
            return 1
        idx = code - first_code[length]
        if 0 <= idx < counts[length]:
            if n_out >= want:
                return 3
            out[n_out] = symbols[offsets[length] + idx]
            n_out += 1
            code = 0
            length = 0
            if n_out == want and bitpos < bit_count:
                return 3
    if n_out != want or length != 0:
        return 2
    return 0
