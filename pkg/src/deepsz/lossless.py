"""Pluggable lossless byte compressors with best-of selection.

Backends are identified by a one-byte tag stored next to the compressed
payload. Tag 0 always means "stored raw". Tag assignments are part of the
container wire format and must not be reused:

    0 = raw, 1 = DEFLATE (RFC 1951), 2 = Zstandard frame,
    3 = bzip2, 4 = LZMA (xz)

Zstandard is registered only when the `zstandard` module is importable;
the remaining backends come from the standard library and are always
available.
"""

from __future__ import annotations

import bz2
import lzma
import zlib
from dataclasses import dataclass
from typing import Callable, Dict, Optional

from .errors import FormatError

TAG_RAW = 0
TAG_DEFLATE = 1
TAG_ZSTD = 2
TAG_BZIP2 = 3
TAG_LZMA = 4


@dataclass(frozen=True)
class LosslessBackend:
    tag: int
    name: str
    encode: Callable[[bytes], bytes]
    decode: Callable[[bytes], bytes]


def _deflate(data: bytes) -> bytes:
    # wbits=-15 produces a bare DEFLATE stream (no zlib/gzip wrapper).
    comp = zlib.compressobj(level=9, wbits=-15)
    return comp.compress(data) + comp.flush()


def _inflate(data: bytes) -> bytes:
    return zlib.decompressobj(wbits=-15).decompress(data)


def _build_registry() -> Dict[int, LosslessBackend]:
    registry = {
        TAG_RAW: LosslessBackend(TAG_RAW, "raw", lambda data: data, lambda data: data),
        TAG_DEFLATE: LosslessBackend(TAG_DEFLATE, "deflate", _deflate, _inflate),
        TAG_BZIP2: LosslessBackend(
            TAG_BZIP2, "bzip2", lambda data: bz2.compress(data, 9), bz2.decompress
        ),
        TAG_LZMA: LosslessBackend(
            TAG_LZMA,
            "lzma",
            lambda data: lzma.compress(data, preset=6),
            lzma.decompress,
        ),
    }
    try:
        import zstandard

        registry[TAG_ZSTD] = LosslessBackend(
            TAG_ZSTD,
            "zstd",
            lambda data: zstandard.ZstdCompressor(level=19).compress(data),
            lambda data: zstandard.ZstdDecompressor().decompress(data),
        )
    except ImportError:
        pass
    return registry


REGISTRY: Dict[int, LosslessBackend] = _build_registry()


def available_backends() -> Dict[int, LosslessBackend]:
    """Registered backends keyed by tag, raw included."""
    return dict(REGISTRY)


def select(data: bytes, backends: Optional[Dict[int, LosslessBackend]] = None) -> tuple[int, bytes]:
    """Compress with every registered backend and keep the smallest output.

    Raw wins ties, and is the fallback when a backend fails or nothing
    shrinks the input. Iteration is in tag order, so the choice is
    deterministic for a fixed registry.
    """
    if backends is None:
        backends = REGISTRY
    best_tag, best = TAG_RAW, data
    for tag in sorted(backends):
        if tag == TAG_RAW:
            continue
        try:
            candidate = backends[tag].encode(data)
        except Exception:
            continue
        if len(candidate) < len(best):
            best_tag, best = tag, candidate
    return best_tag, best


def decode(tag: int, data: bytes, backends: Optional[Dict[int, LosslessBackend]] = None) -> bytes:
    if backends is None:
        backends = REGISTRY
    if tag not in backends:
        raise FormatError(f"unknown lossless backend tag {tag}")
    try:
        return backends[tag].decode(data)
    except Exception as exc:
        raise FormatError(f"backend {tag} failed to decode payload: {exc}") from exc
