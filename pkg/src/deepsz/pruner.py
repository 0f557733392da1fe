"""Magnitude pruning and the dual-array sparse layer representation.

A pruned layer is stored as two parallel arrays: float32 values
(including 0.0 fillers) and uint8 index gaps, 40 bits per stored entry.
A gap of 255 together with a 0.0 value is a filler consuming exactly 255
positions; it bridges runs of zeros longer than the 8-bit gap field can
express.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from .errors import FormatError
from .netmodel import Dataset, Network, TrainConfig, train_sgd

SPARSE_MAGIC = b"DSZP"
SPARSE_VERSION = 1
MASKS_MAGIC = b"DSZM"

ENTRY_BITS = 40  # 8-bit gap + 32-bit value
FILLER_GAP = 255


@dataclass
class PrunedLayer:
    data: np.ndarray  # float32 values, fillers included
    gaps: np.ndarray  # uint8 index gaps, same length
    out_dim: int
    in_dim: int
    nnz_true: int

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        self.gaps = np.ascontiguousarray(self.gaps, dtype=np.uint8)
        if self.data.shape != self.gaps.shape:
            raise ValueError("data/index arrays must have equal length")

    def __len__(self) -> int:
        return len(self.data)

    @property
    def payload_bits(self) -> int:
        return ENTRY_BITS * len(self.data)


@dataclass
class PruneSpec:
    """Fraction of weights kept per FC layer, in network order."""

    keep_ratios: Sequence[float]

    def __post_init__(self):
        for r in self.keep_ratios:
            if not 0 < r <= 1:
                raise ValueError(f"keep ratio must be in (0, 1], got {r}")


def magnitude_mask(weights: np.ndarray, keep_ratio: float) -> np.ndarray:
    """0/1 mask keeping the ceil(keep_ratio * count) largest |w|.

    Ties at the threshold are resolved by row-major position (earlier
    entries kept), making the mask deterministic.
    """
    if not 0 < keep_ratio <= 1:
        raise ValueError(f"keep ratio must be in (0, 1], got {keep_ratio}")
    weights = np.asarray(weights)
    flat = np.abs(weights.ravel())
    keep = int(np.ceil(keep_ratio * flat.size))
    # Stable sort on descending magnitude: equal magnitudes stay in
    # row-major order, so earlier positions win the threshold tie.
    order = np.argsort(-flat, kind="stable")
    mask = np.zeros(flat.size, dtype=np.uint8)
    mask[order[:keep]] = 1
    return mask.reshape(weights.shape)


def to_sparse(weights: np.ndarray) -> PrunedLayer:
    """Dual-array gap encoding of a row-major flattened matrix.

    Positions are tracked against prev = -1; a run longer than 255 emits
    fillers (gap 255, value 0.0) each consuming 255 positions.
    """
    weights = np.asarray(weights, dtype=np.float32)
    if weights.ndim != 2:
        raise ValueError("expected a 2-D weight matrix")
    out_dim, in_dim = weights.shape
    flat = weights.ravel()
    positions = np.flatnonzero(flat)
    data: List[float] = []
    gaps: List[int] = []
    prev = -1
    for p in positions:
        while p - prev > FILLER_GAP:
            data.append(0.0)
            gaps.append(FILLER_GAP)
            prev += FILLER_GAP
        data.append(float(flat[p]))
        gaps.append(int(p - prev))
        prev = int(p)
    return PrunedLayer(
        data=np.array(data, dtype=np.float32),
        gaps=np.array(gaps, dtype=np.uint8),
        out_dim=out_dim,
        in_dim=in_dim,
        nnz_true=int(positions.size),
    )


def from_sparse(layer: PrunedLayer) -> np.ndarray:
    """Rebuild the dense matrix, depositing every stored entry as-is.

    After a lossy round trip fillers may carry up-to-eb noise; they are
    written to their cells like any other entry.
    """
    if layer.gaps.size and np.any(layer.gaps == 0):
        raise FormatError("zero index gap in sparse layer")
    total = layer.out_dim * layer.in_dim
    positions = np.cumsum(layer.gaps.astype(np.int64)) - 1
    if positions.size and positions[-1] >= total:
        raise FormatError(
            f"cumulative position {int(positions[-1])} overflows {layer.out_dim}x{layer.in_dim}"
        )
    flat = np.zeros(total, dtype=np.float32)
    flat[positions] = layer.data
    return flat.reshape(layer.out_dim, layer.in_dim)


def count_true_nnz(data: np.ndarray, gaps: np.ndarray) -> int:
    """Entries that are not fillers (gap 255 with an exact 0.0 value)."""
    data = np.asarray(data, dtype=np.float32)
    gaps = np.asarray(gaps, dtype=np.uint8)
    return int(np.sum(~((gaps == FILLER_GAP) & (data == 0.0))))


def prune_network(
    net: Network,
    spec: PruneSpec,
    train_set: Dataset,
    retrain_config: TrainConfig,
) -> Tuple[Network, List[np.ndarray]]:
    """Magnitude-prune every layer, then retrain with gradient masks.

    Returns the retrained network and the per-layer masks. Pruned weights
    are exactly zero afterwards.
    """
    if len(spec.keep_ratios) != len(net.layers):
        raise ValueError(
            f"spec covers {len(spec.keep_ratios)} layers, network has {len(net.layers)}"
        )
    pruned = net.clone()
    masks = []
    for layer, ratio in zip(pruned.layers, spec.keep_ratios):
        mask = magnitude_mask(layer.weights, ratio)
        # np.where (not multiplication) so pruned cells hold +0.0 exactly.
        layer.weights = np.where(mask == 1, layer.weights, np.float32(0.0))
        masks.append(mask)
    retrained = train_sgd(pruned, train_set, retrain_config, masks=masks)
    return retrained, masks


def sparse_layers_of(net: Network) -> List[PrunedLayer]:
    return [to_sparse(layer.weights) for layer in net.layers]


def save_sparse_layers(layers: Sequence[PrunedLayer], path) -> None:
    parts = [struct.pack("<4sHH", SPARSE_MAGIC, SPARSE_VERSION, len(layers))]
    for layer in layers:
        parts.append(
            struct.pack(
                "<IIQI", layer.out_dim, layer.in_dim, len(layer), layer.nnz_true
            )
        )
        parts.append(np.ascontiguousarray(layer.data, "<f4").tobytes())
        parts.append(layer.gaps.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_sparse_layers(path) -> List[PrunedLayer]:
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise FormatError("sparse layer file too short")
    magic, version, count = struct.unpack_from("<4sHH", data, 0)
    if magic != SPARSE_MAGIC:
        raise FormatError(f"bad sparse file magic {magic!r}")
    if version != SPARSE_VERSION:
        raise FormatError(f"unsupported sparse file version {version}")
    off = 8
    layers = []
    for _ in range(count):
        if off + 20 > len(data):
            raise FormatError("truncated sparse layer header")
        out_dim, in_dim, entries, nnz_true = struct.unpack_from("<IIQI", data, off)
        off += 20
        need = 5 * entries
        if off + need > len(data):
            raise FormatError("truncated sparse layer payload")
        values = np.frombuffer(data, dtype="<f4", count=entries, offset=off).copy()
        off += 4 * entries
        gaps = np.frombuffer(data, dtype=np.uint8, count=entries, offset=off).copy()
        off += entries
        layers.append(PrunedLayer(values, gaps, out_dim, in_dim, nnz_true))
    if off != len(data):
        raise FormatError("trailing data in sparse layer file")
    return layers


def save_masks(masks: Sequence[np.ndarray], path) -> None:
    parts = [struct.pack("<4sHH", MASKS_MAGIC, SPARSE_VERSION, len(masks))]
    for mask in masks:
        mask = np.ascontiguousarray(mask, dtype=np.uint8)
        parts.append(struct.pack("<II", mask.shape[0], mask.shape[1]))
        parts.append(np.packbits(mask.ravel()).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_masks(path) -> List[np.ndarray]:
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise FormatError("mask file too short")
    magic, version, count = struct.unpack_from("<4sHH", data, 0)
    if magic != MASKS_MAGIC:
        raise FormatError(f"bad mask file magic {magic!r}")
    if version != SPARSE_VERSION:
        raise FormatError(f"unsupported mask file version {version}")
    off = 8
    masks = []
    for _ in range(count):
        if off + 8 > len(data):
            raise FormatError("truncated mask header")
        rows, cols = struct.unpack_from("<II", data, off)
        off += 8
        nbytes = (rows * cols + 7) // 8
        if off + nbytes > len(data):
            raise FormatError("truncated mask payload")
        bits = np.unpackbits(
            np.frombuffer(data, dtype=np.uint8, count=nbytes, offset=off),
            count=rows * cols,
        )
        off += nbytes
        masks.append(bits.reshape(rows, cols).astype(np.uint8))
    if off != len(data):
        raise FormatError("trailing data in mask file")
    return masks
