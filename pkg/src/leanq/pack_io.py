"""Bit-exact storage: code packing, the tensor container format, packed
layers with grid metadata, dequantization, and a reference quantized
matvec.

Codes pack least-significant-bit first within each byte, row-major, and
every row starts on a byte boundary so single rows can be unpacked
without touching their neighbors. Effective-bits accounting charges the
nominal code bits plus grid metadata (32 bits per affine group, 16 bits
per codebook level) and ignores row padding.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DataError

MAGIC = b"LQTENSR\x00"
VERSION = 1

DTYPE_F32 = 0
DTYPE_F64 = 1
DTYPE_PACKED = 2

_DTYPE_TO_NP = {DTYPE_F32: np.float32, DTYPE_F64: np.float64, DTYPE_PACKED: np.uint8}
_NP_TO_DTYPE = {np.dtype(np.float32): DTYPE_F32, np.dtype(np.float64): DTYPE_F64,
                np.dtype(np.uint8): DTYPE_PACKED}

GRID_KIND_AFFINE = "affine"
GRID_KIND_NONUNIFORM = "nonuniform"

AFFINE_GROUP_METADATA_BITS = 32  # 16-bit scale + 16-bit zero-point field per group
LEVEL_METADATA_BITS = 16  # codebook levels are half-precision


def row_byte_width(cols: int, bits: int) -> int:
    return (cols * bits + 7) // 8


def pack_codes(codes: np.ndarray, bits: int) -> np.ndarray:
    """Pack an integer code matrix into bytes (LSB-first, rows byte-aligned)."""
    arr = np.asarray(codes)
    if arr.ndim != 2:
        raise DataError(f"expected a 2-D code matrix, got shape {arr.shape}")
    if not 1 <= bits <= 8:
        raise DataError(f"bits must be in [1, 8], got {bits}")
    maxq = (1 << bits) - 1
    bad = (arr < 0) | (arr > maxq)
    if np.any(bad):
        r, c = np.argwhere(bad)[0]
        raise DataError(
            f"code {arr[r, c]} at row {r}, col {c} outside [0, {maxq}] for {bits}-bit packing"
        )
    rows, cols = arr.shape
    bitplanes = ((arr[:, :, None].astype(np.uint8) >> np.arange(bits, dtype=np.uint8)) & 1)
    bitstream = bitplanes.reshape(rows, cols * bits)
    packed = np.packbits(bitstream, axis=1, bitorder="little")
    return packed.reshape(-1)


def unpack_codes(buf: np.ndarray | bytes, bits: int, rows: int, cols: int) -> np.ndarray:
    """Exact inverse of pack_codes."""
    data = np.frombuffer(bytes(buf), dtype=np.uint8) if isinstance(buf, (bytes, bytearray)) \
        else np.asarray(buf, dtype=np.uint8).reshape(-1)
    width = row_byte_width(cols, bits)
    expected = rows * width
    if data.size < expected:
        raise DataError(f"truncated code buffer: have {data.size} bytes, need {expected}")
    if data.size > expected:
        raise DataError(f"oversized code buffer: have {data.size} bytes, expected {expected}")
    bitstream = np.unpackbits(data.reshape(rows, width), axis=1, bitorder="little")
    bitplanes = bitstream[:, : cols * bits].reshape(rows, cols, bits)
    weights = (1 << np.arange(bits, dtype=np.int64))
    return (bitplanes.astype(np.int64) * weights).sum(axis=2).astype(np.uint8)


@dataclass(frozen=True)
class EffectiveBits:
    """Bits per weight including grid metadata."""

    value: float


@dataclass(frozen=True)
class PackedLayer:
    """A quantized layer: packed codes plus the grid metadata needed to
    dequantize bit-exactly.

    Affine layers carry per-row-or-group scales (float32) and zero-points
    (uint8); non-uniform layers carry a per-row codebook whose float32
    values are exactly representable in half precision.
    """

    bits: int
    rows: int
    cols: int
    grid_kind: str
    code_bytes: np.ndarray
    group_size: Optional[int] = None
    scales: Optional[np.ndarray] = None
    zeros: Optional[np.ndarray] = None
    levels: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.grid_kind not in (GRID_KIND_AFFINE, GRID_KIND_NONUNIFORM):
            raise DataError(f"unknown grid kind {self.grid_kind!r}")
        code_bytes = np.asarray(self.code_bytes, dtype=np.uint8).reshape(-1)
        expected = self.rows * row_byte_width(self.cols, self.bits)
        if code_bytes.size != expected:
            raise DataError(
                f"code byte length {code_bytes.size} does not match "
                f"{self.rows}x{self.cols} at {self.bits} bits (expected {expected})"
            )
        object.__setattr__(self, "code_bytes", code_bytes)
        if self.grid_kind == GRID_KIND_AFFINE:
            if self.scales is None or self.zeros is None:
                raise DataError("affine layer requires scales and zeros")
            scales = np.asarray(self.scales, dtype=np.float32)
            zeros = np.asarray(self.zeros, dtype=np.uint8)
            if scales.shape != (self.rows, self.n_groups) or zeros.shape != scales.shape:
                raise DataError(
                    f"grid metadata shape {scales.shape} does not match "
                    f"(rows, groups) = ({self.rows}, {self.n_groups})"
                )
            object.__setattr__(self, "scales", scales)
            object.__setattr__(self, "zeros", zeros)
        else:
            if self.levels is None:
                raise DataError("non-uniform layer requires levels")
            levels = np.asarray(self.levels, dtype=np.float32)
            if levels.shape != (self.rows, 1 << self.bits):
                raise DataError(
                    f"levels shape {levels.shape} does not match "
                    f"(rows, 2^bits) = ({self.rows}, {1 << self.bits})"
                )
            object.__setattr__(self, "levels", levels)

    @property
    def n_groups(self) -> int:
        if self.grid_kind != GRID_KIND_AFFINE:
            return 0
        if self.group_size is None:
            return 1
        if self.cols % self.group_size != 0:
            raise DataError(f"group size {self.group_size} does not divide cols {self.cols}")
        return self.cols // self.group_size

    def codes(self) -> np.ndarray:
        return unpack_codes(self.code_bytes, self.bits, self.rows, self.cols)


def _affine_row_values(codes_row: np.ndarray, scales_row: np.ndarray,
                       zeros_row: np.ndarray, group_size: Optional[int]) -> np.ndarray:
    cols = codes_row.shape[-1]
    g = np.zeros(cols, dtype=np.int64) if group_size is None \
        else np.arange(cols) // group_size
    s = scales_row.astype(np.float64)[..., g]
    z = zeros_row.astype(np.float64)[..., g]
    return (codes_row.astype(np.float64) - z) * s


def dequantize(layer: PackedLayer) -> np.ndarray:
    """Reconstruct the float32 weight matrix from a packed layer."""
    codes = layer.codes()
    if layer.grid_kind == GRID_KIND_AFFINE:
        vals = _affine_row_values(codes, layer.scales, layer.zeros, layer.group_size)
        return vals.astype(np.float32)
    return np.take_along_axis(layer.levels, codes.astype(np.int64), axis=1)


def quantized_matvec(layer: PackedLayer, x: np.ndarray) -> np.ndarray:
    """Multiply the dequantized matrix by a vector, one unpacked row at a
    time, never materializing the full matrix."""
    vec = np.asarray(x, dtype=np.float64).reshape(-1)
    if vec.size != layer.cols:
        raise DataError(f"vector length {vec.size} does not match cols {layer.cols}")
    width = row_byte_width(layer.cols, layer.bits)
    out = np.empty(layer.rows, dtype=np.float64)
    for r in range(layer.rows):
        row_codes = unpack_codes(
            layer.code_bytes[r * width:(r + 1) * width], layer.bits, 1, layer.cols
        )[0]
        if layer.grid_kind == GRID_KIND_AFFINE:
            row_vals = _affine_row_values(
                row_codes, layer.scales[r], layer.zeros[r], layer.group_size
            ).astype(np.float32)
        else:
            row_vals = layer.levels[r, row_codes.astype(np.int64)]
        out[r] = row_vals.astype(np.float64) @ vec
    return out


def effective_bits(layer: PackedLayer) -> EffectiveBits:
    """Bits per weight including grid metadata (nominal code bits; row
    padding is a storage detail and is not charged)."""
    code_bits = layer.bits * layer.rows * layer.cols
    if layer.grid_kind == GRID_KIND_AFFINE:
        meta_bits = AFFINE_GROUP_METADATA_BITS * layer.rows * layer.n_groups
    else:
        meta_bits = LEVEL_METADATA_BITS * layer.rows * (1 << layer.bits)
    return EffectiveBits(value=(code_bits + meta_bits) / (layer.rows * layer.cols))


# ---------------------------------------------------------------------------
# Tensor container format
# ---------------------------------------------------------------------------

def write_tensor_file(path, entries) -> None:
    """Write named arrays to the binary container. `entries` is a mapping
    or sequence of (name, array); names must be unique, arrays must be
    float32, float64, or uint8 (packed bytes)."""
    pairs = list(entries.items()) if hasattr(entries, "items") else list(entries)
    seen = set()
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<II", VERSION, len(pairs))
    for name, arr in pairs:
        if name in seen:
            raise DataError(f"duplicate entry name {name!r}")
        seen.add(name)
        a = np.ascontiguousarray(arr)
        if a.dtype not in _NP_TO_DTYPE:
            raise DataError(f"unsupported dtype {a.dtype} for entry {name!r}")
        tag = _NP_TO_DTYPE[a.dtype]
        name_bytes = name.encode("utf-8")
        blob += struct.pack("<I", len(name_bytes))
        blob += name_bytes
        blob += struct.pack("<I", a.ndim)
        for d in a.shape:
            blob += struct.pack("<Q", d)
        blob += struct.pack("<B", tag)
        blob += a.astype(a.dtype.newbyteorder("<")).tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DataError(f"truncated tensor file {self.path}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]


def read_tensor_file(path) -> dict[str, np.ndarray]:
    """Read the container back into an insertion-ordered name -> array dict."""
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data, path)
    if r.take(8) != MAGIC:
        raise DataError(f"not a tensor file: {path}")
    version = r.u32()
    if version != VERSION:
        raise DataError(f"unsupported tensor file version {version} in {path}")
    count = r.u32()
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = r.u32()
        name = r.take(name_len).decode("utf-8")
        if name in out:
            raise DataError(f"duplicate entry name {name!r} in {path}")
        rank = r.u32()
        dims = tuple(r.u64() for _ in range(rank))
        tag = r.u8()
        if tag not in _DTYPE_TO_NP:
            raise DataError(f"unknown dtype tag {tag} for entry {name!r} in {path}")
        np_dtype = np.dtype(_DTYPE_TO_NP[tag]).newbyteorder("<")
        n_items = 1
        for d in dims:
            n_items *= d
        payload = r.take(n_items * np_dtype.itemsize)
        arr = np.frombuffer(payload, dtype=np_dtype).reshape(dims)
        out[name] = arr.astype(arr.dtype.newbyteorder("="))
    if r.pos != len(data):
        raise DataError(f"trailing bytes after last entry in {path}")
    return out


# ---------------------------------------------------------------------------
# Packed-model container: one layer becomes a handful of named entries
# ---------------------------------------------------------------------------

_KIND_CODES = {GRID_KIND_AFFINE: 0, GRID_KIND_NONUNIFORM: 1}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}


def packed_layer_entries(name: str, layer: PackedLayer) -> list[tuple[str, np.ndarray]]:
    meta = np.array(
        [layer.bits, layer.rows, layer.cols, _KIND_CODES[layer.grid_kind],
         layer.group_size or 0],
        dtype=np.float64,
    )
    entries = [(f"{name}.meta", meta), (f"{name}.codes", layer.code_bytes)]
    if layer.grid_kind == GRID_KIND_AFFINE:
        entries.append((f"{name}.scales", layer.scales))
        entries.append((f"{name}.zeros", layer.zeros))
    else:
        entries.append((f"{name}.levels", layer.levels))
    return entries


def packed_layer_from_entries(name: str, entries: dict[str, np.ndarray]) -> PackedLayer:
    try:
        meta = entries[f"{name}.meta"]
        code_bytes = entries[f"{name}.codes"]
    except KeyError as exc:
        raise DataError(f"packed layer {name!r} is missing entry {exc.args[0]!r}") from exc
    bits, rows, cols, kind_code, group_size = (int(v) for v in meta)
    kind = _KIND_NAMES.get(kind_code)
    if kind is None:
        raise DataError(f"packed layer {name!r} has unknown grid kind code {kind_code}")
    kwargs = {}
    if kind == GRID_KIND_AFFINE:
        kwargs["scales"] = entries.get(f"{name}.scales")
        kwargs["zeros"] = entries.get(f"{name}.zeros")
    else:
        kwargs["levels"] = entries.get(f"{name}.levels")
    return PackedLayer(
        bits=bits, rows=rows, cols=cols, grid_kind=kind, code_bytes=code_bytes,
        group_size=group_size or None, **kwargs
    )


def write_packed_model(path, layers: Sequence[tuple[str, PackedLayer]]) -> None:
    entries: list[tuple[str, np.ndarray]] = []
    for name, layer in layers:
        entries.extend(packed_layer_entries(name, layer))
    write_tensor_file(path, entries)


def read_packed_model(path) -> list[tuple[str, PackedLayer]]:
    entries = read_tensor_file(path)
    names = [n[: -len(".meta")] for n in entries if n.endswith(".meta")]
    return [(n, packed_layer_from_entries(n, entries)) for n in names]
