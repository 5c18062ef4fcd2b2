"""Dense bit packing of integer codes and the kernel tile layout.

Byte format
-----------
Codes are stored offset-binary (``code + 2**(bits-1)``), so a 4-bit code
occupies an unsigned nibble and an 8-bit code an unsigned byte.  Two 4-bit
codes share a byte: the lower-index element in the low nibble.  An odd
trailing nibble is zero.

Interleaved layout
------------------
``KernelInterleaved(tr, tc)`` zero-pads the ``(N, K)`` code matrix up to
multiples of ``tr`` rows and ``tc`` columns, cuts it into ``tr x tc`` tiles,
and emits tiles in row-major tile order (all tiles of the first ``tr`` rows,
left to right, then the next band).  Inside a tile the codes are written
column-major, so one tile column (``tr`` codes, ``tr/2`` bytes at 4 bits) is
contiguous.  With the default 16x4 tiles a tile is 64 codes: 32 bytes at
4 bits, 64 bytes at 8 bits, and tiles never share a byte.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from rtnq.errors import CorruptDataError, InvalidInputError, InvalidShapeError
from rtnq.quant import (
    KERNEL_INTERLEAVED,
    ROW_MAJOR,
    LayoutTag,
    QuantTensor,
    check_bits,
    code_range,
    padded_shape,
)

__all__ = [
    "KERNEL_INTERLEAVED",
    "ROW_MAJOR",
    "LayoutTag",
    "PackedBuffer",
    "PackedTensor",
    "deinterleave",
    "interleave",
    "inverse_reshuffle",
    "pack",
    "pack_tensor",
    "packed_nbytes",
    "prepare_kernel_weight",
    "reshuffle",
    "unpack",
    "unpack_tensor",
]


def packed_nbytes(logical_len: int, bits: int) -> int:
    return -(-logical_len * bits // 8)


@dataclass(eq=False)
class PackedBuffer:
    bits: int
    logical_len: int
    data: np.ndarray  # uint8
    layout: LayoutTag = field(default=ROW_MAJOR)

    def tobytes(self) -> bytes:
        return self.data.tobytes()

    def __eq__(self, other):
        if not isinstance(other, PackedBuffer):
            return NotImplemented
        return (
            (self.bits, self.logical_len, self.layout) == (other.bits, other.logical_len, other.layout)
            and np.array_equal(self.data, other.data)
        )


def pack(codes, bits: int, layout: LayoutTag = ROW_MAJOR) -> PackedBuffer:
    """Pack signed codes into offset-binary bytes."""
    check_bits(bits)
    c = np.asarray(codes).ravel()
    if c.size and not np.issubdtype(c.dtype, np.integer):
        raise InvalidInputError("codes must be integers")
    lo, hi = code_range(bits)
    if c.size and (c.min() < lo or c.max() > hi):
        raise InvalidInputError(f"code outside [{lo}, {hi}] for {bits}-bit packing")
    u = (c.astype(np.int16) - lo).astype(np.uint8)
    if bits == 4:
        if u.size % 2:
            u = np.append(u, np.uint8(0))
        data = u[0::2] | (u[1::2] << 4)
    else:
        data = u
    return PackedBuffer(bits, int(c.size), np.ascontiguousarray(data, dtype=np.uint8), layout)


def _unpack_bytes(data: np.ndarray, bits: int) -> np.ndarray:
    """Raw bytes -> signed int8 codes (no length checks, nibble pairs kept)."""
    if bits == 4:
        out = np.empty(data.shape[:-1] + (data.shape[-1] * 2,), dtype=np.uint8)
        out[..., 0::2] = data & 0x0F
        out[..., 1::2] = data >> 4
        return (out.astype(np.int8) - np.int8(8)).astype(np.int8)
    return (data.astype(np.int16) - 128).astype(np.int8)


def unpack(buf: PackedBuffer) -> np.ndarray:
    check_bits(buf.bits)
    data = np.asarray(buf.data, dtype=np.uint8).ravel()
    expected = packed_nbytes(buf.logical_len, buf.bits)
    if data.size != expected:
        raise CorruptDataError(
            f"packed buffer holds {data.size} bytes, {expected} expected for "
            f"{buf.logical_len} {buf.bits}-bit codes"
        )
    return _unpack_bytes(data, buf.bits)[: buf.logical_len]


def interleave(codes: np.ndarray, layout: LayoutTag) -> np.ndarray:
    """Row-major ``(N, K)`` codes -> flat tile-ordered codes (zero padded)."""
    tr, tc = layout.tile_rows, layout.tile_cols
    rows, cols = codes.shape
    prow, pcol = padded_shape(rows, cols, layout)
    if (prow, pcol) != (rows, cols):
        codes = np.pad(codes, ((0, prow - rows), (0, pcol - cols)))
    nt, kt = prow // tr, pcol // tc
    return np.ascontiguousarray(codes.reshape(nt, tr, kt, tc).transpose(0, 2, 3, 1)).ravel()


def deinterleave(flat: np.ndarray, rows: int, cols: int, layout: LayoutTag) -> np.ndarray:
    tr, tc = layout.tile_rows, layout.tile_cols
    prow, pcol = padded_shape(rows, cols, layout)
    if flat.size != prow * pcol:
        raise CorruptDataError(f"interleaved data has {flat.size} codes, {prow * pcol} expected")
    nt, kt = prow // tr, pcol // tc
    full = flat.reshape(nt, kt, tc, tr).transpose(0, 3, 1, 2).reshape(prow, pcol)
    return np.ascontiguousarray(full[:rows, :cols])


def reshuffle(q: QuantTensor, to: LayoutTag) -> QuantTensor:
    """Permute codes into layout ``to``; scales are never reordered."""
    if q.layout == to:
        return q
    codes = q.codes()
    if codes.shape != (q.rows, q.cols):
        raise InvalidShapeError(f"code matrix shape {codes.shape} != {(q.rows, q.cols)}")
    qdata = interleave(codes, to) if to.interleaved else codes
    return QuantTensor(q.rows, q.cols, q.bits, q.group, qdata, q.scales, to)


def inverse_reshuffle(q: QuantTensor) -> QuantTensor:
    return reshuffle(q, ROW_MAJOR)


@dataclass(eq=False)
class PackedTensor:
    """A quantized weight as it is held after loading: packed codes plus scales."""

    rows: int
    cols: int
    bits: int
    group: int
    buffer: PackedBuffer
    scales: np.ndarray

    @property
    def layout(self) -> LayoutTag:
        return self.buffer.layout

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows, self.cols

    @property
    def n_groups(self) -> int:
        return self.scales.shape[1]

    def __eq__(self, other):
        if not isinstance(other, PackedTensor):
            return NotImplemented
        return (
            (self.rows, self.cols, self.bits, self.group) == (other.rows, other.cols, other.bits, other.group)
            and self.buffer == other.buffer
            and np.array_equal(self.scales.view(np.uint32), other.scales.view(np.uint32))
        )


def pack_tensor(q: QuantTensor) -> PackedTensor:
    return PackedTensor(q.rows, q.cols, q.bits, q.group, pack(q.qdata, q.bits, q.layout), q.scales)


def unpack_tensor(p: PackedTensor) -> QuantTensor:
    flat = unpack(p.buffer)
    if p.layout.interleaved:
        prow, pcol = padded_shape(p.rows, p.cols, p.layout)
        if flat.size != prow * pcol:
            raise CorruptDataError(f"packed tensor holds {flat.size} codes, {prow * pcol} expected")
        qdata = flat
    else:
        if flat.size != p.rows * p.cols:
            raise CorruptDataError(f"packed tensor holds {flat.size} codes, {p.rows * p.cols} expected")
        qdata = flat.reshape(p.rows, p.cols)
    return QuantTensor(p.rows, p.cols, p.bits, p.group, qdata, p.scales, p.layout)


def prepare_kernel_weight(w, layout: LayoutTag = KERNEL_INTERLEAVED) -> PackedTensor:
    """Reshuffle into ``layout`` and pack; a no-op for an already prepared weight."""
    if isinstance(w, PackedTensor):
        if w.layout == layout:
            return w
        w = unpack_tensor(w)
    return pack_tensor(reshuffle(w, layout))
