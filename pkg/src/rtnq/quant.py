"""Symmetric group-wise round-to-nearest quantization.

A weight tensor of shape ``(N, K)`` (output channels by input features) is
split along ``K`` into consecutive groups of ``g`` values per channel.  Each
group gets one scale

    S = max(|r|) / (2**(b-1) - 0.5)

and each value becomes ``clamp(round(r / S), -2**(b-1), 2**(b-1) - 1)``,
rounding halves away from zero.

Scales are held in float32 and rounded *upward* to the next float32 when the
quotient is not exactly representable.  That keeps the stored scale within one
ulp of the true quotient while guaranteeing ``|r| <= (2**(b-1) - 0.5) * S`` for
every element, so the reconstruction error never exceeds ``S / 2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from rtnq.errors import CorruptDataError, InvalidInputError, InvalidShapeError

SUPPORTED_BITS = (4, 8)
DEFAULT_GROUP = 128
DEGENERATE_SCALE = np.float32(1.0)


def check_bits(bits: int) -> int:
    if bits not in SUPPORTED_BITS:
        raise InvalidInputError(f"unsupported bit width {bits!r}; expected one of {SUPPORTED_BITS}")
    return int(bits)


def code_range(bits: int) -> tuple[int, int]:
    """Inclusive integer range of a signed ``bits``-wide code."""
    check_bits(bits)
    half = 1 << (bits - 1)
    return -half, half - 1


def scale_divisor(bits: int) -> float:
    return float((1 << (check_bits(bits) - 1))) - 0.5


def check_group(g: int) -> int:
    if not isinstance(g, (int, np.integer)) or g < 1 or (g & (g - 1)) != 0:
        raise InvalidShapeError(f"group size must be a positive power of two, got {g!r}")
    return int(g)


def effective_group(cols: int, g: int, allow_remainder: bool = False) -> int:
    """Group width actually used for a tensor with ``cols`` input features.

    A row narrower than ``g`` forms a single group.  Otherwise ``g`` must
    divide ``cols`` unless ``allow_remainder`` permits a short final group.
    """
    g = check_group(g)
    if cols <= g:
        return max(cols, 1)
    if cols % g and not allow_remainder:
        raise InvalidShapeError(
            f"group size {g} does not divide input dimension {cols} (pass allow_remainder=True)"
        )
    return g


def num_groups(cols: int, g: int) -> int:
    return -(-cols // g) if cols else 0


@dataclass(frozen=True)
class LayoutTag:
    """Storage order of codes: row-major, or tiles stored column-major."""

    kind: str = "row_major"
    tile_rows: int = 0
    tile_cols: int = 0

    def __post_init__(self):
        if self.kind == "row_major":
            if self.tile_rows or self.tile_cols:
                raise InvalidInputError("row-major layout takes no tile parameters")
        elif self.kind == "kernel_interleaved":
            if self.tile_rows < 1 or self.tile_cols < 1:
                raise InvalidInputError("interleaved layout needs positive tile dimensions")
        else:
            raise InvalidInputError(f"unknown layout kind {self.kind!r}")

    @property
    def interleaved(self) -> bool:
        return self.kind == "kernel_interleaved"

    def to_dict(self) -> dict:
        if self.interleaved:
            return {"kind": self.kind, "tile_rows": self.tile_rows, "tile_cols": self.tile_cols}
        return {"kind": self.kind}

    @classmethod
    def from_dict(cls, d: dict) -> "LayoutTag":
        return cls(d["kind"], int(d.get("tile_rows", 0)), int(d.get("tile_cols", 0)))

    def __str__(self):
        if self.interleaved:
            return f"interleaved{self.tile_rows}x{self.tile_cols}"
        return "row_major"


ROW_MAJOR = LayoutTag()
KERNEL_INTERLEAVED = LayoutTag("kernel_interleaved", 16, 4)


def padded_shape(rows: int, cols: int, layout: LayoutTag) -> tuple[int, int]:
    if not layout.interleaved:
        return rows, cols
    tr, tc = layout.tile_rows, layout.tile_cols
    return -(-rows // tr) * tr, -(-cols // tc) * tc


@dataclass(eq=False)
class QuantTensor:
    """Integer codes plus per-group scales for an ``(rows, cols)`` weight.

    ``qdata`` holds int8 codes in storage order: a ``(rows, cols)`` array for
    the row-major layout, or a flat, tile-padded array for an interleaved one.
    ``scales`` is ``(rows, ceil(cols / group))`` float32.
    """

    rows: int
    cols: int
    bits: int
    group: int
    qdata: np.ndarray
    scales: np.ndarray
    layout: LayoutTag = field(default=ROW_MAJOR)

    @property
    def n_groups(self) -> int:
        return num_groups(self.cols, self.group)

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows, self.cols

    def codes(self) -> np.ndarray:
        """Codes as a row-major ``(rows, cols)`` int8 array, padding stripped."""
        if not self.layout.interleaved:
            return self.qdata
        from rtnq.bitpack import deinterleave

        return deinterleave(self.qdata, self.rows, self.cols, self.layout)

    def __eq__(self, other):
        if not isinstance(other, QuantTensor):
            return NotImplemented
        return (
            (self.rows, self.cols, self.bits, self.group, self.layout)
            == (other.rows, other.cols, other.bits, other.group, other.layout)
            and np.array_equal(self.qdata, other.qdata)
            and np.array_equal(self.scales.view(np.uint32), other.scales.view(np.uint32))
        )


def _as_float32(values, name="values") -> np.ndarray:
    arr = np.asarray(values, dtype=np.float32)
    if not np.isfinite(arr).all():
        raise InvalidInputError(f"{name} contain non-finite entries")
    return arr


def _scales_from_absmax(absmax: np.ndarray, bits: int) -> np.ndarray:
    den = scale_divisor(bits)
    m64 = absmax.astype(np.float64)
    s = (m64 / den).astype(np.float32)
    # s * den is exact in float64 (24-bit * <=8-bit mantissa), so this is an
    # exact test for the rounded scale landing below the true quotient.
    low = s.astype(np.float64) * den < m64
    s = np.where(low, np.nextafter(s, np.float32(np.inf)), s)
    return np.where(absmax == 0, DEGENERATE_SCALE, s).astype(np.float32)


def round_half_away(x: np.ndarray) -> np.ndarray:
    a = np.abs(x)
    f = np.floor(a)
    r = f + (a - f >= 0.5)
    return np.copysign(r, x)


def _codes(values: np.ndarray, scales: np.ndarray, bits: int) -> np.ndarray:
    lo, hi = code_range(bits)
    x = values.astype(np.float64) / scales.astype(np.float64)
    return np.clip(round_half_away(x), lo, hi).astype(np.int8)


def compute_scale(group_values, bits: int) -> np.float32:
    """Scale of one group: ``max(|r|) / (2**(bits-1) - 0.5)``; 1.0 for an all-zero group."""
    v = _as_float32(group_values, "group values").ravel()
    check_bits(bits)
    absmax = np.abs(v).max() if v.size else np.float32(0)
    return _scales_from_absmax(np.asarray(absmax, dtype=np.float32), bits)[()]


def quantize_group(group_values, bits: int) -> tuple[np.ndarray, np.float32]:
    v = _as_float32(group_values, "group values").ravel()
    s = compute_scale(v, bits)
    return _codes(v, np.float32(s), bits), s


def dequantize_group(codes, scale, bits: int = 8) -> np.ndarray:
    c = np.asarray(codes)
    lo, hi = code_range(bits)
    if c.size and (c.min() < lo or c.max() > hi):
        raise CorruptDataError(f"code outside [{lo}, {hi}] for {bits}-bit data")
    return c.astype(np.float32) * np.float32(scale)


def quantize_tensor(
    w,
    bits: int,
    group: int = DEFAULT_GROUP,
    *,
    allow_remainder: bool = False,
    scales: np.ndarray | None = None,
) -> QuantTensor:
    """Quantize a 2-D float tensor group-wise along its input dimension.

    ``scales`` may be passed to requantize against an existing scale grid
    instead of deriving scales from the data.
    """
    w = _as_float32(w, "weights")
    if w.ndim != 2:
        raise InvalidShapeError(f"expected a 2-D weight tensor, got shape {w.shape}")
    check_bits(bits)
    rows, cols = w.shape
    g = effective_group(cols, group, allow_remainder)
    ng = num_groups(cols, g)
    pad = ng * g - cols
    wp = np.pad(w, ((0, 0), (0, pad))) if pad else w
    blocks = wp.reshape(rows, ng, g)
    if scales is None:
        scales = _scales_from_absmax(np.abs(blocks).max(axis=2) if cols else np.zeros((rows, 0), np.float32), bits)
    else:
        scales = np.asarray(scales, dtype=np.float32)
        if scales.shape != (rows, ng):
            raise InvalidShapeError(f"scales shape {scales.shape} != {(rows, ng)}")
        if not np.isfinite(scales).all() or (scales <= 0).any():
            raise InvalidInputError("scales must be finite and positive")
    codes = _codes(blocks, scales[:, :, None], bits).reshape(rows, ng * g)[:, :cols]
    return QuantTensor(rows, cols, bits, g, np.ascontiguousarray(codes), scales)


def expand_scales(scales: np.ndarray, cols: int, group: int) -> np.ndarray:
    """Per-element scale matrix of shape ``(rows, cols)``."""
    return np.repeat(scales, group, axis=1)[:, :cols]


def dequantize_tensor(q) -> np.ndarray:
    """Float32 reconstruction ``code * scale`` in row-major order.

    Accepts a :class:`QuantTensor` in any layout, or a packed tensor.
    """
    if not isinstance(q, QuantTensor):
        from rtnq.bitpack import unpack_tensor

        q = unpack_tensor(q)
    codes = q.codes()
    lo, hi = code_range(q.bits)
    if codes.size and (codes.min() < lo or codes.max() > hi):
        raise CorruptDataError(f"code outside [{lo}, {hi}] for {q.bits}-bit data")
    return codes.astype(np.float32) * expand_scales(q.scales, q.cols, q.group)


def dequantize_tensor_f64(q) -> np.ndarray:
    """Exact float64 reconstruction (int8 times float32 is exact in float64)."""
    if not isinstance(q, QuantTensor):
        from rtnq.bitpack import unpack_tensor

        q = unpack_tensor(q)
    return q.codes().astype(np.float64) * expand_scales(q.scales, q.cols, q.group).astype(np.float64)
