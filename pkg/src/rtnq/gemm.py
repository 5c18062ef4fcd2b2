"""Mixed-precision GEMM: float32 activations times quantized weights.

Two execution paths compute ``out = a @ dequant(w).T`` for ``a`` of shape
``(m, K)`` and a weight of shape ``(N, K)``:

* ``gemm_fused`` streams through the packed, tile-interleaved weight.  For
  every block of ``M_TILE`` activation rows it walks the ``K`` dimension one
  stripe at a time, unpacks and scales only that stripe, and accumulates.
  The full float weight is never materialized, but the unpack work repeats
  for every row block, so its cost grows with ``m``.
* ``gemm_dequant`` dequantizes the whole weight once, then runs a dense
  float GEMM.

Both accumulate each output element in the same order: sequentially over
``K`` in stripe-sized blocks (one quantization group per stripe when the
group is a multiple of the tile width).  ``gemm_auto`` picks the dequant path
when ``m >= threshold``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from rtnq.bitpack import PackedTensor, _unpack_bytes, prepare_kernel_weight
from rtnq.errors import InvalidInputError, InvalidShapeError
from rtnq.quant import KERNEL_INTERLEAVED, QuantTensor, dequantize_tensor, dequantize_tensor_f64, padded_shape

DEFAULT_THRESHOLD = 1024
M_TILE = 16


class GemmPath(str, Enum):
    FUSED = "fused"
    DEQUANT = "dequant"
    BASELINE = "baseline"


@dataclass(frozen=True)
class ExecRecord:
    path: GemmPath
    m: int
    k: int
    n: int
    bits: int


def _check_activations(a, k: int) -> np.ndarray:
    a = np.asarray(a, dtype=np.float32)
    if a.ndim != 2:
        raise InvalidShapeError(f"activations must be 2-D, got shape {a.shape}")
    if a.shape[1] != k:
        raise InvalidShapeError(f"activation features {a.shape[1]} != weight input dimension {k}")
    if not np.isfinite(a).all():
        raise InvalidInputError("activations contain non-finite entries")
    return a


def k_blocks(cols: int, group: int, tile_cols: int = KERNEL_INTERLEAVED.tile_cols) -> list[tuple[int, int]]:
    """Accumulation blocks over the input dimension shared by both paths."""
    if group % tile_cols == 0:
        width = group
    elif tile_cols % group == 0:
        width = tile_cols
    else:
        width = -(-cols // tile_cols) * tile_cols
    return [(k0, min(k0 + width, cols)) for k0 in range(0, cols, width)]


def _stripe_decoder(w: PackedTensor):
    """Return ``decode(k0, k1) -> (N, k1-k0) float32`` reading only that stripe."""
    layout = w.layout
    tr, tc = layout.tile_rows, layout.tile_cols
    prow, pcol = padded_shape(w.rows, w.cols, layout)
    nt, kt = prow // tr, pcol // tc
    tile_bytes = tr * tc * w.bits // 8
    tiles = w.buffer.data.reshape(nt, kt, tile_bytes)
    scales = w.scales
    rows, group = w.rows, w.group

    def decode(k0: int, k1: int) -> np.ndarray:
        t0, t1 = k0 // tc, -(-k1 // tc)
        codes = _unpack_bytes(tiles[:, t0:t1], w.bits)
        codes = codes.reshape(nt, t1 - t0, tc, tr).transpose(0, 3, 1, 2).reshape(prow, (t1 - t0) * tc)
        codes = codes[:rows, k0 - t0 * tc : k1 - t0 * tc]
        gidx = np.arange(k0, k1) // group
        return codes.astype(np.float32) * scales[:, gidx]

    return decode


def gemm_fused(a, w, m_tile: int = M_TILE) -> np.ndarray:
    """Fused dequantize-multiply over the kernel-interleaved packed weight.

    A row-major :class:`QuantTensor` is reshuffled and packed first; callers
    on a hot path should hold weights already prepared by
    :func:`rtnq.bitpack.prepare_kernel_weight`.
    """
    w = prepare_kernel_weight(w)
    a = _check_activations(a, w.cols)
    m = a.shape[0]
    out = np.zeros((m, w.rows), dtype=np.float32)
    if m == 0 or w.cols == 0:
        return out
    decode = _stripe_decoder(w)
    blocks = k_blocks(w.cols, w.group, w.layout.tile_cols)
    for i0 in range(0, m, m_tile):
        i1 = min(i0 + m_tile, m)
        acc = out[i0:i1]
        for k0, k1 in blocks:
            acc += a[i0:i1, k0:k1] @ decode(k0, k1).T
    return out


def gemm_dequant(a, w) -> np.ndarray:
    """Materialize the float32 weight, then a dense blocked GEMM."""
    wf = dequantize_tensor(w)
    a = _check_activations(a, wf.shape[1])
    out = np.zeros((a.shape[0], wf.shape[0]), dtype=np.float32)
    if a.shape[0] == 0:
        return out
    for k0, k1 in k_blocks(w.cols, w.group):
        out += a[:, k0:k1] @ wf[:, k0:k1].T
    return out


def gemm_dense(a, w_float) -> np.ndarray:
    """Plain float32 GEMM against an unquantized ``(N, K)`` weight."""
    w_float = np.asarray(w_float, dtype=np.float32)
    a = _check_activations(a, w_float.shape[1])
    return a @ w_float.T


def choose_path(m: int, threshold: int = DEFAULT_THRESHOLD) -> GemmPath:
    if threshold < 1:
        raise InvalidInputError(f"dispatch threshold must be >= 1, got {threshold}")
    return GemmPath.DEQUANT if m >= threshold else GemmPath.FUSED


def gemm_auto(a, w, threshold: int = DEFAULT_THRESHOLD, log: list | None = None) -> np.ndarray:
    """Dispatch on the activation row count; appends an :class:`ExecRecord` to ``log``."""
    m = np.shape(a)[0]
    path = choose_path(m, threshold)
    out = gemm_dequant(a, w) if path is GemmPath.DEQUANT else gemm_fused(a, w)
    if log is not None:
        log.append(ExecRecord(path, m, w.cols, w.rows, w.bits))
    return out


def gemm_oracle(a, w_f64) -> np.ndarray:
    """Float64 reference ``a @ w.T``.

    ``w_f64`` is an exactly dequantized float64 weight, or a quantized weight
    that is dequantized exactly here.
    """
    if isinstance(w_f64, (QuantTensor, PackedTensor)):
        w_f64 = dequantize_tensor_f64(w_f64)
    a64 = np.asarray(a, dtype=np.float64)
    w_f64 = np.asarray(w_f64, dtype=np.float64)
    if a64.ndim != 2 or w_f64.ndim != 2 or a64.shape[1] != w_f64.shape[1]:
        raise InvalidShapeError(f"cannot multiply {a64.shape} by transpose of {w_f64.shape}")
    return a64 @ w_f64.T


def gemm_naive(a, w_f64) -> np.ndarray:
    """Triple loop with float64 accumulation; only for small cross-checks."""
    a = np.asarray(a, dtype=np.float64)
    w = np.asarray(w_f64, dtype=np.float64)
    m, k = a.shape
    n = w.shape[0]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * w[j, t]
            out[i, j] = s
    return out


def rel_err(x, ref) -> float:
    """``max|x - ref| / max|ref|``; absolute error when ``ref`` is all zero."""
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise InvalidShapeError(f"shape mismatch {x.shape} vs {ref.shape}")
    if x.size == 0:
        return 0.0
    diff = float(np.max(np.abs(x - ref)))
    scale = float(np.max(np.abs(ref)))
    return diff / scale if scale > 0 else diff
