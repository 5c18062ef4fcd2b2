"""Checkpoint container and quantize-on-load.

File layout (all integers little-endian)::

    offset 0   8 bytes   magic b"RTNCKPT1"
    offset 8   8 bytes   u64 length L of the manifest
    offset 16  L bytes   manifest, UTF-8 JSON (sorted keys, 1-space indent)
    ...        zero padding up to the next multiple of 64: start of data section
    blobs      each blob starts 64-byte aligned relative to the data section

Every tensor record in the manifest names its ``(layer, module)``, dtype
(``f32``, ``q4`` or ``q8``), shape, and the offset and length of its data blob
and, for quantized tensors, of its scale blob.  Offsets are relative to the
start of the data section.  ``f32`` data is row-major float32.  Quantized
data is the packed code buffer in the manifest's layout; scales are a
row-major ``(rows, groups)`` float16 matrix.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from rtnq.bitpack import PackedBuffer, PackedTensor, pack_tensor, packed_nbytes, reshuffle, unpack_tensor
from rtnq.errors import CorruptDataError, InvalidInputError, InvalidShapeError
from rtnq.manifest import MODULES, ModelManifest, ModuleId
from rtnq.plan import PrecisionAssignment, as_plan, effective_bits, render_plan, resolve_plan
from rtnq.quant import (
    DEFAULT_GROUP,
    KERNEL_INTERLEAVED,
    ROW_MAJOR,
    LayoutTag,
    QuantTensor,
    dequantize_tensor,
    effective_group,
    num_groups,
    padded_shape,
    quantize_tensor,
)

MAGIC = b"RTNCKPT1"
ALIGN = 64
FORMAT_VERSION = 1
_DTYPE_BITS = {"f32": 32, "q4": 4, "q8": 8}


def _align(n: int) -> int:
    return -(-n // ALIGN) * ALIGN


@dataclass(frozen=True)
class TensorRecord:
    layer: int
    module: ModuleId
    dtype: str
    rows: int
    cols: int
    data_offset: int
    data_length: int
    group: int = 0
    scales_offset: int = 0
    scales_length: int = 0

    @property
    def bits(self) -> int:
        return _DTYPE_BITS[self.dtype]

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "module": int(self.module),
            "dtype": self.dtype,
            "rows": self.rows,
            "cols": self.cols,
            "data_offset": self.data_offset,
            "data_length": self.data_length,
            "group": self.group,
            "scales_offset": self.scales_offset,
            "scales_length": self.scales_length,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TensorRecord":
        try:
            rec = cls(
                int(d["layer"]), ModuleId(int(d["module"])), str(d["dtype"]), int(d["rows"]), int(d["cols"]),
                int(d["data_offset"]), int(d["data_length"]), int(d.get("group", 0)),
                int(d.get("scales_offset", 0)), int(d.get("scales_length", 0)),
            )
        except (KeyError, ValueError, TypeError) as e:
            raise CorruptDataError(f"malformed tensor record {d!r}") from e
        if rec.dtype not in _DTYPE_BITS:
            raise CorruptDataError(f"unknown tensor dtype {rec.dtype!r}")
        return rec


@dataclass
class Model:
    """Weights keyed by ``(layer, ModuleId)``: float32 arrays or packed tensors."""

    manifest: ModelManifest
    weights: dict
    assignment: PrecisionAssignment | None = None

    def weight(self, layer: int, module) -> np.ndarray | PackedTensor:
        return self.weights[(layer, ModuleId(module))]

    def dequantized(self, layer: int, module) -> np.ndarray:
        w = self.weight(layer, module)
        return w if isinstance(w, np.ndarray) else dequantize_tensor(w)

    def bits(self, layer: int, module) -> int:
        w = self.weight(layer, module)
        return 32 if isinstance(w, np.ndarray) else w.bits

    def effective_bits(self, include_scales: bool = False) -> float:
        if self.assignment is None:
            return 32.0 if all(isinstance(w, np.ndarray) for w in self.weights.values()) else float(
                sum(self.bits(*k) * self.manifest.params(k[1]) for k in self.weights) / self.manifest.total_params
            )
        return effective_bits(self.assignment, self.manifest, include_scales)


# ---------------------------------------------------------------------------
# writing


def _tensor_blobs(manifest: ModelManifest, key, w):
    """-> (dtype, group, data bytes, scale bytes)"""
    layer, module = key
    rows, cols = manifest.shape(module)
    if isinstance(w, np.ndarray):
        if w.shape != (rows, cols):
            raise InvalidShapeError(f"tensor {key} has shape {w.shape}, manifest says {(rows, cols)}")
        if w.dtype != np.float32:
            raise InvalidInputError(f"float tensor {key} must be float32, got {w.dtype}")
        return "f32", 0, np.ascontiguousarray(w).astype("<f4", copy=False).tobytes(), b""
    if isinstance(w, QuantTensor):
        w = pack_tensor(reshuffle(w, manifest.layout))
    elif isinstance(w, PackedTensor) and w.layout != manifest.layout:
        w = pack_tensor(reshuffle(unpack_tensor(w), manifest.layout))
    if not isinstance(w, PackedTensor):
        raise InvalidInputError(f"unsupported tensor type {type(w).__name__} for {key}")
    if w.shape != (rows, cols):
        raise InvalidShapeError(f"tensor {key} has shape {w.shape}, manifest says {(rows, cols)}")
    with np.errstate(over="ignore"):
        s16 = w.scales.astype("<f2")
    nonzero = w.scales > 0
    if not np.isfinite(s16).all() or (s16[nonzero] == 0).any():
        raise InvalidInputError(f"scales of {key} are not representable in float16")
    return f"q{w.bits}", w.group, w.buffer.tobytes(), s16.tobytes()


def write_checkpoint(manifest: ModelManifest, tensors: dict, path) -> Path:
    """Write ``tensors`` (keyed by ``(layer, module)``) under ``manifest``.

    Identical inputs give byte-identical files.
    """
    path = Path(path)
    keys = manifest.keys()
    given = {(int(layer), ModuleId(m)) for layer, m in tensors}
    if given != set(keys):
        missing = sorted(set(keys) - given)
        extra = sorted(given - set(keys))
        raise InvalidShapeError(f"tensors do not match manifest (missing {missing[:4]}, extra {extra[:4]})")
    tensors = {(int(layer), ModuleId(m)): w for (layer, m), w in tensors.items()}

    records, blobs, pos = [], [], 0
    for key in keys:
        dtype, group, data, scales = _tensor_blobs(manifest, key, tensors[key])
        rows, cols = manifest.shape(key[1])
        d_off = pos
        pos = _align(pos + len(data))
        s_off = pos if scales else 0
        if scales:
            pos = _align(pos + len(scales))
        records.append(TensorRecord(key[0], key[1], dtype, rows, cols, d_off, len(data), group, s_off, len(scales)))
        blobs.append((d_off, data))
        if scales:
            blobs.append((s_off, scales))

    header = manifest.to_dict()
    header["format_version"] = FORMAT_VERSION
    header["alignment"] = ALIGN
    header["tensors"] = [r.to_dict() for r in records]
    meta = json.dumps(header, sort_keys=True, indent=1).encode("utf-8")
    prefix = MAGIC + struct.pack("<Q", len(meta)) + meta
    data_start = _align(len(prefix))

    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(prefix)
        f.write(b"\0" * (data_start - len(prefix)))
        written = 0
        for off, blob in blobs:
            f.write(b"\0" * (off - written))
            f.write(blob)
            written = off + len(blob)
        f.write(b"\0" * (_align(written) - written))
    return path


def save_model(model: Model, path) -> Path:
    return write_checkpoint(model.manifest, model.weights, path)


# ---------------------------------------------------------------------------
# reading


@dataclass
class Checkpoint:
    """An opened checkpoint: manifest and records; tensor bytes are read on demand."""

    path: Path
    manifest: ModelManifest
    records: dict = field(default_factory=dict)  # (layer, ModuleId) -> TensorRecord
    data_start: int = 0
    file_size: int = 0

    @property
    def quantized(self) -> bool:
        return any(r.dtype != "f32" for r in self.records.values())

    def _read(self, f, offset: int, length: int) -> bytes:
        f.seek(self.data_start + offset)
        buf = f.read(length)
        if len(buf) != length:
            raise CorruptDataError(f"truncated blob at offset {offset} (wanted {length} bytes, got {len(buf)})")
        return buf

    def read_tensor(self, layer: int, module, f=None):
        rec = self.records[(layer, ModuleId(module))]
        if f is None:
            with open(self.path, "rb") as fh:
                return self.read_tensor(layer, module, fh)
        data = self._read(f, rec.data_offset, rec.data_length)
        if rec.dtype == "f32":
            if rec.data_length != rec.rows * rec.cols * 4:
                raise CorruptDataError(f"f32 tensor {(layer, int(module))} has {rec.data_length} bytes")
            return np.frombuffer(data, dtype="<f4").astype(np.float32).reshape(rec.rows, rec.cols)
        layout = self.manifest.layout
        prow, pcol = padded_shape(rec.rows, rec.cols, layout)
        if rec.data_length != packed_nbytes(prow * pcol, rec.bits):
            raise CorruptDataError(f"{rec.dtype} tensor {(layer, int(module))} has {rec.data_length} data bytes")
        ng = num_groups(rec.cols, rec.group) if rec.group > 0 else -1
        if ng < 0 or rec.scales_length != rec.rows * ng * 2:
            raise CorruptDataError(f"{rec.dtype} tensor {(layer, int(module))} has inconsistent scales")
        scales = np.frombuffer(self._read(f, rec.scales_offset, rec.scales_length), dtype="<f2")
        scales = scales.astype(np.float32).reshape(rec.rows, ng)
        buf = PackedBuffer(rec.bits, prow * pcol, np.frombuffer(data, dtype=np.uint8).copy(), layout)
        return PackedTensor(rec.rows, rec.cols, rec.bits, rec.group, buf, scales)

    def iter_tensors(self):
        """Yield ``((layer, module), tensor)`` one at a time in manifest order."""
        with open(self.path, "rb") as f:
            for key in self.manifest.keys():
                yield key, self.read_tensor(*key, f=f)

    def load(self) -> Model:
        weights = dict(self.iter_tensors())
        assignment = None
        if self.quantized:
            bits = {k: (w.bits if isinstance(w, PackedTensor) else 32) for k, w in weights.items()}
            plan = as_plan(self.manifest.plan) if self.manifest.plan else None
            assignment = PrecisionAssignment(self.manifest.layer_count, bits, plan)
        return Model(self.manifest, weights, assignment)


def read_checkpoint(path) -> Checkpoint:
    path = Path(path)
    size = path.stat().st_size
    with open(path, "rb") as f:
        head = f.read(16)
        if len(head) < 16 or head[:8] != MAGIC:
            raise CorruptDataError(f"{path}: not an rtnq checkpoint (bad magic)")
        (meta_len,) = struct.unpack("<Q", head[8:])
        if 16 + meta_len > size:
            raise CorruptDataError(f"{path}: manifest length {meta_len} exceeds file size")
        meta = f.read(meta_len)
    try:
        header = json.loads(meta.decode("utf-8"))
        manifest = ModelManifest.from_dict(header)
    except (ValueError, KeyError, TypeError, InvalidShapeError) as e:
        raise CorruptDataError(f"{path}: unreadable manifest: {e}") from e
    if header.get("format_version") != FORMAT_VERSION:
        raise CorruptDataError(f"{path}: unsupported format version {header.get('format_version')!r}")
    data_start = _align(16 + meta_len)
    records = {}
    for d in header.get("tensors", []):
        rec = TensorRecord.from_dict(d)
        if (rec.rows, rec.cols) != manifest.shape(rec.module) or not 0 <= rec.layer < manifest.layer_count:
            raise CorruptDataError(f"{path}: record {d} disagrees with the manifest")
        for off, ln in ((rec.data_offset, rec.data_length), (rec.scales_offset, rec.scales_length)):
            if off < 0 or ln < 0 or data_start + off + ln > size:
                raise CorruptDataError(f"{path}: blob [{off}, {off + ln}) lies outside the file")
        records[(rec.layer, rec.module)] = rec
    if set(records) != set(manifest.keys()):
        raise CorruptDataError(f"{path}: tensor records do not cover every (layer, module)")
    return Checkpoint(path, manifest, records, data_start, size)


def load_model(path) -> Model:
    return read_checkpoint(path).load()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# quantization


class FloatResidency:
    """Counts bytes of float weights alive during a streaming load."""

    def __init__(self):
        self.current = 0
        self.peak = 0

    def acquire(self, nbytes: int):
        self.current += nbytes
        self.peak = max(self.peak, self.current)

    def release(self, nbytes: int):
        self.current -= nbytes


def quantize_weight(
    w: np.ndarray,
    bits: int,
    group: int = DEFAULT_GROUP,
    layout: LayoutTag = KERNEL_INTERLEAVED,
    allow_remainder: bool = False,
) -> PackedTensor:
    """Quantize one float weight, reshuffle it into ``layout`` and pack it."""
    return pack_tensor(reshuffle(quantize_tensor(w, bits, group, allow_remainder=allow_remainder), layout))


def _check_groups(manifest: ModelManifest, group: int, allow_remainder: bool):
    for m in MODULES:
        effective_group(manifest.shape(m)[1], group, allow_remainder)


def quantize_model(
    model: Model,
    plan,
    group: int = DEFAULT_GROUP,
    layout: LayoutTag = KERNEL_INTERLEAVED,
    allow_remainder: bool = False,
) -> Model:
    """In-memory counterpart of :func:`load_quantized` for a float model."""
    assignment = plan if isinstance(plan, PrecisionAssignment) else resolve_plan(plan, model.manifest.layer_count)
    _check_groups(model.manifest, group, allow_remainder)
    weights = {}
    for key in model.manifest.keys():
        w = model.weights[key]
        if not isinstance(w, np.ndarray):
            raise InvalidInputError(f"tensor {key} is already quantized")
        weights[key] = quantize_weight(w, assignment[key], group, layout, allow_remainder)
    manifest = model.manifest.with_(
        group=group,
        layout=layout,
        plan=render_plan(assignment.plan) if assignment.plan else None,
    )
    return Model(manifest, weights, assignment)


def load_quantized(
    path,
    plan,
    group: int | None = None,
    layout: LayoutTag = KERNEL_INTERLEAVED,
    allow_remainder: bool = False,
    residency: FloatResidency | None = None,
) -> Model:
    """Read a float checkpoint and quantize it tensor by tensor under ``plan``.

    Only one float tensor is alive at a time; ``residency`` (if given) is
    told about each float buffer as it is read and dropped.
    """
    ckpt = read_checkpoint(path)
    if ckpt.quantized:
        raise InvalidInputError(f"{path}: checkpoint is already quantized")
    plan = as_plan(plan)
    assignment = resolve_plan(plan, ckpt.manifest.layer_count)
    group = ckpt.manifest.group if group is None else group
    _check_groups(ckpt.manifest, group, allow_remainder)
    weights = {}
    for key, w in ckpt.iter_tensors():
        if residency is not None:
            residency.acquire(w.nbytes)
        weights[key] = quantize_weight(w, assignment[key], group, layout, allow_remainder)
        if residency is not None:
            residency.release(w.nbytes)
        del w
    manifest = ckpt.manifest.with_(group=group, layout=layout, plan=render_plan(plan))
    return Model(manifest, weights, assignment)
